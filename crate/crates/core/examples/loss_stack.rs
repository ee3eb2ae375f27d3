//! Evaluate every generator and critic loss term on hand-made inputs.
//!
//! cargo run --example loss_stack

use revdeid::losses::*;
use revdeid::matcher::AgreementVector;
use revdeid::types::{histogram, FaceCrop, SignVector};

fn main() -> revdeid::Result<()> {
    let x = FaceCrop::filled(0.6);
    let r = FaceCrop::filled(0.5);
    println!("L_mse(x, r)          = {:.4}", loss_mse(&x, &r));

    // Critic scores for originals, anonymised and reconstructed faces.
    println!("L_adv1(1, 0, 0)      = {}", loss_adv_critic(&[1.0], &[0.0], &[0.0])?);
    println!("L_adv2(1, 1)         = {}", loss_adv_gen(&[1.0], &[1.0])?);

    let equal_soft = SignVector::equal_soft(4);
    let all_different = SignVector::all_different(4);
    // Identity changed, gender/ethnicity/hairstyle kept.
    let d = [AgreementVector(vec![0.0, 1.0, 1.0, 1.0])];
    println!("L_ano equal soft     = {}", loss_ano(&equal_soft, &d)?);
    println!("L_ano all different  = {}", loss_ano(&all_different, &d)?);
    println!("L_con                = {}", loss_con(&d)?);
    println!("L_div                = {}", loss_div(&d)?);

    let hx = histogram(&x, 16)?;
    let hr = histogram(&r, 16)?;
    println!("L_dis(x, r)          = {:.4}", loss_dis(&hx, &hr)?);
    println!("chi2([1,0], [0,1])   = {}", chi_square(&[1.0, 0.0], &[0.0, 1.0])?);

    let terms = LossTerms {
        mse: loss_mse(&x, &r),
        adv: -0.2,
        ano: -3.0,
        con: -3.5,
        div: 1.0,
        dis: loss_dis(&hx, &hr)?,
    };
    println!("L_total (defaults)   = {:.4}", loss_total(&terms, &LossWeights::default())?);
    Ok(())
}
