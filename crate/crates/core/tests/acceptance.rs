//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Criteria 5, 6, 8 and 9 share one desk-scale
//! training run on the synthetic set (40 subjects, 32 for training).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use revdeid::cli::deidentify_dataset;
use revdeid::eval::{
    auc, decidability, iou, ks_distance, ks_statistic, mean_average_precision, pearson, verification_protocol,
    DecisionEnvironment, Detection, MatcherScorer, PairCounts, Protocol,
};
use revdeid::losses::{
    chi_square, chi_square_grad, loss_adv_critic, loss_adv_gen, loss_ano, loss_ano_grad, loss_ano_with, loss_con,
    loss_dis, loss_div, loss_mse, loss_mse_grad, loss_mse_slices, AnoSign,
};
use revdeid::matcher::{cross_entropy, cross_entropy_grad, train_phase1, AgreementVector, MatcherArch, MatcherModel, Phase1Config};
use revdeid::networks::{CriticArch, UNetArch};
use revdeid::pipeline::{deidentify_frame, region_mse, reverse_frame, synthetic_scenes, OracleDetector, PipelineConfig};
use revdeid::stego::{decode_message, embed, encode_message, extract};
use revdeid::training::{
    generate_synthetic_dataset, initial_models, measured_run, reconstruction_mse, train_phase2_observed,
    AblationParam, Dataset, Generator, RunMetrics, StepEvent, SyntheticSpec, TrainConfig,
};
use revdeid::types::{BoundingBox, FaceCrop, Frame, Histogram, SignVector};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn criterion1() -> Outcome {
    let s = SignVector::equal_soft(4);
    let av = |v: &[f64]| AgreementVector(v.to_vec());
    let hist = |b: &[f64]| Histogram {
        bins: b.to_vec(),
        bin_count: b.len(),
    };
    let cases: Vec<(&str, f64, f64)> = vec![
        ("L_adv1(1,0,0)", loss_adv_critic(&[1.0], &[0.0], &[0.0]).unwrap(), -2.0),
        ("L_adv1(equal)", loss_adv_critic(&[0.3], &[0.3], &[0.3]).unwrap(), 0.0),
        ("L_adv2(1,1)", loss_adv_gen(&[1.0], &[1.0]).unwrap(), -2.0),
        ("chi2([1,0],[0,1])", chi_square(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0),
        ("L_dis(identical)", loss_dis(&hist(&[0.2, 0.8]), &hist(&[0.2, 0.8])).unwrap(), 0.0),
        ("L_ano minimum", loss_ano(&s, &[av(&[0.0, 1.0, 1.0, 1.0])]).unwrap(), -4.0),
        ("L_ano maximum", loss_ano(&s, &[av(&[1.0, 0.0, 0.0, 0.0])]).unwrap(), 4.0),
        ("L_con(1)", loss_con(&[av(&[1.0; 4])]).unwrap(), -4.0),
        ("L_div(0)", loss_div(&[av(&[0.0; 4])]).unwrap(), 0.0),
        ("L_div(1)", loss_div(&[av(&[1.0; 4])]).unwrap(), 4.0),
        ("L_mse(x,x)", loss_mse(&FaceCrop::filled(0.3), &FaceCrop::filled(0.3)), 0.0),
        ("L_mse(1,0)", loss_mse(&FaceCrop::filled(1.0), &FaceCrop::filled(0.0)), 1.0),
    ];
    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| !close(*got, *want, 1e-6))
        .map(|(n, got, want)| format!("{n}={got} (want {want})"))
        .collect();
    check(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} worked examples within 1e-6", cases.len())
        } else {
            bad.join("; ")
        },
    )
}

/// Largest relative error between `analytic` and central differences of `f`.
fn fd_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let (mut up, mut down) = (x.to_vec(), x.to_vec());
        up[i] += h;
        down[i] -= h;
        let num = (f(&up) - f(&down)) / (2.0 * h);
        let rel = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

fn criterion2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let points = 20;
    let mut worst = [0.0f64; 4];
    for _ in 0..points {
        // L_mse over dyadic values so the ±h probes are exact in f32.
        let n = 48;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..256) as f64 / 256.0).collect();
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(0..256) as f64 / 256.0).collect();
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let rf: Vec<f32> = r.iter().map(|&v| v as f32).collect();
        let f = |r: &[f64]| loss_mse_slices(&xf, &r.iter().map(|&v| v as f32).collect::<Vec<_>>()).unwrap();
        let g = loss_mse_grad(&xf, &rf).unwrap();
        worst[0] = worst[0].max(fd_error(&f, &r, &g, 1.0 / 256.0));

        // L_ano over a batch of agreement vectors.
        let mut signs: Vec<i8> = (0..4).map(|_| rng.random_range(-1..=1)).collect();
        signs[0] = -1;
        let s = SignVector::new(signs).unwrap();
        let batch = 3;
        let d: Vec<f64> = (0..batch * 4).map(|_| rng.random_range(0.05..0.95)).collect();
        let f = |d: &[f64]| {
            let vs: Vec<AgreementVector> = d.chunks(4).map(|c| AgreementVector(c.to_vec())).collect();
            loss_ano_with(&s, &vs, AnoSign::Corrected).unwrap()
        };
        let per = loss_ano_grad(&s, batch, AnoSign::Corrected);
        let g: Vec<f64> = (0..batch * 4).map(|i| per[i % 4]).collect();
        worst[1] = worst[1].max(fd_error(&f, &d, &g, 1e-6));

        // L_dis with respect to the de-identified histogram.
        let p: Vec<f64> = (0..12).map(|_| rng.random_range(0.05..1.0)).collect();
        let q: Vec<f64> = (0..12).map(|_| rng.random_range(0.05..1.0)).collect();
        let f = |q: &[f64]| chi_square(&p, q).unwrap();
        worst[2] = worst[2].max(fd_error(&f, &q, &chi_square_grad(&p, &q).unwrap(), 1e-6));

        // Matcher cross-entropy with respect to the prediction.
        let b: Vec<f64> = (0..4).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let bh: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..0.95)).collect();
        let f = |bh: &[f64]| cross_entropy(&b, bh).unwrap();
        worst[3] = worst[3].max(fd_error(&f, &bh, &cross_entropy_grad(&b, &bh).unwrap(), 1e-6));
    }
    let msg = format!(
        "max relative error over {points} points: L_mse {:.1e}, L_ano {:.1e}, L_dis {:.1e}, cross_entropy {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    );
    check(worst.iter().all(|&w| w < 1e-4), msg)
}

fn criterion3() -> Outcome {
    let example = encode_message(&[BoundingBox::new(10, 16, 9, 15), BoundingBox::new(25, 45, 8, 14)]);
    if example != "2,10,16,9,15,25,45,8,14," {
        return Err(format!("two-box example encodes as {example:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let (w, h) = (rng.random_range(64..160u32), rng.random_range(64..160u32));
        let mut frame = Frame::filled(w, h, [0, 0, 0], case).unwrap();
        for px in frame.raw_mut() {
            *px = rng.random();
        }
        let boxes: Vec<BoundingBox> = (0..rng.random_range(0..12))
            .map(|_| {
                let bw = rng.random_range(1..=w);
                let bh = rng.random_range(1..=h);
                BoundingBox::new(rng.random_range(0..=w - bw), rng.random_range(0..=h - bh), bw, bh)
            })
            .collect();
        let msg = encode_message(&boxes);
        if decode_message(&msg).map_err(|e| e.to_string())? != boxes {
            return Err(format!("case {case}: decode(encode) differs"));
        }
        let stego = embed(&frame, &msg).map_err(|e| format!("case {case}: {e}"))?;
        if extract(&stego).map_err(|e| e.to_string())? != msg {
            return Err(format!("case {case}: extract(embed) differs"));
        }
        let touched = frame
            .raw()
            .iter()
            .zip(stego.raw())
            .enumerate()
            .any(|(i, (a, b))| (a ^ b) != 0 && (i % 3 != 2 || (a ^ b) != 1));
        if touched {
            return Err(format!("case {case}: a bit other than a blue LSB changed"));
        }
    }
    Ok("1000 random frames round-trip, only blue LSBs change, two-box example byte-exact".into())
}

fn criterion4() -> Outcome {
    let spec = SyntheticSpec {
        subjects: 6,
        sequences_per_subject: 2,
        frames_per_sequence: 3,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic_dataset(&spec, 4).map_err(|e| e.to_string())?;
    let matcher = MatcherModel::new(MatcherArch::scaled_down(16), 4, 1).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 4,
        steps_per_epoch: Some(3),
        critic_steps_per_gen_step: 3,
        encoder_arch: UNetArch::encoder(2, 2),
        decoder_arch: UNetArch::decoder(2, 2),
        critic_arch: CriticArch {
            base_width: 4,
            layers: 3,
        },
        ..TrainConfig::default()
    };
    let delta = cfg.weights.delta_gp;
    let (mut steps, mut worst) = (0usize, 0.0f64);
    let out = train_phase2_observed(&ds, &matcher, &cfg, &mut |e| {
        if let StepEvent::Critic { max_abs_weight, .. } = e {
            steps += 1;
            worst = worst.max(*max_abs_weight);
        }
    })
    .map_err(|e| e.to_string())?;
    let final_max = f64::from(out.critic.max_abs_weight());
    check(
        steps == 5 * 3 * 3 && worst <= delta && final_max <= delta,
        format!("{steps} critic steps, max |w| after any step {worst:.6} (bound {delta})"),
    )
}

fn criterion7() -> Outcome {
    let env = |g: &[f64], i: &[f64]| DecisionEnvironment::new(g.to_vec(), i.to_vec());
    // Oracle d′ from the two-sample formula with sample variances.
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let (g, i) = ([0.0, 1.0, 2.0, 4.0], [-1.0, 0.5, 1.0]);
    let d_oracle = (mean(&g) - mean(&i)) / (var(&g) + var(&i)).sqrt();
    let u = [1.0, 2.0, 3.0];
    let checks = [
        ("d'", decidability(&env(&g, &i)).unwrap(), d_oracle),
        ("AUC", auc(&env(&[0.8, 0.4], &[0.6, 0.2])).unwrap(), 0.75),
        ("KS D", ks_distance(&[1.0, 2.0], &[1.5, 2.5]).unwrap(), 0.5),
        ("KS identical", ks_statistic(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap().0, 0.0),
        ("Pearson", pearson(&u, &[1.0, 2.0, 4.0]).unwrap(), 3.0 / (2.0f64 * 14.0 / 3.0).sqrt()),
        ("IoU", iou(&BoundingBox::new(0, 0, 2, 2), &BoundingBox::new(1, 1, 2, 2)), 1.0 / 7.0),
        ("mAP ranked", {
            let det = |x, c| Detection {
                bbox: BoundingBox::new(x, x, 10, 10),
                confidence: c,
            };
            let truth = vec![vec![BoundingBox::new(0, 0, 10, 10)]];
            mean_average_precision(&[vec![det(0, 0.9), det(50, 0.8)]], &truth, 0.5).unwrap()
        }, 1.0),
        ("mAP false positive first", {
            let det = |x, c| Detection {
                bbox: BoundingBox::new(x, x, 10, 10),
                confidence: c,
            };
            let truth = vec![vec![BoundingBox::new(0, 0, 10, 10)]];
            mean_average_precision(&[vec![det(0, 0.5), det(50, 0.8)]], &truth, 0.5).unwrap()
        }, 0.5),
    ];
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| !close(*got, *want, 1e-12))
        .map(|(n, got, want)| format!("{n}={got} want {want}"))
        .collect();
    check(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} statistics examples exact", checks.len())
        } else {
            bad.join("; ")
        },
    )
}

/// Models and data shared by the desk-scale criteria.
struct Desk {
    train: Dataset,
    test: Dataset,
    judge: MatcherModel,
    base_cfg: TrainConfig,
    base: RunMetrics,
    generator: Generator,
    initial_mse: f64,
}

fn desk() -> Result<Desk, String> {
    let e = |e: revdeid::Error| e.to_string();
    let ds = generate_synthetic_dataset(&SyntheticSpec::default(), 1).map_err(e)?;
    let train = ds.filter_subjects(|s| s < 32);
    let test = ds.filter_subjects(|s| s >= 32);
    let t0 = Instant::now();
    let judge = train_phase1(&train, &Phase1Config::default()).map_err(e)?;
    println!("  (phase 1 trained in {:.0?})", t0.elapsed());
    let base_cfg = TrainConfig::default();
    let initial_mse = reconstruction_mse(&initial_models(&base_cfg).map_err(e)?.0, &test).map_err(e)?;
    let t0 = Instant::now();
    let (base, generator) = measured_run(&train, &test, &judge, &base_cfg, base_cfg.weights.delta_gp).map_err(e)?;
    println!("  (phase 2 trained in {:.0?})", t0.elapsed());
    let generator = generator.ok_or_else(|| format!("base run diverged: {:?}", base.diverged))?;
    Ok(Desk {
        train,
        test,
        judge,
        base_cfg,
        base,
        generator,
        initial_mse,
    })
}

fn criterion5(d: &Desk) -> Outcome {
    let e = |e: revdeid::Error| e.to_string();
    let drop = 1.0 - d.base.reconstruction_mse / d.initial_mse;
    // Independent identity-only verifier, never seen by the generator.
    let verifier_cfg = Phase1Config {
        t: 1,
        seed: 77,
        ..Phase1Config::default()
    };
    let verifier = train_phase1(&d.train.project_labels(&[0]).map_err(e)?, &verifier_cfg).map_err(e)?;
    let scorer = MatcherScorer {
        model: &verifier,
        label: 0,
    };
    let original: Vec<FaceCrop> = d.test.samples().iter().map(|s| s.crop.clone()).collect();
    let anonymised = deidentify_dataset(&d.generator, &d.test, 0).map_err(e)?;
    let counts = PairCounts {
        genuine: 400,
        impostor: 2000,
    };
    let run = |p: Protocol, a: &[FaceCrop], b: &[FaceCrop]| verification_protocol(&d.test, a, b, p, counts, &scorer, 5);
    let (xx, _) = run(Protocol::Xx, &original, &original).map_err(e)?;
    let (xa, _) = run(Protocol::Xa, &original, &anonymised).map_err(e)?;
    let (temporal, _) = run(Protocol::Temporal, &anonymised, &anonymised).map_err(e)?;
    let (auc_xx, auc_xa) = (auc(&xx).map_err(e)?, auc(&xa).map_err(e)?);
    let (_, p) = ks_statistic(&temporal.genuine, &temporal.impostor).map_err(e)?;
    check(
        drop >= 0.5 && auc_xx >= 0.80 && auc_xa <= 0.65 && p < 0.05,
        format!(
            "(a) MSE {:.4} -> {:.4} ({:.0}% drop); (b) AUC xx {auc_xx:.3}, xa {auc_xa:.3}; (c) temporal KS p = {p:.2e}",
            d.initial_mse,
            d.base.reconstruction_mse,
            100.0 * drop
        ),
    )
}

/// Mean gender agreement `D_a(x, a)` over the test crops.
fn gender_agreement(judge: &MatcherModel, generator: &Generator, test: &Dataset) -> Result<f64, String> {
    let anonymised = deidentify_dataset(generator, test, 0).map_err(|e| e.to_string())?;
    let pairs: Vec<(&FaceCrop, &FaceCrop)> = test.samples().iter().map(|s| &s.crop).zip(&anonymised).collect();
    let scores: Vec<f64> = pairs.chunks(64).flat_map(|c| judge.predict_batch(c)).map(|v| v.values()[1]).collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn criterion6(d: &Desk) -> Outcome {
    let soft = gender_agreement(&d.judge, &d.generator, &d.test)?;
    let cfg = TrainConfig {
        sign_vector: SignVector::all_different(4),
        ..d.base_cfg.clone()
    };
    let (_, g) = measured_run(&d.train, &d.test, &d.judge, &cfg, cfg.weights.delta_gp).map_err(|e| e.to_string())?;
    let g = g.ok_or("all-different run diverged")?;
    let different = gender_agreement(&d.judge, &g, &d.test)?;
    check(
        soft > 0.7 && different < 0.3,
        format!("gender agreement: s=[-1,1,1,1] {soft:.3}, s=[-1,-1,-1,-1] {different:.3}"),
    )
}

fn criterion8(d: &Desk) -> Outcome {
    let e = |e: revdeid::Error| e.to_string();
    let delta = d.base_cfg.weights.delta_gp;
    let low_mse = AblationParam::Mse.scaled(&d.base_cfg, 0.1).map_err(e)?;
    let (m, _) = measured_run(&d.train, &d.test, &d.judge, &low_mse, delta).map_err(e)?;
    let loose = AblationParam::DeltaGp.scaled(&d.base_cfg, 10.0).map_err(e)?;
    let (l, _) = measured_run(&d.train, &d.test, &d.judge, &loose, delta).map_err(e)?;
    let how = match (&l.diverged, l.exploded) {
        (Some(err), _) => format!("diverged ({err})"),
        (None, true) => format!("exploded (max |term| {:.3e})", l.max_abs_term),
        (None, false) => "completed".into(),
    };
    check(
        m.reconstruction_mse > d.base.reconstruction_mse && l.flagged(),
        format!(
            "omega_mse/10: MSE {:.4} vs base {:.4}; delta_gp x10: {how}, {} of {} critic steps above {delta}, MSE {:.4}",
            m.reconstruction_mse, d.base.reconstruction_mse, l.critic_violations, l.critic_steps, l.reconstruction_mse
        ),
    )
}

fn criterion9(d: &Desk) -> Outcome {
    let e = |e: revdeid::Error| e.to_string();
    let scenes = synthetic_scenes(&d.test, 50, 160, 120, 9).map_err(e)?;
    let mut oracle = std::collections::BTreeMap::new();
    for (k, s) in scenes.iter().enumerate() {
        let dets = s.boxes.iter().map(|&bbox| Detection { bbox, confidence: 1.0 }).collect();
        oracle.insert(k as u64, dets);
    }
    let detector = OracleDetector::new(oracle);
    let cfg = PipelineConfig::default();
    let mut better = 0;
    for s in &scenes {
        let public = deidentify_frame(&s.frame, &detector, &d.generator, &cfg).map_err(e)?;
        let back = reverse_frame(&public.frame, &d.generator).map_err(e)?;
        if region_mse(&back, &s.frame, &s.boxes).map_err(e)? < region_mse(&public.frame, &s.frame, &s.boxes).map_err(e)? {
            better += 1;
        }
    }
    let share = better as f64 / scenes.len() as f64;
    check(
        share >= 0.9,
        format!("reconstruction beats the public frame on {better}/{} frames", scenes.len()),
    )
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = t0.elapsed().as_secs_f64();
    match outcome {
        Ok(msg) => {
            println!("PASS criterion {n} ({name}): {msg} [{secs:.1}s]");
            true
        }
        Err(msg) => {
            println!("FAIL criterion {n} ({name}): {msg} [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= report(1, "loss-stack exactness", criterion1);
    ok &= report(2, "gradient correctness", criterion2);
    ok &= report(3, "stego round-trip", criterion3);
    ok &= report(4, "critic constraint", criterion4);
    ok &= report(7, "statistics suite", criterion7);
    println!("training the shared desk-scale models...");
    match desk() {
        Ok(d) => {
            ok &= report(5, "desk-scale end-to-end", || criterion5(&d));
            ok &= report(6, "sign-vector control", || criterion6(&d));
            ok &= report(8, "ablation directionality", || criterion8(&d));
            ok &= report(9, "reversibility fidelity", || criterion9(&d));
        }
        Err(e) => {
            for (n, name) in [(5, "desk-scale end-to-end"), (6, "sign-vector control"), (8, "ablation directionality"), (9, "reversibility fidelity")] {
                println!("FAIL criterion {n} ({name}): shared training failed: {e}");
            }
            ok = false;
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
