//! Phase-2 model bundles and their checkpoint files.

use std::path::Path;

use crate::checkpoint::{self, MAGIC_CRITIC, MAGIC_GENERATOR};
use crate::error::{Error, Result};
use crate::networks::{decode, encode, Critic, CriticArch, UNet, UNetArch};
use crate::nn::ParamSet;
use crate::types::{FaceCrop, SignVector};

/// Encoder `U_e` and decoder `U_d` trained together for one sign vector.
#[derive(Clone, Debug)]
pub struct Generator {
    pub encoder: UNet,
    pub decoder: UNet,
    sign_vector: SignVector,
}

impl Generator {
    pub fn new(encoder: UNetArch, decoder: UNetArch, sign_vector: SignVector, seed: u64) -> Result<Self> {
        if encoder.in_channels != 4 || decoder.in_channels != 3 {
            return Err(Error::Config(
                "the encoder takes RGB plus one noise channel, the decoder takes RGB".into(),
            ));
        }
        Ok(Generator {
            encoder: UNet::new(encoder, seed)?,
            decoder: UNet::new(decoder, seed ^ 0xDEC0_DE00)?,
            sign_vector,
        })
    }

    pub fn sign_vector(&self) -> &SignVector {
        &self.sign_vector
    }

    pub fn t(&self) -> usize {
        self.sign_vector.len()
    }

    /// De-identified faces `a = U_e(x)`, one noise seed per crop.
    pub fn deidentify(&self, crops: &[&FaceCrop], seeds: &[u64]) -> Result<Vec<FaceCrop>> {
        encode(&self.encoder, crops, seeds)
    }

    /// Reconstructions `r = U_d(a)`.
    pub fn reconstruct(&self, faces: &[&FaceCrop]) -> Result<Vec<FaceCrop>> {
        decode(&self.decoder, faces)
    }

    fn header(&self) -> Vec<u32> {
        let (e, d) = (self.encoder.arch(), self.decoder.arch());
        [e.in_channels, e.base_width, e.depth, d.in_channels, d.base_width, d.depth]
            .map(|v| v as u32)
            .to_vec()
    }

    /// Architecture, label count and sign vector digest (see [`checkpoint`]).
    pub fn fingerprint(&self) -> String {
        checkpoint::fingerprint(&checkpoint::prefix(
            MAGIC_GENERATOR,
            self.t(),
            self.sign_vector.values(),
            &self.header(),
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(
            MAGIC_GENERATOR,
            self.t(),
            self.sign_vector.values(),
            &self.header(),
            &[self.encoder.params(), self.decoder.params()],
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.to_bytes())
    }

    /// Loads a generator; `expected_t` rejects checkpoints for another label count.
    pub fn load(path: &Path, expected_t: Option<usize>) -> Result<Self> {
        let raw = checkpoint::read(path, MAGIC_GENERATOR, true)?;
        checkpoint::check_t(path, raw.t, expected_t)?;
        let h = &raw.header;
        if h.len() != 6 {
            return Err(Error::checkpoint(path, "malformed generator architecture header"));
        }
        let arch = |o: usize| UNetArch {
            in_channels: h[o] as usize,
            base_width: h[o + 1] as usize,
            depth: h[o + 2] as usize,
        };
        let signs = SignVector::new(raw.signs).map_err(|e| Error::checkpoint(path, e.to_string()))?;
        let mut g = Generator::new(arch(0), arch(3), signs, 0).map_err(|e| Error::checkpoint(path, e.to_string()))?;
        {
            let Generator { encoder, decoder, .. } = &mut g;
            let mut params: [&mut ParamSet; 2] = [encoder.params_mut(), decoder.params_mut()];
            checkpoint::load_params(path, &raw.payload, &mut params)?;
        }
        Ok(g)
    }
}

fn critic_header(critic: &Critic) -> Vec<u32> {
    let a = critic.arch();
    vec![a.base_width as u32, a.layers as u32]
}

/// Critic files carry `t` so they travel with their generator.
pub fn save_critic(critic: &Critic, t: usize, path: &Path) -> Result<()> {
    checkpoint::write(
        path,
        &checkpoint::encode(MAGIC_CRITIC, t, &[], &critic_header(critic), &[critic.params()]),
    )
}

pub fn load_critic(path: &Path, expected_t: Option<usize>) -> Result<Critic> {
    let raw = checkpoint::read(path, MAGIC_CRITIC, false)?;
    checkpoint::check_t(path, raw.t, expected_t)?;
    if raw.header.len() != 2 {
        return Err(Error::checkpoint(path, "malformed critic architecture header"));
    }
    let arch = CriticArch {
        base_width: raw.header[0] as usize,
        layers: raw.header[1] as usize,
    };
    let mut critic = Critic::new(arch, 0).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    checkpoint::load_params(path, &raw.payload, &mut [critic.params_mut()])?;
    Ok(critic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(t: usize) -> Generator {
        Generator::new(UNetArch::encoder(2, 2), UNetArch::decoder(2, 2), SignVector::equal_soft(t), 3).unwrap()
    }

    fn random_crops(n: usize, seed: u64) -> Vec<FaceCrop> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| FaceCrop::from_hwc((0..crate::types::CROP_LEN).map(|_| rng.random()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn generator_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        let g = small(4);
        g.save(&path).unwrap();
        let h = Generator::load(&path, Some(4)).unwrap();
        assert_eq!(h.sign_vector(), g.sign_vector());
        assert_eq!(h.fingerprint(), g.fingerprint());
        let crops = random_crops(10, 1);
        let refs: Vec<&FaceCrop> = crops.iter().collect();
        let seeds: Vec<u64> = (0..10).collect();
        let a1 = g.deidentify(&refs, &seeds).unwrap();
        let a2 = h.deidentify(&refs, &seeds).unwrap();
        assert_eq!(a1, a2);
        let ar: Vec<&FaceCrop> = a1.iter().collect();
        assert_eq!(g.reconstruct(&ar).unwrap(), h.reconstruct(&ar).unwrap());
    }

    #[test]
    fn fingerprint_tracks_sign_vector() {
        let a = small(4);
        let mut b = small(4);
        b.sign_vector = SignVector::all_different(4);
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn t_mismatch_and_truncation_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        small(4).save(&path).unwrap();
        assert!(matches!(Generator::load(&path, Some(5)), Err(Error::Checkpoint { .. })));
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 12, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(Generator::load(&path, None), Err(Error::Checkpoint { .. })), "cut {cut}");
        }
    }

    #[test]
    fn critic_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let c = Critic::new(CriticArch { base_width: 4, layers: 3 }, 9).unwrap();
        save_critic(&c, 4, &path).unwrap();
        let d = load_critic(&path, Some(4)).unwrap();
        let crops = random_crops(10, 2);
        let refs: Vec<&FaceCrop> = crops.iter().collect();
        assert_eq!(c.criticize(&refs), d.criticize(&refs));
        assert!(load_critic(&path, Some(5)).is_err());
        assert!(Generator::load(&path, None).is_err());
    }
}
