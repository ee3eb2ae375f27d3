//! Genuine/impostor pair construction over tracklet-indexed crops.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::stats::DecisionEnvironment;
use crate::error::{Error, Result};
use crate::matcher::MatcherModel;
use crate::training::Dataset;
use crate::types::FaceCrop;

/// Which pairs count as genuine, and which crop views are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    /// Original vs original, genuine = same subject.
    Xx,
    /// Original vs de-identified, genuine = same subject.
    Xa,
    /// De-identified vs de-identified, genuine = same subject and sequence.
    Temporal,
    /// De-identified vs de-identified, genuine = same subject, other sequence.
    CrossSession,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Xx, Protocol::Xa, Protocol::Temporal, Protocol::CrossSession];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Xx => "xx",
            Protocol::Xa => "xa",
            Protocol::Temporal => "temporal",
            Protocol::CrossSession => "cross-session",
        }
    }

    /// Whether the first / second crop of a pair is de-identified.
    pub fn views(self) -> (View, View) {
        match self {
            Protocol::Xx => (View::Original, View::Original),
            Protocol::Xa => (View::Original, View::Deidentified),
            Protocol::Temporal | Protocol::CrossSession => (View::Deidentified, View::Deidentified),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol `{s}` (expected xx, xa, temporal or cross-session)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Original,
    Deidentified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairCounts {
    pub genuine: usize,
    pub impostor: usize,
}

impl FromStr for PairCounts {
    type Err = Error;

    /// `"G,I"`, e.g. `"10,50"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let parse = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| Error::Config(format!("pair count `{t}` is not a natural number")))
        };
        match parts.as_slice() {
            [g, i] => Ok(PairCounts {
                genuine: parse(g)?,
                impostor: parse(i)?,
            }),
            _ => Err(Error::Config(format!("pair counts must look like `G,I`, got `{s}`"))),
        }
    }
}

/// Dataset positions of one comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairRecord {
    pub first: usize,
    pub second: usize,
    pub genuine: bool,
}

/// Draws `counts.genuine` genuine and `counts.impostor` impostor pairs
/// (with replacement) following `protocol`.
pub fn protocol_pairs(dataset: &Dataset, protocol: Protocol, counts: PairCounts, seed: u64) -> Result<Vec<PairRecord>> {
    let n = dataset.len();
    if dataset.subjects().len() < 2 {
        return Err(Error::Config("impostor pairs need at least two distinct subjects".into()));
    }
    let idx = |i: usize| dataset.get(i).index;
    let genuine_ok = |a: usize, b: usize| {
        let (x, y) = (idx(a), idx(b));
        match protocol {
            Protocol::Xx | Protocol::Xa => x.subject == y.subject && a != b,
            Protocol::Temporal => x.same_sequence(&y) && x.frame != y.frame,
            Protocol::CrossSession => x.subject == y.subject && x.sequence != y.sequence,
        }
    };
    let partners: Vec<Vec<usize>> = (0..n).map(|a| (0..n).filter(|&b| genuine_ok(a, b)).collect()).collect();
    let anchors: Vec<usize> = (0..n).filter(|&a| !partners[a].is_empty()).collect();
    if counts.genuine > 0 && anchors.is_empty() {
        return Err(Error::Config(format!(
            "dataset has no genuine pairs for the {protocol} protocol"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(counts.genuine + counts.impostor);
    for _ in 0..counts.genuine {
        let a = *anchors.choose(&mut rng).expect("checked above");
        let b = *partners[a].choose(&mut rng).expect("anchor has partners");
        out.push(PairRecord {
            first: a,
            second: b,
            genuine: true,
        });
    }
    let all: Vec<usize> = (0..n).collect();
    while out.len() < counts.genuine + counts.impostor {
        let a = *all.choose(&mut rng).expect("non-empty");
        let b = *all.choose(&mut rng).expect("non-empty");
        if idx(a).subject != idx(b).subject {
            out.push(PairRecord {
                first: a,
                second: b,
                genuine: false,
            });
        }
    }
    Ok(out)
}

/// Similarity between two crops; higher means "same identity".
pub trait Scorer {
    fn score_batch(&self, pairs: &[(&FaceCrop, &FaceCrop)]) -> Vec<f64>;
}

/// Negative mean squared pixel difference.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelScorer;

impl Scorer for PixelScorer {
    fn score_batch(&self, pairs: &[(&FaceCrop, &FaceCrop)]) -> Vec<f64> {
        pairs.iter().map(|(a, b)| -a.mean_squared_error(b)).collect()
    }
}

/// Agreement probability of one matcher head, typically the identity head
/// of a matcher trained independently of the generator's judge.
#[derive(Clone, Copy, Debug)]
pub struct MatcherScorer<'a> {
    pub model: &'a MatcherModel,
    pub label: usize,
}

impl Scorer for MatcherScorer<'_> {
    fn score_batch(&self, pairs: &[(&FaceCrop, &FaceCrop)]) -> Vec<f64> {
        pairs
            .chunks(64)
            .flat_map(|c| self.model.predict_batch(c))
            .map(|v| v.values()[self.label])
            .collect()
    }
}

/// Scores the pairs of `protocol` with `first` / `second` as the crop views
/// (both aligned with `dataset`).
pub fn verification_protocol(
    dataset: &Dataset,
    first: &[FaceCrop],
    second: &[FaceCrop],
    protocol: Protocol,
    counts: PairCounts,
    scorer: &dyn Scorer,
    seed: u64,
) -> Result<(DecisionEnvironment, Vec<PairRecord>)> {
    if first.len() != dataset.len() || second.len() != dataset.len() {
        return Err(Error::Contract("crop views must align with the dataset".into()));
    }
    let pairs = protocol_pairs(dataset, protocol, counts, seed)?;
    let crops: Vec<(&FaceCrop, &FaceCrop)> = pairs.iter().map(|p| (&first[p.first], &second[p.second])).collect();
    let scores = scorer.score_batch(&crops);
    let mut env = DecisionEnvironment::default();
    for (p, s) in pairs.iter().zip(scores) {
        if p.genuine {
            env.genuine.push(s);
        } else {
            env.impostor.push(s);
        }
    }
    Ok((env, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{generate_synthetic_dataset, SyntheticSpec};

    fn toy() -> Dataset {
        let spec = SyntheticSpec {
            subjects: 5,
            sequences_per_subject: 2,
            frames_per_sequence: 3,
            ..SyntheticSpec::default()
        };
        generate_synthetic_dataset(&spec, 8).unwrap()
    }

    #[test]
    fn pair_counts_are_exact() {
        let ds = toy();
        let crops: Vec<FaceCrop> = ds.samples().iter().map(|s| s.crop.clone()).collect();
        let counts = "10,50".parse().unwrap();
        let (env, pairs) = verification_protocol(&ds, &crops, &crops, Protocol::Xx, counts, &PixelScorer, 1).unwrap();
        assert_eq!((env.genuine.len(), env.impostor.len(), pairs.len()), (10, 50, 60));
    }

    #[test]
    fn protocol_contracts_hold() {
        let ds = toy();
        let counts = PairCounts {
            genuine: 200,
            impostor: 200,
        };
        for protocol in Protocol::ALL {
            for p in protocol_pairs(&ds, protocol, counts, 3).unwrap() {
                let (a, b) = (ds.get(p.first).index, ds.get(p.second).index);
                if !p.genuine {
                    assert_ne!(a.subject, b.subject);
                    continue;
                }
                assert_eq!(a.subject, b.subject);
                match protocol {
                    Protocol::Temporal => assert!(a.sequence == b.sequence && a.frame != b.frame),
                    Protocol::CrossSession => assert_ne!(a.sequence, b.sequence),
                    _ => assert_ne!(p.first, p.second),
                }
            }
        }
    }

    #[test]
    fn single_subject_is_a_config_error() {
        let ds = toy().filter_subjects(|s| s == 0);
        let counts = PairCounts {
            genuine: 1,
            impostor: 1,
        };
        assert!(matches!(protocol_pairs(&ds, Protocol::Xx, counts, 0), Err(Error::Config(_))));
    }

    #[test]
    fn parsing() {
        assert_eq!("cross-session".parse::<Protocol>().unwrap(), Protocol::CrossSession);
        assert!("xy".parse::<Protocol>().is_err());
        assert!("10".parse::<PairCounts>().is_err());
        assert!("a,1".parse::<PairCounts>().is_err());
    }

    #[test]
    fn pixel_scorer_separates_raw_identities() {
        let ds = toy();
        let crops: Vec<FaceCrop> = ds.samples().iter().map(|s| s.crop.clone()).collect();
        let counts = PairCounts {
            genuine: 100,
            impostor: 100,
        };
        let (env, _) = verification_protocol(&ds, &crops, &crops, Protocol::Temporal, counts, &PixelScorer, 2).unwrap();
        assert!(crate::eval::auc(&env).unwrap() > 0.9);
    }
}
