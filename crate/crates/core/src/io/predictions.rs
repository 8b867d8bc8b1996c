//! Per-row predictions written by the `predict` command.

use std::path::Path;

use serde_json::json;

use crate::error::{Error, Result};
use crate::fmgp::{class_probabilities, posterior, Mode, PosteriorPredictive, VariationalState};
use crate::io::bundle::PredictionBundle;
use crate::io::container::{Array, Container};
use crate::metrics::row_entropies;
use crate::numkit::Mat;

#[derive(Clone, Debug, PartialEq)]
pub enum PredictionValues {
    Regression {
        /// Copied from `g`.
        mean: Vec<f64>,
        /// Latent variance, without observation noise.
        variance: Vec<f64>,
        noise: f64,
    },
    Classification {
        /// Copied from `g`.
        logits: Mat,
        probs: Mat,
        entropy: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub values: PredictionValues,
    pub seed: u64,
    pub samples: usize,
}

impl Predictions {
    pub fn mode(&self) -> Mode {
        match self.values {
            PredictionValues::Regression { .. } => Mode::Regression,
            PredictionValues::Classification { .. } => Mode::Classification,
        }
    }

    pub fn len(&self) -> usize {
        match &self.values {
            PredictionValues::Regression { mean, .. } => mean.len(),
            PredictionValues::Classification { logits, .. } => logits.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("predictions");
        c.meta.insert("mode".into(), json!(self.mode().as_str()));
        c.meta.insert("seed".into(), json!(self.seed));
        c.meta.insert("samples".into(), json!(self.samples));
        match &self.values {
            PredictionValues::Regression {
                mean,
                variance,
                noise,
            } => {
                c.push("mean", Array::f64_col(mean));
                c.push("variance", Array::f64_col(variance));
                c.push("noise", Array::f64(&Mat::scalar(*noise)));
            }
            PredictionValues::Classification {
                logits,
                probs,
                entropy,
            } => {
                c.push("logits", Array::f64(logits));
                c.push("probs", Array::f64(probs));
                c.push("entropy", Array::f64_col(entropy));
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("predictions")?;
        let mode: Mode = c.meta_str("mode")?.parse()?;
        let values = match mode {
            Mode::Regression => PredictionValues::Regression {
                mean: c.mat("mean")?.into_vec(),
                variance: c.mat("variance")?.into_vec(),
                noise: c.mat("noise")?.scalar_value(),
            },
            Mode::Classification => PredictionValues::Classification {
                logits: c.mat("logits")?,
                probs: c.mat("probs")?,
                entropy: c.mat("entropy")?.into_vec(),
            },
        };
        Ok(Predictions {
            values,
            seed: c.meta_u64("seed").unwrap_or(0),
            samples: c.meta_u64("samples").unwrap_or(0) as usize,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Predictions for every row of `bundle`. Class probabilities average
/// `samples` softmax draws from a generator seeded by `seed`.
pub fn predict_bundle(
    state: &VariationalState,
    bundle: &PredictionBundle,
    samples: usize,
    seed: u64,
) -> Result<Predictions> {
    if state.mode != bundle.mode {
        return Err(Error::ModeMismatch(format!(
            "state is {} but bundle is {}",
            state.mode.as_str(),
            bundle.mode.as_str()
        )));
    }
    let inputs = bundle.inputs(state.kernel_input)?;
    let values = match posterior(state, &inputs, &bundle.g)? {
        PosteriorPredictive::Regression {
            mean,
            variance,
            noise,
        } => PredictionValues::Regression {
            mean,
            variance,
            noise,
        },
        PosteriorPredictive::Classification { logits, cov } => {
            let probs = class_probabilities(&logits, &cov, samples, seed)?;
            let entropy = row_entropies(&probs);
            PredictionValues::Classification {
                logits,
                probs,
                entropy,
            }
        }
    };
    Ok(Predictions {
        values,
        seed,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::bundle::tests::random_bundle;
    use crate::training::{init_state, FitConfig};

    #[test]
    fn means_are_copied_and_files_round_trip() {
        for mode in [Mode::Regression, Mode::Classification] {
            let b = random_bundle(6, mode);
            let cfg = FitConfig {
                m_beta: 5,
                mode,
                ..FitConfig::default()
            };
            let s = init_state(&b, &cfg).unwrap();
            let p = predict_bundle(&s, &b, 64, 3).unwrap();
            match &p.values {
                PredictionValues::Regression { mean, variance, .. } => {
                    assert_eq!(mean.as_slice(), b.g.as_slice());
                    let amp = s.kernel.rbf().amplitude();
                    assert!(variance.iter().all(|v| (0.0..=amp).contains(v)));
                }
                PredictionValues::Classification { logits, probs, .. } => {
                    assert_eq!(logits, &b.g);
                    for i in 0..probs.rows() {
                        assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
            assert_eq!(predict_bundle(&s, &b, 64, 3).unwrap(), p);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.fmgpb");
            p.write(&path).unwrap();
            assert_eq!(Predictions::read(&path).unwrap(), p);
        }
    }

    #[test]
    fn mode_mismatch_is_reported() {
        let b = random_bundle(6, Mode::Regression);
        let cfg = FitConfig {
            m_beta: 5,
            ..FitConfig::default()
        };
        let s = init_state(&b, &cfg).unwrap();
        let c = random_bundle(6, Mode::Classification);
        assert!(matches!(predict_bundle(&s, &c, 8, 0), Err(Error::ModeMismatch(_))));
    }
}
