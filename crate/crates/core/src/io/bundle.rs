//! The prediction bundle: features, black-box outputs, targets and optional
//! embeddings of a data set. It is the only view of the pre-trained model.

use std::path::Path;

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fmgp::{Inputs, Mode};
use crate::io::container::{Array, Container};
use crate::kernels::KernelInput;
use crate::numkit::Mat;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Real(Vec<f64>),
    Class(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) => v.len(),
            Targets::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn real(&self) -> Option<&[f64]> {
        match self {
            Targets::Real(v) => Some(v),
            Targets::Class(_) => None,
        }
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            Targets::Class(v) => Some(v),
            Targets::Real(_) => None,
        }
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Real(v) => Targets::Real(idx.iter().map(|&i| v[i]).collect()),
            Targets::Class(v) => Targets::Class(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> i64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(c: i64) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split code {c}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub mode: Mode,
    /// `N x D` features.
    pub x: Mat,
    /// `N x 1` outputs or `N x C` logits.
    pub g: Mat,
    pub y: Targets,
    /// `N x E` embeddings.
    pub psi: Option<Mat>,
    pub split: Option<Vec<Split>>,
    /// Seed of the generator that produced the bundle, when synthetic.
    pub seed: Option<u64>,
}

impl PredictionBundle {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_classes(&self) -> usize {
        match self.mode {
            Mode::Regression => 1,
            Mode::Classification => self.g.cols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        let shape = |what: &str, got: usize| {
            Error::Shape(format!("{what} has {got} rows, features have {n}"))
        };
        if self.g.rows() != n {
            return Err(shape("g", self.g.rows()));
        }
        if self.y.len() != n {
            return Err(shape("y", self.y.len()));
        }
        if let Some(p) = &self.psi {
            if p.rows() != n {
                return Err(shape("psi", p.rows()));
            }
        }
        if let Some(s) = &self.split {
            if s.len() != n {
                return Err(shape("split", s.len()));
            }
        }
        match (self.mode, &self.y) {
            (Mode::Regression, Targets::Real(_)) => {
                if self.g.cols() != 1 {
                    return Err(Error::Shape(format!(
                        "regression g needs 1 column, found {}",
                        self.g.cols()
                    )));
                }
            }
            (Mode::Classification, Targets::Class(labels)) => {
                let c = self.g.cols();
                if c < 2 {
                    return Err(Error::Shape("classification needs at least 2 logit columns".into()));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                    return Err(Error::ClassOutOfRange {
                        class: bad,
                        n_classes: c,
                    });
                }
            }
            (mode, _) => {
                return Err(Error::ModeMismatch(format!(
                    "{} bundle with the wrong target type",
                    mode.as_str()
                )))
            }
        }
        Ok(())
    }

    /// Rows tagged `train`, or every row when untagged.
    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_of(Split::Train)
            .unwrap_or_else(|| (0..self.len()).collect())
    }

    /// Rows tagged `test`, or every row when untagged.
    pub fn test_indices(&self) -> Vec<usize> {
        self.indices_of(Split::Test)
            .unwrap_or_else(|| (0..self.len()).collect())
    }

    fn indices_of(&self, which: Split) -> Option<Vec<usize>> {
        self.split.as_ref().map(|s| {
            s.iter()
                .enumerate()
                .filter(|(_, &t)| t == which)
                .map(|(i, _)| i)
                .collect()
        })
    }

    pub fn subset(&self, idx: &[usize]) -> PredictionBundle {
        PredictionBundle {
            mode: self.mode,
            x: self.x.select_rows(idx),
            g: self.g.select_rows(idx),
            y: self.y.select(idx),
            psi: self.psi.as_ref().map(|p| p.select_rows(idx)),
            split: self.split.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
            seed: self.seed,
        }
    }

    /// Kernel-side view of the rows.
    pub fn inputs(&self, input: KernelInput) -> Result<Inputs> {
        Inputs::select(&self.x, self.psi.as_ref(), input, self.mode)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("bundle");
        c.meta.insert("mode".into(), json!(self.mode.as_str()));
        if let Some(seed) = self.seed {
            c.meta.insert("seed".into(), json!(seed));
        }
        c.push("x", Array::f64(&self.x));
        c.push("g", Array::f64(&self.g));
        match &self.y {
            Targets::Real(v) => c.push("y", Array::f64_col(v)),
            Targets::Class(v) => {
                c.push("y", Array::i64_col(&v.iter().map(|&l| l as i64).collect::<Vec<_>>()))
            }
        }
        if let Some(p) = &self.psi {
            c.push("psi", Array::f64(p));
        }
        if let Some(s) = &self.split {
            c.push("split", Array::i64_col(&s.iter().map(|t| t.code()).collect::<Vec<_>>()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("bundle")?;
        let mode: Mode = c.meta_str("mode")?.parse()?;
        let y = match mode {
            Mode::Regression => Targets::Real(c.mat("y")?.into_vec()),
            Mode::Classification => Targets::Class(
                c.ints("y")?
                    .into_iter()
                    .map(|l| {
                        usize::try_from(l).map_err(|_| Error::Format(format!("negative label {l}")))
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let split = match c.get("split") {
            Some(_) => Some(
                c.ints("split")?
                    .into_iter()
                    .map(Split::from_code)
                    .collect::<Result<_>>()?,
            ),
            None => None,
        };
        let b = PredictionBundle {
            mode,
            x: c.mat("x")?,
            g: c.mat("g")?,
            y,
            psi: c.opt_mat("psi")?,
            split,
            seed: c.meta_u64("seed"),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    /// Hex SHA-256 of the serialized bundle (manifest and payload).
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

pub fn write_bundle(b: &PredictionBundle, path: &Path) -> Result<()> {
    b.validate()?;
    std::fs::write(path, b.to_bytes())?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<PredictionBundle> {
    PredictionBundle::from_bytes(&std::fs::read(path)?)
}

/// Reads a bundle from the container format, or from CSV when the file
/// name ends in `.csv`.
pub fn load_bundle(path: &Path) -> Result<PredictionBundle> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        crate::io::csv::import_csv(&std::fs::read_to_string(path)?)
    } else {
        read_bundle(path)
    }
}
