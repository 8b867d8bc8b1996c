//! Fitted-state files: the variational state, its kernel and the fit
//! configuration that produced it.

use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fmgp::{Mode, VariationalState};
use crate::io::container::{Array, Container};
use crate::kernels::{ClassKernelParams, KernelInput, KernelParams, RbfParams};
use crate::numkit::Mat;
use crate::training::FitConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct StateFile {
    pub state: VariationalState,
    pub config: FitConfig,
}

fn kernel_input_str(k: KernelInput) -> &'static str {
    match k {
        KernelInput::Features => "features",
        KernelInput::Embeddings => "embeddings",
    }
}

fn parse_kernel_input(s: &str) -> Result<KernelInput> {
    match s {
        "features" => Ok(KernelInput::Features),
        "embeddings" => Ok(KernelInput::Embeddings),
        other => Err(Error::Format(format!("unknown kernel input `{other}`"))),
    }
}

impl StateFile {
    pub fn new(state: VariationalState, config: FitConfig) -> Self {
        StateFile { state, config }
    }

    pub fn to_container(&self) -> Result<Container> {
        let s = &self.state;
        s.validate()?;
        let mut c = Container::new("state");
        c.meta.insert("mode".into(), json!(s.mode.as_str()));
        c.meta.insert("kernel_input".into(), json!(kernel_input_str(s.kernel_input)));
        c.meta.insert("seed".into(), json!(self.config.seed));
        let config = serde_json::to_value(&self.config)
            .map_err(|e| Error::Format(format!("fit config: {e}")))?;
        c.meta.insert("fit_config".into(), config);
        let r = s.kernel.rbf();
        c.push("z", Array::f64(&s.z));
        c.push("l_packed", Array::f64(&Mat::row_vec(&s.l_packed)));
        c.push("a", Array::f64_col(&s.a));
        c.push("log_amp", Array::f64(&Mat::scalar(r.log_amp)));
        c.push("log_ls", Array::f64(&Mat::row_vec(&r.log_ls)));
        match &s.kernel {
            KernelParams::Rbf(_) => {
                c.meta.insert("family".into(), json!("rbf"));
            }
            KernelParams::Class(k) => {
                c.meta.insert("family".into(), json!("class"));
                c.meta.insert("n_classes".into(), json!(k.n_classes));
                c.meta.insert("embed_dim".into(), json!(k.embed_dim));
                c.push("lb", Array::f64(&Mat::row_vec(&k.lb_packed)));
            }
        }
        if let Some(p) = &s.psi_z {
            c.push("psi_z", Array::f64(p));
        }
        if let Some(l) = &s.labels {
            c.push("labels", Array::i64_col(&l.iter().map(|&v| v as i64).collect::<Vec<_>>()));
        }
        if let Some(n) = s.log_noise {
            c.push("log_noise", Array::f64(&Mat::scalar(n)));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("state")?;
        let mode: Mode = c.meta_str("mode")?.parse()?;
        let kernel_input = parse_kernel_input(c.meta_str("kernel_input")?)?;
        let config: FitConfig = serde_json::from_value(
            c.meta.get("fit_config").cloned().unwrap_or(Value::Null),
        )
        .map_err(|e| Error::Format(format!("fit config: {e}")))?;
        let row = |name: &str| c.mat(name).map(Mat::into_vec);
        let log_amp = c.mat("log_amp")?.scalar_value();
        let rbf = RbfParams {
            log_amp,
            log_ls: row("log_ls")?,
        };
        let kernel = match c.meta_str("family")? {
            "rbf" => KernelParams::Rbf(rbf),
            "class" => {
                let dim = |k: &str| {
                    c.meta_u64(k)
                        .map(|v| v as usize)
                        .ok_or_else(|| Error::Format(format!("manifest lacks `{k}`")))
                };
                KernelParams::Class(ClassKernelParams {
                    rbf,
                    lb_packed: row("lb")?,
                    n_classes: dim("n_classes")?,
                    embed_dim: dim("embed_dim")?,
                })
            }
            other => return Err(Error::Format(format!("unknown kernel family `{other}`"))),
        };
        let labels = match c.get("labels") {
            Some(_) => Some(
                c.ints("labels")?
                    .into_iter()
                    .map(|v| usize::try_from(v).map_err(|_| Error::Format(format!("negative label {v}"))))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let state = VariationalState {
            mode,
            kernel,
            kernel_input,
            z: c.mat("z")?,
            psi_z: c.opt_mat("psi_z")?,
            labels,
            l_packed: row("l_packed")?,
            a: row("a")?,
            log_noise: c.opt_mat("log_noise")?.map(|m| m.scalar_value()),
        };
        state.validate()?;
        Ok(StateFile { state, config })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
