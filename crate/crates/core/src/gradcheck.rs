//! Finite-difference verification of every objective and KL gradient on
//! small random instances.
//!
//! For each loss and parameter block the error is
//! `max_i |an_i − fd_i| / max(‖an‖∞, ‖fd‖∞, 1e-6)`, with central
//! differences of step `1e-5·(1 + |p_i|)`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::fmgp::graph::{self, BatchInputs, BatchTargets, Leaves, ObjectiveSpec};
use crate::fmgp::{Mode, TrainMask, VariationalState};
use crate::kernels::{ClassKernelParams, KernelInput, KernelParams, RbfParams};
use crate::numkit::{bind, grad, BlockVars, LikKind, Mat, ParamVector, Tape, Var};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Deliberate defects used to confirm that the check detects them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Negates the adjoint flowing out of the stand-alone KL terms.
    FlipKlAdjoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockResult {
    pub loss: String,
    pub block: String,
    pub rel_err: f64,
}

impl BlockResult {
    pub fn name(&self) -> String {
        format!("{}/{}", self.loss, self.block)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub results: Vec<BlockResult>,
}

impl GradcheckReport {
    pub fn worst(&self) -> &BlockResult {
        self.results
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            .expect("every run checks at least one block")
    }

    pub fn failures(&self) -> Vec<&BlockResult> {
        self.results
            .iter()
            .filter(|r| !(r.rel_err < GRADCHECK_TOLERANCE))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("seed\t{}\n", self.seed);
        for r in &self.results {
            let status = if r.rel_err < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
            writeln!(out, "{}\t{:.6e}\t{status}", r.name(), r.rel_err).expect("string write");
        }
        out
    }
}

struct Instance {
    state: VariationalState,
    coords: Mat,
    psi: Option<Mat>,
    y_real: Vec<f64>,
    y_class: Vec<usize>,
    g: Mat,
    xi: Vec<Mat>,
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn random_packed(r: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let mut p = Vec::new();
    for i in 0..m {
        for j in 0..=i {
            p.push(if i == j {
                r.random_range(-0.5..0.5)
            } else {
                0.3 * normal(r)
            });
        }
    }
    p
}

fn regression_instance(r: &mut ChaCha8Rng) -> Instance {
    let (m, d, n) = (4, 2, 5);
    let z = Mat::from_fn(m, d, |_, _| r.random_range(-1.0..1.0));
    let kernel = RbfParams {
        log_amp: r.random_range(-0.5..0.5),
        log_ls: (0..d).map(|_| r.random_range(-0.7..0.3)).collect(),
    };
    let state = VariationalState {
        mode: Mode::Regression,
        kernel: KernelParams::Rbf(kernel),
        kernel_input: KernelInput::Features,
        z,
        psi_z: None,
        labels: None,
        l_packed: random_packed(r, m),
        a: (0..m).map(|_| normal(r)).collect(),
        log_noise: Some(r.random_range(0.05f64.ln()..0.5f64.ln())),
    };
    Instance {
        state,
        coords: Mat::from_fn(n, d, |_, _| r.random_range(-1.0..1.0)),
        psi: None,
        y_real: (0..n).map(|_| normal(r)).collect(),
        y_class: Vec::new(),
        g: Mat::from_fn(n, 1, |_, _| normal(r)),
        xi: Vec::new(),
    }
}

fn classification_instance(r: &mut ChaCha8Rng) -> Instance {
    let (m, d, e, c, n, s) = (4, 2, 2, 3, 3, 4);
    let rbf = RbfParams {
        log_amp: r.random_range(-0.5..0.5),
        log_ls: (0..d).map(|_| r.random_range(-0.7..0.3)).collect(),
    };
    let kernel = ClassKernelParams {
        rbf,
        lb_packed: random_packed(r, c),
        n_classes: c,
        embed_dim: e,
    };
    let state = VariationalState {
        mode: Mode::Classification,
        kernel: KernelParams::Class(kernel),
        kernel_input: KernelInput::Features,
        z: Mat::from_fn(m, d, |_, _| r.random_range(-1.0..1.0)),
        psi_z: Some(Mat::from_fn(m, e, |_, _| 0.5 * normal(r))),
        labels: Some((0..m).map(|_| r.random_range(0..c)).collect()),
        l_packed: random_packed(r, m),
        a: (0..m).map(|_| normal(r)).collect(),
        log_noise: None,
    };
    Instance {
        state,
        coords: Mat::from_fn(n, d, |_, _| r.random_range(-1.0..1.0)),
        psi: Some(Mat::from_fn(n, e, |_, _| 0.5 * normal(r))),
        y_real: Vec::new(),
        y_class: (0..n).map(|_| r.random_range(0..c)).collect(),
        g: Mat::from_fn(n, c, |_, _| normal(r)),
        xi: (0..n).map(|_| Mat::from_fn(s, c, |_, _| normal(r))).collect(),
    }
}

type Build<'a> = Box<dyn Fn(&mut Tape, &BlockVars) -> Result<Var> + 'a>;

fn objective_loss<'a>(inst: &'a Instance, kind: LikKind, use_qstar: bool) -> Build<'a> {
    Box::new(move |t, vars| {
        let targets = match inst.state.mode {
            Mode::Regression => BatchTargets::Real {
                y: &inst.y_real,
                g: inst.g.as_slice(),
            },
            Mode::Classification => BatchTargets::Class {
                y: &inst.y_class,
                g: &inst.g,
                xi: &inst.xi,
            },
        };
        let spec = ObjectiveSpec {
            inputs: BatchInputs {
                coords: &inst.coords,
                psi: inst.psi.as_ref(),
            },
            targets,
            scale: 2.5,
            use_qstar,
            kind,
        };
        let lv = Leaves::from_vars(vars);
        Ok(graph::objective(t, &lv, &inst.state, &spec)?.total)
    })
}

fn kl_loss(inst: &Instance, with_quad: bool, fault: Fault) -> Build<'_> {
    Box::new(move |t, vars| {
        let lv = Leaves::from_vars(vars);
        let c = graph::core(t, &lv, &inst.state)?;
        let mut kl = graph::kl_q(t, &c);
        if fault == Fault::FlipKlAdjoint {
            kl = t.flip_adjoint(kl);
        }
        if with_quad {
            let q = graph::qstar_quad(t, &c, &lv);
            kl = t.add(kl, q);
        }
        Ok(kl)
    })
}

fn value(params: &ParamVector, build: &Build) -> Result<f64> {
    let mut t = Tape::new();
    let vars = bind(&mut t, params);
    let out = build(&mut t, &vars)?;
    Ok(t.scalar(out))
}

fn check_loss(loss: &str, params: &ParamVector, build: &Build) -> Result<Vec<BlockResult>> {
    let (_, analytic) = grad(params, |t, v| build(t, v))?;
    let mut out = Vec::new();
    for b in params.blocks() {
        let mut max_diff: f64 = 0.0;
        let mut an_norm: f64 = 0.0;
        let mut fd_norm: f64 = 0.0;
        for i in b.range() {
            let p0 = params.values()[i];
            let h = 1e-5 * (1.0 + p0.abs());
            let mut plus = params.clone();
            plus.values_mut()[i] = p0 + h;
            let mut minus = params.clone();
            minus.values_mut()[i] = p0 - h;
            let fd = (value(&plus, build)? - value(&minus, build)?) / (2.0 * h);
            max_diff = max_diff.max((analytic[i] - fd).abs());
            an_norm = an_norm.max(analytic[i].abs());
            fd_norm = fd_norm.max(fd.abs());
        }
        out.push(BlockResult {
            loss: loss.to_string(),
            block: b.name.clone(),
            rel_err: max_diff / an_norm.max(fd_norm).max(1e-6),
        });
    }
    Ok(out)
}

/// Runs every check for one random seed.
pub fn run_gradcheck(seed: u64, fault: Fault) -> Result<GradcheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let reg = regression_instance(&mut r);
    let cls = classification_instance(&mut r);
    let mut results = Vec::new();
    for (tag, inst) in [("regression", &reg), ("classification", &cls)] {
        let params = inst.state.to_params(TrainMask::ALL);
        let losses: Vec<(String, Build)> = vec![
            (format!("kl_q[{tag}]"), kl_loss(inst, false, fault)),
            (format!("kl_qstar[{tag}]"), kl_loss(inst, true, fault)),
            (
                format!("{tag}_log_expected"),
                objective_loss(inst, LikKind::LogExpected, true),
            ),
            (
                format!("{tag}_expected_log"),
                objective_loss(inst, LikKind::ExpectedLog, true),
            ),
            (
                format!("{tag}_without_qstar"),
                objective_loss(inst, LikKind::LogExpected, false),
            ),
        ];
        for (name, build) in &losses {
            results.extend(check_loss(name, &params, build)?);
        }
    }
    Ok(GradcheckReport { seed, results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_gradients_pass() {
        for seed in 0..3 {
            let rep = run_gradcheck(seed, Fault::None).unwrap();
            assert!(rep.passed(), "{}", rep.to_text());
            assert!(rep.worst().rel_err < GRADCHECK_TOLERANCE);
        }
    }

    #[test]
    fn every_block_is_covered() {
        let rep = run_gradcheck(0, Fault::None).unwrap();
        for block in ["z", "psi_z", "l", "a", "log_amp", "log_ls", "lb", "log_noise"] {
            assert!(rep.results.iter().any(|r| r.block == block), "{block}");
        }
    }

    #[test]
    fn flipped_kl_adjoint_is_caught() {
        let rep = run_gradcheck(0, Fault::FlipKlAdjoint).unwrap();
        assert!(!rep.passed());
        assert!(rep.failures().iter().all(|f| f.loss.starts_with("kl_q")));
        assert!(rep.worst().name().starts_with("kl_q"));
    }

    #[test]
    fn report_is_deterministic() {
        let a = run_gradcheck(5, Fault::None).unwrap();
        assert_eq!(a.to_text(), run_gradcheck(5, Fault::None).unwrap().to_text());
    }
}
