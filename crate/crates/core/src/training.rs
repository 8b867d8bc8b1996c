//! Likelihood terms, the regularized mini-batch objective and the fitting
//! loop.
//!
//! The objective for a batch `B` of a training set of size `N` is
//! `(N/|B|) Σ_b [log E_q p(y_b|f) + log E_q* p(y_b|f)] − KL(q) − KL(q*)`,
//! where `q` has mean `g` and `q*` has mean `aᵀK_zx`; both share the same
//! covariance. It is maximized with Adam.

use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmgp::graph::{self, BatchInputs, BatchTargets, Leaves, ObjectiveSpec};
use crate::fmgp::{scaled_identity_packed, Inputs, Mode, TrainMask, VariationalState};
use crate::io::bundle::{PredictionBundle, Targets};
use crate::kernels::{ClassKernelParams, KernelInput, KernelParams, RbfParams};
use crate::numkit::{grad, kmeans, Adam, Direction, LikKind, Mat, ParamVector, Tape};

/// Lower bound on the noise variance.
pub const NOISE_FLOOR: f64 = 1e-6;

/// Estimator of the per-point data term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataTerm {
    /// `log E_q[p(y|f)]`, the regularized objective.
    #[default]
    LogExpected,
    /// `E_q[log p(y|f)]`, the standard evidence lower bound.
    ExpectedLog,
}

impl DataTerm {
    pub fn kind(self) -> LikKind {
        match self {
            DataTerm::LogExpected => LikKind::LogExpected,
            DataTerm::ExpectedLog => LikKind::ExpectedLog,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub m_beta: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub s_train: usize,
    pub s_eval: usize,
    pub seed: u64,
    pub mode: Mode,
    pub train_inducing: bool,
    pub train_hypers: bool,
    pub use_qstar: bool,
    pub data_term: DataTerm,
    pub kernel_input: KernelInput,
    /// Initial kernel amplitude; defaults to the target variance in
    /// regression and 1 in classification.
    pub init_amplitude: Option<f64>,
    /// Initial length-scale for every dimension; defaults to the variance of
    /// each kernel coordinate.
    pub init_length_scale: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            m_beta: 100,
            batch_size: 100,
            steps: 20000,
            lr: 1e-3,
            s_train: 64,
            s_eval: 512,
            seed: 0,
            mode: Mode::Regression,
            train_inducing: true,
            train_hypers: true,
            use_qstar: true,
            data_term: DataTerm::LogExpected,
            kernel_input: KernelInput::Features,
            init_amplitude: None,
            init_length_scale: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be at least 1")))
            } else {
                Ok(())
            }
        };
        positive("m_beta (M_beta >= 1)", self.m_beta)?;
        positive("batch_size", self.batch_size)?;
        positive("steps", self.steps)?;
        positive("s_train", self.s_train)?;
        positive("s_eval", self.s_eval)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, v) in [
            ("init_amplitude", self.init_amplitude),
            ("init_length_scale", self.init_length_scale),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("{name} must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }

    fn mask(&self) -> TrainMask {
        TrainMask {
            inducing: self.train_inducing,
            hypers: self.train_hypers,
        }
    }
}

/// One optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub objective: f64,
    pub kl_q: f64,
    pub kl_qstar: f64,
    /// Factorizations that needed jitter during this step.
    pub jitter_events: usize,
    /// Seconds spent in the step.
    pub wall_clock: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub rows: Vec<TraceRow>,
}

impl TraceRecord {
    pub fn objectives(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.objective).collect()
    }

    /// Trailing moving averages of the objective over `window` steps.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let o = self.objectives();
        if window == 0 || o.len() < window {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(o.len() - window + 1);
        let mut s: f64 = o[..window].iter().sum();
        out.push(s / window as f64);
        for i in window..o.len() {
            s += o[i] - o[i - window];
            out.push(s / window as f64);
        }
        out
    }

    /// Tab-separated deterministic columns, one step per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tobjective\tkl_q\tkl_qstar\tjitter_events\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{:.16e}\t{:.16e}\t{:.16e}\t{}\n",
                r.step, r.objective, r.kl_q, r.kl_qstar, r.jitter_events
            ));
        }
        out
    }

    /// Per-step wall-clock seconds, one step per line.
    pub fn wall_clock_tsv(&self) -> String {
        let mut out = String::from("step\twall_clock_s\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{:.6e}\n", r.step, r.wall_clock));
        }
        out
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log N(y | mean, σ² + variance)`, the exact `log E_q[p(y|f)]` for a
/// Gaussian marginal and Gaussian likelihood.
pub fn gaussian_log_expected_lik(y: f64, mean: f64, variance: f64, noise: f64) -> f64 {
    let t = variance + noise;
    let r = y - mean;
    -0.5 * (LN_2PI + t.ln() + r * r / t)
}

/// `log (1/S) Σ_s softmax(mean + L ξ_s)_y` with `L L ᵀ = cov` (jitter ladder
/// applied) and `S` standard-normal draws from `rng`.
pub fn categorical_log_expected_lik(
    y: usize,
    mean: &[f64],
    cov: &Mat,
    samples: usize,
    rng: &mut impl rand::Rng,
) -> Result<f64> {
    let c = mean.len();
    if y >= c {
        return Err(Error::ClassOutOfRange {
            class: y,
            n_classes: c,
        });
    }
    if cov.shape() != (c, c) {
        return Err(Error::dims("categorical covariance", format!("{c}x{c}"), format!("{:?}", cov.shape())));
    }
    if samples == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let xi = Mat::from_fn(samples, c, |_, _| StandardNormal.sample(rng));
    let mut t = Tape::new();
    let cv = t.constant(cov.clone());
    let l = t.cholesky(cv)?;
    let lt = t.transpose(l);
    let e = t.constant(xi);
    let f = t.matmul(e, lt);
    let m = t.constant(Mat::row_vec(mean));
    let f = t.add_row_broadcast(f, m);
    let v = t.softmax_loglik(f, y, LikKind::LogExpected);
    Ok(t.scalar(v))
}

/// Black-box outputs and targets of the training rows.
struct TrainData {
    /// Bundle row of each training row.
    rows: Vec<usize>,
    inputs: Inputs,
    g: Mat,
    y: Targets,
}

impl TrainData {
    fn new(bundle: &PredictionBundle, input: KernelInput) -> Result<Self> {
        let rows = bundle.train_indices();
        if rows.is_empty() {
            return Err(Error::EmptyInput("no training rows"));
        }
        let sub = bundle.subset(&rows);
        Ok(TrainData {
            inputs: sub.inputs(input)?,
            g: sub.g,
            y: sub.y,
            rows,
        })
    }

    fn len(&self) -> usize {
        self.rows.len()
    }
}

fn check_mode(bundle: &PredictionBundle, config: &FitConfig) -> Result<()> {
    bundle.validate()?;
    if bundle.mode != config.mode {
        return Err(Error::ModeMismatch(format!(
            "bundle is {} but the configuration asks for {}",
            bundle.mode.as_str(),
            config.mode.as_str()
        )));
    }
    Ok(())
}

fn variance(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Initial state: k-means inducing points, `Ã = I`, `a = 0`, noise from the
/// residual variance of `g`, random inducing labels in classification.
pub fn init_state(bundle: &PredictionBundle, config: &FitConfig) -> Result<VariationalState> {
    config.validate()?;
    check_mode(bundle, config)?;
    let data = TrainData::new(bundle, config.kernel_input)?;
    let m = config.m_beta;
    if m > data.len() {
        return Err(Error::Config(format!(
            "m_beta = {m} exceeds the {} training rows",
            data.len()
        )));
    }
    let coords = &data.inputs.coords;
    let dim = coords.cols();
    let length_scales: Vec<f64> = (0..dim)
        .map(|j| {
            config
                .init_length_scale
                .unwrap_or_else(|| variance(coords.column(j).into_iter()).max(NOISE_FLOOR))
        })
        .collect();
    match config.mode {
        Mode::Regression => {
            let y = data.y.real().expect("validated");
            let resid = y.iter().zip(data.g.as_slice()).map(|(y, g)| y - g);
            let noise = variance(resid).max(NOISE_FLOOR);
            let amp = config
                .init_amplitude
                .unwrap_or_else(|| variance(y.iter().copied()).max(NOISE_FLOOR));
            let z = kmeans(coords, m, config.seed)?;
            let mut s = VariationalState::regression(z, RbfParams::new(amp, &length_scales), noise)?;
            s.kernel_input = config.kernel_input;
            Ok(s)
        }
        Mode::Classification => {
            let psi = data.inputs.psi.as_ref().expect("classification inputs carry psi");
            let e = psi.cols();
            let (z, psi_z) = match config.kernel_input {
                KernelInput::Features => {
                    let joint = coords.hcat(psi)?;
                    let centers = kmeans(&joint, m, config.seed)?;
                    let z = Mat::from_fn(m, dim, |i, j| centers[(i, j)]);
                    let p = Mat::from_fn(m, e, |i, j| centers[(i, dim + j)]);
                    (z, p)
                }
                KernelInput::Embeddings => {
                    let centers = kmeans(psi, m, config.seed)?;
                    (centers.clone(), centers)
                }
            };
            let nc = bundle.n_classes();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6c61_6265_6c73);
            let pick = Uniform::new(0, nc).expect("at least two classes");
            let labels = (0..m).map(|_| pick.sample(&mut rng)).collect();
            let amp = config.init_amplitude.unwrap_or(1.0);
            let kernel = ClassKernelParams::identity_b(RbfParams::new(amp, &length_scales), nc, e);
            let s = VariationalState {
                mode: Mode::Classification,
                kernel: KernelParams::Class(kernel),
                kernel_input: config.kernel_input,
                z,
                psi_z: Some(psi_z),
                labels: Some(labels),
                l_packed: scaled_identity_packed(m, 1.0),
                a: vec![0.0; m],
                log_noise: None,
            };
            s.validate()?;
            Ok(s)
        }
    }
}

/// Values of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub kl_q: f64,
    pub kl_qstar: f64,
    pub jitter_events: usize,
}

/// Standard-normal draws for every batch point, `S x C` each.
fn draw_xi(rng: &mut ChaCha8Rng, n: usize, s: usize, c: usize) -> Vec<Mat> {
    (0..n)
        .map(|_| Mat::from_fn(s, c, |_, _| StandardNormal.sample(rng)))
        .collect()
}

/// Objective value and gradient for the batch `batch` (positions in
/// `data`) with fixed random numbers `xi` in classification.
fn evaluate(
    state: &VariationalState,
    params: &ParamVector,
    data: &TrainData,
    batch: &[usize],
    xi: &[Mat],
    config: &FitConfig,
) -> Result<(ObjectiveValue, Vec<f64>)> {
    let inputs = data.inputs.rows(batch);
    let g = data.g.select_rows(batch);
    let y_real: Vec<f64>;
    let y_class: Vec<usize>;
    let targets = match &data.y {
        Targets::Real(y) => {
            y_real = batch.iter().map(|&i| y[i]).collect();
            BatchTargets::Real {
                y: &y_real,
                g: g.as_slice(),
            }
        }
        Targets::Class(y) => {
            y_class = batch.iter().map(|&i| y[i]).collect();
            BatchTargets::Class {
                y: &y_class,
                g: &g,
                xi,
            }
        }
    };
    let spec = ObjectiveSpec {
        inputs: BatchInputs {
            coords: &inputs.coords,
            psi: inputs.psi.as_ref(),
        },
        targets,
        scale: data.len() as f64 / batch.len() as f64,
        use_qstar: config.use_qstar,
        kind: config.data_term.kind(),
    };
    let mut kl = 0.0;
    let mut quad = 0.0;
    let mut jitter_events = 0;
    let (objective, grad) = grad(params, |t, vars| {
        let lv = Leaves::from_vars(vars);
        let parts = graph::objective(t, &lv, state, &spec)?;
        kl = t.scalar(parts.kl_q);
        quad = t.scalar(parts.quad);
        jitter_events = t.jitter_events();
        Ok(parts.total)
    })?;
    if !objective.is_finite() {
        return Err(Error::NonFiniteGradient {
            block: "objective".into(),
            step: 0,
        });
    }
    Ok((
        ObjectiveValue {
            objective,
            kl_q: kl,
            kl_qstar: kl + quad,
            jitter_events,
        },
        grad,
    ))
}

/// Mini-batch objective at `state` for bundle rows `batch` (all of which
/// must be training rows). Classification draws its random numbers from a
/// generator seeded by `config.seed`.
pub fn minibatch_objective(
    state: &VariationalState,
    bundle: &PredictionBundle,
    batch: &[usize],
    config: &FitConfig,
) -> Result<f64> {
    check_mode(bundle, config)?;
    state.validate()?;
    let data = TrainData::new(bundle, config.kernel_input)?;
    let pos: Vec<usize> = batch
        .iter()
        .map(|&r| {
            data.rows
                .binary_search(&r)
                .map_err(|_| Error::Config(format!("batch row {r} is not a training row")))
        })
        .collect::<Result<_>>()?;
    if pos.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let xi = match state.mode {
        Mode::Regression => Vec::new(),
        Mode::Classification => draw_xi(&mut rng, pos.len(), config.s_train, state.n_classes()),
    };
    let params = state.to_params(TrainMask::NONE);
    Ok(evaluate(state, &params, &data, &pos, &xi, config)?.0.objective)
}

/// Stateful optimizer over one bundle.
pub struct Trainer {
    data: TrainData,
    config: FitConfig,
    state: VariationalState,
    params: ParamVector,
    adam: Adam,
    rng: ChaCha8Rng,
    batch: usize,
    trace: TraceRecord,
}

impl Trainer {
    /// Starts from the default initialization.
    pub fn new(bundle: &PredictionBundle, config: &FitConfig) -> Result<Self> {
        let state = init_state(bundle, config)?;
        Self::from_state(bundle, state, config)
    }

    /// Starts from a given state; the configuration's masks decide which
    /// blocks move.
    pub fn from_state(
        bundle: &PredictionBundle,
        state: VariationalState,
        config: &FitConfig,
    ) -> Result<Self> {
        config.validate()?;
        check_mode(bundle, config)?;
        state.validate()?;
        let data = TrainData::new(bundle, config.kernel_input)?;
        if data.inputs.coords.cols() != state.z.cols() {
            return Err(Error::dims("trainer inputs", state.z.cols(), data.inputs.coords.cols()));
        }
        let params = state.to_params(config.mask());
        Ok(Trainer {
            batch: config.batch_size.min(data.len()),
            adam: Adam::new(params.len(), config.lr),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            data,
            config: config.clone(),
            state,
            params,
            trace: TraceRecord::default(),
        })
    }

    /// Effective batch size (the configured size clamped to `N`).
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn steps_taken(&self) -> usize {
        self.trace.rows.len()
    }

    pub fn trace(&self) -> &TraceRecord {
        &self.trace
    }

    /// Current parameters as a state.
    pub fn state(&self) -> VariationalState {
        let mut s = self.state.clone();
        s.load_params(&self.params);
        s
    }

    /// One Adam ascent step on a freshly drawn batch.
    pub fn step(&mut self) -> Result<&TraceRow> {
        let started = Instant::now();
        let step = self.trace.rows.len() + 1;
        let n = self.data.len();
        let batch: Vec<usize> = if self.batch == n {
            (0..n).collect()
        } else {
            let mut b = index::sample(&mut self.rng, n, self.batch).into_vec();
            b.sort_unstable();
            b
        };
        let xi = match self.state.mode {
            Mode::Regression => Vec::new(),
            Mode::Classification => draw_xi(
                &mut self.rng,
                batch.len(),
                self.config.s_train,
                self.state.n_classes(),
            ),
        };
        let (value, grad) = evaluate(&self.state, &self.params, &self.data, &batch, &xi, &self.config)
            .map_err(|e| match e {
                Error::NonFiniteGradient { block, .. } => Error::NonFiniteGradient { block, step },
                other => other,
            })?;
        self.adam.step(self.params.values_mut(), &grad, Direction::Ascent);
        if let Some(b) = self.params.block(graph::LOG_NOISE) {
            let i = b.offset;
            let floor = NOISE_FLOOR.ln();
            let v = &mut self.params.values_mut()[i];
            if *v < floor {
                *v = floor;
            }
        }
        self.trace.rows.push(TraceRow {
            step,
            objective: value.objective,
            kl_q: value.kl_q,
            kl_qstar: value.kl_qstar,
            jitter_events: value.jitter_events,
            wall_clock: started.elapsed().as_secs_f64(),
        });
        Ok(self.trace.rows.last().expect("just pushed"))
    }

    /// Runs the remaining configured steps.
    pub fn run(mut self) -> Result<(VariationalState, TraceRecord)> {
        while self.steps_taken() < self.config.steps {
            self.step()?;
        }
        Ok((self.state(), self.trace))
    }
}

/// Initializes and trains for `config.steps` steps.
pub fn fit(bundle: &PredictionBundle, config: &FitConfig) -> Result<(VariationalState, TraceRecord)> {
    Trainer::new(bundle, config)?.run()
}

/// Objective of `state` on a tape with every block frozen, used by
/// diagnostics that need the value without training.
pub fn objective_value(
    state: &VariationalState,
    bundle: &PredictionBundle,
    config: &FitConfig,
) -> Result<ObjectiveValue> {
    check_mode(bundle, config)?;
    let data = TrainData::new(bundle, config.kernel_input)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let xi = match state.mode {
        Mode::Regression => Vec::new(),
        Mode::Classification => draw_xi(&mut rng, all.len(), config.s_train, state.n_classes()),
    };
    let params = state.to_params(TrainMask::NONE);
    Ok(evaluate(state, &params, &data, &all, &xi, config)?.0)
}

#[cfg(test)]
mod tests;
