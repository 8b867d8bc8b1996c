//! The fixed-mean variational family.
//!
//! The predictive mean is the black-box output `g(x)`, copied verbatim. The
//! covariance is `K(x,x) + k_xᵀ A k_x` with `A = −(Ã⁻¹ + K_β)⁻¹` and
//! `Ã = L Lᵀ`, evaluated as `K(x,x) − uᵀ(I + W)⁻¹u` where `u = Lᵀk_x` and
//! `W = LᵀK_βL`. `Ã` is never inverted.

pub(crate) mod graph;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{rbf_matrix, KernelInput, KernelParams, RbfParams};
use crate::numkit::tape::{packed_dim, softmax};
use crate::numkit::{bind, cholesky, ridge_lstsq, JitterPolicy, Mat, ParamVector, Tape};

use graph::{BatchInputs, Leaves};

/// Rows evaluated per tape during prediction.
const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Regression,
    Classification,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Regression => "regression",
            Mode::Classification => "classification",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Mode::Regression),
            "classification" => Ok(Mode::Classification),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Inputs as the kernel sees them: RBF coordinates (raw features or
/// embeddings, per [`KernelInput`]) and, for classification, embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs {
    pub coords: Mat,
    pub psi: Option<Mat>,
}

impl Inputs {
    pub fn regression(coords: Mat) -> Self {
        Inputs { coords, psi: None }
    }

    /// Chooses the RBF coordinates from `x` or `psi` and keeps `psi` for the
    /// linear factor when `mode` is classification.
    pub fn select(x: &Mat, psi: Option<&Mat>, input: KernelInput, mode: Mode) -> Result<Self> {
        let coords = match input {
            KernelInput::Features => x.clone(),
            KernelInput::Embeddings => psi
                .ok_or_else(|| Error::Config("kernel input `embeddings` needs psi".into()))?
                .clone(),
        };
        let psi = match mode {
            Mode::Regression => None,
            Mode::Classification => Some(
                psi.ok_or_else(|| Error::Config("classification kernel needs psi".into()))?
                    .clone(),
            ),
        };
        Ok(Inputs { coords, psi })
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, idx: &[usize]) -> Inputs {
        Inputs {
            coords: self.coords.select_rows(idx),
            psi: self.psi.as_ref().map(|p| p.select_rows(idx)),
        }
    }

    fn chunk(&self, start: usize, len: usize) -> Inputs {
        let idx: Vec<usize> = (start..start + len).collect();
        self.rows(&idx)
    }

    fn batch(&self) -> BatchInputs<'_> {
        BatchInputs {
            coords: &self.coords,
            psi: self.psi.as_ref(),
        }
    }
}

/// Which parameter groups receive gradient during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainMask {
    pub inducing: bool,
    pub hypers: bool,
}

impl TrainMask {
    pub const ALL: TrainMask = TrainMask {
        inducing: true,
        hypers: true,
    };
    pub const NONE: TrainMask = TrainMask {
        inducing: false,
        hypers: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub mode: Mode,
    pub kernel: KernelParams,
    pub kernel_input: KernelInput,
    /// Inducing locations in kernel coordinates, `M x D`.
    pub z: Mat,
    /// Inducing embeddings, `M x E` (classification).
    pub psi_z: Option<Mat>,
    /// Inducing class labels (classification).
    pub labels: Option<Vec<usize>>,
    /// Lower factor of `Ã`, packed row-major with log-diagonal.
    pub l_packed: Vec<f64>,
    /// Auxiliary-mean coefficients.
    pub a: Vec<f64>,
    /// `log σ²` (regression).
    pub log_noise: Option<f64>,
}

/// Packed lower factor `c·I`.
pub fn scaled_identity_packed(m: usize, c: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(m * (m + 1) / 2);
    for i in 0..m {
        for j in 0..=i {
            p.push(if i == j { c.ln() } else { 0.0 });
        }
    }
    p
}

impl VariationalState {
    /// Regression state with `Ã = I` and `a = 0`.
    pub fn regression(z: Mat, kernel: RbfParams, noise: f64) -> Result<Self> {
        let m = z.rows();
        let s = VariationalState {
            mode: Mode::Regression,
            kernel: KernelParams::Rbf(kernel),
            kernel_input: KernelInput::Features,
            z,
            psi_z: None,
            labels: None,
            l_packed: scaled_identity_packed(m, 1.0),
            a: vec![0.0; m],
            log_noise: Some(noise.ln()),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn m(&self) -> usize {
        self.z.rows()
    }

    pub fn n_classes(&self) -> usize {
        match &self.kernel {
            KernelParams::Class(p) => p.n_classes,
            KernelParams::Rbf(_) => 1,
        }
    }

    pub fn noise(&self) -> Option<f64> {
        self.log_noise.map(f64::exp)
    }

    /// Sets `Ã = c² I`.
    pub fn set_scaled_identity(&mut self, c: f64) {
        self.l_packed = scaled_identity_packed(self.m(), c);
    }

    pub fn l_factor(&self) -> Mat {
        let m = self.m();
        let mut l = Mat::zeros(m, m);
        let mut k = 0;
        for i in 0..m {
            for j in 0..=i {
                l[(i, j)] = if i == j {
                    self.l_packed[k].exp()
                } else {
                    self.l_packed[k]
                };
                k += 1;
            }
        }
        l
    }

    /// `Ã = L Lᵀ`.
    pub fn a_tilde(&self) -> Mat {
        let l = self.l_factor();
        l.matmul_tr(&l)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if m == 0 {
            return Err(Error::Config("M_beta must be at least 1".into()));
        }
        if self.z.cols() != self.kernel.rbf().dim() {
            return Err(Error::dims("VariationalState z", self.kernel.rbf().dim(), self.z.cols()));
        }
        if packed_dim(self.l_packed.len()) != m || self.l_packed.len() != m * (m + 1) / 2 {
            return Err(Error::dims("VariationalState l", m * (m + 1) / 2, self.l_packed.len()));
        }
        if self.a.len() != m {
            return Err(Error::dims("VariationalState a", m, self.a.len()));
        }
        match (self.mode, &self.kernel) {
            (Mode::Regression, KernelParams::Rbf(_)) => {
                if self.log_noise.is_none() {
                    return Err(Error::Config("regression state needs a noise variance".into()));
                }
            }
            (Mode::Classification, KernelParams::Class(p)) => {
                let psi = self
                    .psi_z
                    .as_ref()
                    .ok_or_else(|| Error::Config("classification state needs psi_z".into()))?;
                if psi.rows() != m || psi.cols() != p.embed_dim {
                    return Err(Error::dims(
                        "VariationalState psi_z",
                        format!("{m}x{}", p.embed_dim),
                        format!("{}x{}", psi.rows(), psi.cols()),
                    ));
                }
                let labels = self
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::Config("classification state needs labels".into()))?;
                if labels.len() != m {
                    return Err(Error::dims("VariationalState labels", m, labels.len()));
                }
                if let Some(&c) = labels.iter().find(|&&c| c >= p.n_classes) {
                    return Err(Error::ClassOutOfRange {
                        class: c,
                        n_classes: p.n_classes,
                    });
                }
                if p.lb_packed.len() != p.n_classes * (p.n_classes + 1) / 2 {
                    return Err(Error::dims(
                        "VariationalState lb",
                        p.n_classes * (p.n_classes + 1) / 2,
                        p.lb_packed.len(),
                    ));
                }
            }
            (mode, _) => {
                return Err(Error::ModeMismatch(format!(
                    "{} state with the wrong kernel family",
                    mode.as_str()
                )))
            }
        }
        Ok(())
    }

    /// Every parameter block, trainable according to `mask`. `L` and `a`
    /// are always trainable.
    pub fn to_params(&self, mask: TrainMask) -> ParamVector {
        let mut p = ParamVector::new();
        let r = self.kernel.rbf();
        let reg = |p: &mut ParamVector, name: &str, v: Mat, t: bool| {
            p.register(name, &v, t).expect("distinct block names");
        };
        reg(&mut p, graph::Z, self.z.clone(), mask.inducing);
        if let Some(psi) = &self.psi_z {
            reg(&mut p, graph::PSI_Z, psi.clone(), mask.inducing);
        }
        reg(&mut p, graph::L, Mat::row_vec(&self.l_packed), true);
        reg(&mut p, graph::A, Mat::col(&self.a), true);
        reg(&mut p, graph::LOG_AMP, Mat::scalar(r.log_amp), mask.hypers);
        reg(&mut p, graph::LOG_LS, Mat::row_vec(&r.log_ls), mask.hypers);
        if let KernelParams::Class(c) = &self.kernel {
            reg(&mut p, graph::LB, Mat::row_vec(&c.lb_packed), mask.hypers);
        }
        if let Some(n) = self.log_noise {
            reg(&mut p, graph::LOG_NOISE, Mat::scalar(n), mask.hypers);
        }
        p
    }

    /// Copies block values back from a vector built by [`Self::to_params`].
    pub fn load_params(&mut self, p: &ParamVector) {
        let get = |name: &str| p.get(name).expect("block present").to_vec();
        let m = self.m();
        self.z = Mat::from_vec(m, self.z.cols(), get(graph::Z)).expect("shape kept");
        if let Some(psi) = &mut self.psi_z {
            *psi = Mat::from_vec(m, psi.cols(), get(graph::PSI_Z)).expect("shape kept");
        }
        self.l_packed = get(graph::L);
        self.a = get(graph::A);
        {
            let r = self.kernel.rbf_mut();
            r.log_amp = get(graph::LOG_AMP)[0];
            r.log_ls = get(graph::LOG_LS);
        }
        if let KernelParams::Class(c) = &mut self.kernel {
            c.lb_packed = get(graph::LB);
        }
        if self.log_noise.is_some() {
            self.log_noise = Some(get(graph::LOG_NOISE)[0]);
        }
    }

    fn check_inputs(&self, inputs: &Inputs) -> Result<()> {
        if inputs.coords.cols() != self.z.cols() {
            return Err(Error::dims("inputs", self.z.cols(), inputs.coords.cols()));
        }
        if self.mode == Mode::Classification {
            let psi = inputs
                .psi
                .as_ref()
                .ok_or_else(|| Error::Domain("classification inputs need embeddings".into()))?;
            let e = self.psi_z.as_ref().map_or(0, |p| p.cols());
            if psi.cols() != e || psi.rows() != inputs.len() {
                return Err(Error::dims("input embeddings", e, psi.cols()));
            }
        }
        Ok(())
    }

    /// Builds a constant tape for the state and hands its leaves to `f`
    /// once per chunk of inputs.
    fn per_chunk<T>(
        &self,
        inputs: &Inputs,
        mut f: impl FnMut(&mut Tape, &Leaves, &graph::Core, &Inputs) -> Result<Vec<T>>,
    ) -> Result<Vec<T>> {
        self.validate()?;
        self.check_inputs(inputs)?;
        let params = self.to_params(TrainMask::NONE);
        let mut out = Vec::with_capacity(inputs.len());
        let mut start = 0;
        while start < inputs.len() {
            let len = PREDICT_CHUNK.min(inputs.len() - start);
            let chunk = inputs.chunk(start, len);
            let mut t = Tape::new();
            let vars = bind(&mut t, &params);
            let lv = Leaves::from_vars(&vars);
            let c = graph::core(&mut t, &lv, self)?;
            out.extend(f(&mut t, &lv, &c, &chunk)?);
            start += len;
        }
        Ok(out)
    }
}

/// Latent predictive variances `K*(x,x)` (regression), clamped to
/// `[0, K(x,x)]` against rounding.
pub fn predictive_variance(state: &VariationalState, inputs: &Inputs) -> Result<Vec<f64>> {
    if state.mode != Mode::Regression {
        return Err(Error::ModeMismatch("predictive_variance needs a regression state".into()));
    }
    let prior = state.kernel.rbf().amplitude();
    state.per_chunk(inputs, |t, lv, c, chunk| {
        let kzx = graph::cross(t, lv, c, state, &chunk.batch())?;
        let v = graph::reg_variance(t, c, kzx, chunk.len());
        Ok(t.value(v).as_slice().iter().map(|&v| v.clamp(0.0, prior)).collect())
    })
}

/// Latent `C x C` predictive covariances (classification), symmetrized.
pub fn predictive_cov_class(state: &VariationalState, inputs: &Inputs) -> Result<Vec<Mat>> {
    if state.mode != Mode::Classification {
        return Err(Error::ModeMismatch(
            "predictive_cov_class needs a classification state".into(),
        ));
    }
    let nc = state.n_classes();
    state.per_chunk(inputs, |t, lv, c, chunk| {
        let kzx = graph::cross(t, lv, c, state, &chunk.batch())?;
        let psi = chunk.psi.as_ref().expect("checked");
        let cov = graph::class_cov(t, c, state, kzx, psi);
        let cv = t.value(cov);
        Ok((0..chunk.len())
            .map(|b| {
                Mat::from_fn(nc, nc, |i, j| {
                    0.5 * (cv[(b * nc + i, j)] + cv[(b * nc + j, i)])
                })
            })
            .collect())
    })
}

pub fn kl_q(state: &VariationalState) -> Result<f64> {
    state.validate()?;
    let params = state.to_params(TrainMask::NONE);
    let mut t = Tape::new();
    let lv = Leaves::from_vars(&bind(&mut t, &params));
    let c = graph::core(&mut t, &lv, state)?;
    let kl = graph::kl_q(&mut t, &c);
    Ok(t.scalar(kl))
}

/// `kl_q + ½ aᵀ K_β a`.
pub fn kl_qstar(state: &VariationalState) -> Result<f64> {
    state.validate()?;
    let params = state.to_params(TrainMask::NONE);
    let mut t = Tape::new();
    let lv = Leaves::from_vars(&bind(&mut t, &params));
    let c = graph::core(&mut t, &lv, state)?;
    let kl = graph::kl_q(&mut t, &c);
    let q = graph::qstar_quad(&mut t, &c, &lv);
    Ok(t.scalar(kl) + t.scalar(q))
}

/// Mean of the auxiliary measure, `Σ_m a_m K(x, z_m)`: `n x 1` in
/// regression, `n x C` in classification.
pub fn qstar_mean(state: &VariationalState, inputs: &Inputs) -> Result<Mat> {
    let nc = state.n_classes();
    let rows = state.per_chunk(inputs, |t, lv, c, chunk| {
        let kzx = graph::cross(t, lv, c, state, &chunk.batch())?;
        let m = graph::qstar_mean(t, lv, kzx);
        let v = t.value(m).as_slice();
        Ok(v.chunks(nc).map(|r| r.to_vec()).collect())
    })?;
    Mat::from_rows(&rows).or_else(|_| Ok(Mat::zeros(0, nc)))
}

/// Per-input predictive distribution. The mean is `g` itself.
#[derive(Clone, Debug, PartialEq)]
pub enum PosteriorPredictive {
    Regression {
        mean: Vec<f64>,
        /// Latent variance, excluding observation noise.
        variance: Vec<f64>,
        noise: f64,
    },
    Classification {
        logits: Mat,
        cov: Vec<Mat>,
    },
}

impl PosteriorPredictive {
    /// Standard deviations of `y` (latent variance plus noise).
    pub fn predictive_sd(&self) -> Option<Vec<f64>> {
        match self {
            PosteriorPredictive::Regression {
                variance, noise, ..
            } => Some(variance.iter().map(|v| (v + noise).sqrt()).collect()),
            PosteriorPredictive::Classification { .. } => None,
        }
    }
}

/// Predictive distribution at `inputs`, taking the mean from `g` (`n x 1` or
/// `n x C`) without modification.
pub fn posterior(state: &VariationalState, inputs: &Inputs, g: &Mat) -> Result<PosteriorPredictive> {
    if g.rows() != inputs.len() {
        return Err(Error::dims("posterior g rows", inputs.len(), g.rows()));
    }
    match state.mode {
        Mode::Regression => {
            if g.cols() != 1 {
                return Err(Error::dims("posterior g columns", 1, g.cols()));
            }
            Ok(PosteriorPredictive::Regression {
                mean: g.as_slice().to_vec(),
                variance: predictive_variance(state, inputs)?,
                noise: state.noise().expect("validated"),
            })
        }
        Mode::Classification => {
            if g.cols() != state.n_classes() {
                return Err(Error::dims("posterior g columns", state.n_classes(), g.cols()));
            }
            Ok(PosteriorPredictive::Classification {
                logits: g.clone(),
                cov: predictive_cov_class(state, inputs)?,
            })
        }
    }
}

/// Monte Carlo class probabilities `mean_s softmax(g + L ξ_s)` with `S`
/// standard-normal draws per input from a generator seeded by `seed`.
pub fn class_probabilities(logits: &Mat, cov: &[Mat], samples: usize, seed: u64) -> Result<Mat> {
    if samples == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    if cov.len() != logits.rows() {
        return Err(Error::dims("class_probabilities", logits.rows(), cov.len()));
    }
    let nc = logits.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Mat::zeros(logits.rows(), nc);
    let mut xi = vec![0.0; nc];
    let mut f = vec![0.0; nc];
    for (b, c) in cov.iter().enumerate() {
        let l = cholesky(c, JitterPolicy::Ladder)?;
        let l = l.l();
        let g = logits.row(b);
        let mut acc = vec![0.0; nc];
        for _ in 0..samples {
            for x in xi.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
            for i in 0..nc {
                f[i] = g[i] + (0..=i).map(|j| l[(i, j)] * xi[j]).sum::<f64>();
            }
            for (a, p) in acc.iter_mut().zip(softmax(&f)) {
                *a += p;
            }
        }
        for (o, a) in out.row_mut(b).iter_mut().zip(acc) {
            *o = a / samples as f64;
        }
    }
    Ok(out)
}

/// Result of fitting `g` by a kernel expansion over a set of centers.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanApprox {
    pub coefficients: Vec<f64>,
    /// `max_i |g_i − Σ_m a_m K(p_i, z_m)|` over the probe set.
    pub sup_error: f64,
}

/// Default ridge `1e-8 · amplitude`.
pub fn default_ridge(kernel: &RbfParams) -> f64 {
    1e-8 * kernel.amplitude()
}

/// Ridge-regularized least-squares fit of `g` (given at `probes`) by
/// `Σ_m a_m K(·, z_m)`, and the worst residual on the probe set.
pub fn mean_approx_error(
    g: &[f64],
    probes: &Mat,
    centers: &Mat,
    kernel: &RbfParams,
    ridge: f64,
) -> Result<MeanApprox> {
    if g.is_empty() || centers.rows() == 0 {
        return Err(Error::EmptyInput("mean_approx_error"));
    }
    if !(ridge > 0.0) {
        return Err(Error::Domain(format!("ridge must be positive, got {ridge}")));
    }
    let k = rbf_matrix(probes, centers, kernel)?;
    let a = ridge_lstsq(&k, g, ridge)?;
    let fit = k.matvec(&a);
    let sup_error = fit
        .iter()
        .zip(g)
        .map(|(f, g)| (f - g).abs())
        .fold(0.0, f64::max);
    Ok(MeanApprox {
        coefficients: a,
        sup_error,
    })
}
