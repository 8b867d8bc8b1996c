//! Tape construction of the fixed-mean family. Training, prediction and the
//! gradient checks all build their values through these functions.

use crate::error::{Error, Result};
use crate::fmgp::{Mode, VariationalState};
use crate::numkit::tape::Spd;
use crate::numkit::{BlockVars, LikKind, Mat, Tape, Var};

pub(crate) const Z: &str = "z";
pub(crate) const PSI_Z: &str = "psi_z";
pub(crate) const L: &str = "l";
pub(crate) const A: &str = "a";
pub(crate) const LOG_AMP: &str = "log_amp";
pub(crate) const LOG_LS: &str = "log_ls";
pub(crate) const LB: &str = "lb";
pub(crate) const LOG_NOISE: &str = "log_noise";

/// Parameter leaves of one state on a tape.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Leaves {
    pub z: Var,
    pub psi_z: Option<Var>,
    pub l: Var,
    pub a: Var,
    pub log_amp: Var,
    pub log_ls: Var,
    pub lb: Option<Var>,
    pub log_noise: Option<Var>,
}

impl Leaves {
    pub fn from_vars(v: &BlockVars) -> Self {
        Leaves {
            z: v.var(Z),
            psi_z: v.get(PSI_Z),
            l: v.var(L),
            a: v.var(A),
            log_amp: v.var(LOG_AMP),
            log_ls: v.var(LOG_LS),
            lb: v.get(LB),
            log_noise: v.get(LOG_NOISE),
        }
    }
}

/// Quantities every term shares: `L`, `K_β`, `W = LᵀK_βL` and the
/// factorization of `I + W`.
pub(crate) struct Core {
    pub lt: Var,
    pub kb: Var,
    pub w: Var,
    pub p: Spd,
    pub bmat: Option<Var>,
    pub amp: Var,
}

/// Per-input data seen by the graph: kernel coordinates and embeddings.
pub(crate) struct BatchInputs<'a> {
    pub coords: &'a Mat,
    pub psi: Option<&'a Mat>,
}

pub(crate) fn core(t: &mut Tape, lv: &Leaves, s: &VariationalState) -> Result<Core> {
    let l = t.tril_from_packed(lv.l);
    let lt = t.transpose(l);
    let amp = t.exp(lv.log_amp);
    let rbf_zz = t.rbf(lv.z, lv.z, lv.log_amp, lv.log_ls);
    let (kb, bmat) = match s.mode {
        Mode::Regression => (rbf_zz, None),
        Mode::Classification => {
            let labels = s.labels.clone().ok_or_else(|| {
                Error::Domain("classification state without inducing labels".into())
            })?;
            let psi_z = lv
                .psi_z
                .ok_or_else(|| Error::Domain("classification state without psi_z".into()))?;
            let lb = lv
                .lb
                .ok_or_else(|| Error::Domain("classification state without B factor".into()))?;
            let lbm = t.tril_from_packed(lb);
            let lbt = t.transpose(lbm);
            let bmat = t.matmul(lbm, lbt);
            let psi_t = t.transpose(psi_z);
            let lin = t.matmul(psi_z, psi_t);
            let lin = t.add_diag(lin, 1.0);
            let bsel = t.gather_entries(bmat, labels.clone(), labels);
            let k = t.mul(rbf_zz, lin);
            (t.mul(k, bsel), Some(bmat))
        }
    };
    let kl = t.matmul(kb, l);
    let w = t.matmul(lt, kl);
    let pm = t.add_diag(w, 1.0);
    let p = t.spd(pm)?;
    Ok(Core {
        lt,
        kb,
        w,
        p,
        bmat,
        amp,
    })
}

/// `−½ tr(W(I+W)⁻¹) + ½ log|I+W|`.
pub(crate) fn kl_q(t: &mut Tape, c: &Core) -> Var {
    let sw = t.spd_solve(&c.p, c.w);
    let tr = t.trace(sw);
    let tr = t.scale(tr, -0.5);
    let ld = t.spd_logdet(&c.p);
    let ld = t.scale(ld, 0.5);
    t.add(tr, ld)
}

/// `½ aᵀ K_β a`.
pub(crate) fn qstar_quad(t: &mut Tape, c: &Core, lv: &Leaves) -> Var {
    let ka = t.matmul(c.kb, lv.a);
    let at = t.transpose(lv.a);
    let q = t.matmul(at, ka);
    t.scale(q, 0.5)
}

/// Cross-kernel between inducing points and a batch: `M x n` in
/// regression, `M x (n·C)` in classification with column `b·C + c` for the
/// pair `(x_b, c)`.
pub(crate) fn cross(
    t: &mut Tape,
    lv: &Leaves,
    c: &Core,
    s: &VariationalState,
    inputs: &BatchInputs,
) -> Result<Var> {
    let xb = t.constant(inputs.coords.clone());
    let k = t.rbf(lv.z, xb, lv.log_amp, lv.log_ls);
    match s.mode {
        Mode::Regression => Ok(k),
        Mode::Classification => {
            let nc = s.n_classes();
            let n = inputs.coords.rows();
            let psi = inputs
                .psi
                .ok_or_else(|| Error::Domain("classification inputs need embeddings".into()))?;
            let psi_b = t.constant(psi.transpose());
            let psi_z = lv.psi_z.expect("checked in core");
            let lin = t.matmul(psi_z, psi_b);
            let e = t.mul(k, lin);
            let rep: Vec<usize> = (0..n).flat_map(|b| std::iter::repeat_n(b, nc)).collect();
            let cls: Vec<usize> = (0..n).flat_map(|_| 0..nc).collect();
            let e = t.gather_cols(e, rep);
            let labels = s.labels.clone().expect("checked in core");
            let bsel = t.gather_entries(c.bmat.expect("classification core"), labels, cls);
            Ok(t.mul(e, bsel))
        }
    }
}

/// `(U, (I+W)⁻¹U)` with `U = Lᵀ K_zx`.
fn projected(t: &mut Tape, c: &Core, kzx: Var) -> (Var, Var) {
    let u = t.matmul(c.lt, kzx);
    let su = t.spd_solve(&c.p, u);
    (u, su)
}

/// Latent variances `K(x,x) − uᵀ(I+W)⁻¹u` as a `1 x n` row.
pub(crate) fn reg_variance(t: &mut Tape, c: &Core, kzx: Var, n: usize) -> Var {
    let (u, su) = projected(t, c, kzx);
    let red = t.col_dots(u, su);
    let ones = t.constant(Mat::filled(1, n, 1.0));
    let prior = t.mul_scalar(ones, c.amp);
    t.sub(prior, red)
}

/// Stacked `C x C` latent covariances, one block of rows per input.
pub(crate) fn class_cov(
    t: &mut Tape,
    c: &Core,
    s: &VariationalState,
    kzx: Var,
    psi: &Mat,
) -> Var {
    let nc = s.n_classes();
    let n = psi.rows();
    let (u, su) = projected(t, c, kzx);
    let red = t.block_gram(u, su, nc);
    let rows: Vec<usize> = (0..n).flat_map(|_| 0..nc).collect();
    let bstack = t.gather_entries(c.bmat.expect("classification core"), rows, (0..nc).collect());
    let scale = Mat::from_fn(n * nc, nc, |i, _| {
        let r = psi.row(i / nc);
        r.iter().map(|v| v * v).sum::<f64>() + 1.0
    });
    let scale = t.constant(scale);
    let prior = t.mul(bstack, scale);
    let prior = t.mul_scalar(prior, c.amp);
    t.sub(prior, red)
}

/// `aᵀ K_zx`: the q* mean, `1 x n` or `1 x (n·C)`.
pub(crate) fn qstar_mean(t: &mut Tape, lv: &Leaves, kzx: Var) -> Var {
    let at = t.transpose(lv.a);
    t.matmul(at, kzx)
}

/// Targets and black-box outputs of a batch.
pub(crate) enum BatchTargets<'a> {
    Real { y: &'a [f64], g: &'a [f64] },
    Class { y: &'a [usize], g: &'a Mat, xi: &'a [Mat] },
}

pub(crate) struct ObjectiveSpec<'a> {
    pub inputs: BatchInputs<'a>,
    pub targets: BatchTargets<'a>,
    /// `N / |B|`.
    pub scale: f64,
    pub use_qstar: bool,
    pub kind: LikKind,
}

pub(crate) struct ObjectiveParts {
    pub total: Var,
    pub kl_q: Var,
    pub quad: Var,
}

/// Mini-batch objective to be maximized:
/// `scale·Σ_b [ℓ_q(b) + ℓ_q*(b)] − 2 KL_q − ½aᵀK_βa`, or
/// `scale·Σ_b ℓ_q(b) − KL_q` without the auxiliary measure.
pub(crate) fn objective(
    t: &mut Tape,
    lv: &Leaves,
    s: &VariationalState,
    spec: &ObjectiveSpec,
) -> Result<ObjectiveParts> {
    let c = core(t, lv, s)?;
    let kl = kl_q(t, &c);
    let quad = qstar_quad(t, &c, lv);
    let kzx = cross(t, lv, &c, s, &spec.inputs)?;
    let data = match &spec.targets {
        BatchTargets::Real { y, g } => {
            let n = y.len();
            let v = reg_variance(t, &c, kzx, n);
            let noise = match lv.log_noise {
                Some(ln) => t.exp(ln),
                None => return Err(Error::Domain("regression state without noise".into())),
            };
            let gm = t.constant(Mat::row_vec(g));
            let ll = t.gauss_loglik(y.to_vec(), gm, v, Some(noise), spec.kind);
            let mut sum = t.sum(ll);
            if spec.use_qstar {
                let ms = qstar_mean(t, lv, kzx);
                let lls = t.gauss_loglik(y.to_vec(), ms, v, Some(noise), spec.kind);
                let s2 = t.sum(lls);
                sum = t.add(sum, s2);
            }
            sum
        }
        BatchTargets::Class { y, g, xi } => {
            let nc = s.n_classes();
            let psi = spec.inputs.psi.expect("checked in cross");
            let cov = class_cov(t, &c, s, kzx, psi);
            let ms = if spec.use_qstar {
                Some(qstar_mean(t, lv, kzx))
            } else {
                None
            };
            let mut sum: Option<Var> = None;
            for (b, &yb) in y.iter().enumerate() {
                let cb = t.slice_rows(cov, b * nc, nc);
                let lc = t.cholesky(cb)?;
                let lct = t.transpose(lc);
                let e = t.constant(xi[b].clone());
                let f0 = t.matmul(e, lct);
                let gb = t.constant(Mat::row_vec(g.row(b)));
                let fq = t.add_row_broadcast(f0, gb);
                let mut term = t.softmax_loglik(fq, yb, spec.kind);
                if let Some(ms) = ms {
                    let mb = t.slice_cols(ms, b * nc, nc);
                    let fs = t.add_row_broadcast(f0, mb);
                    let ls = t.softmax_loglik(fs, yb, spec.kind);
                    term = t.add(term, ls);
                }
                sum = Some(match sum {
                    Some(acc) => t.add(acc, term),
                    None => term,
                });
            }
            sum.ok_or(Error::EmptyInput("batch"))?
        }
    };
    let data = t.scale(data, spec.scale);
    let total = if spec.use_qstar {
        let kl2 = t.scale(kl, 2.0);
        let d = t.sub(data, kl2);
        t.sub(d, quad)
    } else {
        t.sub(data, kl)
    };
    Ok(ObjectiveParts {
        total,
        kl_q: kl,
        quad,
    })
}
