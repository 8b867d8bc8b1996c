//! Dense linear algebra, differentiation, optimization and clustering
//! primitives used by the rest of the crate.

pub mod adam;
pub mod chol;
pub mod kmeans;
pub mod lstsq;
pub mod mat;
pub mod params;
pub mod tape;

use std::collections::BTreeMap;

pub use adam::{Adam, Direction};
pub use chol::{cholesky, logdet, tri_solve, CholFactor, JitterPolicy, Side};
pub use kmeans::{kmeans, kmeans_detailed, Clustering};
pub use lstsq::ridge_lstsq;
pub use mat::Mat;
pub use params::{Block, ParamVector};
pub use tape::{Grads, LikKind, Tape, Var};

use crate::error::{Error, Result};

/// Leaves bound to each block of a [`ParamVector`] on a tape.
#[derive(Clone, Debug, Default)]
pub struct BlockVars {
    vars: BTreeMap<String, Var>,
}

impl BlockVars {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Leaf for `name`; panics when the block was never registered.
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }
}

/// Places every block of `params` on `tape` as a leaf. Trainable blocks
/// become differentiable, frozen ones constants.
pub fn bind(tape: &mut Tape, params: &ParamVector) -> BlockVars {
    let mut vars = BTreeMap::new();
    for b in params.blocks() {
        let value = params.mat(&b.name).expect("registered block");
        vars.insert(b.name.clone(), tape.leaf(value, b.trainable));
    }
    BlockVars { vars }
}

/// Value and exact gradient of a scalar objective built on a fresh tape.
/// Frozen blocks receive zero gradient.
pub fn grad<F>(params: &ParamVector, objective: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape, &BlockVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params);
    let out = objective(&mut tape, &vars)?;
    let value = tape.scalar(out);
    let grads = tape.backward(out);
    let mut flat = vec![0.0; params.len()];
    for b in params.blocks() {
        if !b.trainable {
            continue;
        }
        let g = grads.wrt(vars.var(&b.name));
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                block: b.name.clone(),
                step: 0,
            });
        }
        flat[b.range()].copy_from_slice(g.as_slice());
    }
    Ok((value, flat))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_half_norm() {
        let mut p = ParamVector::new();
        p.register("p", &Mat::row_vec(&[0.5, -1.5]), true).unwrap();
        p.register("frozen", &Mat::scalar(3.0), false).unwrap();
        let (v, g) = grad(&p, |t, b| {
            let x = b.var("p");
            let f = b.var("frozen");
            let sq = t.mul(x, x);
            let s = t.sum(sq);
            let s = t.scale(s, 0.5);
            let fz = t.mul(f, f);
            Ok(t.add(s, fz))
        })
        .unwrap();
        assert!((v - (0.5 * (0.25 + 2.25) + 9.0)).abs() < 1e-15);
        assert_eq!(g, vec![0.5, -1.5, 0.0]);
    }

    #[test]
    fn grad_of_logdet_cholesky_diag() {
        let mut p = ParamVector::new();
        p.register("p", &Mat::row_vec(&[2.0, 8.0]), true).unwrap();
        let (_, g) = grad(&p, |t, b| {
            let x = b.var("p");
            let x1 = t.gather_entries(x, vec![0], vec![0]);
            let x2 = t.gather_entries(x, vec![0], vec![1]);
            let c0 = t.constant(Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
            let c1 = t.constant(Mat::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap());
            let a0 = t.mul_scalar(c0, x1);
            let a1 = t.mul_scalar(c1, x2);
            let diag = t.add(a0, a1);
            let h = t.spd(diag)?;
            Ok(t.spd_logdet(&h))
        })
        .unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut p = ParamVector::new();
        p.register("bad", &Mat::scalar(0.0), true).unwrap();
        let err = grad(&p, |t, b| Ok(t.log(b.var("bad")))).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref block, .. } if block == "bad"));
    }
}
