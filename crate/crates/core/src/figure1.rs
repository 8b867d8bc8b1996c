//! Plot data for the one-dimensional cluster demo: the black-box mean with
//! FMGP and exact-GP bands on a grid.

use std::fmt::Write as _;

use crate::error::Result;
use crate::exact_gp::{fit_exact, optimize_hypers, predict_exact_batch, HyperFit};
use crate::fmgp::{posterior, Inputs, PosteriorPredictive, VariationalState};
use crate::io::container::FORMAT_VERSION;
use crate::io::synth::{gap_midpoints, synth_clusters};
use crate::io::PredictionBundle;
use crate::kernels::RbfParams;
use crate::numkit::Mat;
use crate::training::{fit, FitConfig};

pub const FIGURE1_HEADER: &str =
    "x,g_mean,fmgp_lower,fmgp_upper,exact_mean,exact_lower,exact_upper";

#[derive(Clone, Debug)]
pub struct Figure1Config {
    pub n_per_cluster: usize,
    pub grid_points: usize,
    pub grid: (f64, f64),
    pub fit: FitConfig,
}

impl Default for Figure1Config {
    fn default() -> Self {
        Figure1Config {
            n_per_cluster: 20,
            grid_points: 241,
            grid: (-4.5, 4.5),
            fit: FitConfig {
                m_beta: 20,
                batch_size: 60,
                steps: 3000,
                lr: 1e-2,
                ..FitConfig::default()
            },
        }
    }
}

/// Band summary at one gap: predictive sd at the midpoint and at the
/// training input closest to it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapCheck {
    pub midpoint: f64,
    pub nearest_x: f64,
    pub sd_mid: f64,
    pub sd_nearest: f64,
}

impl GapCheck {
    pub fn ratio(&self) -> f64 {
        self.sd_mid / self.sd_nearest
    }
}

#[derive(Clone, Debug)]
pub struct Figure1 {
    pub seed: u64,
    pub bundle: PredictionBundle,
    pub state: VariationalState,
    pub grid: Vec<f64>,
    pub g: Vec<f64>,
    /// FMGP predictive sd (latent plus noise).
    pub fmgp_sd: Vec<f64>,
    pub exact_mean: Vec<f64>,
    pub exact_sd: Vec<f64>,
    pub gaps: [GapCheck; 2],
}

struct MeanModel {
    gp: crate::exact_gp::ExactGPState,
}

impl MeanModel {
    fn mean_and_sd(&self, xs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (m, v) = predict_exact_batch(&self.gp, &Mat::col(xs))?;
        let noise = self.gp.noise();
        Ok((m, v.iter().map(|v| (v + noise).sqrt()).collect()))
    }
}

fn fmgp_sd(state: &VariationalState, xs: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    let p = posterior(state, &Inputs::regression(Mat::col(xs)), &Mat::col(g))?;
    Ok(match p {
        PosteriorPredictive::Regression { .. } => p.predictive_sd().expect("regression"),
        PosteriorPredictive::Classification { .. } => unreachable!("regression state"),
    })
}

/// Generates the cluster data, fits FMGP with the exact-GP mean as `g`, and
/// evaluates both models on the grid.
pub fn figure1(seed: u64, config: &Figure1Config) -> Result<Figure1> {
    let bundle = synth_clusters(seed, config.n_per_cluster)?;
    let xs = bundle.x.as_slice().to_vec();
    let y = bundle.y.real().expect("regression bundle").to_vec();
    // The black box: the same exact GP that produced the bundle's `g`.
    let (kernel, noise) = optimize_hypers(
        &bundle.x,
        &y,
        &RbfParams::new(1.0, &[1.0]),
        0.1,
        HyperFit::default(),
    )?;
    let model = MeanModel {
        gp: fit_exact(&bundle.x, &y, &kernel, noise)?,
    };
    let fit_config = FitConfig {
        seed,
        ..config.fit.clone()
    };
    let (state, _) = fit(&bundle, &fit_config)?;
    let (lo, hi) = config.grid;
    let n = config.grid_points.max(2);
    let grid: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect();
    let (g, exact_sd) = model.mean_and_sd(&grid)?;
    let sd = fmgp_sd(&state, &grid, &g)?;
    let mids = gap_midpoints();
    let mut gaps = [GapCheck {
        midpoint: 0.0,
        nearest_x: 0.0,
        sd_mid: 0.0,
        sd_nearest: 0.0,
    }; 2];
    for (k, &mid) in mids.iter().enumerate() {
        let nearest = xs
            .iter()
            .copied()
            .min_by(|a, b| (a - mid).abs().total_cmp(&(b - mid).abs()))
            .expect("non-empty clusters");
        let probe = [mid, nearest];
        let (gp, _) = model.mean_and_sd(&probe)?;
        let s = fmgp_sd(&state, &probe, &gp)?;
        gaps[k] = GapCheck {
            midpoint: mid,
            nearest_x: nearest,
            sd_mid: s[0],
            sd_nearest: s[1],
        };
    }
    Ok(Figure1 {
        seed,
        bundle,
        state,
        exact_mean: g.clone(),
        grid,
        g,
        fmgp_sd: sd,
        exact_sd,
        gaps,
    })
}

impl Figure1 {
    /// CSV text: a `#` line with seed and format version, the fixed
    /// header, then one row per grid point.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# seed={} version={}\n{FIGURE1_HEADER}\n", self.seed, FORMAT_VERSION);
        for i in 0..self.grid.len() {
            let (g, s) = (self.g[i], self.fmgp_sd[i]);
            let (m, e) = (self.exact_mean[i], self.exact_sd[i]);
            writeln!(
                out,
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                self.grid[i],
                g,
                g - 2.0 * s,
                g + 2.0 * s,
                m,
                m - 2.0 * e,
                m + 2.0 * e
            )
            .expect("string write");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout_and_mean_column() {
        let cfg = Figure1Config {
            grid_points: 11,
            fit: FitConfig {
                steps: 50,
                ..Figure1Config::default().fit
            },
            ..Figure1Config::default()
        };
        let f = figure1(1, &cfg).unwrap();
        let csv = f.to_csv();
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("# seed=1"));
        assert_eq!(lines.next().unwrap(), FIGURE1_HEADER);
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 11);
        for r in &rows {
            assert_eq!(r.len(), 7);
            assert!(r[2] <= r[1] && r[1] <= r[3]);
            assert_eq!(r[1], r[4]);
        }
        for (r, g) in rows.iter().zip(&f.g) {
            assert_eq!(r[1], *g);
        }
    }
}
