//! Command-line front end: `fit`, `predict`, `eval`, `figure1`,
//! `gradcheck` and `synth`.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical
//! failure, 4 failed verification.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::figure1::{figure1, Figure1Config};
use crate::fmgp::{class_probabilities, posterior, Mode, PosteriorPredictive};
use crate::gradcheck::{run_gradcheck, Fault, GRADCHECK_TOLERANCE};
use crate::io::container::FORMAT_VERSION;
use crate::io::csv::export_csv;
use crate::io::synth::{synth_blobs, synth_clusters, synth_gp_regression, BlobsSpec, GpRegressionSpec};
use crate::io::{load_bundle, predict_bundle, write_bundle, PredictionBundle, StateFile, Targets};
use crate::json::{canonical, float};
use crate::kernels::KernelInput;
use crate::metrics::{evaluate_classification, evaluate_regression, softmax_rows};
use crate::training::{fit, DataTerm, FitConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "fmgp", version, about = "Fixed-mean Gaussian processes for black-box predictors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a variational state to a bundle.
    Fit(FitArgs),
    /// Predict every row of a bundle.
    Predict(PredictArgs),
    /// Metrics on the test rows of a bundle.
    Eval(EvalArgs),
    /// Plot data for the cluster demo.
    Figure1(Figure1Args),
    /// Finite-difference check of every gradient.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic bundle.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Regression,
    Classification,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Regression => Mode::Regression,
            ModeArg::Classification => Mode::Classification,
        }
    }
}

/// Flags mirroring [`FitConfig`]; unset flags fall back to the config file
/// and then to the defaults.
#[derive(Args, Debug, Default, Clone)]
pub struct FitFlags {
    /// Key-value file (`key = value` lines, `#` comments).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub m_beta: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub s_train: Option<usize>,
    #[arg(long)]
    pub s_eval: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub train_inducing: Option<bool>,
    #[arg(long)]
    pub train_hypers: Option<bool>,
    #[arg(long)]
    pub use_qstar: Option<bool>,
    /// `log_expected` or `expected_log`.
    #[arg(long)]
    pub data_term: Option<String>,
    /// `features` or `embeddings`.
    #[arg(long)]
    pub kernel_input: Option<String>,
    #[arg(long)]
    pub init_amplitude: Option<f64>,
    #[arg(long)]
    pub init_length_scale: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// State file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Trace file; defaults to `<out>.trace.tsv`. Wall-clock times go to
    /// the same path with `.wall` appended.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub flags: FitFlags,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Monte Carlo samples for class probabilities (default: the state's
    /// `s_eval`).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Sampling seed (default: the state's seed).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub bundle: PathBuf,
    /// Out-of-distribution bundle; adds the entropy AUC.
    #[arg(long)]
    pub ood: Option<PathBuf>,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct Figure1Args {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub n_per_cluster: usize,
    #[arg(long, default_value_t = 241)]
    pub grid_points: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub m_beta: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 20)]
    pub count: u64,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Negate the KL adjoint to confirm that the check fails.
    #[arg(long, hide = true)]
    pub inject_kl_fault: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SynthKind {
    /// One-dimensional clusters with gaps.
    Clusters,
    /// Draws from a GP prior with gaps in the training inputs.
    Regression,
    /// Three Gaussian blobs with linear-model logits.
    Blobs,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points per cluster, total points, or points per class.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Shifted-blob bundle (blobs only).
    #[arg(long)]
    pub ood_out: Option<PathBuf>,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_CONFIG };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects a boolean, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` cannot parse `{v}`")))
}

fn parse_data_term(v: &str) -> Result<DataTerm> {
    match v {
        "log_expected" => Ok(DataTerm::LogExpected),
        "expected_log" => Ok(DataTerm::ExpectedLog),
        _ => Err(Error::Config(format!("unknown data term `{v}`"))),
    }
}

fn parse_kernel_input(v: &str) -> Result<KernelInput> {
    match v {
        "features" => Ok(KernelInput::Features),
        "embeddings" => Ok(KernelInput::Embeddings),
        _ => Err(Error::Config(format!("unknown kernel input `{v}`"))),
    }
}

/// Sets one [`FitConfig`] field by name. Dashes and underscores are
/// interchangeable.
pub fn set_config_key(c: &mut FitConfig, key: &str, v: &str) -> Result<()> {
    let k = key.replace('-', "_");
    match k.as_str() {
        "m_beta" => c.m_beta = parse_num(key, v)?,
        "batch_size" => c.batch_size = parse_num(key, v)?,
        "steps" => c.steps = parse_num(key, v)?,
        "lr" => c.lr = parse_num(key, v)?,
        "s_train" => c.s_train = parse_num(key, v)?,
        "s_eval" => c.s_eval = parse_num(key, v)?,
        "seed" => c.seed = parse_num(key, v)?,
        "mode" => c.mode = v.parse().map_err(|_| Error::Config(format!("unknown mode `{v}`")))?,
        "train_inducing" => c.train_inducing = parse_bool(key, v)?,
        "train_hypers" => c.train_hypers = parse_bool(key, v)?,
        "use_qstar" => c.use_qstar = parse_bool(key, v)?,
        "data_term" => c.data_term = parse_data_term(v)?,
        "kernel_input" => c.kernel_input = parse_kernel_input(v)?,
        "init_amplitude" => c.init_amplitude = Some(parse_num(key, v)?),
        "init_length_scale" => c.init_length_scale = Some(parse_num(key, v)?),
        _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
    }
    Ok(())
}

/// Applies `key = value` lines to `c`.
pub fn apply_config_text(c: &mut FitConfig, text: &str) -> Result<()> {
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {} lacks `=`", n + 1)))?;
        set_config_key(c, k.trim(), v.trim())?;
    }
    Ok(())
}

impl FitFlags {
    /// Defaults, then the config file, then explicit flags.
    pub fn resolve(&self) -> Result<FitConfig> {
        let mut c = FitConfig::default();
        if let Some(path) = &self.config {
            apply_config_text(&mut c, &fs::read_to_string(path)?)?;
        }
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f.clone() {
                    c.$f = v;
                }
            )*};
        }
        set!(m_beta, batch_size, steps, lr, s_train, s_eval, seed, train_inducing, train_hypers, use_qstar);
        if let Some(m) = self.mode {
            c.mode = m.into();
        }
        if let Some(v) = &self.data_term {
            c.data_term = parse_data_term(v)?;
        }
        if let Some(v) = &self.kernel_input {
            c.kernel_input = parse_kernel_input(v)?;
        }
        if self.init_amplitude.is_some() {
            c.init_amplitude = self.init_amplitude;
        }
        if self.init_length_scale.is_some() {
            c.init_length_scale = self.init_length_scale;
        }
        Ok(c)
    }

    fn mode_given(&self) -> Result<bool> {
        if self.mode.is_some() {
            return Ok(true);
        }
        match &self.config {
            Some(path) => Ok(fs::read_to_string(path)?.lines().any(|l| {
                let l = l.split('#').next().unwrap_or("");
                l.split_once('=').is_some_and(|(k, _)| k.trim() == "mode")
            })),
            None => Ok(false),
        }
    }
}

fn trace_header(seed: u64) -> String {
    format!("# seed={seed} version={FORMAT_VERSION}\n")
}

fn cmd_fit(a: &FitArgs) -> CliResult<String> {
    let bundle = load_bundle(&a.bundle)?;
    let mut config = a.flags.resolve()?;
    if a.flags.mode_given()? {
        if config.mode != bundle.mode {
            return Err(Error::Config(format!(
                "mode {} does not match the {} bundle",
                config.mode.as_str(),
                bundle.mode.as_str()
            ))
            .into());
        }
    } else {
        config.mode = bundle.mode;
    }
    config.validate()?;
    let (state, trace) = fit(&bundle, &config)?;
    let file = StateFile::new(state, config.clone());
    file.write(&a.out)?;
    let trace_path = a
        .trace
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, ".trace.tsv"));
    fs::write(&trace_path, trace_header(config.seed) + &trace.to_tsv())
        .map_err(Error::from)?;
    fs::write(
        with_suffix(&trace_path, ".wall"),
        trace_header(config.seed) + &trace.wall_clock_tsv(),
    )
    .map_err(Error::from)?;
    let last = trace.rows.last().expect("at least one step");
    Ok(format!(
        "fitted {} steps, final objective {:.6e}, state {}\n",
        trace.rows.len(),
        last.objective,
        file.digest()?
    ))
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_predict(a: &PredictArgs) -> CliResult<String> {
    let file = StateFile::read(&a.state)?;
    let bundle = load_bundle(&a.bundle)?;
    let samples = a.samples.unwrap_or(file.config.s_eval);
    let seed = a.seed.unwrap_or(file.config.seed);
    let p = predict_bundle(&file.state, &bundle, samples, seed)?;
    p.write(&a.out)?;
    Ok(format!("wrote {} predictions\n", p.len()))
}

fn eval_report(a: &EvalArgs) -> Result<Value> {
    let file = StateFile::read(&a.state)?;
    let full = load_bundle(&a.bundle)?;
    if full.mode != file.state.mode {
        return Err(Error::ModeMismatch(format!(
            "state is {} but bundle is {}",
            file.state.mode.as_str(),
            full.mode.as_str()
        )));
    }
    let test = full.subset(&full.test_indices());
    if test.is_empty() {
        return Err(Error::EmptyInput("evaluation rows"));
    }
    let samples = a.samples.unwrap_or(file.config.s_eval);
    let seed = a.seed.unwrap_or(file.config.seed);
    let started = Instant::now();
    let inputs = test.inputs(file.state.kernel_input)?;
    let post = posterior(&file.state, &inputs, &test.g)?;
    let mut metrics = Map::new();
    let mut baseline = Map::new();
    match (&post, &test.y) {
        (
            PosteriorPredictive::Regression {
                mean,
                variance,
                noise,
            },
            Targets::Real(y),
        ) => {
            let ev = evaluate_regression(y, mean, variance, *noise)?;
            metrics.insert("nll".into(), float(ev.nll));
            metrics.insert("crps".into(), float(ev.crps));
            metrics.insert("cqm".into(), float(ev.cqm));
            let s2 = residual_variance(&full)?;
            let b = evaluate_regression(y, mean, &vec![0.0; y.len()], s2)?;
            baseline.insert("noise".into(), float(s2));
            baseline.insert("nll".into(), float(b.nll));
            baseline.insert("crps".into(), float(b.crps));
            baseline.insert("cqm".into(), float(b.cqm));
        }
        (PosteriorPredictive::Classification { logits, cov }, Targets::Class(labels)) => {
            let probs = class_probabilities(logits, cov, samples, seed)?;
            let ood = match &a.ood {
                Some(path) => {
                    let o = load_bundle(path)?;
                    Some(predict_bundle(&file.state, &o, samples, seed)?)
                }
                None => None,
            };
            let ood_probs = ood.as_ref().map(|p| match &p.values {
                crate::io::PredictionValues::Classification { probs, .. } => probs.clone(),
                crate::io::PredictionValues::Regression { .. } => unreachable!("mode checked"),
            });
            let ev = evaluate_classification(labels, &probs, ood_probs.as_ref())?;
            metrics.insert("nll".into(), float(ev.nll));
            metrics.insert("nll_clamped".into(), json!(ev.nll_clamped));
            metrics.insert("ece".into(), float(ev.ece));
            metrics.insert("brier".into(), float(ev.brier));
            if let Some(auc) = ev.ood_auc {
                metrics.insert("ood_auc".into(), float(auc));
            }
            let raw = softmax_rows(logits);
            let raw_ood = match &a.ood {
                Some(path) => Some(softmax_rows(&load_bundle(path)?.g)),
                None => None,
            };
            let b = evaluate_classification(labels, &raw, raw_ood.as_ref())?;
            baseline.insert("nll".into(), float(b.nll));
            baseline.insert("ece".into(), float(b.ece));
            baseline.insert("brier".into(), float(b.brier));
            if let Some(auc) = b.ood_auc {
                baseline.insert("ood_auc".into(), float(auc));
            }
        }
        _ => return Err(Error::ModeMismatch("targets do not match the state".into())),
    }
    let predict_s = started.elapsed().as_secs_f64();
    Ok(json!({
        "version": FORMAT_VERSION,
        "seed": seed,
        "mode": file.state.mode.as_str(),
        "n_eval": test.len(),
        "samples": samples,
        "metrics": metrics,
        "baseline": baseline,
        "timings": { "predict_s": float(predict_s) },
    }))
}

/// Mean squared residual `y − g` over the training rows: the noise of a
/// baseline that reports `g` with one global variance.
pub fn residual_variance(bundle: &PredictionBundle) -> Result<f64> {
    let y = bundle
        .y
        .real()
        .ok_or_else(|| Error::ModeMismatch("residual variance needs real targets".into()))?;
    let rows = bundle.train_indices();
    if rows.is_empty() {
        return Err(Error::EmptyInput("training rows"));
    }
    Ok(rows
        .iter()
        .map(|&i| (y[i] - bundle.g[(i, 0)]).powi(2))
        .sum::<f64>()
        / rows.len() as f64)
}

fn cmd_eval(a: &EvalArgs) -> CliResult<String> {
    let text = canonical(&eval_report(a)?) + "\n";
    match &a.out {
        Some(p) => {
            fs::write(p, &text).map_err(Error::from)?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

fn cmd_figure1(a: &Figure1Args) -> CliResult<String> {
    let mut cfg = Figure1Config {
        n_per_cluster: a.n_per_cluster,
        grid_points: a.grid_points,
        ..Figure1Config::default()
    };
    if let Some(s) = a.steps {
        cfg.fit.steps = s;
    }
    if let Some(m) = a.m_beta {
        cfg.fit.m_beta = m;
    }
    cfg.fit.batch_size = 3 * a.n_per_cluster;
    let f = figure1(a.seed, &cfg)?;
    fs::write(&a.out, f.to_csv()).map_err(Error::from)?;
    let mut msg = String::new();
    for g in &f.gaps {
        msg.push_str(&format!(
            "gap at {:+.2}: sd {:.4e} vs {:.4e} at x = {:+.3} (ratio {:.3})\n",
            g.midpoint,
            g.sd_mid,
            g.sd_nearest,
            g.nearest_x,
            g.ratio()
        ));
    }
    Ok(msg)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<String> {
    let fault = if a.inject_kl_fault {
        Fault::FlipKlAdjoint
    } else {
        Fault::None
    };
    let mut text = String::new();
    let mut worst: Option<(String, f64)> = None;
    let mut failed = Vec::new();
    for seed in a.seed..a.seed + a.count.max(1) {
        let rep = run_gradcheck(seed, fault)?;
        text.push_str(&rep.to_text());
        let w = rep.worst();
        if worst.as_ref().is_none_or(|(_, e)| w.rel_err > *e) {
            worst = Some((format!("seed {seed} {}", w.name()), w.rel_err));
        }
        failed.extend(rep.failures().iter().map(|f| format!("seed {seed} {}", f.name())));
    }
    let (name, err) = worst.expect("at least one seed");
    text.push_str(&format!("worst\t{name}\t{err:.6e}\n"));
    if let Some(p) = &a.out {
        fs::write(p, &text).map_err(Error::from)?;
    }
    if failed.is_empty() {
        text.push_str("PASS\n");
        Ok(if a.out.is_some() {
            format!("PASS worst {name} {err:.3e}\n")
        } else {
            text
        })
    } else {
        Err(CliError {
            code: EXIT_VERIFICATION,
            message: format!(
                "gradient check failed in {} block(s); worst {name} relative error {err:.3e} (tolerance {GRADCHECK_TOLERANCE:e})",
                failed.len()
            ),
        })
    }
}

fn cmd_synth(a: &SynthArgs) -> CliResult<String> {
    let (bundle, ood) = match a.kind {
        SynthKind::Clusters => (synth_clusters(a.seed, a.n.unwrap_or(20))?, None),
        SynthKind::Regression => {
            let spec = GpRegressionSpec {
                n: a.n.unwrap_or(2000),
                ..GpRegressionSpec::default()
            };
            (synth_gp_regression(a.seed, &spec)?, None)
        }
        SynthKind::Blobs => {
            let spec = BlobsSpec {
                n_per_class: a.n.unwrap_or(200),
                ..BlobsSpec::default()
            };
            let d = synth_blobs(a.seed, &spec)?;
            (d.bundle, Some(d.ood))
        }
    };
    write_any(&bundle, &a.out)?;
    if let Some(p) = &a.ood_out {
        let o = ood.ok_or_else(|| Error::Config("--ood-out applies to blobs only".into()))?;
        write_any(&o, p)?;
    }
    Ok(format!("wrote {} rows, digest {}\n", bundle.len(), bundle.digest()))
}

/// Writes the container format, or CSV when the path ends in `.csv`.
fn write_any(b: &PredictionBundle, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        fs::write(path, export_csv(b)?)?;
        Ok(())
    } else {
        write_bundle(b, path)
    }
}

/// Runs one parsed command; the text is meant for stdout.
pub fn execute(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Figure1(a) => cmd_figure1(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code, printing output and errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# run\nm_beta = 12\nsteps=40\nuse-qstar = false\n").unwrap();
        let flags = FitFlags {
            config: Some(path),
            steps: Some(7),
            ..FitFlags::default()
        };
        let c = flags.resolve().unwrap();
        assert_eq!((c.m_beta, c.steps, c.use_qstar), (12, 7, false));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut c = FitConfig::default();
        assert!(matches!(
            apply_config_text(&mut c, "m_betta = 3"),
            Err(Error::Config(_))
        ));
        assert!(apply_config_text(&mut c, "steps").is_err());
        assert!(apply_config_text(&mut c, "lr = fast").is_err());
    }

    #[test]
    fn exit_codes_by_error_kind() {
        let e: CliError = Error::NotPositiveDefinite {
            size: 3,
            max_jitter: 1e-4,
        }
        .into();
        assert_eq!(e.code, EXIT_NUMERICAL);
        let e: CliError = Error::Config("x".into()).into();
        assert_eq!(e.code, EXIT_CONFIG);
    }
}
