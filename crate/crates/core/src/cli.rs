//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adats::{self, AdaTsModel, TrainConfig};
use crate::analysis::{self, Partition};
use crate::dataset::{self, read_dataset, write_dataset, CalibrationDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, BinScheme, ScoreKind, Temperatures, DEFAULT_BINS};
use crate::tempscale::{self, FitObjective, TemperatureGrid, VanillaScaler};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "adats",
    version,
    about = "Post-hoc calibration with constant and sample-adaptive temperatures"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a single temperature by grid search.
    FitVanilla(FitVanillaArgs),
    /// Train a sample-adaptive temperature model.
    FitAdats(FitAdatsArgs),
    /// Compare raw, vanilla and adaptive calibration on a dataset.
    Evaluate(EvaluateArgs),
    /// Write reliability, contribution, rejection, temperature and latent exports.
    Report(ReportArgs),
    /// Evaluate every entry of a corruption manifest.
    Sweep(SweepArgs),
    /// Run the gradient and invariance verification suites.
    Selfcheck(SelfcheckArgs),
    /// Generate a synthetic dataset with known miscalibration.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Ece,
    Nll,
}

impl From<ObjectiveArg> for FitObjective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Ece => FitObjective::Ece,
            ObjectiveArg::Nll => FitObjective::Nll,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScoreArg {
    Confidence,
    Entropy,
    Ds,
}

impl From<ScoreArg> for ScoreKind {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Confidence => ScoreKind::Confidence,
            ScoreArg::Entropy => ScoreKind::Entropy,
            ScoreArg::Ds => ScoreKind::DempsterShafer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    Class,
    Correctness,
}

impl From<PartitionArg> for Partition {
    fn from(p: PartitionArg) -> Self {
        match p {
            PartitionArg::Class => Partition::ByClass,
            PartitionArg::Correctness => Partition::ByCorrectness,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Single,
    TwoCluster,
}

#[derive(Debug, Args)]
pub struct FitVanillaArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "ece")]
    pub objective: ObjectiveArg,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value = "0.05:10:0.005")]
    pub grid: String,
}

#[derive(Debug, Args)]
pub struct FitAdatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out set for the before/after ECE in the training trace.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Writes per-epoch statistics as JSON.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 16)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = adats::DEFAULT_TEMP_FLOOR)]
    pub temp_floor: f64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Vanilla or adaptive model JSON; may be repeated.
    #[arg(long)]
    pub model: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Writes the full results as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Vanilla or adaptive model JSON; raw logits when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, value_enum, default_value = "confidence")]
    pub score: ScoreArg,
    #[arg(long, value_enum, default_value = "correctness")]
    pub partition: PartitionArg,
    /// Class pair for the interpolation trace, as `i,j`.
    #[arg(long, default_value = "0,1")]
    pub classes: String,
    #[arg(long, default_value_t = 21)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub model: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Also emit rows for the clean baseline (corruption `none`, severity 0).
    #[arg(long)]
    pub include_baseline: bool,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "single")]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 20000)]
    pub n: usize,
    /// Logit inflation of the first (or only) cluster.
    #[arg(long, default_value_t = 2.0)]
    pub c1: f64,
    #[arg(long, default_value_t = 3.0)]
    pub c2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// A fitted scaler of either kind.
#[derive(Clone, Debug)]
pub enum Scaler {
    Vanilla(VanillaScaler),
    Adaptive(AdaTsModel),
}

impl Scaler {
    pub fn method_name(&self) -> &'static str {
        match self {
            Scaler::Vanilla(_) => "vanilla",
            Scaler::Adaptive(_) => "adats",
        }
    }

    /// Per-sample temperatures on `d`.
    pub fn temperatures(&self, d: &CalibrationDataset) -> Result<Vec<f64>> {
        match self {
            Scaler::Vanilla(v) => Ok(vec![v.temperature; d.n()]),
            Scaler::Adaptive(m) => adats::calibrate(m, d).map(|(t, _)| t),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Scaler::Vanilla(_) => None,
            Scaler::Adaptive(m) => Some(m.metadata.seed),
        }
    }
}

/// Loads a model JSON, dispatching on its `kind` field.
pub fn load_scaler(path: &Path) -> Result<Scaler> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("kind").and_then(|k| k.as_str()) {
        Some("vanilla") => Ok(Scaler::Vanilla(VanillaScaler::from_json(&text)?)),
        Some("adats") => Ok(Scaler::Adaptive(AdaTsModel::from_json(&text)?)),
        other => Err(Error::Format(format!(
            "{}: unknown model kind {other:?}",
            path.display()
        ))),
    }
}

/// Every reported metric for one method on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub accuracy: f64,
    pub ece: f64,
    pub ada_ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub aurra_confidence: f64,
    pub aurra_entropy: f64,
    pub aurra_ds: f64,
    pub mean_temperature: f64,
}

impl MethodMetrics {
    pub const NAMES: [&'static str; 9] = [
        "accuracy",
        "ece",
        "ada_ece",
        "nll",
        "brier",
        "aurra_confidence",
        "aurra_entropy",
        "aurra_ds",
        "mean_temperature",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.accuracy,
            self.ece,
            self.ada_ece,
            self.nll,
            self.brier,
            self.aurra_confidence,
            self.aurra_entropy,
            self.aurra_ds,
            self.mean_temperature,
        ]
    }
}

pub fn evaluate_method<'a>(
    method: &str,
    d: &CalibrationDataset,
    temps: impl Into<Temperatures<'a>>,
    bins: usize,
) -> Result<MethodMetrics> {
    let temps = temps.into();
    temps.validate(d.n())?;
    let aurra = |k| metrics::rejection_curve(d, temps, k).map(|c| c.aurra);
    let mean_temperature = match temps {
        Temperatures::Constant(t) => t,
        Temperatures::PerSample(ts) => ts.iter().sum::<f64>() / ts.len() as f64,
    };
    Ok(MethodMetrics {
        method: method.into(),
        accuracy: metrics::accuracy(d),
        ece: metrics::ece(d, temps, bins)?,
        ada_ece: metrics::ada_ece(d, temps, bins)?,
        nll: metrics::nll(d, temps)?,
        brier: metrics::brier(d, temps)?,
        aurra_confidence: aurra(ScoreKind::Confidence)?,
        aurra_entropy: aurra(ScoreKind::Entropy)?,
        aurra_ds: aurra(ScoreKind::DempsterShafer)?,
        mean_temperature,
    })
}

/// Raw metrics followed by one entry per scaler, in order.
pub fn evaluate_all(
    d: &CalibrationDataset,
    scalers: &[Scaler],
    bins: usize,
) -> Result<Vec<MethodMetrics>> {
    let mut out = vec![evaluate_method("raw", d, 1.0, bins)?];
    for s in scalers {
        let temps = s.temperatures(d)?;
        out.push(evaluate_method(s.method_name(), d, temps.as_slice(), bins)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub corruption_name: String,
    pub severity: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub entries: Vec<ManifestEntry>,
    pub baseline: PathBuf,
}

impl SweepManifest {
    /// Parses and validates a manifest; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut m: SweepManifest = serde_json::from_str(text)?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut m.baseline);
        for e in &mut m.entries {
            resolve(&mut e.path);
            if e.corruption_name.trim().is_empty() {
                return Err(Error::Format(
                    "manifest entry has an empty corruption name".into(),
                ));
            }
            if !(1..=5).contains(&e.severity) {
                return Err(Error::Format(format!(
                    "severity {} of {} outside 1..=5",
                    e.severity, e.corruption_name
                )));
            }
        }
        for p in std::iter::once(&m.baseline).chain(m.entries.iter().map(|e| &e.path)) {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "manifest path does not exist",
                    ),
                ));
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub corruption: String,
    pub severity: u8,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

/// Long-format rows in manifest order; entries are evaluated in parallel.
pub fn run_sweep(
    manifest: &SweepManifest,
    scalers: &[Scaler],
    bins: usize,
    include_baseline: bool,
) -> Result<Vec<SweepRow>> {
    let mut jobs: Vec<(String, u8, &Path)> = Vec::new();
    if include_baseline {
        jobs.push(("none".into(), 0, &manifest.baseline));
    }
    jobs.extend(
        manifest
            .entries
            .iter()
            .map(|e| (e.corruption_name.clone(), e.severity, e.path.as_path())),
    );
    let results: Vec<Vec<SweepRow>> = jobs
        .par_iter()
        .map(|(name, severity, path)| {
            let d = read_dataset(path)?;
            let mut rows = Vec::new();
            for m in evaluate_all(&d, scalers, bins)? {
                for (metric, value) in MethodMetrics::NAMES.iter().zip(m.values()) {
                    rows.push(SweepRow {
                        corruption: name.clone(),
                        severity: *severity,
                        method: m.method.clone(),
                        metric: (*metric).into(),
                        value,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().flatten().collect())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) => EXIT_USAGE,
        Error::NonFiniteLoss { .. } => EXIT_NUMERICAL,
        Error::Io { .. }
        | Error::Format(_)
        | Error::Length { .. }
        | Error::SampleValidation { .. }
        | Error::DimensionMismatch { .. }
        | Error::VersionMismatch { .. }
        | Error::Json(_)
        | Error::Csv(_) => EXIT_DATA,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::FitVanilla(a) => cmd_fit_vanilla(a, out),
        Command::FitAdats(a) => cmd_fit_adats(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Report(a) => cmd_report(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Selfcheck(a) => cmd_selfcheck(a, out),
        Command::Synth(a) => cmd_synth(a, out),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn print(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_fit_vanilla(a: FitVanillaArgs, out: &mut dyn Write) -> Result<i32> {
    let grid: TemperatureGrid = a.grid.parse()?;
    let d = read_dataset(&a.data)?;
    let scaler = tempscale::fit_vanilla(&d, a.objective.into(), grid, a.bins)?;
    fs::write(&a.out, scaler.to_json()? + "\n").map_err(io_err(&a.out))?;
    print(
        out,
        format_args!(
            "temperature={} objective={} achieved={:.6}",
            scaler.temperature,
            a.objective.to_possible_value().expect("not skipped").get_name(),
            scaler.fit.achieved_objective
        ),
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_fit_adats(a: FitAdatsArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        latent_dim: a.latent_dim,
        temp_floor: a.temp_floor,
        bins: a.bins,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let d = read_dataset(&a.data)?;
    let val = a.validation.as_deref().map(read_dataset).transpose()?;
    let (model, report) = adats::train_with_validation(&d, val.as_ref(), &cfg)?;
    adats::save_model(&model, &a.out)?;
    if let Some(p) = &a.trace {
        write_json(
            p,
            &json!({ "metadata": { "seed": cfg.seed, "config": cfg, "config_hash": cfg.fingerprint() }, "report": report }),
        )?;
    }
    let last = report.epochs.last().expect("at least one epoch");
    print(
        out,
        format_args!(
            "seed={} epochs={} steps={} elbo={:.6} log_cat={:.6} objective={:.6} mean_temperature={:.6}",
            cfg.seed,
            cfg.epochs,
            report.steps,
            last.mean_elbo,
            last.mean_log_cat,
            cfg.elbo_weight * last.mean_elbo + cfg.ce_weight * last.mean_log_cat,
            last.mean_temperature
        ),
    )?;
    print(
        out,
        format_args!(
            "ece_{}: before={:.6} after={:.6}",
            report.validation_source, report.validation_ece_before, report.validation_ece_after
        ),
    )?;
    Ok(EXIT_OK)
}

/// Fixed-width table with one column per method.
pub fn format_table(results: &[MethodMetrics]) -> String {
    let mut s = format!("{:<18}", "metric");
    for r in results {
        s.push_str(&format!("{:>12}", r.method));
    }
    s.push('\n');
    for (i, name) in MethodMetrics::NAMES.iter().enumerate() {
        s.push_str(&format!("{name:<18}"));
        for r in results {
            s.push_str(&format!("{:>12.6}", r.values()[i]));
        }
        s.push('\n');
    }
    s
}

fn load_scalers(paths: &[PathBuf]) -> Result<Vec<Scaler>> {
    paths.iter().map(|p| load_scaler(p)).collect()
}

fn scaler_seeds(scalers: &[Scaler]) -> Vec<Option<u64>> {
    scalers.iter().map(Scaler::seed).collect()
}

pub fn cmd_evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<i32> {
    let d = read_dataset(&a.data)?;
    let scalers = load_scalers(&a.model)?;
    let results = evaluate_all(&d, &scalers, a.bins)?;
    write!(out, "{}", format_table(&results)).map_err(|e| Error::io("<stdout>", e))?;
    if let Some(p) = &a.out {
        write_json(
            p,
            &json!({
                "metadata": { "data": a.data, "models": a.model, "model_seeds": scaler_seeds(&scalers), "bins": a.bins },
                "results": results,
            }),
        )?;
    }
    Ok(EXIT_OK)
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [i, j] => match (i.parse(), j.parse()) {
            (Ok(i), Ok(j)) => Ok((i, j)),
            _ => Err(Error::invalid(format!("bad class pair {s:?}"))),
        },
        _ => Err(Error::invalid(format!("class pair must be i,j, got {s:?}"))),
    }
}

pub fn cmd_report(a: ReportArgs, out: &mut dyn Write) -> Result<i32> {
    let (ci, cj) = parse_pair(&a.classes)?;
    let d = read_dataset(&a.data)?;
    let scaler = a.model.as_deref().map(load_scaler).transpose()?;
    let temps = match &scaler {
        Some(s) => s.temperatures(&d)?,
        None => vec![1.0; d.n()],
    };
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let score: ScoreKind = a.score.into();

    let ew = metrics::reliability(&d, temps.as_slice(), a.bins, BinScheme::EqualWidth)?;
    let em = metrics::reliability(&d, temps.as_slice(), a.bins, BinScheme::EqualMass)?;
    ew.write_csv(create(&a.out.join("reliability_equal_width.csv"))?)?;
    em.write_csv(create(&a.out.join("reliability_equal_mass.csv"))?)?;
    let contrib = metrics::contribution_histogram(&d, temps.as_slice(), a.bins)?;
    contrib.write_csv(create(&a.out.join("contribution.csv"))?)?;
    let curve = metrics::rejection_curve(&d, temps.as_slice(), score)?;
    curve.write_csv(create(
        &a.out.join(format!("rejection_{}.csv", score.short_name())),
    )?)?;
    let hist = analysis::temperature_histogram_from(&temps, &d, a.partition.into())?;
    hist.write_csv(create(&a.out.join("temperatures.csv"))?)?;

    let mut interpolation = None;
    if let Some(Scaler::Adaptive(m)) = &scaler {
        let tr = analysis::class_mean_interpolation(m, &d, ci, cj, a.steps)?;
        tr.write_csv(create(&a.out.join("interpolation.csv"))?)?;
        interpolation = Some(tr);
        analysis::export_latents(m, &d, a.bins, a.out.join("latents.csv"))?;
    }

    let method = scaler.as_ref().map_or("raw", Scaler::method_name);
    write_json(
        &a.out.join("report.json"),
        &json!({
            "metadata": {
                "data": a.data,
                "model": a.model,
                "method": method,
                "seed": scaler.as_ref().and_then(Scaler::seed),
                "bins": a.bins,
            },
            "ece": ew.weighted_gap(),
            "ada_ece": em.weighted_gap(),
            "reliability_equal_width": ew,
            "reliability_equal_mass": em,
            "contribution_histogram": contrib.histogram(20),
            "rejection": curve,
            "temperature_histogram": hist,
            "interpolation": interpolation,
        }),
    )?;
    print(
        out,
        format_args!(
            "method={method} ece={:.6} ada_ece={:.6} aurra_{}={:.6} -> {}",
            ew.weighted_gap(),
            em.weighted_gap(),
            score.short_name(),
            curve.aurra,
            a.out.display()
        ),
    )?;
    for g in &hist.groups {
        print(
            out,
            format_args!(
                "temperature[{}]: n={} mean={:.6} std={:.6}",
                g.name,
                g.values.len(),
                g.mean,
                g.std
            ),
        )?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_sweep(a: SweepArgs, out: &mut dyn Write) -> Result<i32> {
    let manifest = SweepManifest::load(&a.manifest)?;
    let scalers = load_scalers(&a.model)?;
    let rows = run_sweep(&manifest, &scalers, a.bins, a.include_baseline)?;
    let mut w = csv::Writer::from_writer(create(&a.out)?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(&a.out))?;
    print(
        out,
        format_args!("rows={} -> {}", rows.len(), a.out.display()),
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_selfcheck(a: SelfcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let report = analysis::selfcheck(a.seed)?;
    for c in &report.checks {
        print(
            out,
            format_args!(
                "{} {:<28} n={:<7} max_error={:.3e} tol={:.0e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.instances,
                c.max_error,
                c.tolerance
            ),
        )?;
    }
    print(
        out,
        format_args!("seed={} seconds={:.2}", report.seed, report.seconds),
    )?;
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(if report.passed() {
        EXIT_OK
    } else {
        EXIT_NUMERICAL
    })
}

pub fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = match a.kind {
        SynthKind::Single => SyntheticSpec::single_cluster(a.n, a.c1),
        SynthKind::TwoCluster => SyntheticSpec::two_cluster(a.n, a.c1, a.c2),
    };
    let d = dataset::generate_synthetic(&spec, a.seed)?;
    write_dataset(&d, &a.out)?;
    print(
        out,
        format_args!(
            "seed={} n={} d={} k={} -> {}",
            a.seed,
            d.n(),
            d.d(),
            d.k(),
            a.out.display()
        ),
    )?;
    Ok(EXIT_OK)
}
