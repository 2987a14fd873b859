//! Command-line front end: configuration, dataset tooling and metrics output.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use crate::comm::{Axis, DeviceGrid, Precision};
use crate::error::{Error, Result};
use crate::graph::{generate_sbm, generate_synthetic, load_dataset_dir, save_dataset, Dataset, SbmParams};
use crate::model::{
    distributed_step, finite_difference_check, sampling_matches_serial, serial_step, train, DropoutCtx,
    EpochRecord, ModelConfig, OptimizerKind, TrainConfig, Weights,
};
use crate::rng::{group_seed, stream};
use crate::sampling::{monte_carlo_aggregation, sample_vertices};

pub const THREADS_ENV: &str = "GRIDGNN_THREADS";

pub const CSV_HEADER: [&str; 14] = [
    "epoch",
    "step",
    "loss",
    "train_acc",
    "val_acc",
    "test_acc",
    "t_sample_ms",
    "t_fwd_ms",
    "t_bwd_ms",
    "t_dpsync_ms",
    "bytes_x",
    "bytes_y",
    "bytes_z",
    "bytes_d",
];

/// Columns that hold wall-clock measurements rather than computed values.
pub const TIMING_COLUMNS: [&str; 4] = ["t_sample_ms", "t_fwd_ms", "t_bwd_ms", "t_dpsync_ms"];

#[derive(Parser, Debug)]
#[command(name = "gridgnn", version, about = "Simulated 4D-parallel mini-batch GCN training")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write per-epoch metrics as CSV.
    Train(Flags),
    /// Check sharded sampling, sharded steps and gradients against serial oracles.
    Verify(Flags),
    /// Report empirical inclusion frequency and aggregation bias of the sampler.
    SampleStats(Flags),
    /// Write a synthetic dataset.
    Gen(Flags),
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Device grid as GdxGxxGyxGz, e.g. 2x2x2x1.
    #[arg(long)]
    grid: Option<String>,
    /// Vertices sampled per replica per step.
    #[arg(long)]
    batch_size: Option<String>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<String>,
    /// Seed for data generation, initialisation, sampling and dropout.
    #[arg(long)]
    seed: Option<String>,
    /// fp32 or bf16comm.
    #[arg(long)]
    precision: Option<String>,
    /// Build the next batch on a helper thread while the current step runs.
    #[arg(long)]
    prefetch: bool,
    /// Metrics CSV (train, sample-stats) or dataset directory (gen).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory to load instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Graph convolution layers.
    #[arg(long)]
    layers: Option<String>,
    /// Hidden width.
    #[arg(long)]
    d_h: Option<String>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<String>,
    /// Dropout rate in [0, 1).
    #[arg(long)]
    dropout: Option<String>,
    /// Vertices of the generated graph.
    #[arg(long)]
    nodes: Option<String>,
    /// Classes of the generated graph.
    #[arg(long)]
    classes: Option<String>,
    /// Feature width of the generated graph.
    #[arg(long)]
    d_in: Option<String>,
    /// Batches drawn by sample-stats.
    #[arg(long)]
    trials: Option<String>,
    /// Test hook for verify: add this value to one sharded gradient entry.
    #[arg(long)]
    perturb: Option<String>,
}

impl Flags {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let mut put = |k: &'static str, x: &Option<String>| {
            if let Some(x) = x {
                v.push((k, x.clone()));
            }
        };
        put("grid", &self.grid);
        put("batch_size", &self.batch_size);
        put("epochs", &self.epochs);
        put("seed", &self.seed);
        put("precision", &self.precision);
        put("layers", &self.layers);
        put("d_h", &self.d_h);
        put("lr", &self.lr);
        put("dropout", &self.dropout);
        put("nodes", &self.nodes);
        put("classes", &self.classes);
        put("d_in", &self.d_in);
        put("trials", &self.trials);
        put("perturb", &self.perturb);
        if self.prefetch {
            v.push(("prefetch", "true".into()));
        }
        if let Some(p) = &self.out {
            v.push(("out", p.display().to_string()));
        }
        if let Some(p) = &self.data {
            v.push(("data", p.display().to_string()));
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    /// Random graph, labels by degree quantile.
    Random,
    /// Class-homophilous graph with class-dependent features.
    Sbm,
}

/// Everything a command needs, after merging file and flags.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub grid: DeviceGrid,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub prefetch: bool,
    pub layers: usize,
    pub d_h: usize,
    pub lr: f64,
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    pub rmsnorm: bool,
    pub residual: bool,
    pub data: Option<PathBuf>,
    pub generator: Generator,
    pub nodes: usize,
    pub classes: usize,
    pub d_in: usize,
    pub avg_degree: f64,
    pub homophily: f64,
    pub signal: f64,
    pub trials: u64,
    pub perturb: f64,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: DeviceGrid::single(),
            batch_size: 256,
            epochs: 5,
            seed: 0,
            precision: Precision::Fp32,
            prefetch: false,
            layers: 3,
            d_h: 64,
            lr: 1e-3,
            dropout: 0.0,
            optimizer: OptimizerKind::Adam,
            rmsnorm: true,
            residual: true,
            data: None,
            generator: Generator::Random,
            nodes: 1024,
            classes: 32,
            d_in: 128,
            avg_degree: 8.0,
            homophily: 0.8,
            signal: 1.0,
            trials: 10_000,
            perturb: 0.0,
            out: None,
            threads: None,
        }
    }
}

/// Parse `GdxGxxGyxGz`.
pub fn parse_grid(s: &str) -> Result<DeviceGrid> {
    let dims: Vec<usize> = s
        .trim()
        .split('x')
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::input(format!("grid `{s}` is not of the form GdxGxxGyxGz")))?;
    match dims[..] {
        [d, x, y, z] => DeviceGrid::new(d, x, y, z),
        _ => Err(Error::input(format!("grid `{s}` needs four dimensions"))),
    }
}

pub fn parse_precision(s: &str) -> Result<Precision> {
    match s.trim() {
        "fp32" => Ok(Precision::Fp32),
        "bf16comm" => Ok(Precision::Bf16),
        _ => Err(Error::input(format!("precision `{s}` is not fp32 or bf16comm"))),
    }
}

/// Read a flat `key = value` file. `#` starts a comment; keys may use `-` or `_`.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::input(format!("config line {}: expected `key = value`", i + 1)));
        };
        let key = k.trim().replace('-', "_");
        if key.is_empty() {
            return Err(Error::input(format!("config line {}: empty key", i + 1)));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

fn num<X: std::str::FromStr>(key: &str, v: &str) -> Result<X> {
    v.parse().map_err(|_| Error::input(format!("`{key}` has invalid value `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::input(format!("`{key}` has invalid value `{v}`"))),
    }
}

impl RunConfig {
    /// Apply `key = value` settings on top of `self`. Unknown keys are errors.
    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in map {
            let v = v.as_str();
            match k.as_str() {
                "grid" => self.grid = parse_grid(v)?,
                "batch_size" => self.batch_size = num(k, v)?,
                "epochs" => self.epochs = num(k, v)?,
                "seed" => self.seed = num(k, v)?,
                "precision" => self.precision = parse_precision(v)?,
                "prefetch" => self.prefetch = boolean(k, v)?,
                "layers" => self.layers = num(k, v)?,
                "d_h" => self.d_h = num(k, v)?,
                "lr" => self.lr = num(k, v)?,
                "dropout" => self.dropout = num(k, v)?,
                "optimizer" => {
                    self.optimizer = match v {
                        "adam" => OptimizerKind::Adam,
                        "sgd" => OptimizerKind::Sgd,
                        _ => return Err(Error::input(format!("optimizer `{v}` is not adam or sgd"))),
                    }
                }
                "rmsnorm" => self.rmsnorm = boolean(k, v)?,
                "residual" => self.residual = boolean(k, v)?,
                "data" => self.data = Some(PathBuf::from(v)),
                "generator" => {
                    self.generator = match v {
                        "random" => Generator::Random,
                        "sbm" => Generator::Sbm,
                        _ => return Err(Error::input(format!("generator `{v}` is not random or sbm"))),
                    }
                }
                "nodes" => self.nodes = num(k, v)?,
                "classes" => self.classes = num(k, v)?,
                "d_in" => self.d_in = num(k, v)?,
                "avg_degree" => self.avg_degree = num(k, v)?,
                "homophily" => self.homophily = num(k, v)?,
                "signal" => self.signal = num(k, v)?,
                "trials" => self.trials = num(k, v)?,
                "perturb" => self.perturb = num(k, v)?,
                "out" => self.out = Some(PathBuf::from(v)),
                _ => return Err(Error::input(format!("unknown config key `{k}`"))),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::input(format!("batch size {} must be at least 2", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::input("epochs must be at least 1"));
        }
        if let Some(d) = &self.data {
            if !d.is_dir() {
                return Err(Error::input(format!("dataset directory {} does not exist", d.display())));
            }
        }
        self.model(self.d_in, self.classes).validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::input(format!("learning rate {} must be positive", self.lr)));
        }
        if self.threads == Some(0) {
            return Err(Error::input(format!("{THREADS_ENV} must be at least 1")));
        }
        Ok(())
    }

    pub fn model(&self, d_in: usize, d_out: usize) -> ModelConfig {
        let mut m = ModelConfig::new(self.layers, d_in, self.d_h, d_out).with_dropout(self.dropout);
        m.rmsnorm = self.rmsnorm;
        m.residual = self.residual;
        m
    }

    pub fn train_config(&self, ds: &Dataset<f32>) -> TrainConfig {
        let mut tc = TrainConfig::new(self.model(ds.d_in(), ds.n_classes), self.grid, self.batch_size);
        tc.epochs = self.epochs;
        tc.seed = self.seed;
        tc.precision = self.precision;
        tc.prefetch = self.prefetch;
        tc.optimizer = self.optimizer;
        tc.lr = self.lr;
        tc.threads = self.threads;
        tc
    }

    /// Load `data` or generate from the synthetic parameters.
    pub fn dataset(&self) -> Result<Dataset<f32>> {
        match &self.data {
            Some(dir) => load_dataset_dir(dir),
            None => self.generate(),
        }
    }

    pub fn generate(&self) -> Result<Dataset<f32>> {
        match self.generator {
            Generator::Random => generate_synthetic(self.nodes, self.avg_degree, self.d_in, self.classes, self.seed),
            Generator::Sbm => generate_sbm(&SbmParams {
                n: self.nodes,
                n_classes: self.classes,
                avg_degree: self.avg_degree,
                homophily: self.homophily,
                d_in: self.d_in,
                signal: self.signal,
                seed: self.seed,
            }),
        }
    }
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => num::<usize>(THREADS_ENV, v.trim()).map(Some),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(_) => Err(Error::input(format!("{THREADS_ENV} is not valid unicode"))),
    }
}

fn resolve(flags: &Flags) -> Result<RunConfig> {
    let mut cfg = RunConfig {
        threads: threads_from_env()?,
        ..Default::default()
    };
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply(&parse_config_text(&text)?)?;
    }
    let over: BTreeMap<String, String> = flags.overrides().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    cfg.apply(&over)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Render epoch records as CSV text.
pub fn metrics_csv(records: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::input(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            r.loss.to_string(),
            r.acc.train.to_string(),
            r.acc.val.to_string(),
            r.acc.test.to_string(),
            format!("{:.3}", r.t_sample_ms),
            format!("{:.3}", r.t_fwd_ms),
            format!("{:.3}", r.t_bwd_ms),
            format!("{:.3}", r.t_dpsync_ms),
            r.bytes[Axis::X.index()].to_string(),
            r.bytes[Axis::Y.index()].to_string(),
            r.bytes[Axis::Z.index()].to_string(),
            r.bytes[Axis::D.index()].to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::input(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("ascii"))
}

/// Write the whole file or nothing.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.partial", name.to_string_lossy()));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let ds = cfg.dataset()?;
    let tc = cfg.train_config(&ds);
    let report = train(&ds, &tc)?;
    let path = cfg.out.clone().unwrap_or_else(|| PathBuf::from("metrics.csv"));
    write_atomic(&path, &metrics_csv(&report.epochs)?)?;
    let acc = report.final_accuracy();
    let loss = report.epochs.last().map_or(f64::NAN, |e| e.loss);
    let _ = writeln!(out, "grid {} steps {} final loss {loss:.6}", tc.grid, report.step_losses.len());
    let _ = writeln!(out, "accuracy train {:.4} val {:.4} test {:.4}", acc.train, acc.val, acc.test);
    for axis in Axis::ALL {
        let total: u64 = report.epochs.iter().map(|e| e.bytes[axis.index()]).sum();
        let _ = writeln!(out, "training bytes {axis:?} {total}");
    }
    let _ = writeln!(out, "metrics written to {}", path.display());
    Ok(0)
}

fn check_line(out: &mut dyn Write, name: &str, ok: bool, detail: String) -> bool {
    let _ = writeln!(out, "{} {name}: {detail}", if ok { "ok  " } else { "FAIL" });
    ok
}

fn cmd_verify(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let ds = cfg.dataset()?.cast::<f64>();
    let b = cfg.batch_size.min(ds.n());
    let mut all = true;

    let mut bad = Vec::new();
    let mut bytes = 0;
    for k in 0..4u64 {
        let r = sampling_matches_serial(&ds, cfg.grid, cfg.layers, b, cfg.seed.wrapping_add(k), k)?;
        bytes += r.sampling_bytes + r.sampling_calls;
        bad.extend(r.mismatches);
    }
    all &= check_line(
        out,
        "sharded sampling",
        bad.is_empty() && bytes == 0,
        format!("{} mismatched blocks, {bytes} sampling bytes", bad.len()),
    );

    let model = cfg.model(ds.d_in(), ds.n_classes);
    let w = Weights::<f64>::init(&model, cfg.seed);
    let mut got = distributed_step(&ds, &model, cfg.grid, &w, b, cfg.seed, 1, Precision::Fp32)?;
    if cfg.perturb != 0.0 {
        let v = got.local_grads[0].w_out.get(0, 0);
        got.local_grads[0].w_out.set(0, 0, v + cfg.perturb);
    }
    let mut worst: f64 = 0.0;
    for d in 0..cfg.grid.dims()[0] {
        let sample = sample_vertices(ds.n(), b, group_seed(cfg.seed, d), 1)?;
        let dropout = (model.dropout > 0.0).then_some(DropoutCtx {
            seed: cfg.seed,
            dp_group: d,
            step: 1,
        });
        let want = serial_step(&ds, &model, &w, sample, dropout)?;
        worst = worst
            .max((got.losses[d] - want.loss).abs())
            .max(got.logits[d].max_abs_diff(&want.logits) / want.logits.max_abs().max(1.0))
            .max(got.local_grads[d].max_rel_diff(&want.grads, 1.0));
    }
    all &= check_line(out, "sharded step", worst < 1e-10, format!("max deviation {worst:.3e} (limit 1e-10)"));

    let fd_ds = generate_sbm(&SbmParams {
        n: 16,
        n_classes: 3,
        avg_degree: 4.0,
        homophily: 0.8,
        d_in: 4,
        signal: 1.0,
        seed: cfg.seed,
    })?
    .cast::<f64>();
    let fd_model = ModelConfig::new(2, 4, 8, 3);
    let fd_w = Weights::<f64>::init(&fd_model, cfg.seed);
    let sample = sample_vertices(16, 12, cfg.seed, 0)?;
    let fd = finite_difference_check(&fd_ds, &fd_model, &fd_w, sample, None, 1e-6)?;
    all &= check_line(
        out,
        "gradient check",
        fd.max_rel < 1e-6,
        format!("max relative error {:.3e} over {} parameters (limit 1e-6)", fd.max_rel, fd.checked),
    );
    let _ = writeln!(out, "{}", if all { "all checks passed" } else { "verification FAILED" });
    Ok(if all { 0 } else { 1 })
}

fn cmd_sample_stats(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let ds = cfg.dataset()?.cast::<f64>();
    let (n, b) = (ds.n(), cfg.batch_size);
    if b > n {
        return Err(Error::input(format!("batch size {b} exceeds {n} vertices")));
    }
    // Positive per-vertex signal so relative bias is well defined.
    let mut rng = stream(cfg.seed ^ 0x5eed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let rep = monte_carlo_aggregation(&ds.adjacency, &x, b, cfg.trials, cfg.seed)?;
    let p = b as f64 / n as f64;
    let freq = rep.inclusion_frequency();
    let freq_dev = freq.iter().map(|f| (f - p).abs() / p).fold(0.0, f64::max);
    let bias = rep.relative_bias();
    let _ = writeln!(out, "vertices {n} batch {b} trials {}", cfg.trials);
    let _ = writeln!(out, "inclusion probability {p:.6}, max relative deviation {freq_dev:.4e}");
    let _ = writeln!(out, "aggregation max relative bias {:.4e}", rep.max_relative_bias());
    if let Some(path) = &cfg.out {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::input(format!("csv: {e}"));
        w.write_record(["vertex", "inclusion_freq", "estimate", "exact", "rel_bias"]).map_err(csv_err)?;
        for v in 0..n {
            w.write_record([
                v.to_string(),
                freq[v].to_string(),
                rep.estimate[v].to_string(),
                rep.exact[v].to_string(),
                bias[v].to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::input(format!("csv: {e}")))?;
        write_atomic(path, &String::from_utf8(bytes).expect("ascii"))?;
    }
    Ok(0)
}

fn cmd_gen(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let ds = cfg.generate()?;
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("dataset"));
    save_dataset(&dir, &ds)?;
    let _ = writeln!(
        out,
        "wrote {} vertices, {} edges, {} features, {} classes to {}",
        ds.n(),
        ds.edges().len(),
        ds.d_in(),
        ds.n_classes,
        dir.display()
    );
    Ok(0)
}

/// Run the CLI on `args` (including the program name) and return the exit code.
pub fn run<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    type CmdFn = fn(&RunConfig, &mut dyn Write) -> Result<i32>;
    let (flags, f): (&Flags, CmdFn) = match &cli.cmd {
        Command::Train(fl) => (fl, cmd_train),
        Command::Verify(fl) => (fl, cmd_verify),
        Command::SampleStats(fl) => (fl, cmd_sample_stats),
        Command::Gen(fl) => (fl, cmd_gen),
    };
    match resolve(flags).and_then(|cfg| f(&cfg, out)) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}
