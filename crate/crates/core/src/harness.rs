//! Benchmark harness: experiment configuration, seeded runs, padding
//! comparisons, sweeps and their CSV/JSON reports.
//!
//! Times reported here measure the CPU execution of the decomposition and
//! are labeled `sim_ms` in human-readable output.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decompose::{modeled_utilization, partition, DecompositionKind};
use crate::error::{Error, Result};
use crate::executor::{
    execute, gemm_oracle, generate_matrices, verify, ErrorReport, ExecMode, ExecutionTrace,
    MatrixBuffer, ScalarKind,
};
use crate::metrics::{self, padding_overhead};
use crate::model::{tile_grid, MachineModel, ProblemShape, TileConfig};

/// Relative tolerance for `Real32` verification.
pub const REAL32_REL_TOL: f64 = 1e-5;

/// Keys accepted in a config file.
pub const CONFIG_KEYS: &[&str] = &[
    "m",
    "n",
    "k",
    "elem_bytes",
    "bm",
    "bn",
    "bk",
    "pad_m",
    "pad_n",
    "pad_k",
    "strategy",
    "g",
    "p",
    "scalar",
    "seed",
    "warmup",
    "repeats",
    "mode",
];

pub const DEFAULT_PROCESSORS: usize = 120;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub shape: ProblemShape,
    pub tiles: TileConfig,
    pub kind: DecompositionKind,
    /// Stream-K grid size; `None` means one worker per processor.
    pub g: Option<usize>,
    pub machine: MachineModel,
    pub scalar_kind: ScalarKind,
    pub seed: u64,
    pub warmup_iters: usize,
    pub repeat_iters: usize,
    pub mode: ExecMode,
    /// Compare against the oracle after the measured runs.
    pub verify: bool,
}

impl ExperimentConfig {
    pub fn new(shape: ProblemShape) -> Self {
        ExperimentConfig {
            shape,
            tiles: TileConfig::default(),
            kind: DecompositionKind::StreamK,
            g: None,
            machine: MachineModel {
                p: DEFAULT_PROCESSORS,
            },
            scalar_kind: ScalarKind::ExactInt,
            seed: 0,
            warmup_iters: 1,
            repeat_iters: 10,
            mode: ExecMode::Concurrent,
            verify: true,
        }
    }

    /// Worker count the configured strategy launches.
    pub fn grid_size(&self) -> usize {
        let grid = tile_grid(&self.shape, &self.tiles);
        match self.kind {
            DecompositionKind::DataParallel => grid.total_tiles,
            DecompositionKind::SplitK(s) => grid.total_tiles * s,
            DecompositionKind::StreamK => self.g.unwrap_or(self.machine.p),
        }
    }

    pub fn label(&self) -> String {
        let s = &self.shape;
        let mut label = format!("{}x{}x{} {}", s.m, s.n, s.k, self.kind);
        if self.kind == DecompositionKind::StreamK {
            label.push_str(&format!(" g={}", self.grid_size()));
        }
        if !self.tiles.any_padding() {
            label.push_str(" (NP)");
        }
        label
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        self.tiles.validate()?;
        MachineModel::new(self.machine.p)?;
        if self.repeat_iters == 0 {
            return Err(Error::invalid("repeats", "must be at least 1"));
        }
        let grid = tile_grid(&self.shape, &self.tiles);
        match self.kind {
            DecompositionKind::SplitK(s) if s == 0 || s > grid.k_iters => {
                return Err(Error::invalid(
                    "strategy",
                    format!("split count {s} must be in 1..={}", grid.k_iters),
                ))
            }
            DecompositionKind::StreamK if self.g == Some(0) => {
                return Err(Error::invalid("g", "must be at least 1"))
            }
            DecompositionKind::DataParallel | DecompositionKind::SplitK(_) => {
                if let Some(g) = self.g {
                    if g != self.grid_size() {
                        return Err(Error::invalid(
                            "g",
                            format!(
                                "{} launches {} workers, not {g}",
                                self.kind,
                                self.grid_size()
                            ),
                        ));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn parse_bool(value: &str) -> Option<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Some(true),
        "0" | "false" | "no" | "off" => Some(false),
        _ => None,
    }
}

pub fn parse_strategy(value: &str) -> Option<DecompositionKind> {
    let value = value.to_ascii_lowercase();
    match value.as_str() {
        "streamk" | "stream-k" | "stream_k" => Some(DecompositionKind::StreamK),
        "dp" | "data-parallel" | "data_parallel" | "dataparallel" => {
            Some(DecompositionKind::DataParallel)
        }
        _ => {
            let (name, splits) = value.split_once(':')?;
            matches!(name, "splitk" | "split-k" | "split_k")
                .then(|| splits.trim().parse().ok())
                .flatten()
                .map(DecompositionKind::SplitK)
        }
    }
}

fn parse_scalar(value: &str) -> Option<ScalarKind> {
    match value.to_ascii_lowercase().as_str() {
        "exact_int" | "exactint" | "int" => Some(ScalarKind::ExactInt),
        "real32" | "f32" | "float" => Some(ScalarKind::Real32),
        _ => None,
    }
}

fn parse_mode(value: &str) -> Option<ExecMode> {
    match value.to_ascii_lowercase().as_str() {
        "sim" | "deterministic" | "deterministic_sim" => Some(ExecMode::DeterministicSim),
        "concurrent" | "threads" => Some(ExecMode::Concurrent),
        _ => None,
    }
}

/// Parses `key = value` lines; `#` starts a comment. `m`, `n` and `k` are
/// required. A repeated key overrides the earlier value.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut dims: [Option<usize>; 3] = [None; 3];
    let mut config = ExperimentConfig::new(ProblemShape {
        m: 1,
        n: 1,
        k: 1,
        elem_bytes: 2,
        alpha: 1.0,
        beta: 0.0,
    });

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse { line, reason };
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(err(format!("expected `key = value`, got `{content}`")));
        }
        let bad = |what: &str| err(format!("`{value}` is not a valid {what} for `{key}`"));
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| bad("non-negative integer"))
        };
        let flag = || parse_bool(value).ok_or_else(|| bad("boolean"));
        match key {
            "m" => dims[0] = Some(int()?),
            "n" => dims[1] = Some(int()?),
            "k" => dims[2] = Some(int()?),
            "elem_bytes" => config.shape.elem_bytes = int()?,
            "bm" => config.tiles.bm = int()?,
            "bn" => config.tiles.bn = int()?,
            "bk" => config.tiles.bk = int()?,
            "pad_m" => config.tiles.pad_m = flag()?,
            "pad_n" => config.tiles.pad_n = flag()?,
            "pad_k" => config.tiles.pad_k = flag()?,
            "strategy" => {
                config.kind = parse_strategy(value)
                    .ok_or_else(|| bad("strategy (streamk, dp, splitk:<s>)"))?
            }
            "g" => config.g = Some(int()?),
            "p" => config.machine.p = int()?,
            "scalar" => {
                config.scalar_kind =
                    parse_scalar(value).ok_or_else(|| bad("scalar kind (exact_int, real32)"))?
            }
            "seed" => config.seed = value.parse().map_err(|_| bad("64-bit unsigned integer"))?,
            "warmup" => config.warmup_iters = int()?,
            "repeats" => config.repeat_iters = int()?,
            "mode" => {
                config.mode = parse_mode(value).ok_or_else(|| bad("mode (sim, concurrent)"))?
            }
            _ => {
                return Err(err(format!(
                    "unknown key `{key}` (expected one of {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
    }

    for (field, dim) in ["m", "n", "k"].into_iter().zip(dims) {
        if dim.is_none() {
            return Err(Error::invalid(field, "is required"));
        }
    }
    config.shape.m = dims[0].unwrap_or_default();
    config.shape.n = dims[1].unwrap_or_default();
    config.shape.k = dims[2].unwrap_or_default();
    config.validate()?;
    Ok(config)
}

/// Arguments of the positional form
/// `<verify> <init> <log> <M> <N> <K> <sA> <sB> <sC> [workers]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompatArgs {
    pub verify: bool,
    /// Recorded as given; not interpreted.
    pub init: String,
    pub log: String,
    pub strides: [usize; 3],
    pub workers: Option<usize>,
}

/// Applies the positional form to `base`. Strides must be the dense
/// row-major ones (`K`, `N`, `N`); omitting `workers` leaves one Stream-K
/// worker per processor.
pub fn apply_compat_args(
    args: &[String],
    base: &ExperimentConfig,
) -> Result<(ExperimentConfig, CompatArgs)> {
    if !(9..=10).contains(&args.len()) {
        return Err(Error::Usage(format!(
            "expected `<verify> <init> <log> <M> <N> <K> <sA> <sB> <sC> [workers]`, got {} argument(s)",
            args.len()
        )));
    }
    let num = |i: usize, name: &'static str| -> Result<usize> {
        args[i].parse().map_err(|_| {
            Error::invalid(name, format!("`{}` is not a non-negative integer", args[i]))
        })
    };
    let verify_flag = num(0, "verify")?;
    let (m, n, k) = (num(3, "M")?, num(4, "N")?, num(5, "K")?);
    let strides = [num(6, "sA")?, num(7, "sB")?, num(8, "sC")?];
    let workers = if args.len() == 10 {
        Some(num(9, "workers")?)
    } else {
        None
    };
    for ((name, given), dense) in ["sA", "sB", "sC"].iter().zip(strides).zip([k, n, n]) {
        if given != dense {
            return Err(Error::invalid(
                name,
                format!("stride {given} is not the dense row-major stride {dense}"),
            ));
        }
    }
    let mut config = base.clone();
    config.shape.m = m;
    config.shape.n = n;
    config.shape.k = k;
    config.kind = DecompositionKind::StreamK;
    config.g = workers;
    config.verify = verify_flag != 0;
    config.validate()?;
    Ok((
        config,
        CompatArgs {
            verify: verify_flag != 0,
            init: args[1].clone(),
            log: args[2].clone(),
            strides,
            workers,
        },
    ))
}

/// One benchmark result row. Throughput columns are derived from `ms`
/// and the shape on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    /// Median wall time of the measured runs (CPU execution).
    pub ms: f64,
    pub shape: ProblemShape,
    pub utilization: f64,
    pub padding_overhead: f64,
    pub error: Option<ErrorReport>,
    pub g: usize,
    pub work_macs: u128,
    pub shared_tiles: usize,
}

impl ReportRow {
    pub fn tflops(&self) -> f64 {
        metrics::tflops(&self.shape, self.ms).unwrap_or(f64::NAN)
    }

    pub fn gbps(&self) -> f64 {
        metrics::gbps(&self.shape, self.ms).unwrap_or(f64::NAN)
    }

    pub fn pct_mismatch(&self) -> Option<f64> {
        self.error.map(|e| e.pct_mismatch)
    }

    pub fn perf_record(&self) -> metrics::PerfRecord {
        metrics::PerfRecord {
            label: self.label.clone(),
            ms: self.ms,
            tflops: self.tflops(),
            gbps: self.gbps(),
            shape: self.shape,
        }
    }
}

/// A finished experiment: its row, final output and the last run's trace.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub row: ReportRow,
    pub c: MatrixBuffer,
    pub trace: ExecutionTrace,
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    if samples.len().is_multiple_of(2) {
        (samples[mid - 1] + samples[mid]) / 2.0
    } else {
        samples[mid]
    }
}

fn rel_tol(kind: ScalarKind) -> f64 {
    match kind {
        ScalarKind::ExactInt => 0.0,
        ScalarKind::Real32 => REAL32_REL_TOL,
    }
}

fn run_with_operands(
    config: &ExperimentConfig,
    a: &MatrixBuffer,
    b: &MatrixBuffer,
    reference: Option<&MatrixBuffer>,
) -> Result<Experiment> {
    config.validate()?;
    let grid = tile_grid(&config.shape, &config.tiles);
    let g = config.grid_size();
    let decomp = partition(&grid, config.kind, g)?;

    for _ in 0..config.warmup_iters {
        execute(&decomp, a, b, &config.shape, &config.tiles, config.mode)?;
    }
    let mut samples = Vec::with_capacity(config.repeat_iters);
    let mut last = None;
    for _ in 0..config.repeat_iters {
        let started = Instant::now();
        let out = execute(&decomp, a, b, &config.shape, &config.tiles, config.mode)?;
        samples.push(started.elapsed().as_secs_f64() * 1e3);
        last = Some(out);
    }
    let (c, trace) = last.expect("at least one measured repeat");
    trace.check_signal_order()?;
    trace.check_conservation(&grid)?;

    let error = match reference {
        Some(r) => Some(verify(&c, r, rel_tol(config.scalar_kind))?),
        None => None,
    };
    // A run can finish faster than the clock resolution on tiny problems.
    let ms = median(&mut samples).max(f64::MIN_POSITIVE);
    let row = ReportRow {
        label: config.label(),
        ms,
        shape: config.shape,
        utilization: modeled_utilization(&grid, config.kind, g, &config.machine)?,
        padding_overhead: padding_overhead(&config.shape, &config.tiles),
        error,
        g,
        work_macs: trace.work_macs,
        shared_tiles: trace.shared_tiles(),
    };
    Ok(Experiment { row, c, trace })
}

/// Runs warmups plus measured repeats and verifies against the oracle when
/// `config.verify` is set. Verification failures are reported in the row.
pub fn run_experiment_full(config: &ExperimentConfig) -> Result<Experiment> {
    config.validate()?;
    let (a, b) = generate_matrices(&config.shape, config.scalar_kind, config.seed);
    let reference = if config.verify {
        Some(gemm_oracle(&a, &b, &config.shape)?)
    } else {
        None
    };
    run_with_operands(config, &a, &b, reference.as_ref())
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ReportRow> {
    run_experiment_full(config).map(|e| e.row)
}

#[derive(Clone, Debug)]
pub struct PaddingComparison {
    pub padded: ReportRow,
    pub unpadded: ReportRow,
    /// Time saved by the unpadded run, in percent.
    pub improvement_pct: f64,
    /// Executed MACs, padded over unpadded.
    pub work_ratio: f64,
}

/// Runs the configured problem with every dimension padded and with none,
/// on identical operands. Differing outputs are an error.
pub fn compare_padding(config: &ExperimentConfig) -> Result<PaddingComparison> {
    config.validate()?;
    let (a, b) = generate_matrices(&config.shape, config.scalar_kind, config.seed);
    let reference = if config.verify {
        Some(gemm_oracle(&a, &b, &config.shape)?)
    } else {
        None
    };
    let mut padded_cfg = config.clone();
    padded_cfg.tiles = config.tiles.with_padding(true);
    let mut unpadded_cfg = config.clone();
    unpadded_cfg.tiles = config.tiles.with_padding(false);

    let padded = run_with_operands(&padded_cfg, &a, &b, reference.as_ref())?;
    let unpadded = run_with_operands(&unpadded_cfg, &a, &b, reference.as_ref())?;
    if !padded.c.bit_eq(&unpadded.c) {
        let mismatches = padded
            .c
            .elements
            .iter()
            .zip(&unpadded.c.elements)
            .filter(|(x, y)| x.to_bits() != y.to_bits())
            .count();
        return Err(Error::PaddingChangedResult { mismatches });
    }
    let improvement_pct =
        metrics::improvement_pct(&padded.row.perf_record(), &unpadded.row.perf_record())?;
    let work_ratio = padded.trace.work_macs as f64 / unpadded.trace.work_macs as f64;
    Ok(PaddingComparison {
        padded: padded.row,
        unpadded: unpadded.row,
        improvement_pct,
        work_ratio,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    /// Stream-K grid sizes.
    GridSizes(Vec<usize>),
    /// `(m, n, k)` problem extents.
    Shapes(Vec<(usize, usize, usize)>),
}

/// One sweep point: its row, or the label and reason it failed.
pub type SweepPoint = std::result::Result<ReportRow, SweepFailure>;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepFailure {
    pub label: String,
    pub shape: ProblemShape,
    pub utilization: Option<f64>,
    pub message: String,
}

/// Runs one experiment per axis point, in order. Failing points are
/// recorded and the sweep continues.
pub fn sweep(base: &ExperimentConfig, axis: &SweepAxis) -> Result<Vec<SweepPoint>> {
    let configs: Vec<std::result::Result<ExperimentConfig, SweepFailure>> = match axis {
        SweepAxis::GridSizes(gs) if gs.is_empty() => {
            return Err(Error::Usage("sweep needs at least one grid size".into()))
        }
        SweepAxis::Shapes(ss) if ss.is_empty() => {
            return Err(Error::Usage("sweep needs at least one shape".into()))
        }
        SweepAxis::GridSizes(gs) => gs
            .iter()
            .map(|&g| {
                let mut c = base.clone();
                c.kind = DecompositionKind::StreamK;
                c.g = Some(g);
                Ok(c)
            })
            .collect(),
        SweepAxis::Shapes(ss) => ss
            .iter()
            .map(|&(m, n, k)| {
                let mut c = base.clone();
                c.shape.m = m;
                c.shape.n = n;
                c.shape.k = k;
                Ok(c)
            })
            .collect(),
    };

    Ok(configs
        .into_iter()
        .map(|c| {
            let c = c?;
            run_experiment(&c).map_err(|e| {
                let grid = tile_grid(&c.shape, &c.tiles);
                SweepFailure {
                    label: c.label(),
                    shape: c.shape,
                    utilization: modeled_utilization(&grid, c.kind, c.grid_size(), &c.machine).ok(),
                    message: e.to_string(),
                }
            })
        })
        .collect())
}

/// The flat record emitted to CSV and JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub label: String,
    pub ms: Option<f64>,
    pub tflops: Option<f64>,
    pub gbps: Option<f64>,
    pub utilization: Option<f64>,
    pub pct_mismatch: Option<f64>,
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

pub const CSV_HEADER: [&str; 9] = [
    "label",
    "ms",
    "tflops",
    "gbps",
    "utilization",
    "pct_mismatch",
    "m",
    "n",
    "k",
];

impl From<&ReportRow> for CsvRow {
    fn from(row: &ReportRow) -> Self {
        CsvRow {
            label: row.label.clone(),
            ms: Some(row.ms),
            tflops: Some(row.tflops()),
            gbps: Some(row.gbps()),
            utilization: Some(row.utilization),
            pct_mismatch: row.pct_mismatch(),
            m: row.shape.m,
            n: row.shape.n,
            k: row.shape.k,
        }
    }
}

impl From<&SweepPoint> for CsvRow {
    fn from(point: &SweepPoint) -> Self {
        match point {
            Ok(row) => row.into(),
            Err(f) => CsvRow {
                label: format!("{} (failed: {})", f.label, f.message),
                ms: None,
                tflops: None,
                gbps: None,
                utilization: f.utilization,
                pct_mismatch: None,
                m: f.shape.m,
                n: f.shape.n,
                k: f.shape.k,
            },
        }
    }
}

/// `x` rounded to six significant digits, in plain decimal notation where
/// that stays readable.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..=15).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.5e}")
    }
}

pub fn write_csv<W: Write>(rows: &[CsvRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    let num = |x: Option<f64>| x.map(format_sig6).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.label.clone(),
            num(r.ms),
            num(r.tflops),
            num(r.gbps),
            num(r.utilization),
            num(r.pct_mismatch),
            r.m.to_string(),
            r.n.to_string(),
            r.k.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_HEADER {
        return Err(Error::Usage(format!(
            "unexpected CSV header {header:?}, expected {CSV_HEADER:?}"
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn write_json<W: Write>(rows: &[CsvRow], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, rows)?;
    Ok(())
}

pub fn read_json<R: Read>(input: R) -> Result<Vec<CsvRow>> {
    Ok(serde_json::from_reader(input)?)
}

/// Fixed-width text table in the layout of a padding-comparison report.
pub fn render_table(rows: &[CsvRow]) -> String {
    let mut out = format!(
        "{:<40} {:>12} {:>10} {:>10} {:>8} {:>10} {:>6} {:>6} {:>6}\n",
        "test", "sim_ms", "tflops", "gb/s", "util", "mismatch", "m", "n", "k"
    );
    let num = |x: Option<f64>, prec: usize| match x {
        Some(v) => format!("{v:.prec$}"),
        None => "-".into(),
    };
    for r in rows {
        out.push_str(&format!(
            "{:<40} {:>12} {:>10} {:>10} {:>8} {:>10} {:>6} {:>6} {:>6}\n",
            r.label,
            num(r.ms, 3),
            num(r.tflops, 4),
            num(r.gbps, 3),
            num(r.utilization, 4),
            r.pct_mismatch
                .map(|p| format!("{:.2}%", p * 100.0))
                .unwrap_or_else(|| "-".into()),
            r.m,
            r.n,
            r.k
        ));
    }
    out
}

const MATRIX_MAGIC: &[u8; 8] = b"SKMATRX1";

/// Writes `c` as magic, `rows`/`cols` (u64 LE), a scalar-kind byte and the
/// elements as f32 LE.
pub fn write_matrix(path: &Path, c: &MatrixBuffer) -> Result<()> {
    let mut bytes = Vec::with_capacity(25 + 4 * c.elements.len());
    bytes.extend_from_slice(MATRIX_MAGIC);
    bytes.extend_from_slice(&(c.rows as u64).to_le_bytes());
    bytes.extend_from_slice(&(c.cols as u64).to_le_bytes());
    bytes.push(match c.scalar_kind {
        ScalarKind::ExactInt => 0,
        ScalarKind::Real32 => 1,
    });
    for x in &c.elements {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<MatrixBuffer> {
    let bytes = std::fs::read(path)?;
    let corrupt =
        |why: &str| Error::Usage(format!("{} is not a matrix dump: {why}", path.display()));
    if bytes.len() < 25 || &bytes[..8] != MATRIX_MAGIC {
        return Err(corrupt("bad header"));
    }
    let word =
        |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize;
    let (rows, cols) = (word(8), word(16));
    let scalar_kind = match bytes[24] {
        0 => ScalarKind::ExactInt,
        1 => ScalarKind::Real32,
        _ => return Err(corrupt("unknown scalar kind")),
    };
    let body = &bytes[25..];
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(corrupt("length does not match dimensions"));
    }
    let elements = body
        .chunks_exact(4)
        .map(|w| f32::from_le_bytes(w.try_into().expect("4 bytes")))
        .collect();
    MatrixBuffer::new(rows, cols, elements, scalar_kind)
}

/// Recomputes the oracle for `config` and compares `c` against it.
pub fn verify_against_config(c: &MatrixBuffer, config: &ExperimentConfig) -> Result<ErrorReport> {
    let (a, b) = generate_matrices(&config.shape, config.scalar_kind, config.seed);
    let reference = gemm_oracle(&a, &b, &config.shape)?;
    verify(c, &reference, rel_tol(config.scalar_kind))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_baseline_with_defaults() {
        let c = parse_config("m = 3840\nn = 4096\nk = 4096").unwrap();
        assert_eq!((c.shape.m, c.shape.n, c.shape.k), (3840, 4096, 4096));
        assert_eq!(c.shape.elem_bytes, 2);
        assert_eq!((c.warmup_iters, c.repeat_iters, c.seed), (1, 10, 0));
        assert!(c.tiles.pad_m && c.tiles.pad_n && c.tiles.pad_k);
        assert_eq!(c.kind, DecompositionKind::StreamK);
        assert_eq!(c.machine.p, 120);
        assert_eq!(c.grid_size(), 120);
    }

    #[test]
    fn parse_requires_dimensions() {
        assert!(matches!(
            parse_config(""),
            Err(Error::Invalid { field: "m", .. })
        ));
        assert!(matches!(
            parse_config("m = 4\nn = 4"),
            Err(Error::Invalid { field: "k", .. })
        ));
    }

    #[test]
    fn parse_validates_fields() {
        assert!(matches!(
            parse_config("m = 0\nn = 1\nk = 1"),
            Err(Error::Invalid { field: "m", .. })
        ));
        assert!(matches!(
            parse_config("m=1\nn=1\nk=1\nrepeats=0"),
            Err(Error::Invalid {
                field: "repeats",
                ..
            })
        ));
        assert!(matches!(
            parse_config("m=1\nn=1\nk=64\nstrategy=splitk:3"),
            Err(Error::Invalid {
                field: "strategy",
                ..
            })
        ));
        assert!(matches!(
            parse_config("m=1\nn=1\nk=1\nelem_bytes=3"),
            Err(Error::Invalid {
                field: "elem_bytes",
                ..
            })
        ));
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = parse_config("m = 4\n# comment\nn 4\nk = 4").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_config("m = 4\nn = 4\nk = 4\ncolour = red").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
        let err = parse_config("m = x").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let err = parse_config("m =").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn parse_full_config() {
        let text = "\
            # irregular problem\n\
            m = 1920\nn = 2000\nk = 2000   # trailing comment\n\
            elem_bytes = 4\nbm = 64\nbn = 64\nbk = 16\n\
            pad_m = false\npad_n = off\npad_k = 0\n\
            strategy = splitk:4\np = 8\nscalar = real32\nseed = 42\n\
            warmup = 0\nrepeats = 3\nmode = sim\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.shape.elem_bytes, 4);
        assert_eq!((c.tiles.bm, c.tiles.bn, c.tiles.bk), (64, 64, 16));
        assert!(!c.tiles.any_padding());
        assert_eq!(c.kind, DecompositionKind::SplitK(4));
        assert_eq!(c.grid_size(), 30 * 32 * 4);
        assert_eq!(c.scalar_kind, ScalarKind::Real32);
        assert_eq!((c.seed, c.warmup_iters, c.repeat_iters), (42, 0, 3));
        assert_eq!(c.mode, ExecMode::DeterministicSim);
    }

    #[test]
    fn later_keys_override_earlier_ones() {
        let c = parse_config("m=4\nn=4\nk=4\ng=3\ng=5").unwrap();
        assert_eq!(c.grid_size(), 5);
    }

    #[test]
    fn g_must_agree_with_fixed_grid_strategies() {
        assert!(parse_config("m=256\nn=128\nk=32\nstrategy=dp\ng=2").is_ok());
        assert!(matches!(
            parse_config("m=256\nn=128\nk=32\nstrategy=dp\ng=3"),
            Err(Error::Invalid { field: "g", .. })
        ));
    }

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn compat_positional_form() {
        let base = ExperimentConfig::new(ProblemShape::new(1, 1, 1).unwrap());
        let (c, compat) =
            apply_compat_args(&args("1 2 1 3840 4096 4096 4096 4096 4096 120"), &base).unwrap();
        assert_eq!((c.shape.m, c.shape.n, c.shape.k), (3840, 4096, 4096));
        assert_eq!(c.grid_size(), 120);
        assert!(c.verify && compat.verify);
        assert_eq!((compat.init.as_str(), compat.log.as_str()), ("2", "1"));

        let (c, compat) =
            apply_compat_args(&args("0 2 1 30840 4096 4096 4096 4096 4096"), &base).unwrap();
        assert_eq!(c.shape.m, 30840);
        assert_eq!(compat.workers, None);
        assert_eq!(c.grid_size(), base.machine.p);
        assert!(!c.verify);

        assert!(matches!(
            apply_compat_args(&args("1 2 1 64 32 16 8 32 32"), &base),
            Err(Error::Invalid { field: "sA", .. })
        ));
        assert!(matches!(
            apply_compat_args(&args("1 2 1"), &base),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn median_resists_outliers() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [1.0, 100.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(89.1092), "89.1092");
        assert_eq!(format_sig6(1335.7142857), "1335.71");
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(0.75), "0.750000");
        assert_eq!(format_sig6(3.2e-7), "3.20000e-7");
        for x in [1.23456789e-9, 0.000123456789, 98765.4321, 1.5e20] {
            let back: f64 = format_sig6(x).parse().unwrap();
            assert!(((back - x) / x).abs() <= 5e-6, "{x} -> {back}");
        }
    }

    #[test]
    fn matrix_dump_round_trips() {
        let dir = std::env::temp_dir().join(format!("streamk-dump-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.bin");
        let c = MatrixBuffer::new(
            2,
            3,
            vec![1.0, -2.5, 3.0, 0.0, f32::MIN, 7.0],
            ScalarKind::Real32,
        )
        .unwrap();
        write_matrix(&path, &c).unwrap();
        assert!(read_matrix(&path).unwrap().bit_eq(&c));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(read_matrix(&path).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
