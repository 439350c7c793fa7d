use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use streamk_core::harness::{
    apply_compat_args, read_matrix, render_table, verify_against_config, write_csv, write_json,
    write_matrix, CsvRow, SweepAxis,
};
use streamk_core::{
    arithmetic_intensity, compare_padding, flops_and_bytes, makespan_model, modeled_utilization,
    padded_shape, padding_overhead, parse_config, partition, quantization_utilization,
    run_experiment_full, sweep, tile_grid, verify, DecompositionKind, ExperimentConfig,
};

/// Stream-K GEMM decomposition planner, executor and benchmark harness.
#[derive(Parser)]
#[command(name = "streamk", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the decomposition and utilization model without executing.
    Plan {
        #[command(flatten)]
        config: ConfigArgs,
        /// List every worker's range and fragments.
        #[arg(long)]
        workers: bool,
        /// Write the full decomposition as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Execute one experiment and verify it against the reference GEMM.
    ///
    /// Also accepts the positional form
    /// `run <verify> <init> <log> <M> <N> <K> <sA> <sB> <sC> [workers]`.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Write the computed C matrix for a later `verify`.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Run one experiment per grid size or per shape.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Comma-separated Stream-K grid sizes, e.g. `1,2,4`.
        #[arg(long, value_delimiter = ',', conflicts_with = "shapes")]
        grid: Option<Vec<usize>>,
        /// Comma-separated `MxNxK` shapes, e.g. `3840x4096x4096,3x9x9`.
        #[arg(long, value_delimiter = ',')]
        shapes: Option<Vec<String>>,
    },
    /// Run with every dimension padded and with none, and compare.
    ComparePadding {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Re-check a dumped result against a recomputed reference or another dump.
    Verify {
        #[command(flatten)]
        config: ConfigArgs,
        /// Matrix written by `run --dump`.
        #[arg(long)]
        result: PathBuf,
        /// Compare against this dump instead of recomputing the reference.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Relative tolerance; defaults to 0 for exact_int and 1e-5 for real32.
        #[arg(long)]
        rel_tol: Option<f64>,
    },
}

const PLACEHOLDER_SHAPE: &str = "m = 1\nn = 1\nk = 1\n";

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `key=value` overrides applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    rest: Vec<String>,
}

#[derive(Args)]
struct OutputArgs {
    /// Write rows as CSV (`-` for stdout).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write rows as a JSON array (`-` for stdout).
    #[arg(long)]
    json: Option<PathBuf>,
}

impl ConfigArgs {
    fn text(&self) -> Result<String> {
        self.text_with_defaults("")
    }

    /// `defaults` goes first so the file and overrides win.
    fn text_with_defaults(&self, defaults: &str) -> Result<String> {
        let mut text = defaults.to_owned();
        text.push_str(&match &self.config {
            Some(path) => std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?,
            None => String::new(),
        });
        for kv in &self.rest {
            if !kv.contains('=') {
                bail!("expected KEY=VALUE, got `{kv}`");
            }
            text.push('\n');
            text.push_str(kv);
        }
        Ok(text)
    }

    fn load(&self) -> Result<ExperimentConfig> {
        Ok(parse_config(&self.text()?)?)
    }

    /// Shape sweeps supply their own dimensions.
    fn load_without_shape(&self) -> Result<ExperimentConfig> {
        Ok(parse_config(&self.text_with_defaults(PLACEHOLDER_SHAPE)?)?)
    }

    /// Config for `run`, which also takes the positional form.
    fn load_run(&self) -> Result<ExperimentConfig> {
        let (overrides, positional): (Vec<String>, Vec<String>) =
            self.rest.iter().cloned().partition(|a| a.contains('='));
        if positional.is_empty() {
            return self.load();
        }
        let keyed = ConfigArgs {
            config: self.config.clone(),
            rest: overrides,
        };
        let base = parse_config(&keyed.text_with_defaults(PLACEHOLDER_SHAPE)?)?;
        let (config, compat) = apply_compat_args(&positional, &base)?;
        eprintln!(
            "compat: verify={} init={} log={} workers={}",
            u8::from(compat.verify),
            compat.init,
            compat.log,
            compat.workers.map_or_else(
                || format!("default ({})", config.machine.p),
                |w| w.to_string()
            )
        );
        Ok(config)
    }
}

fn open_output(path: &Path) -> Result<Box<dyn Write>> {
    if path == Path::new("-") {
        Ok(Box::new(io::stdout().lock()))
    } else {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Box::new(BufWriter::new(file)))
    }
}

impl OutputArgs {
    fn emit(&self, rows: &[CsvRow]) -> Result<()> {
        if let Some(path) = &self.csv {
            write_csv(rows, open_output(path)?)?;
        }
        if let Some(path) = &self.json {
            let mut out = open_output(path)?;
            write_json(rows, &mut out)?;
            writeln!(out)?;
        }
        if self.csv.as_deref() != Some(Path::new("-"))
            && self.json.as_deref() != Some(Path::new("-"))
        {
            print!("{}", render_table(rows));
        }
        Ok(())
    }
}

fn parse_shape(text: &str) -> Result<(usize, usize, usize)> {
    let dims: Vec<usize> = text
        .split('x')
        .map(|d| d.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("shape `{text}` is not MxNxK"))?;
    match dims[..] {
        [m, n, k] => Ok((m, n, k)),
        _ => bail!("shape `{text}` is not MxNxK"),
    }
}

fn plan(config: &ExperimentConfig, list_workers: bool, json: Option<&Path>) -> Result<()> {
    let s = &config.shape;
    let grid = tile_grid(s, &config.tiles);
    let g = config.grid_size();
    let decomp = partition(&grid, config.kind, g)?;
    let padded = padded_shape(s, &config.tiles);
    let (flops, bytes) = flops_and_bytes(s);
    let lens: Vec<usize> = decomp.plans.iter().map(|p| p.len()).collect();

    println!(
        "problem      {}x{}x{} ({} B/elem)",
        s.m, s.n, s.k, s.elem_bytes
    );
    println!(
        "tiles        {}x{}x{} padded {}x{}x{} (overhead {:.4})",
        config.tiles.bm,
        config.tiles.bn,
        config.tiles.bk,
        padded.m,
        padded.n,
        padded.k,
        padding_overhead(s, &config.tiles)
    );
    println!(
        "grid         {}x{} = {} tiles, {} iters/tile, {} iters total",
        grid.tiles_m, grid.tiles_n, grid.total_tiles, grid.k_iters, grid.total_iters
    );
    println!(
        "strategy     {} with g={} ({} active, {} idle), iters/worker {}..{}",
        config.kind,
        g,
        decomp.active_workers(),
        g - decomp.active_workers(),
        lens.iter().min().unwrap_or(&0),
        lens.iter().max().unwrap_or(&0)
    );
    println!("shared tiles {}", decomp.shared_tiles());
    let dp = makespan_model(
        &grid,
        DecompositionKind::DataParallel,
        grid.total_tiles,
        &config.machine,
        0.0,
    )?;
    let chosen = makespan_model(&grid, config.kind, g, &config.machine, 0.0)?;
    println!(
        "machine      p={}: tile quantization utilization {:.4}",
        config.machine.p,
        quantization_utilization(grid.total_tiles, &config.machine)
    );
    println!(
        "makespan     {} iters ({}), {} iters (data-parallel), utilization {:.4}",
        chosen,
        config.kind,
        dp,
        modeled_utilization(&grid, config.kind, g, &config.machine)?
    );
    println!(
        "intensity    {} flops / {} bytes = {:.2} flop/byte",
        flops,
        bytes,
        arithmetic_intensity(s)
    );
    if list_workers {
        for p in &decomp.plans {
            let frags: Vec<String> = p
                .fragments
                .iter()
                .map(|f| {
                    format!(
                        "t{}[{}..{}){}",
                        f.tile_id,
                        f.k_begin,
                        f.k_end,
                        if f.is_owner { "*" } else { "" }
                    )
                })
                .collect();
            println!(
                "  worker {:>4} [{}, {}) {}",
                p.worker_id,
                p.iter_begin,
                p.iter_end,
                frags.join(" ")
            );
        }
    }
    if let Some(path) = json {
        let mut out = open_output(path)?;
        serde_json::to_writer_pretty(&mut out, &decomp)?;
        writeln!(out)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Plan {
            config,
            workers,
            json,
        } => {
            plan(&config.load()?, workers, json.as_deref())?;
        }
        Command::Run {
            config,
            output,
            dump,
        } => {
            let config = config.load_run()?;
            let exp = run_experiment_full(&config)?;
            if let Some(path) = dump {
                write_matrix(&path, &exp.c)?;
            }
            output.emit(&[CsvRow::from(&exp.row)])?;
            if let Some(e) = exp.row.error.filter(|e| !e.passed()) {
                eprintln!(
                    "warning: {} of {} elements mismatched (max rel error {:.3e})",
                    e.mismatches, e.elements, e.max_rel_error
                );
            }
        }
        Command::Sweep {
            config,
            output,
            grid,
            shapes,
        } => {
            let config = if shapes.is_some() {
                config.load_without_shape()?
            } else {
                config.load()?
            };
            let axis = match (grid, shapes) {
                (Some(g), _) => SweepAxis::GridSizes(g),
                (None, Some(s)) => {
                    SweepAxis::Shapes(s.iter().map(|s| parse_shape(s)).collect::<Result<_>>()?)
                }
                (None, None) => bail!("sweep needs --grid or --shapes"),
            };
            let points = sweep(&config, &axis)?;
            let rows: Vec<CsvRow> = points.iter().map(CsvRow::from).collect();
            output.emit(&rows)?;
        }
        Command::ComparePadding { config, output } => {
            let config = config.load()?;
            let cmp = compare_padding(&config)?;
            output.emit(&[CsvRow::from(&cmp.padded), CsvRow::from(&cmp.unpadded)])?;
            println!(
                "padded and unpadded outputs identical; work ratio {:.5} (overhead {:.5}); \
                 sim_ms improvement {:.2}%",
                cmp.work_ratio, cmp.padded.padding_overhead, cmp.improvement_pct
            );
        }
        Command::Verify {
            config,
            result,
            reference,
            rel_tol,
        } => {
            let c = read_matrix(&result)?;
            let report = match reference {
                Some(path) => verify(&c, &read_matrix(&path)?, rel_tol.unwrap_or(0.0))?,
                None => {
                    let config = config.load()?;
                    match rel_tol {
                        Some(tol) => {
                            let (a, b) = streamk_core::generate_matrices(
                                &config.shape,
                                config.scalar_kind,
                                config.seed,
                            );
                            let r = streamk_core::gemm_oracle(&a, &b, &config.shape)?;
                            verify(&c, &r, tol)?
                        }
                        None => verify_against_config(&c, &config)?,
                    }
                }
            };
            println!(
                "elements {} mismatched {} ({:.4}%) max_abs {:.3e} max_rel {:.3e}",
                report.elements,
                report.mismatches,
                report.pct_mismatch * 100.0,
                report.max_abs_error,
                report.max_rel_error
            );
            if !report.passed() {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
