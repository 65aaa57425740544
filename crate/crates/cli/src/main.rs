//! `dan` — experiment harness for the differentiable algorithm network crate.
//!
//! Subcommands: `gen-envs`, `gen-demos`, `train`, `eval`, `gradcheck`,
//! `report`. Global flags `--seed`, `--out`, `--config` apply to every
//! subcommand; the config file is TOML mirroring the `ExperimentConfig`
//! fields (see `--help`). Exit code is 0 on success and 1 on failure, with a
//! stage-tagged diagnostic on stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dan_core::checks::{composite_suite, primitive_suite, CheckResult};
use dan_core::env::{generate_environment, GridMap};
use dan_core::experiment::{
    ensure_demos, ensure_row_params, find_row, parse_metrics_csv, read_row_meta, report,
    run_experiment, ExperimentConfig, DESK_N,
};

const CONFIG_HELP: &str = "\
CONFIG FILE (TOML) — fields mirror ExperimentConfig; all sizes are counts:
  row_id = \"B4\"            # registry row to operate on
  n = 9                     # maze side length (odd, >= 5)
  train_envs = 100          # training environments (seeds 1..=train_envs)
  trajectories_per_env = 5  # expert demonstrations per environment
  eval_envs = 500           # held-out evaluation environments
  eval_episodes = 500       # evaluation episodes
  step_cap = 113            # per-episode step limit
  seed = 7                  # master seed (overridden by --seed)
  fit_epochs = 200          # optional: cap for independent model fitting

--row overrides row_id; --seed overrides seed. Without --config, defaults
are the desk-scale values shown above.";

#[derive(Parser)]
#[command(
    name = "dan",
    version,
    about = "Train, evaluate, and report differentiable algorithm network experiments",
    after_help = CONFIG_HELP
)]
struct Cli {
    /// Master seed; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory (demos, checkpoints, logs, metrics.csv).
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    /// TOML config file mirroring ExperimentConfig fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate maze environments and write a human-readable listing.
    GenEnvs {
        /// How many environments to generate.
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Maze side length (odd, >= 5).
        #[arg(long, default_value_t = DESK_N)]
        n: usize,
        /// Unmapped obstacles placed per environment.
        #[arg(long, default_value_t = 0)]
        furniture: usize,
        /// Seed of the first environment; the i-th uses start_seed + i.
        #[arg(long, default_value_t = 1)]
        start_seed: u64,
    },
    /// Generate (or reuse) the expert demonstration set for a row's task.
    GenDemos {
        /// Registry row id, e.g. A4, B4, D10v, UB1.
        #[arg(long)]
        row: Option<String>,
    },
    /// Train a registry row end-to-end; caches checkpoint, log, and meta.
    Train {
        /// Registry row id, e.g. A4, B4, D10v, UB1.
        #[arg(long)]
        row: Option<String>,
    },
    /// Evaluate a registry row on held-out environments; upserts metrics.csv.
    Eval {
        /// Registry row id, e.g. A4, B4, D10v, UB1.
        #[arg(long)]
        row: Option<String>,
    },
    /// Run the finite-difference gradient suite (primitives + composites).
    Gradcheck,
    /// Render the metrics table and grouped summary from metrics.csv.
    Report,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("dan: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenEnvs { count, n, furniture, start_seed } => {
            gen_envs(&cli, *count, *n, *furniture, *start_seed)
                .context("stage gen-envs failed")
        }
        Command::GenDemos { row } => {
            let cfg = resolve_config(&cli, row.as_deref())?;
            gen_demos(&cli, &cfg).with_context(|| stage_tag("gen-demos", &cfg))
        }
        Command::Train { row } => {
            let cfg = resolve_config(&cli, row.as_deref())?;
            train(&cli, &cfg).with_context(|| stage_tag("train", &cfg))
        }
        Command::Eval { row } => {
            let cfg = resolve_config(&cli, row.as_deref())?;
            eval(&cli, &cfg).with_context(|| stage_tag("eval", &cfg))
        }
        Command::Gradcheck => gradcheck().context("stage gradcheck failed"),
        Command::Report => report_cmd(&cli).context("stage report failed"),
    }
}

fn stage_tag(stage: &str, cfg: &ExperimentConfig) -> String {
    format!("stage {stage} failed (row {}, seed {})", cfg.row_id, cfg.seed)
}

/// Build the effective config: `--config` file if given, otherwise row
/// defaults; `--row` and `--seed` override either source.
fn resolve_config(cli: &Cli, row_flag: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let mut cfg: ExperimentConfig = toml::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            if let Some(row) = row_flag {
                cfg.row_id = row.to_string();
            }
            cfg
        }
        None => {
            let row = row_flag.context("pass --row <ID> or --config <FILE>")?;
            ExperimentConfig::for_row(row)
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()
        .with_context(|| format!("invalid config for row {}", cfg.row_id))?;
    Ok(cfg)
}

fn render_map(map: &GridMap) -> String {
    let mut out = String::new();
    for y in 0..map.n {
        for x in 0..map.n {
            let c = if (x, y) == map.goal {
                'G'
            } else if map.blocked(x as i64, y as i64, false) {
                '#'
            } else if map.blocked(x as i64, y as i64, true) {
                'F'
            } else {
                '.'
            };
            out.push(c);
        }
        out.push('\n');
    }
    out
}

fn gen_envs(cli: &Cli, count: usize, n: usize, furniture: usize, start_seed: u64) -> Result<()> {
    if count == 0 {
        bail!("--count must be at least 1");
    }
    fs::create_dir_all(&cli.out)?;
    let mut listing = String::new();
    for i in 0..count {
        let seed = start_seed + i as u64;
        let map = generate_environment(seed, n, furniture)
            .with_context(|| format!("environment seed {seed}"))?;
        writeln!(
            listing,
            "env seed={seed} n={n} furniture={furniture} goal=({},{})",
            map.goal.0, map.goal.1
        )?;
        listing.push_str(&render_map(&map));
        listing.push('\n');
    }
    let path = cli
        .out
        .join(format!("envs-n{n}-f{furniture}-s{start_seed}-c{count}.txt"));
    fs::write(&path, &listing)?;
    // Legend: '#' wall, 'F' furniture, 'G' goal, '.' free.
    print!("{}", listing.split_inclusive('\n').take(n + 2).collect::<String>());
    println!("wrote {count} environments to {}", path.display());
    Ok(())
}

fn gen_demos(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    let row = cfg.validate()?;
    let furniture = row.task.furniture_count();
    let data = ensure_demos(cfg, furniture, &cli.out)?;
    let trajectories: usize = data.iter().map(|e| e.trajectories.len()).sum();
    let steps: usize = data
        .iter()
        .flat_map(|e| e.trajectories.iter())
        .map(|t| t.len())
        .sum();
    println!(
        "demos ready: {} environments, {trajectories} trajectories, {steps} steps (dir {})",
        data.len(),
        cli.out.display()
    );
    Ok(())
}

fn train(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    let row = cfg.validate()?;
    let params = ensure_row_params(cfg, row, &cli.out)?;
    let tensors = params.len();
    let scalars: usize = params.values().map(|t| t.data().len()).sum();
    match read_row_meta(&cli.out, cfg, row) {
        Ok(meta) => {
            let best = meta
                .best_val_loss
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "-".to_string());
            println!(
                "row {} trained: {tensors} tensors / {scalars} parameters, \
                 best val loss {best}, {:.1}s",
                row.id, meta.train_seconds
            );
        }
        // Fit rows share cached model fits and carry no per-row meta.
        Err(_) => println!(
            "row {} ready: {tensors} tensors / {scalars} parameters (independent fit)",
            row.id
        ),
    }
    Ok(())
}

fn eval(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    let row = run_experiment(cfg, &cli.out)?;
    let m = &row.metrics;
    let time = m
        .time_steps
        .map(|v| format!("{v:.2}"))
        .unwrap_or_else(|| "-".to_string());
    println!(
        "row {}: success {:.1}% | time steps {} | collision {:.1}% | return {:.3} \
         ({} episodes, seed {})",
        row.row_id, m.success_rate, time, m.collision_rate, m.mean_return, m.episodes, m.seed
    );
    println!("metrics row upserted into {}", cli.out.join("metrics.csv").display());
    Ok(())
}

fn print_checks(results: &[CheckResult]) -> usize {
    let mut failures = 0;
    for r in results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status}  {:<28} max rel err {:>10.3e}  (tol {:.0e})", r.name, r.err, r.tol);
        if !r.passed() {
            failures += 1;
        }
    }
    failures
}

fn gradcheck() -> Result<()> {
    println!("primitive gradient checks:");
    let mut failures = print_checks(&primitive_suite().context("primitive suite")?);
    println!("composed module gradient checks:");
    failures += print_checks(&composite_suite().context("composite suite")?);
    if failures > 0 {
        bail!("{failures} gradient check(s) failed");
    }
    println!("all gradient checks passed");
    Ok(())
}

fn report_cmd(cli: &Cli) -> Result<()> {
    let path = cli.out.join("metrics.csv");
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading {} (run `dan eval` first)", path.display()))?;
    let rows = parse_metrics_csv(&text)?;
    if rows.is_empty() {
        bail!("{} holds no metric rows", path.display());
    }
    let (csv, summary) = report(&rows)?;
    print!("{csv}");
    println!();
    print!("{summary}");
    Ok(())
}
