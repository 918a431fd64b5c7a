//! `molcomm`: run scenarios, reproduce figure presets, build reference
//! caches and compute analytic BER curves.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use molcomm_core::harness::{load_references, run_scenario, summarize, HarnessOptions};
use molcomm_core::lna::{z_moments_and_ber, LnaFilter, LnaOptions, DEFAULT_LNA_STEP};
use molcomm_core::presets::{repro_figure, PresetOptions, PRESETS};
use molcomm_core::scenario::{ConfigurationKind, ScenarioConfig};

#[derive(Parser)]
#[command(name = "molcomm", version, about = "Molecular communication simulation and demodulation")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write BER curves.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Reference-signal cache directory.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Reproduce a figure preset and check its claims.
    Repro {
        /// Preset name; omit with --list to see them all.
        name: Option<String>,
        #[arg(long)]
        list: bool,
        /// Multiplier on every run count.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Estimate reference signals for a scenario into a cache directory.
    Ref {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "ref-cache")]
        cache: PathBuf,
    },
    /// Analytic (LNA) moments and BER for a two-symbol scenario.
    Lna {
        config: PathBuf,
        /// Defaults to the scenario's receiver configuration.
        #[arg(long, value_enum)]
        filter: Option<FilterArg>,
        #[arg(long, default_value_t = DEFAULT_LNA_STEP)]
        step: f64,
        #[arg(long, default_value_t = 0.01)]
        report_dt: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterArg {
    Partitioned,
    Mixed,
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Run { config, seed, out, cache } => {
            let cfg = load(&config, seed)?;
            let opts = HarnessOptions {
                out_dir: Some(out.clone()),
                cache_dir: cache,
            };
            let run = run_scenario(&cfg, &opts)?;
            let t = cfg.run.t_end;
            print!("{}", summarize(&run.result, &[t / 2.0, t]));
            println!("wrote {}", out.join("ber.csv").display());
        }
        Command::Repro {
            name,
            list,
            scale,
            seed,
            out,
            cache,
        } => {
            if list || name.is_none() {
                for p in PRESETS {
                    println!("{p}");
                }
                return Ok(ExitCode::SUCCESS);
            }
            let name = name.expect("checked above");
            if !(scale > 0.0) {
                bail!("--scale must be positive");
            }
            let opts = PresetOptions {
                scale,
                seed,
                out_dir: Some(out.join(&name)),
                cache_dir: cache,
            };
            let report = repro_figure(&name, &opts)?;
            for c in &report.claims {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("wrote {}", out.join(&name).join("report.json").display());
            if !report.passed {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Ref { config, seed, cache } => {
            let cfg = load(&config, seed)?;
            let model = cfg.build_model()?;
            let opts = HarnessOptions {
                out_dir: None,
                cache_dir: Some(cache.clone()),
            };
            let set = load_references(&cfg, &model, &opts)?;
            println!(
                "references for {} symbols x {} receivers ({} runs, dt {}) in {}",
                set.alpha.len(),
                set.alpha[0].len(),
                set.n_runs,
                set.dt,
                cache.display()
            );
        }
        Command::Lna {
            config,
            filter,
            step,
            report_dt,
            out,
        } => {
            let cfg = load(&config, None)?;
            let model = cfg.build_model()?;
            let filter = match filter {
                Some(FilterArg::Partitioned) => LnaFilter::Partitioned,
                Some(FilterArg::Mixed) => LnaFilter::Mixed,
                None if cfg.receiver.configuration == ConfigurationKind::Partitioned => LnaFilter::Partitioned,
                None => LnaFilter::Mixed,
            };
            let opts = LnaOptions { filter, step, report_dt };
            std::fs::create_dir_all(&out)?;
            for tx in 0..model.symbol_count() {
                let res = z_moments_and_ber(&model, tx, cfg.run.t_end, &opts)?;
                let path = out.join(format!("lna_tx{tx}.csv"));
                let mut buf = Vec::new();
                res.write_csv(&mut buf)?;
                std::fs::write(&path, buf)?;
                println!(
                    "symbol {tx}: BER at t = {} s is {:.5}; wrote {}",
                    cfg.run.t_end,
                    res.ber.last().copied().unwrap_or(f64::NAN),
                    path.display()
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
