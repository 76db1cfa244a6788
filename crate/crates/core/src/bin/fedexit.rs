use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedexit::client::read_update;
use fedexit::datagen::write_shard;
use fedexit::model::{decode_params, encode_params, gradcheck_config, gradient_suite};
use fedexit::server::{aggregate, AggregationStrategy};
use fedexit::sim::{build_federation, emit_metrics, parse_config, parse_scenario, preset, run_scenario, MetricsFormat, PRESETS};
use fedexit::{Error, Result};

/// Federated early-exit training simulator.
#[derive(Parser)]
#[command(name = "fedexit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write metrics, the final model and the resolved config.
    Run {
        /// Scenario JSON file.
        #[arg(required_unless_present = "preset", conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Use a built-in preset instead of a file.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, short, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: MetricsFormat,
        /// Also dump each client's shard as FXS1 into this directory.
        #[arg(long)]
        shards: Option<PathBuf>,
    },
    /// Aggregate FXU1 update files into a global FXP1 model.
    Aggregate {
        #[arg(required = true)]
        updates: Vec<PathBuf>,
        #[arg(long, default_value = "layerwise")]
        strategy: AggregationStrategy,
        /// Current global model; layers nobody covers keep these values.
        #[arg(long)]
        global: PathBuf,
        #[arg(long, short, default_value = "aggregated.fxp")]
        out: PathBuf,
    },
    /// Finite-difference check of every gradient at every exit.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 2e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// List built-in presets, or print one.
    Presets { name: Option<String> },
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.into(),
        source,
    })
}

fn run(
    config: Option<PathBuf>,
    preset_name: Option<String>,
    out: &Path,
    format: MetricsFormat,
    shards: Option<&Path>,
) -> Result<()> {
    let scenario = match (config, preset_name) {
        (Some(path), _) => parse_config(&path)?,
        (None, Some(name)) => {
            let text = preset(&name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
            parse_scenario(text)?
        }
        (None, None) => unreachable!("clap requires one of them"),
    };
    mkdir(out)?;
    if let Some(dir) = shards {
        mkdir(dir)?;
        for shard in build_federation(&scenario)?.shards {
            write_shard(&shard, &dir.join(format!("client_{:03}.fxs", shard.client_id)))?;
        }
    }
    let output = run_scenario(&scenario)?;
    for w in &output.warnings {
        eprintln!("warning: {w}");
    }
    let metrics = out.join(format!("metrics.{}", format.extension()));
    emit_metrics(&output.reports, scenario.model.depth, &metrics, format)?;
    write(&out.join("final_model.fxp"), &encode_params(&output.final_model))?;
    write(&out.join("scenario.json"), scenario.echo().as_bytes())?;
    let info = serde_json::json!({
        "strategy": scenario.strategy.name(),
        "fedavg_missing_layers": "contributors_only",
        "empty_layer_policy": "keep_previous_global",
        "head_policy": "sample_weighted_same_exit",
        "metrics": metrics.file_name().and_then(|n| n.to_str()),
        "rounds": output.reports.len(),
        "skipped_rounds": output.reports.iter().filter(|r| r.skipped).count(),
        "warnings": output.warnings,
    });
    let info = serde_json::to_string_pretty(&info).expect("plain JSON") + "\n";
    write(&out.join("run.json"), info.as_bytes())?;
    if let Some(last) = output.reports.last() {
        for e in &last.exits {
            println!("exit {:>2}  loss {:.4}  accuracy {:.4}", e.exit, e.loss, e.accuracy);
        }
        println!("bytes uploaded {}", last.bytes);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn aggregate_files(updates: &[PathBuf], strategy: AggregationStrategy, global: &Path, out: &Path) -> Result<()> {
    let global = decode_params(&read(global)?)?;
    let updates = updates.iter().map(|p| read_update(p)).collect::<Result<Vec<_>>>()?;
    let (model, contributors) = aggregate(strategy, &global, &updates)?;
    write(out, &encode_params(&model))?;
    println!("strategy {}", strategy.name());
    println!("contributors per layer {:?}", contributors.counts());
    println!("wrote {}", out.display());
    Ok(())
}

fn gradcheck(seeds: u64, eps: f64, tolerance: f64) -> Result<bool> {
    let seeds: Vec<u64> = (0..seeds).collect();
    let checks = gradient_suite(&gradcheck_config(), &seeds, eps)?;
    let failures: Vec<_> = checks.iter().filter(|c| !(c.max_rel_error < tolerance)).collect();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    for f in &failures {
        println!("FAIL seed {} exit {} {}: {:.3e}", f.seed, f.exit, f.name, f.max_rel_error);
    }
    println!(
        "{} tensor checks over {} seeds, worst relative error {worst:.3e}",
        checks.len(),
        seeds.len()
    );
    Ok(failures.is_empty())
}

fn presets(name: Option<String>) -> Result<()> {
    match name {
        Some(name) => {
            let text = preset(&name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
            print!("{text}");
        }
        None => {
            for (name, desc, _) in PRESETS {
                println!("{name:<18} {desc}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            preset,
            out,
            format,
            shards,
        } => run(config, preset, &out, format, shards.as_deref()).map(|_| true),
        Command::Aggregate {
            updates,
            strategy,
            global,
            out,
        } => aggregate_files(&updates, strategy, &global, &out).map(|_| true),
        Command::Gradcheck {
            seeds,
            eps,
            tolerance,
        } => gradcheck(seeds, eps, tolerance),
        Command::Presets { name } => presets(name).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        // Numerical check failure.
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
