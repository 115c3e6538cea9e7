//! `zfs` — train and evaluate zero-shot-from-scratch experiments.
//!
//! Exit codes: 0 success, 2 config error, 3 ingest/schema error,
//! 4 provenance violation, 5 divergence, 1 anything else.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use zfs_core::data::{generate_synthetic, SyntheticSpec};
use zfs_core::error::ZfsError;
use zfs_core::experiment::{emit_results_table, plots, run_experiment, RunConfig, RunRecord};

#[derive(Parser)]
#[command(name = "zfs", version, about = "Zero-shot learning from scratch")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a config file and echo its normalized form.
    Verify { config: PathBuf },
    /// Run one experiment.
    Run {
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Force sequential execution (results are bit-identical either way).
        #[arg(long)]
        deterministic: bool,
        /// Override the output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run every *.cfg in a directory.
    Grid {
        config_dir: PathBuf,
        /// Shard runs across this many child processes.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        deterministic: bool,
    },
    /// Tabulate run records (args are record.txt paths or run directories).
    Table {
        records: Vec<PathBuf>,
        /// Where to write table.tsv / table.txt / accuracy.svg.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from a spec file ("-" for the bundled
    /// reference benchmark).
    Synth {
        spec: String,
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), ZfsError> {
    match cli.command {
        Command::Verify { config } => {
            let cfg = RunConfig::read(&config)?;
            print!("{}", cfg.to_text());
            Ok(())
        }
        Command::Run {
            config,
            seed,
            deterministic,
            output_dir,
        } => {
            if deterministic {
                zfs_core::exec::set_sequential(true);
            }
            let mut cfg = RunConfig::read(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            let record = run_experiment(&cfg)?;
            println!(
                "run complete: top1={:.4} per_class_top1={:.4} wall={:.1}s record={}",
                record.top1,
                record.per_class_top1,
                record.wall_time,
                cfg.output_dir.join("record.txt").display()
            );
            Ok(())
        }
        Command::Grid {
            config_dir,
            parallel,
            deterministic,
        } => grid(&config_dir, parallel, deterministic),
        Command::Table {
            records,
            output_dir,
        } => table(&records, output_dir.as_deref()),
        Command::Synth { spec, out, seed } => {
            let spec = if spec == "-" {
                SyntheticSpec::reference()
            } else {
                SyntheticSpec::read(Path::new(&spec))?
            };
            let result = generate_synthetic(&spec, seed, &out)?;
            spec.write(&out.join("spec.txt"))?;
            println!(
                "synthetic dataset written: {} ({} classes, {} images)",
                result.manifest_path.display(),
                result.manifest.class_count,
                result.manifest.image_index.len()
            );
            Ok(())
        }
    }
}

fn grid(config_dir: &Path, parallel: usize, deterministic: bool) -> Result<(), ZfsError> {
    let mut configs: Vec<PathBuf> = std::fs::read_dir(config_dir)
        .map_err(|e| ZfsError::Config(format!("{}: {e}", config_dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "cfg").unwrap_or(false))
        .collect();
    configs.sort();
    if configs.is_empty() {
        return Err(ZfsError::Config(format!(
            "no *.cfg files in {}",
            config_dir.display()
        )));
    }

    if parallel <= 1 {
        if deterministic {
            zfs_core::exec::set_sequential(true);
        }
        for path in &configs {
            eprintln!("== {}", path.display());
            let cfg = RunConfig::read(path)?;
            let record = run_experiment(&cfg)?;
            println!("{}\ttop1={:.4}", path.display(), record.top1);
        }
        return Ok(());
    }

    // Shard across child processes; per-run seeds are whatever the configs
    // say, so sharding cannot change results.
    let exe = std::env::current_exe()
        .map_err(|e| ZfsError::Config(format!("cannot locate own binary: {e}")))?;
    let mut pending: std::collections::VecDeque<&PathBuf> = configs.iter().collect();
    let mut running: Vec<(PathBuf, std::process::Child)> = Vec::new();
    let mut failed = 0usize;
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < parallel && !pending.is_empty() {
            let path = pending.pop_front().unwrap();
            let mut cmd = std::process::Command::new(&exe);
            cmd.arg("run").arg(path);
            if deterministic {
                cmd.arg("--deterministic");
            }
            let child = cmd
                .spawn()
                .map_err(|e| ZfsError::Config(format!("spawn failed: {e}")))?;
            running.push((path.clone(), child));
        }
        let (path, mut child) = running.remove(0);
        let status = child
            .wait()
            .map_err(|e| ZfsError::Config(format!("wait failed: {e}")))?;
        if !status.success() {
            eprintln!("run failed: {}", path.display());
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(ZfsError::Config(format!("{failed} grid runs failed")));
    }
    Ok(())
}

fn table(paths: &[PathBuf], output_dir: Option<&Path>) -> Result<(), ZfsError> {
    let mut records = Vec::new();
    for p in paths {
        let file = if p.is_dir() { p.join("record.txt") } else { p.clone() };
        records.push(RunRecord::read(&file)?);
    }
    let (tsv, human) = emit_results_table(&records)?;
    print!("{human}");
    if let Some(dir) = output_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| ZfsError::Config(format!("{}: {e}", dir.display())))?;
        std::fs::write(dir.join("table.tsv"), &tsv)
            .map_err(|e| ZfsError::Config(format!("table.tsv: {e}")))?;
        std::fs::write(dir.join("table.txt"), &human)
            .map_err(|e| ZfsError::Config(format!("table.txt: {e}")))?;
        let bars: Vec<(String, f64)> = records
            .iter()
            .map(|r| {
                (
                    format!(
                        "{}/{}/{}",
                        r.config.objective.name(),
                        r.config.local.name(),
                        r.config.arch.name()
                    ),
                    r.top1,
                )
            })
            .collect();
        std::fs::write(dir.join("accuracy.svg"), plots::accuracy_bars_svg(&bars))
            .map_err(|e| ZfsError::Config(format!("accuracy.svg: {e}")))?;
    }
    Ok(())
}
