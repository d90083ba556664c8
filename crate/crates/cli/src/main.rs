use std::path::PathBuf;
use std::process::ExitCode;

use cfris::experiments::{load_config, preset, presets, run, write_outputs, Engine};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfris", version, about = "Transceiver and RIS phase optimization for cell-free uplink MIMO")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment config (JSON). CFRIS_<KEY>__<SUBKEY> variables override config keys.
    Run {
        config: PathBuf,
        /// Comma-separated seeds or a half-open range `a..b`.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        engine: Option<Engine>,
        /// Output directory (defaults to the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long)]
        jobs: Option<usize>,
        /// Draws per iteration of the Monte-Carlo engine.
        #[arg(long)]
        mc_trials: Option<usize>,
    },
    /// Built-in experiment configurations.
    Presets {
        #[command(subcommand)]
        cmd: PresetCmd,
    },
}

#[derive(Subcommand)]
enum PresetCmd {
    List,
    /// Write a preset config to a file.
    Emit {
        name: String,
        path: PathBuf,
    },
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("--seeds: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("--seeds: {e}"))?;
        return Ok((a..b).collect());
    }
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| x.trim().parse().map_err(|e| format!("--seeds: `{x}`: {e}")))
        .collect()
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<(), String> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Presets { cmd: PresetCmd::List } => {
            for p in presets() {
                println!("{:<18} {}", p.name, p.description);
            }
        }
        Cmd::Presets {
            cmd: PresetCmd::Emit { name, path },
        } => {
            let cfg = preset(&name).ok_or_else(|| {
                let names: Vec<_> = presets().iter().map(|p| p.name).collect();
                format!("unknown preset `{name}` (available: {})", names.join(", "))
            })?;
            std::fs::write(&path, cfg.to_json() + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
            println!("wrote {}", path.display());
        }
        Cmd::Run {
            config,
            seeds,
            engine,
            out,
            jobs,
            mc_trials,
        } => {
            let mut cfg = load_config(&config).map_err(|e| e.to_string())?;
            if let Some(s) = seeds {
                cfg.seeds = parse_seeds(&s)?;
            }
            if let Some(e) = engine {
                cfg.engine = e;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if let Some(m) = mc_trials {
                cfg.mc_trials = m;
            }
            cfg.validate().map_err(|e| e.to_string())?;
            let res = run(&cfg, jobs).map_err(|e| e.to_string())?;
            let w = write_outputs(&cfg, &res, &cfg.output_dir).map_err(|e| e.to_string())?;
            let errors = res.rows.iter().filter(|r| !r.ok).count();
            println!("{} rows ({} errors), {} trace rows", res.rows.len(), errors, res.trace.len());
            println!("results: {}", w.results.display());
            println!("trace:   {}", w.trace.display());
            println!("run:     {}", w.manifest.display());
        }
    }
    Ok(())
}
