use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::Parser;

use super::{io, parse_matrix, run_experiment, run_matrix, write_artifacts, Emit, ExperimentConfig};
use crate::error::{config_err, Result};

/// Simulate displaced patch-parallel diffusion sampling on a toy denoiser.
#[derive(Parser, Debug)]
#[command(name = "dpp", version)]
struct Cli {
    /// reference | naive | sync-pp | displaced
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Synchronous steps after the first, before displaced steps begin.
    #[arg(long)]
    warmup: Option<usize>,
    /// HxW, e.g. 48x48.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    noise_seed: Option<u64>,
    /// zeros | seed:N | path to a TNSR vector.
    #[arg(long)]
    cond: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// TNSR reference image for PSNR.
    #[arg(long)]
    compare_against: Option<PathBuf>,
    /// key = value file with compute_rate, link_bandwidth, link_latency,
    /// comm_uses_compute_fraction.
    #[arg(long)]
    cost_profile: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', num_args = 1..)]
    emit: Option<Vec<Emit>>,
    /// corrected | stale | separate | sync
    #[arg(long)]
    gn: Option<String>,
    /// threads | sequential | stress
    #[arg(long)]
    scheduler: Option<String>,
    /// Seed for the stress scheduler; implies --scheduler stress.
    #[arg(long)]
    stress_seed: Option<u64>,
    /// key = value defaults; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One experiment per line of key=value overrides; writes matrix.csv.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Load model weights from a TNSR bundle.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Write the model weights as a TNSR bundle.
    #[arg(long)]
    dump_weights: Option<PathBuf>,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = &cli.config {
        cfg.apply_file(p)?;
    }
    // Warm-up before mode so "displaced" picks it up regardless of flag order.
    let strings: [(&str, Option<String>); 7] = [
        ("warmup", cli.warmup.map(|v| v.to_string())),
        ("mode", cli.mode.clone()),
        ("size", cli.size.clone()),
        ("cond", cli.cond.clone()),
        ("gn", cli.gn.clone()),
        ("scheduler", cli.scheduler.clone()),
        ("stress-seed", cli.stress_seed.map(|v| v.to_string())),
    ];
    for (k, v) in strings {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    if let Some(v) = cli.devices {
        cfg.devices = v;
    }
    if let Some(v) = cli.steps {
        cfg.steps = v;
    }
    if let Some(v) = cli.model_seed {
        cfg.model_seed = v;
    }
    if let Some(v) = cli.noise_seed {
        cfg.noise_seed = v;
    }
    if let Some(v) = &cli.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &cli.compare_against {
        cfg.compare_against = Some(v.clone());
    }
    if let Some(p) = &cli.cost_profile {
        let text = fs::read_to_string(p).map_err(|e| config_err!("cost profile {}: {e}", p.display()))?;
        cfg.cost = super::parse_cost_profile(&text)?;
    }
    if let Some(v) = &cli.emit {
        cfg.emit = v.clone();
        cfg.emit.sort();
        cfg.emit.dedup();
    }
    if let Some(v) = &cli.weights {
        cfg.weights = Some(v.clone());
    }
    if let Some(v) = &cli.dump_weights {
        cfg.dump_weights = Some(v.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    if let Some(path) = &cli.matrix {
        let text = fs::read_to_string(path).map_err(|e| config_err!("matrix {}: {e}", path.display()))?;
        let configs = parse_matrix(&text, &cfg)?;
        let csv = run_matrix(&configs)?;
        fs::create_dir_all(&cfg.out)?;
        fs::write(cfg.out.join("matrix.csv"), &csv)?;
        print!("{csv}");
        return Ok(());
    }
    cfg.validate()?;
    let model = cfg.build_model()?;
    if let Some(p) = &cfg.dump_weights {
        io::dump_weights(p, &model)?;
    }
    let reference = cfg.compare_against.as_deref().map(io::read_tnsr).transpose()?;
    let result = run_experiment(&cfg, &model, reference.as_ref())?;
    write_artifacts(&result)?;
    let m = &result.metrics;
    if let Some(p) = m.psnr_db {
        println!("psnr_db {p}");
    }
    println!(
        "mode {} devices {} steps {}: makespan_us {} stall_us {} comm_bytes {}",
        cfg.mode.name(),
        cfg.devices,
        cfg.steps,
        m.timeline.makespan,
        m.timeline.stall_time(),
        m.comm.total()
    );
    Ok(())
}

/// Parse `argv` (program name first) and run. Exit codes: 0 success,
/// 2 configuration error, 1 runtime failure.
pub fn cli_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}
