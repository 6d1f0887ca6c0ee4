use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use radleg::estimator::{process_log, EstimatorConfig, Mode};
use radleg::io_dataset::synth::{presets, synth_generate, SynthScenario};
use radleg::io_dataset::{load_log, read_trajectory, write_log, write_trajectory, SensorLog};
use radleg::metrics::{Alignment, MetricsReport, CSV_HEADER, DEFAULT_SUB_LENGTH};
use radleg::radar_ego::{estimate_ego_velocity, ransac_xy, ransac_xz};

#[derive(Parser)]
#[command(name = "radleg", version, about = "Radar and leg odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a trajectory from a log directory.
    Run {
        #[arg(long)]
        log: PathBuf,
        /// Estimator settings (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the sensors enabled in the config.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Compare an estimated trajectory with a reference.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value = "posyaw")]
        align: Alignment,
        /// Sub-trajectory length for the relative error, m.
        #[arg(long, default_value_t = DEFAULT_SUB_LENGTH)]
        sub_length: f64,
    },
    /// Generate a synthetic log directory.
    Synth {
        /// Scenario file (TOML).
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        scenario: Option<PathBuf>,
        /// Built-in scenario: straight, standing, stair-loop, curved-walk, stair-climb.
        #[arg(long)]
        preset: Option<String>,
        /// Add typical sensor noise to the scenario.
        #[arg(long)]
        noisy: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the ego-velocity stages for one radar scan.
    Egovel {
        #[arg(long)]
        log: PathBuf,
        /// Scan index.
        #[arg(long)]
        scan: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run radar-only, leg-only and fused estimation on one log and compare.
    Ablate {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Modes to run; all three when omitted.
        #[arg(long, value_delimiter = ',')]
        mode: Vec<Mode>,
        #[arg(long, default_value_t = DEFAULT_SUB_LENGTH)]
        sub_length: f64,
    },
}

fn load_config(path: Option<&Path>) -> Result<EstimatorConfig> {
    match path {
        Some(p) => EstimatorConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(EstimatorConfig::default()),
    }
}

fn open_log(dir: &Path) -> Result<SensorLog> {
    load_log(dir).with_context(|| format!("log {}", dir.display()))
}

fn preset(name: &str) -> Result<SynthScenario> {
    Ok(match name {
        "straight" => presets::straight_line(10.0, 15.0),
        "standing" => presets::standing(10.0),
        "stair-loop" => presets::stair_loop(),
        "curved-walk" => presets::curved_walk(),
        "stair-climb" => presets::stair_climb(),
        _ => bail!("unknown preset {name:?}"),
    })
}

fn run(log: &Path, config: Option<&Path>, out: &Path, mode: Option<Mode>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(m) = mode {
        cfg = cfg.with_mode(m);
    }
    let log = open_log(log)?;
    let res = process_log(&log, &cfg)?;
    write_trajectory(&res.trajectory, out)?;
    let s = &res.stats;
    eprintln!(
        "{} keyframes, {}/{} valid scans, {} leg samples, {:.2} ms per scan",
        s.keyframes,
        s.valid_scans,
        s.scans,
        s.leg_velocities,
        s.ms_per_scan()
    );
    Ok(())
}

fn eval(est: &Path, reference: &Path, align: Alignment, sub_length: f64) -> Result<()> {
    let est = read_trajectory(est)?;
    let reference = read_trajectory(reference)?;
    let m = MetricsReport::compute(&est, &reference, align, sub_length)?;
    println!("{CSV_HEADER}");
    println!("{}", m.csv_row());
    println!();
    println!("{}", m.table());
    Ok(())
}

fn synth(
    scenario: Option<&Path>,
    preset_name: Option<&str>,
    noisy: bool,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut sc = match (scenario, preset_name) {
        (Some(p), _) => {
            SynthScenario::load(p).with_context(|| format!("scenario {}", p.display()))?
        }
        (None, Some(name)) => preset(name)?,
        (None, None) => bail!("either --scenario or --preset is required"),
    };
    if noisy {
        sc = presets::with_realistic_noise(sc);
    }
    if let Some(s) = seed {
        sc.seed = s;
    }
    let generated = synth_generate(&sc)?;
    write_log(&generated.log, out)?;
    eprintln!("{}", generated.log.summary());
    Ok(())
}

fn egovel(log: &Path, k: usize, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let log = open_log(log)?;
    let Some(scan) = log.radar.get(k) else {
        bail!("scan {k} out of range, log has {}", log.radar.len());
    };
    let params = &cfg.ransac;
    println!(
        "scan {k} at t = {:.3} s, {} points",
        scan.timestamp,
        scan.points.len()
    );
    match ransac_xy(scan, params) {
        Ok(xy) => {
            println!(
                "xy stage: {} inliers, v_x {:.4}, v_y {:.4}",
                xy.inliers.len(),
                xy.vx,
                xy.vy
            );
            match ransac_xz(scan, &xy.inliers, xy.vx, xy.vy, params) {
                Ok(xz) if params.xz_stage => {
                    println!("xz stage: {} inliers, v_z {:.4}", xz.inliers.len(), xz.vz)
                }
                Ok(_) => println!("xz stage: disabled"),
                Err(e) => println!("xz stage: {e}"),
            }
        }
        Err(e) => println!("xy stage: {e}"),
    }
    let est = estimate_ego_velocity(scan, params);
    if est.valid {
        let v = est.v_hat;
        println!("estimate: v = [{:.4}, {:.4}, {:.4}] m/s", v.x, v.y, v.z);
        println!("covariance (m^2/s^2):");
        for r in 0..3 {
            let row = est.covariance.row(r);
            println!("  {:>12.4e} {:>12.4e} {:>12.4e}", row[0], row[1], row[2]);
        }
    } else {
        let why = est.diagnostics.failure.as_deref().unwrap_or("unknown");
        println!("estimate: invalid ({why})");
    }
    Ok(())
}

fn ablate(log: &Path, config: Option<&Path>, modes: &[Mode], sub_length: f64) -> Result<()> {
    let cfg = load_config(config)?;
    let log = open_log(log)?;
    let modes = if modes.is_empty() {
        vec![Mode::RadarOnly, Mode::LegOnly, Mode::Full]
    } else {
        modes.to_vec()
    };
    println!("mode,{CSV_HEADER},keyframes,ms_per_scan");
    let mut rows = Vec::new();
    for mode in modes {
        let res = process_log(&log, &cfg.with_mode(mode))?;
        let metrics = match &log.ground_truth {
            Some(gt) => Some(MetricsReport::compute(
                &res.trajectory,
                gt,
                Alignment::PosYaw,
                sub_length,
            )?),
            None => None,
        };
        let csv = metrics
            .as_ref()
            .map_or_else(|| ",,,,,,".to_string(), MetricsReport::csv_row);
        println!(
            "{},{csv},{},{:.3}",
            mode.name(),
            res.stats.keyframes,
            res.stats.ms_per_scan()
        );
        rows.push((mode, metrics));
    }
    println!();
    println!(
        "{:<6} {:>9} {:>9} {:>9}",
        "mode", "ATE_t m", "ATE_z m", "RTE_t m"
    );
    for (mode, m) in rows {
        match m {
            Some(m) => println!(
                "{:<6} {:>9.4} {:>9.4} {:>9.4}",
                mode.name(),
                m.ate_t,
                m.ate_z,
                m.rte_t
            ),
            None => println!("{:<6} {:>9} {:>9} {:>9}", mode.name(), "-", "-", "-"),
        }
    }
    Ok(())
}

/// Error chain joined with ": ", skipping causes the outer message already
/// quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run {
            log,
            config,
            out,
            mode,
        } => run(log, config.as_deref(), out, *mode),
        Command::Eval {
            est,
            reference,
            align,
            sub_length,
        } => eval(est, reference, *align, *sub_length),
        Command::Synth {
            scenario,
            preset,
            noisy,
            out,
            seed,
        } => synth(scenario.as_deref(), preset.as_deref(), *noisy, out, *seed),
        Command::Egovel { log, scan, config } => egovel(log, *scan, config.as_deref()),
        Command::Ablate {
            log,
            config,
            mode,
            sub_length,
        } => ablate(log, config.as_deref(), mode, *sub_length),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
