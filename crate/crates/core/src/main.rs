use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use beamtrack::orchestrator::{self, fixtures, realtime, replay, Mode, Scenario};
use beamtrack::postproc::{self, Calibration};

#[derive(Parser)]
#[command(name = "beamtrack", version, about = "Beam-tracking campaign simulator and sounder post-processing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario (virtual time unless --realtime or the scenario says so).
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        realtime: bool,
        /// Serve the operator API while running (realtime only).
        #[arg(long)]
        serve: Option<SocketAddr>,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stream a recorded run over the operator API.
    Replay {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long)]
        serve: SocketAddr,
    },
    /// Recorded segments plus telemetry to power samples and GeoJSON.
    Postproc {
        #[arg(long = "in")]
        segments: PathBuf,
        #[arg(long)]
        telemetry: PathBuf,
        /// Calibration file; nominal offsets when omitted.
        #[arg(long)]
        cal: Option<PathBuf>,
        /// Scenario whose sounder and postproc settings to use.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive per-gain calibration offsets from a reference tap.
    Calibrate {
        #[arg(long, default_value_t = -60.0, allow_hyphen_values = true)]
        reference_dbm: f64,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate the shipped route files.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_scenario(path: &Option<PathBuf>) -> Result<Scenario> {
    match path {
        Some(p) => Ok(Scenario::load(p)?),
        None => Ok(Scenario::new("", fixtures::CAMPUS_TX, 1.0)),
    }
}

fn write_fixtures(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, route) in [("campus_loop.json", fixtures::campus_loop()), ("street.json", fixtures::street_out_and_back())] {
        std::fs::write(dir.join(name), route.to_json() + "\n").with_context(|| format!("writing {name}"))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { scenario, out, realtime: rt, serve, seed } => {
            let mut sc = Scenario::load(&scenario)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            if rt {
                sc.mode = Mode::Realtime;
            }
            if serve.is_some() && sc.mode != Mode::Realtime {
                bail!("--serve needs realtime mode (--realtime)");
            }
            let outputs = match sc.mode {
                Mode::Virtual => orchestrator::run_scenario(&sc, &out)?,
                Mode::Realtime => {
                    let runtime = tokio::runtime::Runtime::new()?;
                    runtime.block_on(realtime::run_realtime(&sc, &out, serve))?
                }
            };
            let s = &outputs.stats;
            if let Some(p) = &s.pointing.combined {
                log::info!("pointing error mean {:.3} deg, p95 {:.3} deg", p.mean_deg, p.p95_deg);
            }
            if let Some(f) = &s.fixes.combined {
                log::info!("fix 3D RMS {:.3} m over {} fixes", f.rms_3d_m, f.count);
            }
            if let Some(r) = &s.response.total {
                log::info!("response mean {:.2} ms over {} interactions", r.mean_ms, r.count);
            }
            log::info!("{} segments, {} acked records lost", s.segments.recorded, s.middleware.lost_acked);
            println!("{}", outputs.dir.join(orchestrator::report::STATS_FILE).display());
        }
        Cmd::Replay { input, speed, serve } => {
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(replay::serve_replay(&input, speed, serve))?;
        }
        Cmd::Postproc { segments, telemetry, cal, scenario, out } => {
            let sc = load_scenario(&scenario)?;
            let cal = match cal {
                Some(p) => Calibration::load(&p)?,
                None => Calibration::nominal(),
            };
            let summary = postproc::run_postproc(&segments, &telemetry, &cal, &sc.sounder.pn, &sc.postproc, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Cmd::Calibrate { reference_dbm, scenario, out } => {
            let sc = load_scenario(&scenario)?;
            let cal = postproc::calibrate(&sc.sounder, &sc.postproc, reference_dbm)?;
            std::fs::write(&out, serde_json::to_vec_pretty(&cal)?)?;
            println!("{}", out.display());
        }
        Cmd::Fixtures { out } => write_fixtures(&out)?,
    }
    Ok(())
}
