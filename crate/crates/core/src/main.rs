use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use dancegraph::codec::{analyze_bounds, BoundsTable, ComponentBounds, DEFAULT_BITS};
use dancegraph::harness::{
    self, corrective_experiment, record_sink, replay_producer, run_latency_experiment, BenchParams, RecordOptions,
    Recording, RecordingHeader, RecordingWriter, ReplayOptions, Scenario,
};
use dancegraph::rhythm::{BeatGrid, CorrectiveConfig, CorrectiveParams, ZoneGains};
use dancegraph::router::ConsumerMode;
use dancegraph::transport::{Client, Server, ServerConfig};
use dancegraph::{Router, SignalSelector, Skeleton};

#[derive(Parser)]
#[command(name = "dancegraph", version, about = "Low-latency dance pose streaming toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the UDP relay.
    Server {
        #[arg(long, default_value = "0.0.0.0:7700")]
        bind: SocketAddr,
        #[arg(long, default_value_t = 64)]
        max_clients: usize,
        /// Evict clients silent for this long.
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
        /// Exit after this many seconds and print final stats as JSON.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Stream a recording to a relay.
    Replay {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        server: SocketAddr,
        #[arg(long)]
        fps: Option<f64>,
        #[arg(long = "loop")]
        looped: bool,
        /// Stop after this many seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Quantization table (uniform 16-bit when absent).
        #[arg(long)]
        bounds: Option<PathBuf>,
    },
    /// Join a relay and write matching pose streams to a recording.
    Record {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        server: SocketAddr,
        #[arg(long, default_value = "pose:any:network")]
        select: String,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        frames: Option<u64>,
        #[arg(long)]
        bounds: Option<PathBuf>,
        /// Nominal rate written to the header.
        #[arg(long, default_value_t = 30.0)]
        fps: f32,
        #[arg(long, default_value_t = 34)]
        joints: usize,
    },
    /// Run a latency scenario.
    Bench {
        #[arg(long, value_enum, default_value_t = ScenarioArg::LoopbackRelay)]
        scenario: ScenarioArg,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        #[arg(long, default_value_t = 30)]
        clients: usize,
        #[arg(long, default_value_t = 64)]
        ring_capacity: usize,
        /// Use an already running relay.
        #[arg(long)]
        server: Option<SocketAddr>,
        /// Recording whose frames are sent (synthetic dance when absent).
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        bounds: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Beat-align and stylize a recording.
    Correct {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON corrective config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bpm: Option<f64>,
        #[arg(long)]
        phase_ms: Option<f64>,
        /// e.g. hips=2.0,hands=0.5
        #[arg(long)]
        gains: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Learn a quantization table from a directory of recordings.
    Bounds {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BITS)]
        bits: u8,
        #[arg(long, default_value_t = 0.1)]
        margin: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic recording.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40.0)]
        duration: f64,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        /// Sway frequency.
        #[arg(long, default_value_t = 1.0)]
        freq: f64,
        /// Time of the first sway extremum.
        #[arg(long, default_value_t = 230.0)]
        extremum_ms: f64,
        #[arg(long, default_value_t = 0.2)]
        amplitude: f64,
        #[arg(long, default_value_t = 120.0)]
        bpm: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    LocalDirect,
    LoopbackRelay,
    Swarm,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::LocalDirect => Scenario::LocalDirect,
            ScenarioArg::LoopbackRelay => Scenario::LoopbackRelay,
            ScenarioArg::Swarm => Scenario::Swarm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Sway,
    Noise,
    Dance,
}

fn load_table(path: Option<&Path>, joints: usize) -> Result<BoundsTable> {
    Ok(match path {
        Some(p) => BoundsTable::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => BoundsTable::uniform(&Skeleton::with_joint_count(joints)?, ComponentBounds::FULL, DEFAULT_BITS)?,
    })
}

fn skeleton_for(joints: usize) -> Result<Skeleton> {
    Ok(if joints == Skeleton::DEFAULT_JOINT_COUNT {
        Skeleton::body34()
    } else {
        Skeleton::with_joint_count(joints)?
    })
}

fn secs(s: f64) -> u64 {
    (s * 1e6) as u64
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Server {
            bind,
            max_clients,
            timeout_ms,
            duration,
        } => {
            let server = Server::bind(ServerConfig {
                bind,
                max_clients,
                client_timeout_us: timeout_ms * 1000,
            })?;
            // Scripts read the bound address (port 0 picks one) from here.
            println!("listening on {}", server.local_addr());
            std::io::stdout().flush()?;
            let stop = Arc::new(AtomicBool::new(false));
            if let Some(d) = duration {
                let stop = stop.clone();
                std::thread::spawn(move || {
                    std::thread::sleep(Duration::from_secs_f64(d));
                    stop.store(true, std::sync::atomic::Ordering::Relaxed);
                });
            }
            let stats = server.stats();
            server.run(&stop)?;
            println!("{}", serde_json::to_string(&stats.snapshot())?);
        }
        Command::Replay {
            file,
            server,
            fps,
            looped,
            duration,
            bounds,
        } => {
            let rec = Recording::load(&file).with_context(|| format!("loading {}", file.display()))?;
            let table = load_table(bounds.as_deref(), rec.joint_count())?;
            let mut client = Client::connect(server, Router::new())?;
            info!("joined {server} as user {}", client.user_id());
            let opts = ReplayOptions {
                fps,
                looped,
                max_duration_us: duration.map(secs),
            };
            let stats = replay_producer(&rec, &table, &mut client, &opts, &AtomicBool::new(false))?;
            let jitter = harness::percentile(
                &{
                    let mut j = stats.interval_jitter_us(fps.unwrap_or(rec.header.nominal_fps as f64));
                    j.sort_unstable();
                    j
                },
                99.0,
            );
            println!(
                "emitted {} packets ({} loops), inter-emit jitter p99 {} us, clamped components {}",
                stats.emitted, stats.loops, jitter, stats.encoder.clamped
            );
        }
        Command::Record {
            out,
            server,
            select,
            duration,
            frames,
            bounds,
            fps,
            joints,
        } => {
            let table = load_table(bounds.as_deref(), joints)?;
            let skeleton = skeleton_for(table.joint_count())?;
            let selector: SignalSelector = select.parse()?;
            let router = Router::new();
            let mut consumer = router.subscribe(selector, ConsumerMode::Every);
            let client = Client::connect(server, router)?;
            info!("joined {server} as user {}", client.user_id());
            let mut writer = RecordingWriter::create(&out, RecordingHeader::new(table.joint_count(), fps)?)?;
            let stats = record_sink(
                &mut consumer,
                &table,
                &skeleton,
                &mut writer,
                &RecordOptions {
                    max_duration_us: duration.map(secs),
                    idle_timeout_us: None,
                    max_frames: frames,
                },
                &AtomicBool::new(false),
            )?;
            writer.finish()?;
            println!("{}", serde_json::to_string(&stats)?);
        }
        Command::Bench {
            scenario,
            duration,
            fps,
            clients,
            ring_capacity,
            server,
            file,
            bounds,
            json,
        } => {
            let recording = file.as_deref().map(Recording::load).transpose()?;
            let table = bounds.as_deref().map(BoundsTable::load).transpose()?;
            let params = BenchParams {
                duration_s: duration,
                fps,
                clients,
                ring_capacity,
                server,
                recording,
                table,
            };
            let report = run_latency_experiment(scenario.into(), &params)?;
            println!("{}", report.summary());
            if let Some(p) = json {
                std::fs::write(&p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Correct {
            input,
            out,
            config,
            bpm,
            phase_ms,
            gains,
            report,
        } => {
            let mut cfg = match &config {
                Some(p) => CorrectiveConfig::load(p)?,
                None => CorrectiveConfig::default(),
            };
            if let Some(b) = bpm {
                cfg.bpm = b;
            }
            if let Some(p) = phase_ms {
                cfg.phase_offset_ms = p;
            }
            let grid: BeatGrid = cfg.grid()?;
            let mut params: CorrectiveParams = cfg.params()?;
            if let Some(g) = gains {
                let parsed = ZoneGains::parse_list(&g)?;
                for zone in dancegraph::BodyZone::ALL {
                    if parsed.get(zone) != 1.0 {
                        params.zone_gains.set(zone, parsed.get(zone));
                    }
                }
                params.validate()?;
            }
            let rec = Recording::load(&input).with_context(|| format!("loading {}", input.display()))?;
            let skeleton = skeleton_for(rec.joint_count())?;
            let (_, r) = corrective_experiment(&rec, &skeleton, &grid, &params, Some(&out))?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.1} ms"));
            println!("{}", r.message);
            println!(
                "beat alignment error: before {}, after {} (settled at {})",
                fmt(r.pre_error_ms),
                fmt(r.post_error_ms),
                r.settle_time_s.map_or("n/a".into(), |s| format!("{s:.1} s"))
            );
            if let Some(ratio) = r.amplitude_ratio() {
                println!("dominant feature amplitude ratio {ratio:.3}");
            }
            if let Some(p) = report {
                std::fs::write(&p, serde_json::to_string_pretty(&r)?)?;
            }
        }
        Command::Bounds {
            corpus,
            bits,
            margin,
            out,
        } => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&corpus)
                .with_context(|| format!("reading {}", corpus.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "dgrc"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!("no .dgrc recordings in {}", corpus.display());
            }
            let recs = paths.iter().map(Recording::load).collect::<Result<Vec<_>, _>>()?;
            let jc = recs[0].joint_count();
            if recs.iter().any(|r| r.joint_count() != jc) {
                bail!("recordings disagree on joint count");
            }
            let corpus: Vec<_> = recs.into_iter().map(|r| r.frames).collect();
            let table = analyze_bounds(&corpus, &skeleton_for(jc)?, margin, bits)?;
            table.save(&out)?;
            println!(
                "{} joints at {bits} bits: {} bytes per frame, worst-case error {:.4} deg",
                jc,
                table.frame_len(),
                dancegraph::codec::max_angular_error(&table).to_degrees()
            );
        }
        Command::Synth {
            kind,
            out,
            duration,
            fps,
            freq,
            extremum_ms,
            amplitude,
            bpm,
            seed,
        } => {
            let rec = match kind {
                SynthKind::Sway => harness::synth::sway(&harness::synth::SwaySpec {
                    duration_s: duration,
                    fps,
                    frequency_hz: freq,
                    amplitude_rad: amplitude,
                    extremum_s: extremum_ms * 1e-3,
                    ..Default::default()
                })?,
                SynthKind::Noise => harness::synth::noise(duration, fps, Skeleton::DEFAULT_JOINT_COUNT, seed)?,
                SynthKind::Dance => harness::synth::dance(duration, fps, bpm, seed)?,
            };
            rec.save(&out)?;
            println!("wrote {} frames to {}", rec.frames.len(), out.display());
        }
    }
    Ok(())
}
