use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::rngs::{OsRng, StdRng};
use rand::SeedableRng;

use olorid::codec::{self, CodecError, RidMessage};
use olorid::crypto::{kgen, CryptoError, CurveProfile, KeyPair};
use olorid::protocol::{ProtocolError, PublicRegistry};
use olorid::sim::{
    self, emit_report, obfuscate_trace, run_experiment, synth_trajectory, write_releases, Experiment,
    ReportFormat, SimConfig, SimError, TrajectoryKind,
};

/// Obfuscated Remote ID broadcasting: keys, registration, message codec and
/// the use-case simulations.
#[derive(Parser)]
#[command(name = "olo-rid", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a TTP key pair as raw `<out>.pk` and `<out>.sk` files.
    Keygen {
        #[arg(long, default_value = "nist256")]
        curve: CurveProfile,
        #[arg(long, default_value = "ttp")]
        out: PathBuf,
        /// Deterministic keys from a seed instead of the OS generator.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Add a UAV to the public registry and print the key to install on it.
    Register {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        uid: u32,
        /// TTP public key file written by `keygen`.
        #[arg(long)]
        pk: PathBuf,
        /// Registration time, Unix seconds.
        #[arg(long, default_value_t = 0)]
        at: u64,
    },
    /// Obfuscate a `t,lat,lon,alt` trajectory and write the released positions.
    ObfuscateTrace {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// JSON message on stdin to hex on stdout.
    Encode {
        #[arg(long, default_value = "nist256")]
        curve: CurveProfile,
    },
    /// Hex message on stdin to JSON on stdout.
    Decode {
        #[arg(long, default_value = "nist256")]
        curve: CurveProfile,
    },
    /// Run a use-case experiment and write its metrics report.
    Simulate {
        #[arg(value_enum)]
        experiment: ExperimentArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
    },
    /// Write a synthetic trajectory CSV.
    SynthTraj {
        #[arg(long, value_enum, default_value = "line")]
        kind: KindArg,
        #[arg(long, default_value_t = 5.0)]
        speed: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Fly the path back and forth until it has this many fixes.
        #[arg(long, default_value_t = 0)]
        min_fixes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    Privacy,
    Nfz,
    Charge,
    Daas,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Line,
    Lawnmower,
    Loop,
}

/// Bad input rather than a failing environment.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Invalid>()
            || e.is::<CodecError>()
            || e.is::<CryptoError>()
            || e.is::<serde_json::Error>()
            || e.is::<hex::FromHexError>()
            || e.downcast_ref::<SimError>().is_some_and(SimError::is_validation)
            || e.downcast_ref::<ProtocolError>().is_some_and(|p| !matches!(p, ProtocolError::Io(_)))
    })
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => io::stdout().write_all(bytes).context("writing stdout"),
    }
}

fn read_stdin() -> Result<String> {
    let mut s = String::new();
    io::stdin().read_to_string(&mut s).context("reading stdin")?;
    Ok(s)
}

fn load_config(path: Option<&Path>) -> Result<SimConfig> {
    match path {
        Some(p) => SimConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(SimConfig::default()),
    }
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Keygen { curve, out, seed } => {
            let keys: KeyPair = match seed {
                Some(s) => kgen(curve, &mut StdRng::seed_from_u64(s)),
                None => kgen(curve, &mut OsRng),
            };
            let (pk, sk) = (with_ext(&out, "pk"), with_ext(&out, "sk"));
            fs::write(&pk, &keys.public_key).with_context(|| format!("writing {}", pk.display()))?;
            fs::write(&sk, &keys.secret_key).with_context(|| format!("writing {}", sk.display()))?;
            log::info!("{} key pair written to {} / {}", curve.name(), pk.display(), sk.display());
            println!("{}", hex::encode(&keys.public_key));
        }
        Cmd::Register { registry, uid, pk, at } => {
            let key = fs::read(&pk).with_context(|| format!("reading {}", pk.display()))?;
            let mut reg = PublicRegistry::load(&registry)?;
            reg.register(uid, at)?;
            reg.save(&registry)?;
            log::info!("uid {uid} registered ({} entries)", reg.len());
            println!("{}", hex::encode(key));
        }
        Cmd::ObfuscateTrace { input, epsilon, delta, out, config, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epsilon {
                cfg.epsilon = e;
            }
            if let Some(d) = delta {
                cfg.delta = d;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let traj = sim::load_trajectory(&input)?;
            let records = obfuscate_trace(&traj, &cfg)?;
            let f = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_releases(&records, io::BufWriter::new(f))?;
            log::info!("{} releases written to {}", records.len(), out.display());
        }
        Cmd::Encode { curve } => {
            let msg: RidMessage = serde_json::from_str(&read_stdin()?)?;
            println!("{}", hex::encode(codec::encode(&msg, curve)?));
        }
        Cmd::Decode { curve } => {
            let text = read_stdin()?;
            let bytes = hex::decode(text.split_whitespace().collect::<String>())?;
            let msg = codec::decode(&bytes, curve)?;
            println!("{}", serde_json::to_string_pretty(&msg)?);
        }
        Cmd::Simulate { experiment, config, out, format } => {
            let cfg = load_config(config.as_deref())?;
            let experiment = match experiment {
                ExperimentArg::Privacy => Experiment::Privacy,
                ExperimentArg::Nfz => Experiment::Nfz,
                ExperimentArg::Charge => Experiment::Charge,
                ExperimentArg::Daas => Experiment::Daas,
            };
            let traj = cfg.trajectory()?;
            log::info!("{experiment}: {} fixes x {} runs", traj.len(), cfg.runs);
            let report = run_experiment(experiment, &traj, &cfg)?;
            let format = match format {
                FormatArg::Json => ReportFormat::Json,
                FormatArg::Csv => ReportFormat::Csv,
            };
            write_out(out.as_deref(), &emit_report(&report, format)?)?;
        }
        Cmd::SynthTraj { kind, speed, seed, min_fixes, out } => {
            if !(speed > 0.0) {
                return Err(invalid(format!("speed must be positive, got {speed}")));
            }
            let kind = match kind {
                KindArg::Line => TrajectoryKind::Line,
                KindArg::Lawnmower => TrajectoryKind::Lawnmower,
                KindArg::Loop => TrajectoryKind::Loop,
            };
            let traj = synth_trajectory(kind, &SimConfig::default().area, speed, seed)?.extended_to(min_fixes);
            let mut buf = Vec::new();
            traj.write_csv(&mut buf)?;
            write_out(out.as_deref(), &buf)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OLORID_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 2 } else { 1 })
        }
    }
}
