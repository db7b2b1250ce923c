//! Command-line entry point: broker, producers, jobs and result inspection.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vitalcep::broker::{Broker, BrokerApi};
use vitalcep::config::Config;
use vitalcep::runtime::net::Maintenance;
use vitalcep::runtime::store::{read_records, user_file};
use vitalcep::runtime::{
    run_producer, serve, ClockMode, JobRunner, RemoteBroker, ReplaySpec, RiskJob, StressJob,
    WindowJob,
};
use vitalcep::synth::{beat_times, bp_waveform, modulated_rr, EcgTemplate, SyntheticEcg};
use vitalcep::wire::{DataType, ResultKind};

#[derive(Parser)]
#[command(name = "vitalcep", version, about = "Streaming ECG/BP risk and stress analytics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the broker and serve it over TCP.
    Broker(BrokerArgs),
    /// Replay a signal file into a topic.
    Produce(ProduceArgs),
    /// Run an analytics job.
    Job(JobArgs),
    /// Inspect stored results.
    Results {
        #[command(subcommand)]
        command: ResultsCommand,
    },
    /// Write a synthetic ECG or BP signal file.
    Synth(SynthArgs),
}

#[derive(Args)]
struct BrokerArgs {
    /// Defaults to broker.address from the config.
    #[arg(long)]
    listen: Option<String>,
    /// Persist topics and cursors here; defaults to broker.data_dir, and
    /// the broker is in-memory when neither is set.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Snapshot and pruning period in milliseconds.
    #[arg(long, default_value_t = 1000)]
    maintenance_ms: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Signal {
    Ecg,
    Bp,
}

impl From<Signal> for DataType {
    fn from(s: Signal) -> Self {
        match s {
            Signal::Ecg => DataType::Ecg,
            Signal::Bp => DataType::Bp,
        }
    }
}

#[derive(Args)]
struct ProduceArgs {
    #[arg(long)]
    file: PathBuf,
    /// Defaults to the topic configured for the signal type.
    #[arg(long)]
    topic: Option<String>,
    #[arg(long)]
    user: String,
    #[arg(long = "type", value_enum, default_value = "ecg")]
    signal: Signal,
    /// Sample rate in Hz, used for rows without timestamps and for pacing.
    #[arg(long, default_value_t = 500.0)]
    rate: f64,
    /// realtime, fast, or xK for K-times acceleration.
    #[arg(long, default_value = "realtime")]
    clock: ClockMode,
    #[arg(long = "loop")]
    looped: bool,
    /// Timestamp of the first synthesized row, ms since epoch.
    #[arg(long, default_value_t = 0)]
    start_ms: u64,
    #[arg(long)]
    broker: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum JobKind {
    Risk,
    Stress,
}

#[derive(Args)]
struct JobArgs {
    #[arg(value_enum)]
    kind: JobKind,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides broker.address.
    #[arg(long)]
    broker: Option<String>,
    /// Drain and exit after this many seconds without input.
    #[arg(long)]
    exit_when_idle: Option<f64>,
    /// Identifier written to the result store header.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Risk,
    Stress,
}

#[derive(Subcommand)]
enum ResultsCommand {
    /// Print the newest stored records for one user.
    Tail {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 10)]
        lines: usize,
        /// Defaults to store.dir from the config.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "type", value_enum, default_value = "ecg")]
    signal: Signal,
    #[arg(long, default_value_t = 60.0)]
    seconds: f64,
    #[arg(long, default_value_t = 500.0)]
    rate: f64,
    /// Mean RR interval in ms.
    #[arg(long, default_value_t = 800.0)]
    rr_ms: f64,
    /// Write `timestamp_ms,value` rows instead of bare values.
    #[arg(long)]
    timestamps: bool,
}

fn load_config(path: Option<&PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn stop_flag() -> Result<Arc<AtomicBool>> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
        .context("installing the interrupt handler")?;
    Ok(stop)
}

fn run_broker(args: BrokerArgs) -> Result<()> {
    let config = load_config(args.config.as_ref())?;
    let listen = args.listen.unwrap_or(config.broker_address);
    let data_dir = args.data_dir.or(config.broker_data_dir);
    let broker = Arc::new(match &data_dir {
        Some(dir) => Broker::open(dir).with_context(|| format!("opening {}", dir.display()))?,
        None => Broker::in_memory(),
    });
    let stop = stop_flag()?;
    let server = serve(broker.clone(), &listen).with_context(|| format!("listening on {listen}"))?;
    let maintenance = Maintenance::spawn(broker.clone(), Duration::from_millis(args.maintenance_ms))?;
    eprintln!("broker listening on {}", server.local_addr());
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    server.shutdown();
    maintenance.stop();
    broker.snapshot().context("final snapshot")?;
    for t in broker.topic_names() {
        eprintln!("topic {t} head={}", broker.head(&t)?);
    }
    Ok(())
}

fn run_produce(args: ProduceArgs) -> Result<()> {
    let config = load_config(args.config.as_ref())?;
    let data_type: DataType = args.signal.into();
    let topic = args.topic.clone().unwrap_or_else(|| match data_type {
        DataType::Ecg => config.topics.ecg.clone(),
        DataType::Bp => config.topics.bp.clone(),
    });
    let address = args.broker.clone().unwrap_or(config.broker_address.clone());
    let broker = RemoteBroker::connect(&address).with_context(|| format!("connecting to {address}"))?;
    broker.create_topic(&topic, config.topics.retention)?;
    let mut spec = ReplaySpec::new(&args.file, &topic, &args.user, data_type, args.rate);
    spec.clock = args.clock;
    spec.looped = args.looped;
    spec.start_ms = args.start_ms;
    let stop = stop_flag()?;
    let report = run_producer(&spec, &broker, &stop)?;
    eprintln!(
        "stats producer topic={topic} published={} malformed={} passes={}",
        report.published, report.malformed_rows, report.passes
    );
    Ok(())
}

fn default_run_id() -> String {
    let ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis());
    format!("{ms}-{}", std::process::id())
}

fn drive<J: WindowJob>(job: J, config: &Config, args: &JobArgs) -> Result<()> {
    let address = args.broker.clone().unwrap_or(config.broker_address.clone());
    let broker = RemoteBroker::connect(&address).with_context(|| format!("connecting to {address}"))?;
    let run_id = args.run_id.clone().unwrap_or_else(default_run_id);
    let mut runner = JobRunner::new(broker, job, config, &run_id)?;
    let stop = stop_flag()?;
    let idle = args.exit_when_idle.map(Duration::from_secs_f64);
    runner.run(&stop, Duration::from_millis(config.stats_interval_ms), idle)?;
    Ok(())
}

fn run_job(args: JobArgs) -> Result<()> {
    let config = load_config(args.config.as_ref())?;
    match args.kind {
        JobKind::Risk => drive(RiskJob::from_config(&config)?, &config, &args),
        JobKind::Stress => drive(StressJob::new(&config)?, &config, &args),
    }
}

fn run_results(cmd: ResultsCommand) -> Result<()> {
    let ResultsCommand::Tail {
        kind,
        user,
        lines,
        store,
        config,
    } = cmd;
    let root = match store {
        Some(s) => s,
        None => load_config(config.as_ref())?.store_dir,
    };
    let kind = match kind {
        KindArg::Risk => ResultKind::ChfRisk,
        KindArg::Stress => ResultKind::Stress,
    };
    let path = user_file(&root, kind, &user);
    if !path.exists() {
        bail!("no results for user {user:?} under {}", root.display());
    }
    let records = read_records(&path)?;
    let mut out = io::stdout().lock();
    for r in &records[records.len().saturating_sub(lines)..] {
        writeln!(out, "{}", r.encode())?;
    }
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    if !(args.rate > 0.0 && args.seconds > 0.0 && args.rr_ms > 0.0) {
        bail!("rate, seconds and rr-ms must be positive");
    }
    let beats = beat_times(0.3, args.seconds + 1.0, modulated_rr(args.rr_ms, 30.0, 15.0));
    let n = (args.seconds * args.rate).round() as usize;
    let values = match args.signal {
        Signal::Ecg => SyntheticEcg {
            template: EcgTemplate::default(),
            sample_rate: args.rate,
        }
        .render_range(&beats, 0, n),
        Signal::Bp => bp_waveform(&beats, 120.0, 80.0, args.rate, n),
    };
    let mut text = String::with_capacity(n * 12);
    for (i, v) in values.iter().enumerate() {
        if args.timestamps {
            let ts = (i as f64 * 1000.0 / args.rate).round() as u64;
            text.push_str(&format!("{ts},{v}\n"));
        } else {
            text.push_str(&format!("{v}\n"));
        }
    }
    fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Broker(a) => run_broker(a),
        Command::Produce(a) => run_produce(a),
        Command::Job(a) => run_job(a),
        Command::Results { command } => run_results(command),
        Command::Synth(a) => run_synth(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

