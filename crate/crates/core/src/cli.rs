//! Command-line front end. Exit codes: 0 success, 2 usage error, 3 data error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::bench::{run_bench, write_bench_csv, BenchConfig, BenchError};
use crate::config::{ConfigError, DetectorConfig, ResetPolicy, Salt};
use crate::detector::{
    compute_metrics, process_stream, write_verdict_log, DetectError, Label, Mitigation, QueryRecord,
};
use crate::fingerprint::{fingerprint, Dims, FingerprintError};
use crate::formats::{self, FileKind, FormatError};
use crate::simulator::{
    guided_evasion_cost, pause_resume, run_experiment_full, Budget, ExperimentSpec, SimError,
    TraceKind, TraceSpec,
};
use crate::theory::{monte_carlo_q, q_lower, q_lower_alt, q_upper, BoundParams, TheoryError};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "blacklight",
    version,
    about = "Detect query-based black-box attacks by fingerprint matching"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fingerprint a PGM/PPM image, or every record of a BLQS stream.
    Fingerprint(FingerprintArgs),
    /// Run the detector over a BLQS stream and score it.
    Detect(DetectArgs),
    /// Generate a labeled stream, or run an adaptive-attacker scenario.
    Simulate(SimulateArgs),
    /// Tabulate flagging-probability bounds over a range of hash distances.
    Theory(TheoryArgs),
    /// Measure store latency and storage per fingerprint.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DetectorFlags {
    /// key=value detector config (q, w, p, s, t, salt_hex, reset_interval).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// 16-byte salt as 32 hex digits; overrides the config file.
    #[arg(long)]
    pub salt_hex: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

impl From<OnOff> for Mitigation {
    fn from(v: OnOff) -> Self {
        match v {
            OnOff::On => Mitigation::Reject,
            OnOff::Off => Mitigation::Off,
        }
    }
}

#[derive(Debug, Args)]
pub struct FingerprintArgs {
    pub input: PathBuf,
    #[command(flatten)]
    pub detector: DetectorFlags,
    /// Output file for an image, output directory for a stream.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    pub stream: PathBuf,
    #[command(flatten)]
    pub detector: DetectorFlags,
    /// Seeds the initial salt (when none is given) and the salts drawn at resets.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reset the store every N queries; overrides the config file.
    #[arg(long)]
    pub reset_interval: Option<u64>,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    pub mitigation: OnOff,
    /// Directory receiving verdicts.csv, report.json and report.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scenario {
    /// Write the labeled stream (and its report).
    Stream,
    /// Attacker that pauses on rejection and resumes after each reset.
    PauseResume,
    /// Cost of evading detection by perturbing enough pixels per query.
    GuidedEvasion,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Experiment spec file (key=value); replaces the stream-shape flags.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorFlags,
    #[arg(long, value_enum, default_value_t = Scenario::Stream)]
    pub scenario: Scenario,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub benign: usize,
    #[arg(long, default_value_t = 10)]
    pub traces: usize,
    #[arg(long, value_parser = parse_trace_kind, default_value = "probe-pair")]
    pub kind: TraceKind,
    #[arg(long, default_value_t = 200)]
    pub length: usize,
    /// L-infinity budget in intensity units.
    #[arg(long, default_value_t = 12)]
    pub budget: u8,
    #[arg(long, default_value = "32x32x3")]
    pub dims: Dims,
    #[arg(long)]
    pub reset_interval: Option<u64>,
    #[arg(long, value_enum)]
    pub mitigation: Option<OnOff>,
    /// Normalized L2 budget for the guided-evasion scenario.
    #[arg(long, default_value_t = 0.05)]
    pub l2_budget: f64,
    /// Stream output (BLQS) for the stream scenario.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to write the JSON report; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn parse_trace_kind(s: &str) -> Result<TraceKind, String> {
    s.parse().map_err(|e: SimError| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Mnist,
    Gtsrb,
    Cifar10,
    Imagenet,
}

impl Task {
    /// Window count for the task's input shape and window size.
    pub fn hash_count(self) -> u64 {
        match self {
            Task::Mnist => 735,
            Task::Gtsrb => 6893,
            Task::Cifar10 => 3053,
            Task::Imagenet => 150_479,
        }
    }
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long, short = 'n', required_unless_present = "defaults_for")]
    pub n: Option<u64>,
    #[arg(long, short = 's', default_value_t = 50)]
    pub s: u64,
    #[arg(long, short = 't', default_value_t = 25)]
    pub t: u64,
    #[arg(long, value_enum)]
    pub defaults_for: Option<Task>,
    #[arg(long, default_value_t = 0)]
    pub d_from: u64,
    /// Last D (inclusive); defaults to N.
    #[arg(long)]
    pub d_to: Option<u64>,
    /// Defaults to ceil(N / 100).
    #[arg(long)]
    pub d_step: Option<u64>,
    /// Monte-Carlo trials per row; omitted columns stay empty.
    #[arg(long)]
    pub mc: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the lower bound whose inner factor follows the summation index.
    #[arg(long)]
    pub alt_lower: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Store sizes; pass the flag with no values for an empty run.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = vec![1000usize, 10_000, 100_000])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    pub queries: usize,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value = "32x32x3")]
    pub dims: Dims,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub detector: DetectorFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Simulate(#[from] SimError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("{0}")]
    Usage(String),
    #[error("writing output: {0}")]
    Output(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn format_err(path: &Path) -> impl FnOnce(FormatError) -> CliError + '_ {
    move |source| CliError::Format {
        path: path.to_owned(),
        source,
    }
}

/// Writes to `path`, or to stdout when there is none.
fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => write(p, bytes),
        None => Ok(io::stdout().lock().write_all(bytes)?),
    }
}

/// Config file (or defaults), then the salt override. Without a config file
/// or salt, the salt comes from `seed` if given, else from the OS.
fn resolve_config(flags: &DetectorFlags, seed: Option<u64>) -> Result<DetectorConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = String::from_utf8(read(path)?)
                .map_err(|_| CliError::Usage(format!("{}: config is not UTF-8", path.display())))?;
            DetectorConfig::parse_kv(&text)?
        }
        None => DetectorConfig::new(seed.map_or_else(Salt::random, Salt::from_seed)),
    };
    if let Some(hex) = &flags.salt_hex {
        cfg.salt = hex.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_reset(cfg: DetectorConfig, interval: Option<u64>) -> DetectorConfig {
    match interval {
        Some(0) => cfg.with_reset(ResetPolicy::Never),
        Some(n) => cfg.with_reset(ResetPolicy::EveryQueries(n)),
        None => cfg,
    }
}

fn cmd_fingerprint(args: &FingerprintArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&args.detector, None)?;
    let bytes = read(&args.input)?;
    let kind = formats::sniff(&bytes).map_err(format_err(&args.input))?;
    let mut stdout = io::stdout().lock();
    match kind {
        FileKind::Pgm | FileKind::Ppm => {
            let img = formats::decode_netpbm(&bytes).map_err(format_err(&args.input))?;
            let fp = fingerprint(&img, &cfg)?;
            let out = args
                .out
                .clone()
                .unwrap_or_else(|| args.input.with_extension("blfp"));
            let encoded = formats::encode_fingerprint(&fp);
            write(&out, &encoded)?;
            writeln!(
                stdout,
                "{}\tdigests={}\tbytes={}",
                out.display(),
                fp.len(),
                encoded.len()
            )?;
        }
        FileKind::Stream => {
            let records = formats::decode_stream(&bytes).map_err(format_err(&args.input))?;
            let dir = args
                .out
                .clone()
                .unwrap_or_else(|| args.input.with_extension("fingerprints"));
            fs::create_dir_all(&dir).map_err(|source| CliError::Io {
                path: dir.clone(),
                source,
            })?;
            for (i, rec) in records.iter().enumerate() {
                let fp = fingerprint(&rec.image, &cfg)?;
                let out = dir.join(format!("{i:06}.blfp"));
                let encoded = formats::encode_fingerprint(&fp);
                write(&out, &encoded)?;
                writeln!(
                    stdout,
                    "{}\tdigests={}\tbytes={}",
                    out.display(),
                    fp.len(),
                    encoded.len()
                )?;
            }
        }
        _ => {
            return Err(CliError::Format {
                path: args.input.clone(),
                source: FormatError::UnsupportedFormat("expected PGM, PPM or BLQS".into()),
            })
        }
    }
    Ok(())
}

fn write_detection_outputs(
    dir: &Path,
    stream: &[QueryRecord],
    verdicts: &[crate::detector::Verdict],
    report: &crate::detector::DetectionReport,
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let labels: Vec<Label> = stream.iter().map(|r| r.label).collect();
    let mut log = Vec::new();
    write_verdict_log(&mut log, verdicts, &labels)?;
    write(&dir.join("verdicts.csv"), &log)?;
    write(
        &dir.join("report.json"),
        (report.to_json() + "\n").as_bytes(),
    )?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write(&dir.join("report.csv"), &csv)
}

fn cmd_detect(args: &DetectArgs) -> Result<(), CliError> {
    let cfg = with_reset(
        resolve_config(&args.detector, Some(args.seed))?,
        args.reset_interval,
    );
    let bytes = read(&args.stream)?;
    let stream = formats::decode_stream(&bytes).map_err(format_err(&args.stream))?;
    let verdicts = process_stream(&stream, &cfg, args.mitigation.into(), args.seed)?;
    let labels: Vec<Label> = stream.iter().map(|r| r.label).collect();
    let report = compute_metrics(&verdicts, &labels)?;
    write_detection_outputs(&args.out, &stream, &verdicts, &report)?;
    println!(
        "queries={} traces={} detection_rate={} mean_coverage={} fpr={}",
        stream.len(),
        report.per_trace.len(),
        report.attack_detection_rate,
        report.mean_coverage,
        report.false_positive_rate
    );
    Ok(())
}

fn experiment_from_flags(args: &SimulateArgs) -> Result<ExperimentSpec, CliError> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = String::from_utf8(read(path)?)
                .map_err(|_| CliError::Usage(format!("{}: spec is not UTF-8", path.display())))?;
            ExperimentSpec::parse_kv(&text)?
        }
        None => {
            let mut spec = ExperimentSpec::new(resolve_config(&args.detector, Some(args.seed))?);
            spec.benign_count = args.benign;
            spec.benign_seed = args.seed;
            spec.interleave_seed = args.seed.wrapping_add(1);
            spec.salt_seed = args.seed;
            spec.dims = args.dims;
            spec.traces = (0..args.traces as u64)
                .map(|i| {
                    TraceSpec::new(
                        args.kind,
                        args.length,
                        args.budget,
                        args.seed.wrapping_add(2 + i),
                        args.dims,
                    )
                })
                .collect();
            spec
        }
    };
    if args.spec.is_some() && (args.detector.config.is_some() || args.detector.salt_hex.is_some()) {
        spec.detector = resolve_config(&args.detector, Some(spec.salt_seed))?;
    }
    spec.detector = with_reset(spec.detector, args.reset_interval);
    if let Some(m) = args.mitigation {
        spec.mitigation = m.into();
    }
    Ok(spec)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let spec = experiment_from_flags(args)?;
    let json = match args.scenario {
        Scenario::Stream => {
            let run = run_experiment_full(&spec)?;
            if let Some(out) = &args.out {
                let bytes = formats::encode_stream(&run.stream).map_err(format_err(out))?;
                write(out, &bytes)?;
            }
            run.report.to_json()
        }
        Scenario::PauseResume => {
            let interval = match spec.detector.reset {
                ResetPolicy::EveryQueries(n) => n,
                _ => {
                    return Err(CliError::Usage(
                        "pause-resume needs --reset-interval N".into(),
                    ))
                }
            };
            serde_json::to_string_pretty(&pause_resume(&spec, interval)?)
                .expect("report serializes")
        }
        Scenario::GuidedEvasion => {
            let budget = Budget::L2Normalized(args.l2_budget);
            let k0 = guided_evasion_cost(&spec.detector, spec.dims, 0, budget)?;
            let kt =
                guided_evasion_cost(&spec.detector, spec.dims, spec.detector.threshold, budget)?;
            serde_json::to_string_pretty(&serde_json::json!({
                "budget": budget,
                "k_zero": k0,
                "k_threshold": kt,
            }))
            .expect("report serializes")
        }
    };
    emit(args.report.as_deref(), (json + "\n").as_bytes())
}

fn cmd_theory(args: &TheoryArgs) -> Result<(), CliError> {
    let n = match (args.n, args.defaults_for) {
        (Some(n), _) => n,
        (None, Some(task)) => task.hash_count(),
        (None, None) => return Err(CliError::Usage("give -n or --defaults-for".into())),
    };
    let base = BoundParams::new(n, 0, args.s, args.t)?;
    let d_to = args.d_to.unwrap_or(n);
    let step = args.d_step.unwrap_or_else(|| n.div_ceil(100)).max(1);
    if args.d_from > d_to {
        return Err(CliError::Usage(format!(
            "--d-from {} exceeds --d-to {d_to}",
            args.d_from
        )));
    }
    let mut out = String::from("N,D,S,T,q_lower,q_upper,mc_estimate,mc_stderr\n");
    let mut d = args.d_from;
    loop {
        let p = BoundParams::new(n, d, base.s, base.t)?;
        let lower = if args.alt_lower {
            q_lower_alt(&p)?
        } else {
            q_lower(&p)?
        };
        let upper = q_upper(&p)?;
        let mc = match args.mc {
            Some(trials) => {
                let e = monte_carlo_q(&p, trials, args.seed)?;
                format!("{:?},{:?}", e.estimate, e.stderr)
            }
            None => ",".into(),
        };
        out.push_str(&format!(
            "{n},{d},{},{},{:?},{upper:?},{mc}\n",
            p.s, p.t, lower.value
        ));
        if d == d_to {
            break;
        }
        d = d.saturating_add(step).min(d_to);
    }
    emit(args.out.as_deref(), out.as_bytes())
}

fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&args.detector, Some(args.seed))?;
    let rows = run_bench(&BenchConfig {
        detector: cfg,
        dims: args.dims,
        sizes: args.sizes.clone(),
        queries: args.queries,
        threads: args.threads,
        seed: args.seed,
    })?;
    let mut csv = Vec::new();
    write_bench_csv(&mut csv, &rows)?;
    emit(args.out.as_deref(), &csv)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Fingerprint(a) => cmd_fingerprint(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Theory(a) => cmd_theory(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// Parses `std::env::args`, runs the command and maps failures to exit codes.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flags_are_usage_errors() {
        let err = Cli::try_parse_from(["blacklight", "theory", "-n", "10", "--bogus"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(Cli::try_parse_from(["blacklight"]).is_err());
    }

    #[test]
    fn bench_sizes_parse() {
        let cli = Cli::try_parse_from(["blacklight", "bench", "--sizes"]).unwrap();
        let Command::Bench(b) = cli.command else {
            panic!()
        };
        assert!(b.sizes.is_empty());
        let cli = Cli::try_parse_from(["blacklight", "bench", "--sizes", "10,20"]).unwrap();
        let Command::Bench(b) = cli.command else {
            panic!()
        };
        assert_eq!(b.sizes, vec![10, 20]);
        let cli = Cli::try_parse_from(["blacklight", "bench"]).unwrap();
        let Command::Bench(b) = cli.command else {
            panic!()
        };
        assert_eq!(b.sizes, vec![1000, 10_000, 100_000]);
    }

    #[test]
    fn task_hash_counts_follow_input_shapes() {
        use crate::config::window_count;
        assert_eq!(
            window_count(28 * 28, 50, 1),
            Some(Task::Mnist.hash_count() as usize)
        );
        assert_eq!(
            window_count(48 * 48 * 3, 20, 1),
            Some(Task::Gtsrb.hash_count() as usize)
        );
        assert_eq!(
            window_count(32 * 32 * 3, 20, 1),
            Some(Task::Cifar10.hash_count() as usize)
        );
        assert_eq!(
            window_count(224 * 224 * 3, 50, 1),
            Some(Task::Imagenet.hash_count() as usize)
        );
    }
}
