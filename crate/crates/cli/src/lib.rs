//! Command-line surface for the golden-subspace adaptation experiments.
//!
//! Exit codes are the contract: 0 success, 1 configuration or usage error,
//! 2 numerical runtime failure, 3 oracle failure. No subcommand leaves a
//! partial output file behind on failure (write to temp, rename on
//! success).

pub mod oracle;
pub mod setup;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use gold_core::agop::write_spectrum_csv;
use gold_core::config::ExperimentConfig;
use gold_core::container::{snapshot_g_from_container, snapshot_g_to_container, Container};
use gold_core::engine::{self, EngineConfig};
use gold_core::error::Error;
use gold_core::linalg::sym_eig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_ORACLE: i32 = 3;

#[derive(Parser)]
#[command(name = "gold", version, about = "Golden-subspace continual test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt over the configured stream and write the metrics CSV.
    Run(RunArgs),
    /// Serve the stream with the frozen source model (no adaptation).
    Baseline(RunArgs),
    /// Eigenvalue spectrum and cumulative energy of an AGOP matrix.
    Spectrum(SpectrumArgs),
    /// Per-batch subspace alignment curve.
    Align(AlignArgs),
    /// Randomized verification suites (least-norm, rank, Penrose,
    /// gradients, AGOP alignment).
    Oracle(OracleArgs),
    /// Write a commented default configuration file.
    GenConfig(GenConfigArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Metrics CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the stream repeat count (long-term setting).
    #[arg(long)]
    repeat: Option<usize>,
    /// Record errors after the parameter update instead of before.
    #[arg(long)]
    post_step_eval: bool,
    /// Also write the final AGOP matrix snapshot here.
    #[arg(long)]
    dump_g: Option<PathBuf>,
    /// Suppress progress chatter on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SpectrumArgs {
    /// AGOP snapshot file written by `run --dump-g`.
    #[arg(long, conflicts_with = "config")]
    snapshot: Option<PathBuf>,
    /// Config to produce a snapshot from a live run.
    #[arg(long, requires = "live")]
    config: Option<PathBuf>,
    /// Run the engine live to obtain the matrix.
    #[arg(long)]
    live: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct OracleArgs {
    /// Randomized trials per suite.
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: inject a deliberate defect (`flip-least-norm-sign`).
    #[arg(long, hide = true)]
    fault: Option<String>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct GenConfigArgs {
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse and dispatch. Returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout with success status
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run(args) => wrap(cmd_run(&args, false)),
        Command::Baseline(args) => wrap(cmd_run(&args, true)),
        Command::Spectrum(args) => wrap(cmd_spectrum(&args)),
        Command::Align(args) => wrap(cmd_align(&args)),
        Command::Oracle(args) => cmd_oracle(&args),
        Command::GenConfig(args) => wrap(cmd_gen_config(&args)),
    }
}

fn wrap(result: Result<(), Error>) -> i32 {
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) | Error::Divergence(_) | Error::DegenerateSpectrum => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Write through a temp file and rename, so failures leave nothing behind.
fn atomic_write(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<fs::File>) -> Result<(), Error>,
) -> Result<(), Error> {
    let tmp = temp_path(path);
    let result = (|| {
        let mut out = BufWriter::new(fs::File::create(&tmp)?);
        write(&mut out)?;
        out.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn cmd_run(args: &RunArgs, baseline: bool) -> Result<(), Error> {
    let mut cfg = load_config(&args.config, args.seed)?;
    if let Some(repeat) = args.repeat {
        cfg.repeat = repeat;
    }
    if args.post_step_eval {
        cfg.post_step_eval = true;
    }
    cfg.validate()?;

    let exp = setup::prepare(&cfg, args.quiet)?;
    let engine_cfg = EngineConfig::from_experiment(&cfg);

    let mut result = None;
    atomic_write(&args.out, |out| {
        let res = if baseline {
            engine::run_baseline_frozen(
                &engine_cfg,
                exp.backbone.clone(),
                &exp.head,
                &exp.protos,
                &exp.stream,
                Some(out),
            )?
        } else {
            engine::run(&engine_cfg, exp.backbone.clone(), &exp.head, &exp.protos, &exp.stream, Some(out))?
        };
        result = Some(res);
        Ok(())
    })?;
    let result = result.expect("run result");

    if let Some(dump) = &args.dump_g {
        let container = snapshot_g_to_container(result.estimator.g());
        atomic_write(dump, |out| container.write_to(out))?;
    }

    println!("mean_err={} final_align={}", result.mean_error(), result.final_alignment());
    Ok(())
}

fn cmd_spectrum(args: &SpectrumArgs) -> Result<(), Error> {
    let g = match (&args.snapshot, args.live, &args.config) {
        (Some(path), false, _) => snapshot_g_from_container(&Container::load(path)?)?,
        (None, true, Some(config)) => {
            let cfg = load_config(config, args.seed)?;
            let exp = setup::prepare(&cfg, args.quiet)?;
            let engine_cfg = EngineConfig::from_experiment(&cfg);
            let res =
                engine::run(&engine_cfg, exp.backbone, &exp.head, &exp.protos, &exp.stream, None)?;
            res.estimator.g().clone()
        }
        _ => {
            return Err(Error::config(
                "spectrum needs either --snapshot <path> or --live --config <path>",
            ))
        }
    };
    let values = sym_eig(&g)?.values;
    atomic_write(&args.out, |out| write_spectrum_csv(&values, out))
}

fn cmd_align(args: &AlignArgs) -> Result<(), Error> {
    let cfg = load_config(&args.config, args.seed)?;
    let exp = setup::prepare(&cfg, args.quiet)?;
    let engine_cfg = EngineConfig::from_experiment(&cfg);
    let res = engine::run(&engine_cfg, exp.backbone, &exp.head, &exp.protos, &exp.stream, None)?;
    atomic_write(&args.out, |out| {
        writeln!(out, "batch,align")?;
        for m in &res.metrics {
            writeln!(out, "{},{}", m.batch_index, m.alignment)?;
        }
        Ok(())
    })
}

fn cmd_oracle(args: &OracleArgs) -> i32 {
    if args.trials == 0 {
        eprintln!("error: --trials must be at least 1");
        return EXIT_CONFIG;
    }
    let fault = match args.fault.as_deref() {
        None => oracle::OracleFault::None,
        Some("flip-least-norm-sign") => oracle::OracleFault::FlipLeastNormSign,
        Some(other) => {
            eprintln!("error: unknown fault `{other}`");
            return EXIT_CONFIG;
        }
    };
    let threads = oracle::thread_budget();
    let results = oracle::run_all(args.trials, args.seed, fault, threads);
    if !args.quiet {
        println!("oracle suites: trials={} seed={} threads={}", args.trials, args.seed, threads);
    }
    let mut code = EXIT_OK;
    for suite in &results {
        match &suite.failure {
            None => println!("PASS {:<16} ({} trials)", suite.name, suite.trials),
            Some(msg) => {
                println!("FAIL {:<16} {msg}", suite.name);
                code = EXIT_ORACLE;
            }
        }
    }
    code
}

fn cmd_gen_config(args: &GenConfigArgs) -> Result<(), Error> {
    let contents = ExperimentConfig::default_file_contents();
    match &args.out {
        Some(path) => atomic_write(path, |out| {
            out.write_all(contents.as_bytes())?;
            Ok(())
        }),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}
