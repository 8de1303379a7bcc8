//! `demansia`: train, evaluate, self-check and benchmark the model.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure,
//! 4 I/O error or corrupt file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use demansia::bench::{doubling, run_bench, BenchKind};
use demansia::checks::{run_suite, SUITES};
use demansia::config::{is_key, parse_pairs, RunConfig};
use demansia::fmt::g6;
use demansia::token_labeling::synth_range;
use demansia::training::{self, evaluate_both, model_from_records, synth_examples, Metrics};
use demansia::{checkpoint, Error, Module};

#[derive(Parser)]
#[command(name = "demansia", version, about = "Selective state space vision model with token labeling")]
struct Cli {
    /// Worker threads for per-sample parallelism (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic shapes task.
    ///
    /// Any config key can be overridden as `--key value`, e.g. `--epochs 1 --beta 0`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/demansia")]
        out_dir: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
        overrides: Vec<String>,
    },
    /// Top-1/top-5 accuracy of a checkpoint on generated data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// First sample index of the evaluated range.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = Fusion::Both)]
        fusion: Fusion,
        /// Evaluate the EMA shadow instead of the live parameters.
        #[arg(long)]
        ema: bool,
    },
    /// Run a self-check suite: grad, scan, kernel or fusion.
    Check { suite: String },
    /// FLOP counts and timings over sequence lengths.
    Bench {
        /// attention or scan
        kind: String,
        /// Comma-separated lengths; defaults to 64..1024 doubling.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
        /// Also write the records as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Skip wall-clock timing (FLOP counts only).
        #[arg(long)]
        no_timing: bool,
    },
    /// Write generated samples (image, label, dense map) as a tensor container.
    ExportDataset {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 10)]
        n_classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    On,
    Off,
    Both,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::UnknownKey(_)
        | Error::Validation(_)
        | Error::Dimension { .. }
        | Error::Contract(_) => 2,
        Error::Domain(_) | Error::NonFinite(_) => 3,
        Error::Corrupt(_) | Error::Io(_) => 4,
    }
}

/// `--key value` / `--key=value` pairs after the train flags.
fn parse_overrides(args: &[String]) -> Result<(Vec<(String, String)>, Option<PathBuf>, Option<PathBuf>), String> {
    let (mut pairs, mut config, mut out_dir) = (Vec::new(), None, None);
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let flag = arg.strip_prefix("--").ok_or_else(|| format!("unexpected argument '{arg}'"))?;
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| format!("option '--{flag}' needs a value"))?;
                (flag.to_string(), v.clone())
            }
        };
        match key.as_str() {
            "config" => config = Some(PathBuf::from(value)),
            "out-dir" | "out_dir" => out_dir = Some(PathBuf::from(value)),
            k if is_key(k) => pairs.push((key, value)),
            _ => return Err(format!("unknown option '--{key}'")),
        }
    }
    Ok((pairs, config, out_dir))
}

fn print_metrics(label: &str, m: &Metrics) {
    println!("{label:<8} top1 {}  top5 {}  loss {}", g6(m.top1), g6(m.top5), g6(m.loss));
}

fn train(config: Option<PathBuf>, out_dir: PathBuf, overrides: &[String]) -> Result<(), Error> {
    let (extra, late_config, late_out) = match parse_overrides(overrides) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            std::process::exit(2);
        }
    };
    let config = late_config.or(config);
    let out_dir = late_out.unwrap_or(out_dir);
    let mut pairs = match &config {
        Some(path) => parse_pairs(&fs::read_to_string(path)?)?,
        None => Vec::new(),
    };
    pairs.extend(extra);
    let cfg = RunConfig::from_pairs(&pairs)?;
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("config.cfg"), cfg.to_text())?;
    println!("training on {} samples, {} held out", cfg.train.train_samples, cfg.train.test_samples);
    let trainer = training::run(cfg.model, cfg.train, &out_dir, |s| {
        println!(
            "epoch {} step {}  test top1 {}  top5 {}  fused top1 {}  loss {}",
            s.epoch,
            s.step,
            g6(s.test.top1),
            g6(s.test.top5),
            g6(s.test_fused.top1),
            g6(s.test.loss)
        );
    })?;
    println!("{} parameters, {} steps; wrote {}", trainer.model.parameter_count(), trainer.step, out_dir.display());
    Ok(())
}

fn eval(path: &Path, seed: u64, start: usize, samples: usize, fusion: Fusion, ema: bool) -> Result<(), Error> {
    let records = checkpoint::load(path)?;
    let model = model_from_records(&records, if ema { "ema" } else { "model" })?;
    let examples = synth_examples(seed, start, samples, &model.config)?;
    let (plain, fused) = evaluate_both(&model, &examples)?;
    match fusion {
        Fusion::Off => print_metrics("class", &plain),
        Fusion::On => print_metrics("fused", &fused),
        Fusion::Both => {
            print_metrics("class", &plain);
            print_metrics("fused", &fused);
        }
    }
    Ok(())
}

fn check(suite: &str) -> Result<bool, Error> {
    let r = run_suite(suite)?;
    println!(
        "{} {}: {} cases, worst error {} (tolerance {})",
        if r.passed() { "PASS" } else { "FAIL" },
        r.suite,
        r.cases,
        g6(r.worst),
        g6(r.tolerance)
    );
    Ok(r.passed())
}

fn bench(kind: &str, lengths: Vec<usize>, csv: Option<PathBuf>, timing: bool) -> Result<(), Error> {
    let kind = BenchKind::parse(kind)?;
    let lengths = if lengths.is_empty() { doubling(64, 1024) } else { lengths };
    let report = run_bench(kind, &lengths, timing)?;
    print!("{}", report.table());
    if let Some(path) = csv {
        fs::write(path, report.csv())?;
    }
    Ok(())
}

fn export(seed: u64, count: usize, image_size: usize, n_classes: usize, out: &Path) -> Result<(), Error> {
    let mut records = Vec::with_capacity(3 * count);
    for (i, s) in synth_range(seed, 0, count, image_size, n_classes)?.into_iter().enumerate() {
        records.push((format!("sample.{i}.label"), demansia::numerics::Tensor::scalar(s.label as f64)));
        records.push((format!("sample.{i}.image"), s.image));
        records.push((format!("sample.{i}.map"), s.map.scores().clone()));
    }
    checkpoint::save(out, &records)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Train { config, out_dir, overrides } => train(config, out_dir, &overrides).map(|_| true),
        Command::Eval { checkpoint, seed, start, samples, fusion, ema } => {
            eval(&checkpoint, seed, start, samples, fusion, ema).map(|_| true)
        }
        Command::Check { suite } => {
            if !SUITES.contains(&suite.as_str()) {
                eprintln!("error: unknown check '{suite}' (expected one of {})", SUITES.join(", "));
                return ExitCode::from(2);
            }
            check(&suite)
        }
        Command::Bench { kind, lengths, csv, no_timing } => bench(&kind, lengths, csv, !no_timing).map(|_| true),
        Command::ExportDataset { seed, count, image_size, n_classes, out } => {
            export(seed, count, image_size, n_classes, &out).map(|_| true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
