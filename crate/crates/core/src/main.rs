use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use peaklab::dataset::FilterMode;
use peaklab::metrics::ThresholdMode;
use peaklab::pipeline::{self, RunConfig, RunManifest};
use peaklab::Error;

/// Environment variable naming the output directory when neither `--out`
/// nor the config's `out` is given.
const OUT_ENV: &str = "PEAKLAB_OUT";
const DEFAULT_OUT: &str = "peaklab-out";

#[derive(Parser, Debug)]
#[command(name = "peaklab", version, about = "Knowledge-appending edits on a micro transformer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config and every stage seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory [default: config `out`, then $PEAKLAB_OUT, then ./peaklab-out].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run labels to process, comma separated [default: all].
    #[arg(long, global = true, value_delimiter = ',', value_name = "LABELS")]
    runs: Vec<String>,
    /// Worker threads for editing and evaluation [default: one per core].
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Take additivity thresholds over all prompts of an edit together.
    #[arg(long, global = true)]
    pooled_thresholds: bool,
    /// Filter answers against every paraphrase as well as the editing prompt.
    #[arg(long, global = true)]
    filter_all_prompts: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic world (instances and training corpus).
    Gen,
    /// Train the base model, report fidelity and filter the instances.
    Train,
    /// Apply every selected run to every filtered instance.
    Edit,
    /// Evaluate stored edits and write the reports.
    Eval,
    /// Summarise a finished output directory and verify its checksums.
    Report {
        /// Manifest to read [default: <out>/manifest.json].
        manifest: Option<PathBuf>,
    },
    /// gen, train, edit and eval in sequence.
    Run,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load_config(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if c.pooled_thresholds {
        cfg.eval.thresholds = ThresholdMode::Pooled;
    }
    if c.filter_all_prompts {
        cfg.eval.filter = FilterMode::AllPrompts;
    }
    let seed = c.seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed)?)
}

fn out_dir(c: &Common, cfg: &RunConfig) -> PathBuf {
    c.out
        .clone()
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn print_rows(summary: &pipeline::EvalSummary) {
    print!("{}", pipeline::report_csv(&summary.rows));
    for s in &summary.skipped {
        eprintln!("warning: {} #{} skipped: {}", s.label, s.index, s.reason);
    }
    for c in &summary.comparisons {
        println!("{} vs {} over {} paired edits (higher/lower/tied):", c.label, c.baseline, c.pairs);
        for m in &c.metrics {
            println!("  {:<7} {}/{}/{}", m.metric, m.higher, m.lower, m.tied);
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    if let Command::Report { manifest } = &cli.command {
        let path = match manifest {
            Some(p) => p.clone(),
            None => RunManifest::path(&out_dir(c, &load_config(c)?)),
        };
        let summary = pipeline::report(&path).with_context(|| format!("reading {}", path.display()))?;
        print!("{}", summary.render());
        if !summary.failures.is_empty() {
            return Err(Error::Validation(format!("{} artifact(s) failed verification", summary.failures.len())).into());
        }
        return Ok(());
    }

    let cfg = load_config(c)?;
    let out = out_dir(c, &cfg);
    let threads = c.threads;
    if threads == Some(0) {
        return Err(Error::Usage("--threads must be at least 1".into()).into());
    }
    let ensure_out = |out: &Path| -> anyhow::Result<()> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(())
    };
    match cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml()),
        Command::Gen => {
            ensure_out(&out)?;
            let s = pipeline::gen(&cfg, &out)?;
            println!(
                "world: {} instances, {} corpus sequences, checksum {}",
                s.instances, s.corpus_sequences, s.world_checksum
            );
        }
        Command::Train => {
            let s = pipeline::train(&cfg, &out)?;
            println!("loss {:.4} -> {:.4}, model {}", s.initial_loss, s.final_loss, s.model_checksum);
            println!("faithful facts {}/{}", s.faithful, s.total);
            println!("filtered dataset keeps {}/{} instances", s.kept, s.total);
            if s.retention() < 0.8 {
                eprintln!("warning: fewer than 80% of instances survived filtering");
            }
        }
        Command::Edit => {
            for s in pipeline::edit(&cfg, &out, &c.runs, threads)? {
                println!(
                    "{} ({}): {} ok, {} failed, {} warnings",
                    s.label,
                    s.editor.name(),
                    s.ok,
                    s.failures.len(),
                    s.warnings
                );
                for f in &s.failures {
                    println!("  #{} {}: {}", f.index, f.code, f.message);
                }
            }
        }
        Command::Eval => print_rows(&pipeline::eval(&cfg, &out, &c.runs, threads)?),
        Command::Run => {
            ensure_out(&out)?;
            if !c.runs.is_empty() {
                return Err(Error::Usage("`run` processes every configured run; use edit/eval with --runs".into()).into());
            }
            print_rows(&pipeline::run_all(&cfg, &out, threads)?);
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn fail(code: &str, status: u8) -> ExitCode {
    eprintln!("error_code={code} exit_status={status}");
    ExitCode::from(status)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return fail("E_USAGE", 64);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
                Some(pe) => fail(pe.code(), pe.exit_status() as u8),
                None => fail("E_INTERNAL", 70),
            }
        }
    }
}
