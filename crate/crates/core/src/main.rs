use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use elib::config::parse_config;
use elib::harness::{injections_from_env, run_benchmark_with};
use elib::metrics::{flops_microbench, perplexity, MatmulDims, ModelScorer, WallClock};
use elib::model::{generate_model, quantize_model, ModelFile, ModelSpec};
use elib::quant::QuantScheme;
use elib::report::{emit_report, read_report, render, render_table, ReportFormat};
use elib::runtime::{load_model, BackendKind};
use elib::textio::load_corpus;

#[derive(Parser)]
#[command(name = "elib", version, about = "Quantized LLM inference benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random model.
    GenModel {
        #[arg(long, default_value = "tiny")]
        preset: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize an f32 model into one block scheme.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scheme: QuantScheme,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full benchmark described by a config file.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Extra output next to report.json.
        #[arg(long, default_value = "table")]
        format: ReportFormat,
    },
    /// Teacher-forced perplexity of a model on a text file.
    Ppl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        context: usize,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value = "threaded")]
        backend: BackendKind,
        #[arg(long, default_value_t = 4)]
        threads: usize,
    },
    /// Matmul GFLOPS per thread count.
    Flops {
        #[arg(long, value_delimiter = ',', default_value = "1,4,8")]
        threads: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value = "threaded")]
        backend: BackendKind,
    },
    /// Re-render a saved report.json.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenModel { preset, seed, out } => {
            let spec = match preset.as_str() {
                "tiny" => ModelSpec::tiny(),
                other => bail!("unknown preset `{other}` (available: tiny)"),
            };
            generate_model(spec, seed)?.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Quantize { model, scheme, out } => {
            let source = ModelFile::load(&model).with_context(|| format!("reading {}", model.display()))?;
            let q = quantize_model(&source, scheme)?;
            q.save(&out)?;
            println!(
                "wrote {} ({scheme}, {} quantized payload bytes, {} total)",
                out.display(),
                q.quantized_payload_bytes(),
                q.param_bytes()
            );
        }
        Command::Bench { config, out, format } => {
            let cfg = parse_config(&config)?;
            let injections = injections_from_env()?;
            let report = run_benchmark_with(&cfg, &injections)?;
            fs::create_dir_all(&out)?;
            emit_report(&report, ReportFormat::Json, out.join("report.json"))?;
            if format != ReportFormat::Json {
                emit_report(&report, format, out.join(format!("report.{}", format.extension())))?;
            }
            let skipped = report.outcomes.iter().filter(|o| o.report().is_none()).count();
            if !report.aggregates.is_empty() {
                print!("{}", render_table(&report));
            }
            println!(
                "{} outcomes, {skipped} skipped; report in {}",
                report.outcomes.len(),
                out.display()
            );
        }
        Command::Ppl {
            model,
            corpus,
            context,
            stride,
            backend,
            threads,
        } => {
            let (model, _) = load_model(&model)?;
            let corpus = load_corpus(&corpus, context, stride.unwrap_or(context))?;
            let scorer = ModelScorer {
                model: &model,
                backend,
                threads,
            };
            println!("{:.6}", perplexity(&scorer, &corpus)?);
        }
        Command::Flops {
            threads,
            dim,
            reps,
            backend,
        } => {
            let clock = WallClock::default();
            for t in threads {
                let g = flops_microbench(backend, t, MatmulDims::square(dim), reps, &clock)?;
                println!("threads={t} gflops={g:.3}");
            }
        }
        Command::Report { input, format } => {
            let report = read_report(&input)?;
            print!("{}", render(&report, format)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
