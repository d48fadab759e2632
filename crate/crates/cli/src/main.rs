use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use clinex::commands::{self, AnnotateRequest, AnnotationConfig};
use clinex::experiment::{build_experiment_index, evaluate_existing, run_experiment_with, JOURNAL_FILE};
use clinex::{ExperimentConfig, RunError, Services};
use clinex_core::corpus::{CorpusFormat, FieldAdapter, LoadOptions};
use clinex_core::schema::Language;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "clinex", version, about = "Structured clinical information extraction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration file (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set endpoint.model=my-model`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a source file into the canonical corpus layout.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: Option<CorpusFormat>,
        /// Keep only records in this language (en, de); `any` keeps all.
        #[arg(long, default_value = "en")]
        language: String,
        /// Field-name mapping file (TOML) for non-standard sources.
        #[arg(long)]
        fields: Option<PathBuf>,
        /// Stop at the first invalid record instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
    /// Per-category presence table, optionally with error rates.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: Option<CorpusFormat>,
        /// Judged validation sheet to add error rates from.
        #[arg(long)]
        sheet: Option<PathBuf>,
    },
    /// Build the retrieval index for the configured training split.
    Index(ConfigArgs),
    /// Run extraction and evaluation end to end (resumes from the journal).
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Discard the journal and start over.
        #[arg(long)]
        fresh: bool,
    },
    /// Re-score existing results without calling the model.
    Evaluate(ConfigArgs),
    /// Sample error-bearing predictions for manual review.
    AnalyzeErrors {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(short, long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corpus the in-context examples came from, to flag copied values.
        #[arg(long)]
        examples: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dataset generation workflow.
    #[command(subcommand)]
    Generate(Generate),
    /// Render one or more aggregate reports as a comparison table.
    Report {
        /// Report files or run directories.
        paths: Vec<PathBuf>,
        #[arg(long)]
        markdown: bool,
        /// Show the per-category table of a single report.
        #[arg(long)]
        categories: bool,
    },
}

#[derive(Subcommand)]
enum Generate {
    /// Annotate raw reports with a teacher model and curated examples.
    Annotate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        quarantine: PathBuf,
    },
    /// Draw a per-category validation sheet for human judgment.
    Sheet {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 300)]
        per_category: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Error rates from a judged sheet.
    Rates {
        #[arg(long)]
        sheet: PathBuf,
        /// Include presence percentages computed from this corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Chat-format fine-tuning records for the minimal setup.
    SftData {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn parse_format(s: &str) -> Result<CorpusFormat, String> {
    match s {
        "jsonl" => Ok(CorpusFormat::Jsonl),
        "json-array" | "json" => Ok(CorpusFormat::JsonArray),
        _ => Err(format!("unknown format {s:?} (jsonl, json-array)")),
    }
}

fn interrupt_flag() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let handler_stop = Arc::clone(&stop);
    let installed = ctrlc::set_handler(move || {
        if handler_stop.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        eprintln!("interrupt received; finishing in-flight requests (press again to abort)");
    });
    if let Err(e) = installed {
        tracing::warn!(error = %e, "could not install interrupt handler");
    }
    stop
}

fn execute(command: Command) -> Result<i32, RunError> {
    match command {
        Command::Ingest {
            input,
            output,
            format,
            language,
            fields,
            strict,
        } => {
            let adapter = match fields {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| RunError::ConfigInvalid(format!("{}: {e}", p.display())))?;
                    toml::from_str::<FieldAdapter>(&text)
                        .map_err(|e| RunError::ConfigInvalid(format!("{}: {e}", p.display())))?
                }
                None => FieldAdapter::default(),
            };
            let language = match language.as_str() {
                "any" => None,
                tag => Some(
                    tag.parse::<Language>()
                        .map_err(|e| RunError::ConfigInvalid(e.to_string()))?,
                ),
            };
            let options = LoadOptions {
                format,
                adapter,
                language,
                fail_fast: strict,
                ..Default::default()
            };
            let summary = commands::ingest(&input, &output, &options)?;
            println!(
                "wrote {} samples; rejected {}; skipped {} in other languages",
                summary.written,
                summary.rejected.len(),
                summary.filtered_language
            );
            for (index, reason) in summary.rejected.iter().take(20) {
                eprintln!("  record {index}: {reason}");
            }
            Ok(0)
        }
        Command::Stats { corpus, format, sheet } => {
            print!("{}", commands::stats(&corpus, format, sheet.as_deref())?);
            Ok(0)
        }
        Command::Index(args) => {
            let config = ExperimentConfig::load(&args.config, &args.overrides)?;
            let index = build_experiment_index(&config, &Services::default())?;
            println!("index ready: {} rows, embedder {}", index.len(), index.embedder_id());
            Ok(0)
        }
        Command::Run { config: args, fresh } => {
            let config = ExperimentConfig::load(&args.config, &args.overrides)?;
            if fresh {
                let journal = config.output_dir.join(JOURNAL_FILE);
                if journal.exists() {
                    std::fs::remove_file(&journal)
                        .map_err(|e| RunError::Failed(format!("{}: {e}", journal.display())))?;
                }
            }
            let services = Services {
                stop: Some(interrupt_flag()),
                ..Default::default()
            };
            let summary = run_experiment_with(&config, &services)?;
            print!("{}", summary.report.render(false));
            let o = summary.outcomes;
            println!(
                "parsed {}, unparseable {}, failed {}; outputs in {}",
                o.parsed,
                o.parse_failed,
                o.failed,
                summary.output_dir.display()
            );
            Ok(summary.exit_code())
        }
        Command::Evaluate(args) => {
            let config = ExperimentConfig::load(&args.config, &args.overrides)?;
            let summary = evaluate_existing(&config, &Services::default())?;
            print!("{}", summary.report.render(false));
            Ok(summary.exit_code())
        }
        Command::AnalyzeErrors {
            results,
            corpus,
            n,
            seed,
            examples,
            out,
        } => {
            let sample = commands::analyze_errors(&results, &corpus, n, seed, examples.as_deref(), &out)?;
            println!(
                "sampled {} of {} samples with errors into {}",
                sample.samples.len(),
                sample.population,
                out.display()
            );
            if let Some(note) = sample.shortfall {
                eprintln!("note: {note}");
            }
            Ok(0)
        }
        Command::Generate(generate) => run_generate(generate),
        Command::Report {
            paths,
            markdown,
            categories,
        } => {
            if categories {
                if paths.len() != 1 {
                    return Err(RunError::ConfigInvalid("--categories takes exactly one report".into()));
                }
                print!("{}", commands::render_single(&paths[0], markdown)?);
            } else {
                print!("{}", commands::render_report(&paths, markdown)?);
            }
            Ok(0)
        }
    }
}

fn run_generate(generate: Generate) -> Result<i32, RunError> {
    match generate {
        Generate::Annotate {
            config,
            input,
            examples,
            output,
            quarantine,
        } => {
            let settings = AnnotationConfig::load(&config.config, &config.overrides)?;
            let run = commands::annotate(&AnnotateRequest {
                config: &settings,
                input: &input,
                examples: &examples,
                output: &output,
                quarantine: &quarantine,
                transport: None,
            })?;
            println!(
                "accepted {}, quarantined {}",
                run.corpus.len(),
                run.quarantined.len()
            );
            Ok(i32::from(!run.quarantined.is_empty()))
        }
        Generate::Sheet {
            corpus,
            per_category,
            seed,
            output,
        } => {
            for note in commands::sheet(&corpus, per_category, seed, &output)? {
                eprintln!("note: {note}");
            }
            println!("sheet written to {}", output.display());
            Ok(0)
        }
        Generate::Rates { sheet, corpus } => {
            print!("{}", commands::rates(&sheet, corpus.as_deref())?);
            Ok(0)
        }
        Generate::SftData { corpus, output } => {
            let n = commands::sft_data(&corpus, &output)?;
            println!("wrote {n} records to {}", output.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("CLINEX_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
