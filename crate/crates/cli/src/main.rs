use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eegclass_core::archive::FeatureArchive;
use eegclass_core::bilstm::{self, BiLstmClassifier, TrainConfig};
use eegclass_core::evaluation::{self, EvalConfig, Positive};
use eegclass_core::features::{FeatureKind, Orientation};
use eegclass_core::ingest::{self, Manifest, PipelineConfig};
use eegclass_core::pipeline::{self, ExperimentConfig, Task};
use eegclass_core::segmentation::SegmentPlan;
use eegclass_core::synthgen::{self, ProfileSet};
use eegclass_core::{checkpoint, Error};

#[derive(Parser)]
#[command(
    name = "eegclass",
    version,
    about = "Classify EEG trials from inter-channel energy differences with a bi-LSTM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic recordings and their manifest.
    Synth {
        /// Class profile JSON.
        #[arg(long)]
        classes: PathBuf,
        /// Spans per class in every recording.
        #[arg(long, default_value_t = 50)]
        spans: usize,
        #[arg(long, default_value_t = 30.0)]
        span_s: f64,
        #[arg(long, default_value_t = 2500.0)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of recordings (subjects).
        #[arg(long, default_value_t = 1)]
        subjects: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Show how every span of a manifest would be cut into trials.
    Segment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 400.0)]
        trial_ms: f64,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
    },
    /// Build a feature archive from a manifest.
    Featurize {
        /// plain or deriv
        #[arg(long, value_parser = parse_kind, default_value = "plain")]
        kind: FeatureKind,
        #[arg(long)]
        manifest: PathBuf,
        /// audio_type, genre, taste, taste3, language or known
        #[arg(long, value_parser = parse_task)]
        label_kind: Task,
        /// Comma-separated class list overriding the task's default, in order.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        #[arg(long, default_value_t = 400.0)]
        trial_ms: f64,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        /// rows or columns
        #[arg(long, value_parser = parse_orientation, default_value = "rows")]
        orientation: Orientation,
        /// Comma-separated channels to drop; defaults to the reference and eye channels.
        #[arg(long, value_delimiter = ',')]
        exclude: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-trial, per-channel dB energies as CSV.
        #[arg(long)]
        energy_csv: Option<PathBuf>,
    },
    /// Train one model on a whole feature archive.
    Train {
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 20)]
        hidden: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated split/train/test evaluation, or scoring of a stored model.
    Eval {
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 0.5)]
        train_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        hidden: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long)]
        features: PathBuf,
        /// Score this checkpoint on the whole archive instead of training.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a full experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render a stored report as a metric table and confusion chart.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

fn parse_task(s: &str) -> Result<Task, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown label kind {s:?}"))
}

fn parse_kind(s: &str) -> Result<FeatureKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown feature kind {s:?}"))
}

fn parse_orientation(s: &str) -> Result<Orientation, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown orientation {s:?}"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn segment(manifest: &Path, trial_ms: f64, overlap: f64) -> Result<(), Error> {
    let manifest = Manifest::load(manifest)?;
    println!("subject\tspan\tstart_s\tend_s\tlabels\ttrial_samples\thop_samples\ttrials");
    let mut total = 0;
    for entry in &manifest.entries {
        let rec = manifest.load_entry(entry)?;
        for (i, span) in rec.segments.iter().enumerate() {
            let plan = SegmentPlan::new(&rec, span, trial_ms / 1000.0, overlap)?;
            let labels: Vec<String> = span
                .labels
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            println!(
                "{}\t{i}\t{}\t{}\t{}\t{}\t{}\t{}",
                entry.subject,
                span.start_s,
                span.end_s,
                labels.join(","),
                plan.trial_len,
                plan.hop,
                plan.count
            );
            total += plan.count;
        }
    }
    println!("total trials: {total}");
    Ok(())
}

fn train_config(epochs: usize, learning_rate: f64, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate,
        batch_size,
        seed,
        ..TrainConfig::default()
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth {
            classes,
            spans,
            span_s,
            rate,
            seed,
            subjects,
            out,
        } => {
            let set = ProfileSet::load(&classes)?;
            let manifest =
                synthgen::write_synthetic(&out, &set, subjects, spans, span_s, rate, seed)?;
            println!(
                "wrote {} recording(s) and {}",
                manifest.entries.len(),
                out.join("manifest.json").display()
            );
        }
        Command::Segment {
            manifest,
            trial_ms,
            overlap,
        } => segment(&manifest, trial_ms, overlap)?,
        Command::Featurize {
            kind,
            manifest,
            label_kind,
            classes,
            trial_ms,
            overlap,
            orientation,
            exclude,
            out,
            energy_csv,
        } => {
            let mut task = label_kind.label_task();
            if classes.is_some() {
                task.classes = classes;
            }
            let mut cfg = PipelineConfig {
                trial_len_s: trial_ms / 1000.0,
                overlap_frac: overlap,
                feature_kind: kind,
                orientation,
                ..PipelineConfig::default()
            };
            if let Some(ex) = exclude {
                cfg.exclude = ex.into_iter().filter(|s| !s.is_empty()).collect();
            }
            let built = ingest::build_dataset_detailed(&Manifest::load(&manifest)?, &task, &cfg)?;
            if let Some(csv) = energy_csv {
                write(&csv, ingest::energy_csv(&built))?;
            }
            let counts = built.dataset.class_counts();
            let archive = FeatureArchive {
                kind,
                dataset: built.dataset,
            };
            archive.save(&out)?;
            let per_class: Vec<String> = archive
                .dataset
                .class_vocab
                .iter()
                .zip(&counts)
                .map(|(c, n)| format!("{c}={n}"))
                .collect();
            println!(
                "wrote {} sequence(s) ({}) to {}",
                archive.dataset.len(),
                per_class.join(", "),
                out.display()
            );
        }
        Command::Train {
            epochs,
            hidden,
            seed,
            learning_rate,
            batch_size,
            features,
            out,
        } => {
            let archive = FeatureArchive::load(&features)?;
            let ds = &archive.dataset;
            let f = ds.sequence_shape().map_or(0, |(_, f)| f);
            let init = BiLstmClassifier::init(f, hidden, ds.class_vocab.clone(), seed)?;
            let (model, trace) = bilstm::train(
                &init,
                ds,
                &train_config(epochs, learning_rate, batch_size, seed),
            )?;
            for (i, l) in trace.iter().enumerate() {
                println!("epoch {}\tloss {l:.6}", i + 1);
            }
            checkpoint::save(&out, &model)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            runs,
            train_frac,
            seed,
            hidden,
            epochs,
            learning_rate,
            batch_size,
            features,
            model,
            out,
        } => {
            let archive = FeatureArchive::load(&features)?;
            if let Some(path) = model {
                let model = checkpoint::load(&path)?;
                let cm = evaluation::evaluate_model(&model, &archive.dataset)?;
                let m = evaluation::metrics(&cm, Positive::Class(0))?;
                println!("accuracy (%): {:.2}", m.accuracy * 100.0);
                print!("{}", evaluation::render_confusion(&cm));
                if let Some(out) = out {
                    write(
                        &out,
                        serde_json::to_string_pretty(&m).expect("metrics serialize") + "\n",
                    )?;
                }
            } else {
                let cfg = EvalConfig {
                    runs,
                    train_frac,
                    seed,
                    hidden,
                    train: train_config(epochs, learning_rate, batch_size, seed),
                };
                let (report, _) = evaluation::repeated_eval(&archive.dataset, &cfg)?;
                print!("{}", evaluation::render_report(&report));
                if let Some(out) = out {
                    write(&out, pipeline::report_json(&report))?;
                }
            }
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let out = pipeline::run_experiment(&cfg, base)?;
            print!("{}", evaluation::render_report(&out.report));
            println!("\nreport: {}", out.report_path.display());
        }
        Command::Report { report } => {
            print!(
                "{}",
                evaluation::render_report(&pipeline::load_report(&report)?)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = pipeline::init_thread_pool().and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
