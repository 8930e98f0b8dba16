mod commands;
mod config;
mod corpus;
mod provenance;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use covergen::model::TrainMode;

use config::{Config, ConfigError};
use provenance::Provenance;

#[derive(Parser, Debug)]
#[command(name = "covergen", version, about = "Piano cover generation from weakly aligned song/cover pairs")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for fixtures, batch sampling, initialization and decoding.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default 1).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log to stderr as line-delimited JSON.
    #[arg(long, global = true)]
    log_json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Chroma DTW between a piano MIDI and a song (WAV or feature file).
    Align {
        piano: PathBuf,
        song: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// MIDI to REMI tokens (JSONL).
    Tokenize {
        input: PathBuf,
        /// Beat annotation JSON; derived from the MIDI tempo map when absent.
        #[arg(long)]
        beats: Option<PathBuf>,
        /// Chord track JSON; extracted from the notes when absent (see extract_chords).
        #[arg(long)]
        chords: Option<PathBuf>,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        no_chords: bool,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// REMI tokens (JSONL) back to MIDI.
    Detokenize {
        input: PathBuf,
        #[arg(long)]
        beats: PathBuf,
        #[arg(long)]
        id: Option<String>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Filter pairs, build interleaved sequences and pack training segments.
    BuildDataset {
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        min_mca: Option<f64>,
        #[arg(long)]
        max_length_dev: Option<f64>,
        #[arg(long)]
        segment_len: Option<usize>,
    },
    /// Pre-train or fine-tune and write a checkpoint directory.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Dataset directories from build-dataset.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// Checkpoint directory to start from (required for finetune).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        hp: TrainArgs,
    },
    /// Generate a cover for a song, one bar per song bar.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Song WAV or feature file.
        #[arg(long)]
        song: PathBuf,
        #[arg(long)]
        song_beats: PathBuf,
        #[arg(long)]
        id: Option<String>,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the decoded cover as MIDI.
        #[arg(long)]
        midi: Option<PathBuf>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        max_tokens_per_bar: Option<usize>,
    },
    /// MCA, GS and H4 of generated token records, as CSV.
    Evaluate {
        input: PathBuf,
        /// Beat JSON for every record, or a directory of `<id>.json`.
        #[arg(long)]
        beats: PathBuf,
        /// Reference contour JSON, or a directory of `<id>.json`.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Duration, tempo and IOI deviations over the pairs of a manifest.
    Stats {
        manifest: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Synthetic corpus with known warps for end-to-end checks.
    SynthFixtures {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        pieces: usize,
        #[arg(long, default_value_t = 4)]
        bars: usize,
        /// Plant a flat-warp bar in about half the pairs (needs 8 or more bars).
        #[arg(long)]
        flat: bool,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// toy, desk or full.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    allow_scratch_finetune: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StageArg {
    Pretrain,
    Finetune,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Applies flag overrides on top of the file config.
fn effective_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut c = Config::load(cli.config.as_deref())?;
    set(&mut c.seed, cli.seed);
    set(&mut c.jobs, cli.jobs);
    match &cli.command {
        Command::Tokenize { no_chords: true, .. } => c.extract_chords = false,
        Command::BuildDataset { min_mca, max_length_dev, segment_len, .. } => {
            set(&mut c.min_mca, *min_mca);
            set(&mut c.max_length_dev, *max_length_dev);
            set(&mut c.segment_len, *segment_len);
        }
        Command::Train { hp, .. } => {
            set(&mut c.steps, hp.steps);
            set(&mut c.learning_rate, hp.lr);
            set(&mut c.batch_size, hp.batch_size);
            set(&mut c.alpha, hp.alpha);
            set(&mut c.model, hp.model.clone());
            if hp.checkpoint_every.is_some() {
                c.checkpoint_every = hp.checkpoint_every;
            }
            c.allow_scratch_finetune |= hp.allow_scratch_finetune;
        }
        Command::Generate { temperature, top_p, max_tokens_per_bar, .. } => {
            set(&mut c.temperature, *temperature);
            set(&mut c.top_p, *top_p);
            set(&mut c.max_tokens_per_bar, *max_tokens_per_bar);
        }
        _ => {}
    }
    if c.jobs == 0 {
        anyhow::bail!(ConfigError("jobs must be at least 1".into()));
    }
    Ok(c)
}

fn init_logging(json: bool) {
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if json {
        b.format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    } else {
        b.format(|buf, record| writeln!(buf, "{}: {}", record.level().as_str().to_lowercase(), record.args()));
    }
    let _ = b.try_init();
}

fn write_text(out: Option<&std::path::Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = effective_config(&cli)?;
    rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global().ok();
    let prov = Provenance::new(cfg.hash());
    log::debug!("config {}", serde_json::to_string(&cfg)?);
    match cli.command {
        Command::Align { piano, song, out } => commands::align_cmd(&piano, &song, &out, &prov),
        Command::Tokenize { input, beats, chords, id, out, .. } => {
            commands::tokenize_cmd(&input, beats.as_deref(), chords.as_deref(), id, &out, &cfg, &prov)
        }
        Command::Detokenize { input, beats, id, out } => {
            commands::detokenize_cmd(&input, &beats, id.as_deref(), &out, &prov)
        }
        Command::BuildDataset { manifest, out, .. } => commands::build_dataset_cmd(&manifest, &out, &cfg, &prov),
        Command::Train { stage, data, init, out, .. } => {
            let mode = match stage {
                StageArg::Pretrain => TrainMode::Pretrain,
                StageArg::Finetune => TrainMode::Finetune,
            };
            commands::train_cmd(mode, &data, init.as_deref(), &out, &cfg, &prov)
        }
        Command::Generate { checkpoint, song, song_beats, id, out, midi, .. } => {
            commands::generate_cmd(&checkpoint, &song, &song_beats, id, &out, midi.as_deref(), &cfg, &prov)
        }
        Command::Evaluate { input, beats, reference, out } => {
            let rows = commands::evaluate(&input, &beats, reference.as_deref())?;
            write_text(out.as_deref(), &commands::eval_csv(&rows, &prov))
        }
        Command::Stats { manifest, out, format } => {
            let report = corpus::corpus_stats(&manifest, &prov)?;
            let text = match format {
                Format::Csv => corpus::stats_csv(&report),
                Format::Json => serde_json::to_string_pretty(&report)? + "\n",
            };
            write_text(out.as_deref(), &text)
        }
        Command::SynthFixtures { out, pieces, bars, flat } => {
            commands::synth_fixtures_cmd(&out, pieces, bars, flat, &cfg, &prov)
        }
    }
}

/// Machine-readable kind of the innermost known error.
fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<covergen::Error>() {
            return c.kind();
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return "config";
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "json";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

fn report(kind: &str, message: String) {
    let line = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", e.to_string().trim_end().to_string());
            return ExitCode::from(2);
        }
    };
    init_logging(cli.log_json);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(error_kind(&e), format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
