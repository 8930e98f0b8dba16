use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use covergen::alignment::TimeMap;
use covergen::dataset::{SequenceKind, TrainingSegment};
use covergen::encoder::{condition_dim, extract_condition_features, ConditionBlock};
use covergen::features::{chromagram, read_wav, write_wav, FeatureMatrix};
use covergen::metrics::{
    grooving_similarity_next, mca, pitch_class_entropy_4, skyline, MelodyContour, CONTOUR_FRAME_RATE,
};
use covergen::midi::{read_midi, write_midi_annotated};
use covergen::model::{generate, train, Corpus, ModelCheckpoint, StepRecord, TrainMode};
use covergen::remi::io::{read_jsonl, TokenRecord};
use covergen::remi::{decode, encode, Vocabulary};
use covergen::stats::Summary;
use covergen::synth::{render_audio, synthetic_piece, warped_pair};
use covergen::BeatGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::corpus::{align, load_chords, load_grid, write_json, write_lines, DatasetInfo, PieceEntry};
use crate::provenance::Provenance;

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    covergen::Error::Invalid(msg.into()).into()
}

/// Song chroma from a WAV file or a feature file, chosen by extension.
fn load_song_features(path: &Path) -> anyhow::Result<FeatureMatrix> {
    let wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    Ok(if wav {
        let pcm = read_wav(path)?;
        chromagram(&pcm.samples, pcm.sample_rate)?
    } else {
        FeatureMatrix::load(path)?
    })
}

#[derive(Serialize)]
struct AlignOutput<'a> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    time_map: TimeMap,
    cost: f64,
    path_length: usize,
    frame_rate: f64,
}

pub fn align_cmd(piano: &Path, song: &Path, out: &Path, prov: &Provenance) -> anyhow::Result<()> {
    let perf = read_midi(piano)?;
    let chroma = load_song_features(song)?;
    if chroma.dims() != 12 {
        bail!(invalid(format!("alignment needs 12-bin chroma, {} has {} columns", song.display(), chroma.dims())));
    }
    let (time_map, cost, path_length) = align(&perf, &chroma)?;
    log::info!("aligned {} frames, cost {cost:.4}", path_length);
    write_json(out, &AlignOutput { provenance: prov, time_map, cost, path_length, frame_rate: chroma.frame_rate() })
}

pub fn tokenize_cmd(
    input: &Path,
    beats: Option<&Path>,
    chords: Option<&Path>,
    id: Option<String>,
    out: &Path,
    cfg: &Config,
    prov: &Provenance,
) -> anyhow::Result<()> {
    let vocab = Vocabulary::default();
    let perf = read_midi(input)?;
    let grid = load_grid(beats, &perf)?;
    let chords = load_chords(chords, cfg.extract_chords, &perf, &grid)?;
    let seq = encode(&perf, &grid, chords.as_deref(), &vocab)?;
    let id = id.unwrap_or_else(|| input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    log::info!("{id}: {} bars, {} tokens", seq.bar_count(), seq.ids.len());
    write_lines(out, &[stamped(TokenRecord::new(id, &seq), prov)])
}

fn stamped(mut r: TokenRecord, prov: &Provenance) -> TokenRecord {
    r.version = Some(prov.version.clone());
    r.config_hash = Some(prov.config_hash.clone());
    r
}

fn read_records(path: &Path) -> anyhow::Result<Vec<TokenRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_jsonl(BufReader::new(file))?)
}

fn select(records: Vec<TokenRecord>, id: Option<&str>, path: &Path) -> anyhow::Result<TokenRecord> {
    match id {
        Some(id) => records
            .into_iter()
            .find(|r| r.id == id)
            .ok_or_else(|| invalid(format!("no record {id:?} in {}", path.display()))),
        None if records.len() == 1 => Ok(records.into_iter().next().unwrap()),
        None => bail!(invalid(format!("{} holds {} records; pick one with --id", path.display(), records.len()))),
    }
}

pub fn detokenize_cmd(
    input: &Path,
    beats: &Path,
    id: Option<&str>,
    out: &Path,
    prov: &Provenance,
) -> anyhow::Result<()> {
    let vocab = Vocabulary::default();
    let record = select(read_records(input)?, id, input)?;
    let grid = BeatGrid::load_json(beats)?;
    let perf = decode(&record.sequence(), &grid, &vocab)?;
    log::info!("{}: {} notes", record.id, perf.notes().len());
    Ok(write_midi_annotated(&perf, Some(&prov.line()), out)?)
}

pub fn build_dataset_cmd(manifest: &Path, out: &Path, cfg: &Config, prov: &Provenance) -> anyhow::Result<()> {
    let info = crate::corpus::build_dataset(manifest, out, cfg, prov)?;
    log::info!(
        "{} pieces: {} pairs and {} piano-only kept, {} rejected, {} errors, {} segments",
        info.pieces,
        info.kept_paired,
        info.kept_piano_only,
        info.rejected,
        info.errors,
        info.segments
    );
    Ok(())
}

fn load_dataset(dir: &Path) -> anyhow::Result<(DatasetInfo, Vec<TrainingSegment>)> {
    let info: DatasetInfo = serde_json::from_str(
        &std::fs::read_to_string(dir.join("dataset.json"))
            .with_context(|| format!("reading {}/dataset.json", dir.display()))?,
    )?;
    let file =
        File::open(dir.join("segments.jsonl")).with_context(|| format!("opening {}/segments.jsonl", dir.display()))?;
    Ok((info, read_jsonl(BufReader::new(file))?))
}

#[derive(Serialize)]
struct TrainRun<'a> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    stage: TrainMode,
    data: Vec<String>,
    init: Option<String>,
    steps: usize,
    final_loss: Option<f64>,
}

pub fn train_cmd(
    mode: TrainMode,
    data: &[PathBuf],
    init: Option<&Path>,
    out: &Path,
    cfg: &Config,
    prov: &Provenance,
) -> anyhow::Result<()> {
    let vocab = Vocabulary::default();
    let mut corpus = Corpus { piano_only: vec![], paired: vec![] };
    let mut dim = None;
    let mut seg_len = 0;
    for dir in data {
        let (info, segs) = load_dataset(dir)?;
        seg_len = seg_len.max(info.segment_len);
        if dim.is_some_and(|d| d != info.condition_dim) {
            bail!(covergen::Error::Shape(format!("{} has condition dim {}", dir.display(), info.condition_dim)));
        }
        dim = Some(info.condition_dim);
        for s in segs {
            match s.kind {
                SequenceKind::PianoOnly => corpus.piano_only.push(s),
                SequenceKind::Paired => corpus.paired.push(s),
            }
        }
    }
    let Some(dim) = dim else { bail!(invalid("train needs at least one --data directory")) };
    let init_ck = init.map(ModelCheckpoint::load).transpose()?;
    let model_config = match &init_ck {
        Some(ck) => ck.config.clone(),
        None => cfg.model_config(vocab.size(), dim, seg_len)?,
    };
    if model_config.max_positions < seg_len {
        bail!(covergen::Error::Shape(format!(
            "segments of {seg_len} tokens exceed the checkpoint's {} positions",
            model_config.max_positions
        )));
    }
    if model_config.encoder.input_dim != dim {
        bail!(covergen::Error::Shape(format!(
            "checkpoint expects {}-dim condition rows, data has {dim}",
            model_config.encoder.input_dim
        )));
    }
    log::info!(
        "{mode:?}: {} piano-only and {} paired segments, {} steps",
        corpus.piano_only.len(),
        corpus.paired.len(),
        cfg.steps
    );
    let outcome = train(mode, &corpus, &model_config, &cfg.train_config(), init_ck, |ck| {
        log::info!("checkpoint at step {}", ck.step);
        ck.save(out)
    })?;
    outcome.checkpoint.save(out)?;
    write_lines(&out.join("trajectory.jsonl"), &outcome.trajectory)?;
    let run = TrainRun {
        provenance: prov,
        stage: mode,
        data: data.iter().map(|d| d.display().to_string()).collect(),
        init: init.map(|p| p.display().to_string()),
        steps: outcome.trajectory.len(),
        final_loss: outcome.trajectory.last().map(|r: &StepRecord| r.loss),
    };
    write_json(&out.join("run.json"), &run)?;
    if let Some(r) = outcome.trajectory.last() {
        log::info!("step {} loss {:.5}", r.step, r.loss);
    }
    Ok(())
}

pub fn condition_blocks(features: &FeatureMatrix, grid: &BeatGrid) -> anyhow::Result<Vec<ConditionBlock>> {
    grid.bars().iter().map(|bar| extract_condition_features(features, grid, bar).map_err(Into::into)).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn generate_cmd(
    checkpoint: &Path,
    song: &Path,
    song_beats: &Path,
    id: Option<String>,
    out: &Path,
    midi: Option<&Path>,
    cfg: &Config,
    prov: &Provenance,
) -> anyhow::Result<()> {
    let vocab = Vocabulary::default();
    let model = ModelCheckpoint::load(checkpoint)?.model()?;
    let features = load_song_features(song)?;
    if condition_dim(&features) != model.config.encoder.input_dim {
        bail!(covergen::Error::Shape(format!(
            "song features give {}-dim condition rows, model expects {}",
            condition_dim(&features),
            model.config.encoder.input_dim
        )));
    }
    let grid = BeatGrid::load_json(song_beats)?;
    let blocks = condition_blocks(&features, &grid)?;
    let seq = generate(&model, &vocab, &blocks, &cfg.generation_config())?;
    let id = id.unwrap_or_else(|| song.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    log::info!("{id}: generated {} bars, {} tokens", seq.bar_count(), seq.ids.len());
    write_lines(out, &[stamped(TokenRecord::new(id, &seq), prov)])?;
    if let Some(path) = midi {
        write_midi_annotated(&decode(&seq, &grid, &vocab)?, Some(&prov.line()), path)?;
    }
    Ok(())
}

/// A file used for every id, or a directory holding `<id>.json`.
fn per_id(path: &Path, id: &str) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{id}.json"))
    } else {
        path.to_path_buf()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub mca: Option<f64>,
    pub gs: Option<f64>,
    pub h4: Option<f64>,
}

pub fn evaluate(input: &Path, beats: &Path, reference: Option<&Path>) -> anyhow::Result<Vec<EvalRow>> {
    let vocab = Vocabulary::default();
    let mut rows = Vec::new();
    for record in read_records(input)? {
        let grid = BeatGrid::load_json(&per_id(beats, &record.id))?;
        let perf = decode(&record.sequence(), &grid, &vocab).with_context(|| format!("decoding {}", record.id))?;
        let score = match reference {
            Some(r) => {
                let reference = MelodyContour::load(&per_id(r, &record.id))?;
                Some(mca(&reference, &skyline(&perf, reference.frame_rate)?)?)
            }
            None => None,
        };
        rows.push(EvalRow {
            id: record.id.clone(),
            mca: score,
            gs: grooving_similarity_next(&perf, &grid).ok(),
            h4: pitch_class_entropy_4(&perf, &grid).ok(),
        });
    }
    Ok(rows)
}

pub fn eval_csv(rows: &[EvalRow], prov: &Provenance) -> String {
    let cell = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    let mut s = String::from("id,mca,gs,h4,version,config_hash\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id,
            cell(r.mca),
            cell(r.gs),
            cell(r.h4),
            prov.version,
            prov.config_hash
        ));
    }
    let mean = |f: fn(&EvalRow) -> Option<f64>| {
        Summary::of(&rows.iter().filter_map(f).collect::<Vec<_>>()).map(|s| s.to_string()).unwrap_or_default()
    };
    s.push_str(&format!(
        "mean ± std,{},{},{},{},{}\n",
        mean(|r| r.mca),
        mean(|r| r.gs),
        mean(|r| r.h4),
        prov.version,
        prov.config_hash
    ));
    s
}

#[derive(Serialize)]
struct FixtureTruth {
    id: String,
    slope: f64,
    flat_bars: Vec<usize>,
    bars: usize,
}

#[derive(Serialize)]
struct FixtureIndex<'a> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    seed: u64,
    sample_rate: u32,
    pairs: Vec<FixtureTruth>,
}

/// Writes `pieces` synthetic piano-only pieces and `pieces` synthetic song/cover
/// pairs with known warps, plus a manifest usable by `build-dataset` and `stats`.
pub fn synth_fixtures_cmd(
    out: &Path,
    pieces: usize,
    bars: usize,
    flat: bool,
    cfg: &Config,
    prov: &Provenance,
) -> anyhow::Result<()> {
    const SAMPLE_RATE: u32 = 16_000;
    if bars < 2 {
        bail!(invalid("fixtures need at least 2 bars"));
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut manifest = Vec::new();
    let mut truths = Vec::new();
    let name = |p: String| PathBuf::from(p);
    for k in 0..pieces {
        let id = format!("piano-{k:03}");
        let (perf, grid) = synthetic_piece(rng.random(), bars);
        write_midi_annotated(&perf, Some(&prov.line()), &out.join(format!("{id}.mid")))?;
        std::fs::write(out.join(format!("{id}.beats.json")), grid.to_json())?;
        manifest.push(PieceEntry {
            id: id.clone(),
            piano_midi: name(format!("{id}.mid")),
            piano_beats: Some(name(format!("{id}.beats.json"))),
            piano_audio: None,
            piano_features: None,
            song_audio: None,
            song_features: None,
            song_beats: None,
            chords: None,
            reference_contour: None,
            mca: None,
        });
    }
    for k in 0..pieces {
        let id = format!("pair-{k:03}");
        let (perf, grid) = synthetic_piece(rng.random(), bars);
        // mild warps keep pairs inside the default 15% length filter
        let slope = rng.random_range(0.95..1.06);
        let flat_bars: Vec<usize> =
            if flat && bars >= 8 && rng.random_bool(0.5) { vec![rng.random_range(1..bars)] } else { vec![] };
        let pair = warped_pair(&perf, &grid, slope, &flat_bars)?;
        write_midi_annotated(&perf, Some(&prov.line()), &out.join(format!("{id}.mid")))?;
        std::fs::write(out.join(format!("{id}.beats.json")), grid.to_json())?;
        let pcm = render_audio(&pair.song, SAMPLE_RATE);
        write_wav(&out.join(format!("{id}.song.wav")), &[pcm], SAMPLE_RATE)?;
        std::fs::write(out.join(format!("{id}.song.beats.json")), pair.song_grid.to_json())?;
        std::fs::write(out.join(format!("{id}.melody.json")), skyline(&pair.song, CONTOUR_FRAME_RATE)?.to_json())?;
        manifest.push(PieceEntry {
            id: id.clone(),
            piano_midi: name(format!("{id}.mid")),
            piano_beats: Some(name(format!("{id}.beats.json"))),
            piano_audio: None,
            piano_features: None,
            song_audio: Some(name(format!("{id}.song.wav"))),
            song_features: None,
            song_beats: Some(name(format!("{id}.song.beats.json"))),
            chords: None,
            reference_contour: Some(name(format!("{id}.melody.json"))),
            mca: None,
        });
        truths.push(FixtureTruth { id, slope, flat_bars, bars });
    }
    write_lines(&out.join("manifest.jsonl"), &manifest)?;
    let index = FixtureIndex { provenance: prov, seed: cfg.seed, sample_rate: SAMPLE_RATE, pairs: truths };
    write_json(&out.join("fixtures.json"), &index)?;
    log::info!("wrote {pieces} piano-only pieces and {pieces} pairs to {}", out.display());
    Ok(())
}
