//! Corpus manifests: loading pieces, building datasets and corpus statistics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use covergen::alignment::{dtw_path, remap_notes, time_map_from_path, TimeMap};
use covergen::beat_align::{build_weak_pair, PairManifest};
use covergen::dataset::{
    build_interleaved_pair, build_interleaved_piano, filter_pair_with, length_difference, segment, FilterDecision,
    InterleavedSequence, PianoRecord, RejectReason, TrainingSegment,
};
use covergen::features::{chroma_from_midi, chromagram, read_wav, FeatureMatrix, FRAME_RATE};
use covergen::metrics::{mca, skyline, MelodyContour, CONTOUR_FRAME_RATE};
use covergen::midi::read_midi;
use covergen::remi::chord::parse_chord_track;
use covergen::remi::io::{read_jsonl, write_jsonl};
use covergen::remi::{encode, extract_chords, ChordChange, Vocabulary};
use covergen::stats::{duration_deviation, grid_tempo_deviation, ioi_deviation, Summary};
use covergen::{BeatGrid, PianoPerformance};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::provenance::Provenance;

/// One line of a corpus manifest. A line with song inputs is a pair; a line
/// without is a piano-only record. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PieceEntry {
    pub id: String,
    pub piano_midi: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piano_beats: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piano_audio: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piano_features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub song_audio: Option<PathBuf>,
    /// Conditioning features for the song; chroma from `song_audio` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub song_features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub song_beats: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chords: Option<PathBuf>,
    /// Song melody for the MCA filter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_contour: Option<PathBuf>,
    /// Precomputed MCA; wins over `reference_contour`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mca: Option<f64>,
}

impl PieceEntry {
    pub fn is_pair(&self) -> bool {
        self.song_audio.is_some() || self.song_features.is_some() || self.song_beats.is_some()
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.piano_midi);
        for p in [
            &mut self.piano_beats,
            &mut self.piano_audio,
            &mut self.piano_features,
            &mut self.song_audio,
            &mut self.song_features,
            &mut self.song_beats,
            &mut self.chords,
            &mut self.reference_contour,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

pub fn read_manifest(path: &Path) -> anyhow::Result<Vec<PieceEntry>> {
    let file = File::open(path).with_context(|| format!("opening manifest {}", path.display()))?;
    let mut entries: Vec<PieceEntry> = read_jsonl(BufReader::new(file))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = std::collections::BTreeSet::new();
    for e in &mut entries {
        if !seen.insert(e.id.clone()) {
            bail!(covergen::Error::Invalid(format!("duplicate id {:?} in {}", e.id, path.display())));
        }
        e.resolve(base);
    }
    Ok(entries)
}

pub fn load_grid(beats: Option<&Path>, perf: &PianoPerformance) -> anyhow::Result<BeatGrid> {
    Ok(match beats {
        Some(p) => BeatGrid::load_json(p)?,
        None => BeatGrid::from_tempo(perf.tempo_events(), perf.length(), 4)?,
    })
}

pub fn load_chords(
    path: Option<&Path>,
    extract: bool,
    perf: &PianoPerformance,
    grid: &BeatGrid,
) -> anyhow::Result<Option<Vec<ChordChange>>> {
    Ok(match path {
        Some(p) => Some(parse_chord_track(
            &std::fs::read_to_string(p).with_context(|| format!("reading chords {}", p.display()))?,
        )?),
        None if extract => Some(extract_chords(perf, grid)),
        None => None,
    })
}

/// 12-bin chroma of a song: from audio if present, else from 12-dim features.
fn alignment_chroma(audio: Option<&Path>, features: Option<&FeatureMatrix>) -> anyhow::Result<FeatureMatrix> {
    if let Some(p) = audio {
        let pcm = read_wav(p)?;
        return Ok(chromagram(&pcm.samples, pcm.sample_rate)?);
    }
    match features {
        Some(f) if f.dims() == 12 => Ok(f.clone()),
        _ => bail!(covergen::Error::Invalid("aligning needs song audio or 12-dimensional song features".into())),
    }
}

/// Piano-to-song time map from chroma DTW, with its path cost.
pub fn align(piano: &PianoPerformance, song_chroma: &FeatureMatrix) -> anyhow::Result<(TimeMap, f64, usize)> {
    let piano_chroma = chroma_from_midi(piano, song_chroma.frame_rate())?;
    let (path, cost) = dtw_path(&piano_chroma, song_chroma)?;
    Ok((time_map_from_path(&path, song_chroma.frame_rate())?, cost, path.len()))
}

/// Everything derived from one manifest line that both `build-dataset` and
/// `stats` need.
struct LoadedPair {
    piano: PianoPerformance,
    piano_grid: BeatGrid,
    song_grid: BeatGrid,
    features: FeatureMatrix,
    map: TimeMap,
    song_length: f64,
}

fn load_pair(e: &PieceEntry) -> anyhow::Result<LoadedPair> {
    let piano = read_midi(&e.piano_midi)?;
    let piano_grid = load_grid(e.piano_beats.as_deref(), &piano)?;
    let Some(song_beats) = &e.song_beats else {
        bail!(covergen::Error::Invalid(format!("{}: pair without song_beats", e.id)));
    };
    let song_grid = BeatGrid::load_json(song_beats)?;
    let given = e.song_features.as_deref().map(FeatureMatrix::load).transpose()?;
    let chroma = alignment_chroma(e.song_audio.as_deref(), given.as_ref())?;
    let (map, _, _) = align(&piano, &chroma)?;
    let song_length = chroma.duration();
    let features = given.unwrap_or(chroma);
    Ok(LoadedPair { piano, piano_grid, song_grid, features, map, song_length })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceReport {
    pub id: String,
    pub kind: &'static str,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mca: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length_deviation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invalid_bars: Option<Vec<usize>>,
    pub segments: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

struct Built {
    report: PieceReport,
    sequence: Option<InterleavedSequence>,
    segments: Vec<TrainingSegment>,
    pair: Option<PairManifest>,
}

fn finish(mut report: PieceReport, seq: InterleavedSequence, cfg: &Config, vocab: &Vocabulary) -> Built {
    match segment(&seq, cfg.segment_len, vocab) {
        Ok(segments) => {
            report.segments = segments.len();
            Built { report, sequence: Some(seq), segments, pair: None }
        }
        Err(e @ covergen::Error::OversizedBar { .. }) => {
            report.status = "rejected:oversized-bar".into();
            report.detail = Some(e.to_string());
            Built { report, sequence: None, segments: vec![], pair: None }
        }
        Err(e) => errored(report, e.into()),
    }
}

fn errored(mut report: PieceReport, e: anyhow::Error) -> Built {
    report.status = "error".into();
    report.detail = Some(format!("{e:#}"));
    Built { report, sequence: None, segments: vec![], pair: None }
}

fn build_piano(e: &PieceEntry, cfg: &Config, vocab: &Vocabulary) -> anyhow::Result<InterleavedSequence> {
    let perf = read_midi(&e.piano_midi)?;
    let grid = load_grid(e.piano_beats.as_deref(), &perf)?;
    let chords = load_chords(e.chords.as_deref(), cfg.extract_chords, &perf, &grid)?;
    let tokens = encode(&perf, &grid, chords.as_deref(), vocab)?;
    let features = match (&e.piano_features, &e.piano_audio) {
        (Some(p), _) => FeatureMatrix::load(p)?,
        (None, Some(p)) => {
            let pcm = read_wav(p)?;
            chromagram(&pcm.samples, pcm.sample_rate)?
        }
        (None, None) => chroma_from_midi(&perf, FRAME_RATE)?,
    };
    Ok(build_interleaved_piano(&PianoRecord { id: e.id.clone(), tokens, grid, features })?)
}

fn build_one(e: &PieceEntry, cfg: &Config, vocab: &Vocabulary) -> Built {
    let report = PieceReport {
        id: e.id.clone(),
        kind: if e.is_pair() { "paired" } else { "piano-only" },
        status: "kept".into(),
        mca: None,
        length_deviation: None,
        invalid_bars: None,
        segments: 0,
        detail: None,
    };
    if !e.is_pair() {
        return match build_piano(e, cfg, vocab) {
            Ok(seq) => finish(report, seq, cfg, vocab),
            Err(err) => errored(report, err),
        };
    }
    let run = || -> anyhow::Result<Built> {
        let mut report = report.clone();
        let lp = load_pair(e)?;
        let dev = length_difference(lp.song_length, lp.piano.length())?;
        let score = match (e.mca, &e.reference_contour) {
            (Some(m), _) => Some(m),
            (None, Some(p)) => {
                let reference = MelodyContour::load(p)?;
                let warped = remap_notes(&lp.piano, &lp.map, &lp.song_grid)?;
                Some(mca(&reference, &skyline(&warped, CONTOUR_FRAME_RATE)?)?)
            }
            (None, None) => None,
        };
        report.mca = score;
        report.length_deviation = Some(dev);
        // without a melody reference only the length criterion applies
        if let FilterDecision::Reject(reason) = filter_pair_with(score.unwrap_or(f64::INFINITY), dev, &cfg.thresholds())
        {
            report.status = match reason {
                RejectReason::LowMca => "rejected:low-mca",
                RejectReason::Length => "rejected:length",
            }
            .into();
            return Ok(Built { report, sequence: None, segments: vec![], pair: None });
        }
        let chords = load_chords(e.chords.as_deref(), cfg.extract_chords, &lp.piano, &lp.piano_grid)?;
        let pair =
            build_weak_pair(&lp.piano, chords.as_deref(), lp.features, &lp.map, &lp.piano_grid, &lp.song_grid, vocab)?;
        report.invalid_bars = Some(pair.invalid_bars());
        let mut manifest = PairManifest::from_pair(&e.id, &pair);
        manifest.piano_midi = Some(e.piano_midi.display().to_string());
        manifest.song_features = e.song_features.as_ref().map(|p| p.display().to_string());
        let seq = build_interleaved_pair(&e.id, &pair)?;
        let mut built = finish(report, seq, cfg, vocab);
        if built.sequence.is_some() {
            built.pair = Some(manifest);
        }
        Ok(built)
    };
    run().unwrap_or_else(|err| errored(report, err))
}

/// Summary written next to the dataset files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub vocabulary: serde_json::Value,
    pub condition_dim: usize,
    pub segment_len: usize,
    pub pieces: usize,
    pub kept_paired: usize,
    pub kept_piano_only: usize,
    pub rejected: usize,
    pub errors: usize,
    pub segments: usize,
}

pub fn build_dataset(manifest: &Path, out: &Path, cfg: &Config, prov: &Provenance) -> anyhow::Result<DatasetInfo> {
    let vocab = Vocabulary::default();
    let mut entries = read_manifest(manifest)?;
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let built: Vec<Built> = entries.par_iter().map(|e| build_one(e, cfg, &vocab)).collect();

    let mut dims = None;
    for b in &built {
        if let Some(seq) = &b.sequence {
            let d = seq.blocks[0].dims;
            if dims.is_some_and(|x| x != d) {
                bail!(covergen::Error::Shape(format!(
                    "{}: condition features have {d} columns, others have {}",
                    seq.id,
                    dims.unwrap()
                )));
            }
            dims = Some(d);
        }
    }
    for b in &built {
        match b.report.status.as_str() {
            "kept" => log::info!("{}: kept, {} segments", b.report.id, b.report.segments),
            s => log::warn!(
                "{}: {s}{}",
                b.report.id,
                b.report.detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default()
            ),
        }
    }
    let Some(condition_dim) = dims else {
        bail!(covergen::Error::Invalid("no piece survived dataset construction".into()));
    };

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let sequences: Vec<&InterleavedSequence> = built.iter().filter_map(|b| b.sequence.as_ref()).collect();
    let segments: Vec<&TrainingSegment> = built.iter().flat_map(|b| &b.segments).collect();
    let pairs: Vec<&PairManifest> = built.iter().filter_map(|b| b.pair.as_ref()).collect();
    let reports: Vec<&PieceReport> = built.iter().map(|b| &b.report).collect();
    write_lines(&out.join("sequences.jsonl"), &sequences)?;
    write_lines(&out.join("segments.jsonl"), &segments)?;
    write_lines(&out.join("pairs.jsonl"), &pairs)?;
    write_lines(&out.join("report.jsonl"), &reports)?;

    let count = |kind: &str| reports.iter().filter(|r| r.status == "kept" && r.kind == kind).count();
    let info = DatasetInfo {
        provenance: prov.clone(),
        vocabulary: vocab.to_json(),
        condition_dim,
        segment_len: cfg.segment_len,
        pieces: entries.len(),
        kept_paired: count("paired"),
        kept_piano_only: count("piano-only"),
        rejected: reports.iter().filter(|r| r.status.starts_with("rejected")).count(),
        errors: reports.iter().filter(|r| r.status == "error").count(),
        segments: segments.len(),
    };
    write_json(&out.join("dataset.json"), &info)?;
    Ok(info)
}

pub fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_jsonl(&mut w, records)?;
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairStats {
    pub id: String,
    pub duration_deviation: f64,
    pub tempo_deviation: Option<f64>,
    pub ioi_deviation_weak: f64,
    pub ioi_deviation_remapped: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub pairs: Vec<PairStats>,
    pub summary: Vec<(String, Option<Summary>)>,
}

fn pair_stats(e: &PieceEntry) -> anyhow::Result<PairStats> {
    let lp = load_pair(e)?;
    let remapped = remap_notes(&lp.piano, &lp.map, &lp.song_grid)?;
    let ioi_remapped = ioi_deviation(&lp.piano, &remapped).ok();
    Ok(PairStats {
        id: e.id.clone(),
        duration_deviation: duration_deviation(lp.song_length, lp.piano.length())?,
        tempo_deviation: grid_tempo_deviation(&lp.piano_grid, &lp.song_grid).ok(),
        // weak alignment never moves a piano note
        ioi_deviation_weak: 1.0,
        ioi_deviation_remapped: ioi_remapped,
    })
}

pub fn corpus_stats(manifest: &Path, prov: &Provenance) -> anyhow::Result<StatsReport> {
    let mut entries: Vec<PieceEntry> = read_manifest(manifest)?.into_iter().filter(PieceEntry::is_pair).collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let pairs: Vec<PairStats> = entries
        .par_iter()
        .map(|e| pair_stats(e).with_context(|| format!("pair {}", e.id)))
        .collect::<anyhow::Result<_>>()?;
    let col = |f: &dyn Fn(&PairStats) -> Option<f64>| Summary::of(&pairs.iter().filter_map(f).collect::<Vec<_>>());
    let summary = vec![
        ("duration_deviation".to_string(), col(&|p| Some(p.duration_deviation))),
        ("tempo_deviation".to_string(), col(&|p| p.tempo_deviation)),
        ("ioi_deviation_weak".to_string(), col(&|p| Some(p.ioi_deviation_weak))),
        ("ioi_deviation_remapped".to_string(), col(&|p| p.ioi_deviation_remapped)),
    ];
    Ok(StatsReport { provenance: prov.clone(), pairs, summary })
}

pub fn stats_csv(report: &StatsReport) -> String {
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    let mut s = String::from(
        "id,duration_deviation,tempo_deviation,ioi_deviation_weak,ioi_deviation_remapped,version,config_hash\n",
    );
    let p = &report.provenance;
    for r in &report.pairs {
        s.push_str(&format!(
            "{},{:.6},{},{:.6},{},{},{}\n",
            r.id,
            r.duration_deviation,
            opt(r.tempo_deviation),
            r.ioi_deviation_weak,
            opt(r.ioi_deviation_remapped),
            p.version,
            p.config_hash
        ));
    }
    let cell = |x: &Option<Summary>| x.as_ref().map(|s| s.to_string()).unwrap_or_default();
    let means: Vec<String> = report.summary.iter().map(|(_, s)| cell(s)).collect();
    s.push_str(&format!("mean ± std,{},{},{}\n", means.join(","), p.version, p.config_hash));
    s
}
