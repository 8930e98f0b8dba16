use covergen::alignment::{dtw_path, remap_notes, time_map_from_path, TimeMap};
use covergen::beat_align::{beat_align, build_weak_pair, find_invalid_bars, nearest_beat};
use covergen::dataset::{build_interleaved_piano, filter_pair, segment, FilterDecision, Slot};
use covergen::features::{chroma_from_midi, chromagram, FeatureMatrix, FeatureSource, FRAME_RATE};
use covergen::metrics::{
    grooving_similarity, gs_from_grooves, h4_from_bars, mca, pitch_class_entropy, skyline, GrooveVector, MelodyContour,
};
use covergen::model::finetune_loss;
use covergen::remi::{decode_full, encode, grid_notes, VocabConfig, Vocabulary};
use covergen::stats::{duration_deviation, ioi_deviation, tempo_deviation};
use covergen::synth::{
    constant_grid, piano_record, random_monotone_map, random_quantized_performance, synthetic_piece,
};
use covergen::{BeatGrid, NoteEvent, PianoPerformance, TempoEvent};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vocab() -> Vocabulary {
    Vocabulary::new(VocabConfig::default()).unwrap()
}

fn increasing(start: f64, gaps: &[f64]) -> Vec<f64> {
    let mut t = start;
    let mut out = vec![t];
    for g in gaps {
        t += g;
        out.push(t);
    }
    out
}

fn grid_from(start: f64, gaps: &[f64]) -> BeatGrid {
    let times = increasing(start, gaps);
    let n = times.len();
    BeatGrid::new(times, (0..n).step_by(4).collect()).unwrap()
}

fn contour() -> impl Strategy<Value = MelodyContour> {
    prop::collection::vec(prop::option::weighted(0.8, 30.0..90.0f64), 1..200)
        .prop_filter("needs a voiced frame", |p| p.iter().any(Option::is_some))
        .prop_map(|p| MelodyContour::new(100.0, p).unwrap())
}

fn groove() -> impl Strategy<Value = GrooveVector> {
    prop::array::uniform16(any::<bool>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantized_performances_round_trip(seed in any::<u64>(), bars in 1usize..6) {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (perf, grid) = random_quantized_performance(&mut rng, bars, 60, &v);
        let seq = encode(&perf, &grid, None, &v).unwrap();
        seq.validate(&v).unwrap();
        prop_assert_eq!(seq.bar_count(), bars);
        let mut want = grid_notes(&perf, &grid, &v).unwrap();
        want.sort();
        prop_assert_eq!(decode_full(&seq, &grid, &v).unwrap().notes, want);
    }

    #[test]
    fn quantizing_a_grid_point_is_idempotent(start in 0.0..3.0f64, gaps in prop::collection::vec(0.2..1.5f64, 4..20), k in 0usize..64) {
        let grid = grid_from(start, &gaps);
        let subs = (grid.count() - 1) * 4;
        let k = k % subs;
        let t = grid.time_at_beat(k as f64 / 4.0);
        let q = grid.quantize_time(t, 4).unwrap();
        prop_assert_eq!(q.subdivision, k);
        let again = grid.time_at_beat(q.subdivision as f64 / 4.0);
        prop_assert_eq!(grid.quantize_time(again, 4).unwrap(), q);
    }

    #[test]
    fn constant_tempo_grid_is_arithmetic(bpm in 40.0..220.0f64, length in 1.0..60.0f64) {
        let grid = BeatGrid::from_tempo(&[TempoEvent { time: 0.0, bpm }], length, 4).unwrap();
        for (i, &t) in grid.beat_times().iter().enumerate() {
            prop_assert!((t - i as f64 * 60.0 / bpm).abs() <= 1e-9);
        }
        prop_assert!(grid.beat_times().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn midi_chroma_folds_octaves(seed in any::<u64>()) {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (perf, _) = random_quantized_performance(&mut rng, 2, 20, &v);
        let low: Vec<NoteEvent> = perf
            .notes()
            .iter()
            .map(|n| NoteEvent::new(21 + n.pitch % 12 + 12, n.onset, n.duration, n.velocity).unwrap())
            .collect();
        let low = PianoPerformance::new(low, vec![], Some(perf.length())).unwrap();
        let up = low.transpose(12).unwrap();
        prop_assert_eq!(chroma_from_midi(&low, FRAME_RATE).unwrap(), chroma_from_midi(&up, FRAME_RATE).unwrap());
    }

    #[test]
    fn audio_chroma_frames_are_unit_or_zero(freq in 60.0..2000.0f64, secs in 0.3..1.5f64, gap in any::<bool>()) {
        let sr = 8000u32;
        let n = (secs * sr as f64) as usize;
        let pcm: Vec<f32> = (0..n)
            .map(|i| {
                let t = i as f64 / sr as f64;
                if gap && t > secs / 2.0 { 0.0 } else { (2.0 * std::f64::consts::PI * freq * t).sin() as f32 }
            })
            .collect();
        let chroma = chromagram(&pcm, sr).unwrap();
        prop_assert!((chroma.count() as f64 - secs * chroma.frame_rate()).abs() <= 1.0 + 1e-9);
        for f in chroma.frames() {
            let norm: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dtw_paths_are_valid_and_costed(rows in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 12), 2..30), stretch in 1usize..3) {
        let a = FeatureMatrix::from_rows(&rows, 10.0, FeatureSource::Audio).unwrap();
        let b_rows: Vec<Vec<f64>> = rows.iter().flat_map(|r| std::iter::repeat_n(r.clone(), stretch)).take(rows.len() * 2 - 1).collect();
        let b = FeatureMatrix::from_rows(&b_rows, 10.0, FeatureSource::Audio).unwrap();
        let (path, cost) = dtw_path(&a, &b).unwrap();
        path.validate(a.count(), b.count()).unwrap();
        prop_assert!(cost >= 0.0);
        let map = time_map_from_path(&path, 10.0).unwrap();
        let ts: Vec<f64> = (0..50).map(|i| i as f64 * 0.07).collect();
        prop_assert!(ts.windows(2).all(|w| map.eval(w[0]) <= map.eval(w[1])));
    }

    #[test]
    fn time_maps_are_monotone(seed in any::<u64>(), knots in 1usize..10, t1 in -5.0..50.0f64, t2 in -5.0..50.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_monotone_map(&mut rng, 40.0, knots, 3.0);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(map.eval(lo) <= map.eval(hi));
    }

    #[test]
    fn remap_preserves_count_and_pitches(seed in any::<u64>(), slope in 0.5..2.0f64) {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (perf, grid) = random_quantized_performance(&mut rng, 3, 30, &v);
        let song = constant_grid(3, 0.5 * slope);
        let out = remap_notes(&perf, &TimeMap::linear(slope, grid.last_time()).unwrap(), &song).unwrap();
        let mut a: Vec<u8> = perf.notes().iter().map(|n| n.pitch).collect();
        let mut b: Vec<u8> = out.notes().iter().map(|n| n.pitch).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
        if perf.notes().len() >= 2 && perf.onsets().first() != perf.onsets().last() {
            let same = remap_notes(&perf, &TimeMap::identity(grid.last_time()), &grid).unwrap();
            prop_assert_eq!(ioi_deviation(&perf, &same).unwrap(), 1.0);
        }
    }

    #[test]
    fn nearest_beat_is_the_first_argmin(start in -1.0..1.0f64, gaps in prop::collection::vec(0.01..1.0f64, 0..30), t in -3.0..35.0f64) {
        let beats = increasing(start, &gaps);
        let j = nearest_beat(&beats, t);
        let d = (t - beats[j]).abs();
        prop_assert!(beats.iter().all(|s| (t - s).abs() >= d));
        prop_assert!(beats[..j].iter().all(|s| (t - s).abs() > d));
    }

    #[test]
    fn beat_alignment_is_monotone_and_invalid_bars_match(seed in any::<u64>(), pg in prop::collection::vec(0.3..0.8f64, 4..40), sg in prop::collection::vec(0.2..1.0f64, 1..40)) {
        let piano = grid_from(0.0, &pg);
        let song = grid_from(0.5, &sg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_monotone_map(&mut rng, piano.last_time() + 1.0, 6, 2.0);
        let al = beat_align(&map, &piano, &song).unwrap();
        prop_assert!(al.is_monotone());
        let bars = piano.bars();
        let invalid = find_invalid_bars(&al, &bars).unwrap();
        for bar in &bars {
            let f = |b: usize| nearest_beat(song.beat_times(), map.eval(piano.beat_times()[b]));
            prop_assert_eq!(invalid.contains(&bar.index), f(bar.start_beat) == f(bar.end_beat));
        }
    }

    #[test]
    fn weak_alignment_keeps_piano_notes(seed in 0u64..1000, bars in 2usize..6, slope in 0.6..1.6f64) {
        let v = vocab();
        let (piano, grid) = synthetic_piece(seed, bars);
        let song = constant_grid(bars, 0.5 * slope);
        let map = TimeMap::linear(slope, grid.last_time()).unwrap();
        let remapped = remap_notes(&piano, &map, &song).unwrap();
        let features = chroma_from_midi(&remapped, FRAME_RATE).unwrap();
        let pair = build_weak_pair(&piano, None, features, &map, &grid, &song, &v).unwrap();
        prop_assert_eq!(pair.piano.notes(), piano.notes());
    }

    #[test]
    fn deviations_are_symmetric_and_at_least_one(a in 0.1..500.0f64, b in 0.1..500.0f64) {
        for f in [duration_deviation, tempo_deviation] {
            let x = f(a, b).unwrap();
            prop_assert!(x >= 1.0);
            prop_assert_eq!(x, f(b, a).unwrap());
        }
    }

    #[test]
    fn interleaving_alternates_and_segments_fit(seed in 0u64..500, bars in 1usize..10, max_len in 60usize..300) {
        let v = vocab();
        let (perf, grid) = synthetic_piece(seed, bars);
        let rec = piano_record("p", &perf, &grid, &v).unwrap();
        let seq = build_interleaved_piano(&rec).unwrap();
        seq.check_interleaving().unwrap();
        let Ok(segs) = segment(&seq, max_len, &v) else { return Ok(()) };
        let expected: usize = (0..bars).map(|k| rec.tokens.bar(k).len() - 1).sum();
        prop_assert_eq!(segs.iter().map(|s| s.masked_count()).sum::<usize>(), expected);
        for s in &segs {
            prop_assert!(s.len() <= max_len);
            prop_assert!(matches!(s.slots[0], Slot::Token(_)));
        }
    }

    #[test]
    fn filtering_is_pure(items in prop::collection::vec((0.0..0.2f64, -0.4..0.4f64), 0..50), rot in 0usize..50) {
        let keep = |xs: &[(f64, f64)]| {
            let mut k: Vec<(u64, u64)> = xs
                .iter()
                .filter(|(m, d)| filter_pair(*m, *d) == FilterDecision::Keep)
                .map(|(m, d)| (m.to_bits(), d.to_bits()))
                .collect();
            k.sort();
            k
        };
        let mut shuffled = items.clone();
        if !shuffled.is_empty() {
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
        }
        prop_assert_eq!(keep(&items), keep(&shuffled));
    }

    #[test]
    fn finetune_loss_is_between_its_parts(l1 in 0.0..20.0f64, l2 in 0.0..20.0f64, alpha in 0.0..=1.0f64) {
        let f = finetune_loss(l1, l2, alpha).unwrap();
        prop_assert!(f >= l1.min(l2) - 1e-12 && f <= l1.max(l2) + 1e-12);
    }

    #[test]
    fn mca_is_octave_invariant(x in contour(), octaves in -2i32..=2) {
        prop_assert_eq!(mca(&x, &x).unwrap(), 1.0);
        let shifted = x.transpose(12.0 * octaves as f64);
        prop_assert_eq!(mca(&x, &shifted).unwrap(), 1.0);
        prop_assert_eq!(mca(&shifted, &x).unwrap(), 1.0);
    }

    #[test]
    fn entropy_and_groove_bounds(counts in prop::array::uniform12(0usize..50), a in groove(), b in groove()) {
        let h = pitch_class_entropy(&counts);
        prop_assert!((0.0..=12f64.log2() + 1e-12).contains(&h));
        let g = grooving_similarity(&a, &b);
        prop_assert!((0.0..=1.0).contains(&g));
        prop_assert_eq!(g, grooving_similarity(&b, &a));
        prop_assert!((0.0..=1.0).contains(&gs_from_grooves(&[a, b, a]).unwrap()));
    }

    #[test]
    fn h4_is_bounded(bars in prop::collection::vec(prop::collection::vec(21u8..109, 0..10), 4..12)) {
        if let Ok(h) = h4_from_bars(&bars) {
            prop_assert!((0.0..=12f64.log2() + 1e-12).contains(&h));
        }
    }

    #[test]
    fn skyline_ignores_note_order(seed in any::<u64>(), rot in 0usize..100) {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (perf, _) = random_quantized_performance(&mut rng, 2, 25, &v);
        let mut notes = perf.notes().to_vec();
        if !notes.is_empty() {
            let r = rot % notes.len();
            notes.rotate_left(r);
            notes.reverse();
        }
        let shuffled = PianoPerformance::new(notes, vec![], Some(perf.length())).unwrap();
        prop_assert_eq!(skyline(&perf, 100.0).unwrap(), skyline(&shuffled, 100.0).unwrap());
    }
}
