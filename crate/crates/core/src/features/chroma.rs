use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::matrix::{FeatureMatrix, FeatureSource};
use crate::error::{Error, Result};
use crate::performance::PianoPerformance;

/// Output rate of every chroma extractor.
pub const FRAME_RATE: f64 = 10.0;

const REFERENCE_RATE: f64 = 22_050.0;
const REFERENCE_WINDOW: f64 = 4096.0;
const MIN_FREQ: f64 = 27.5;
const MAX_FREQ: f64 = 4186.01;
const SILENCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub struct ChromaConfig {
    pub window: usize,
    pub hop: usize,
}

impl ChromaConfig {
    /// 4096-sample window at 22.05 kHz (scaled to other rates) with a hop
    /// giving 10 frames per second.
    pub fn for_rate(sample_rate: u32) -> Self {
        let scale = sample_rate as f64 / REFERENCE_RATE;
        ChromaConfig {
            window: ((REFERENCE_WINDOW * scale).round() as usize).next_power_of_two(),
            hop: (sample_rate as f64 / FRAME_RATE).round() as usize,
        }
    }
}

fn normalize(frame: &mut [f64]) {
    let n = frame.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > SILENCE {
        frame.iter_mut().for_each(|x| *x /= n);
    } else {
        frame.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Power spectrogram folded onto 12 pitch classes (C = 0), smoothed over
/// neighbouring frames with a [1, 2, 1] kernel, each frame L2-normalized.
pub fn chromagram(pcm: &[f32], sample_rate: u32) -> Result<FeatureMatrix> {
    let cfg = ChromaConfig::for_rate(sample_rate);
    if pcm.len() < cfg.window {
        return Err(Error::invalid(format!(
            "{} samples is shorter than one {}-sample analysis window",
            pcm.len(),
            cfg.window
        )));
    }
    let n_frames = pcm.len().div_ceil(cfg.hop);
    let window: Vec<f64> =
        (0..cfg.window).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.window as f64).cos()).collect();
    let bin_class: Vec<Option<usize>> = (0..=cfg.window / 2)
        .map(|k| {
            let f = k as f64 * sample_rate as f64 / cfg.window as f64;
            (MIN_FREQ..=MAX_FREQ).contains(&f).then(|| {
                let midi = 69.0 + 12.0 * (f / 440.0).log2();
                (midi.round() as i64).rem_euclid(12) as usize
            })
        })
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.window);

    let mut raw = vec![[0.0f64; 12]; n_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.window];
    for (f, out) in raw.iter_mut().enumerate() {
        let center = (f * cfg.hop + cfg.hop / 2) as i64;
        let start = center - (cfg.window / 2) as i64;
        for (i, b) in buf.iter_mut().enumerate() {
            let idx = start + i as i64;
            let s = if idx >= 0 && (idx as usize) < pcm.len() { pcm[idx as usize] as f64 } else { 0.0 };
            *b = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, class) in bin_class.iter().enumerate() {
            if let Some(c) = class {
                out[*c] += buf[k].norm_sqr();
            }
        }
    }

    let mut data = Vec::with_capacity(n_frames * 12);
    for f in 0..n_frames {
        let mut frame = [0.0; 12];
        let mut weight = 0.0;
        for (df, w) in [(-1i64, 1.0), (0, 2.0), (1, 1.0)] {
            let g = f as i64 + df;
            if g >= 0 && (g as usize) < n_frames {
                for c in 0..12 {
                    frame[c] += w * raw[g as usize][c];
                }
                weight += w;
            }
        }
        // silence stays exactly zero
        if raw[f].iter().sum::<f64>() <= SILENCE * cfg.window as f64 {
            frame = [0.0; 12];
        } else {
            frame.iter_mut().for_each(|x| *x /= weight);
        }
        normalize(&mut frame);
        data.extend_from_slice(&frame);
    }
    FeatureMatrix::new(data, 12, FRAME_RATE, FeatureSource::Audio)
}

/// Velocity-weighted pitch classes of the notes sounding at each frame centre.
pub fn chroma_from_midi(perf: &PianoPerformance, frame_rate: f64) -> Result<FeatureMatrix> {
    if !(frame_rate > 0.0) {
        return Err(Error::invalid("frame rate must be positive"));
    }
    let n_frames = (perf.length() * frame_rate - 1e-9).ceil().max(0.0) as usize;
    let mut data = vec![0.0; n_frames * 12];
    for n in perf.notes() {
        let first = ((n.onset * frame_rate - 0.5).ceil().max(0.0)) as usize;
        let mut f = first;
        while f < n_frames {
            let t = (f as f64 + 0.5) / frame_rate;
            if t >= n.offset() {
                break;
            }
            if t >= n.onset {
                data[f * 12 + (n.pitch % 12) as usize] += n.velocity as f64;
            }
            f += 1;
        }
    }
    data.chunks_mut(12).for_each(normalize);
    FeatureMatrix::new(data, 12, frame_rate, FeatureSource::MidiSynthetic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::performance::NoteEvent;

    fn sines(freqs: &[f64], secs: f64, sr: u32) -> Vec<f32> {
        (0..(secs * sr as f64) as usize)
            .map(|i| {
                let t = i as f64 / sr as f64;
                (freqs.iter().map(|f| (2.0 * PI * f * t).sin()).sum::<f64>() * 0.3) as f32
            })
            .collect()
    }

    #[test]
    fn a440_concentrates_on_a() {
        let m = chromagram(&sines(&[440.0], 2.0, 22050), 22050).unwrap();
        assert!((m.count() as i64 - 20).abs() <= 1);
        for frame in m.frames() {
            let total: f64 = frame.iter().map(|x| x * x).sum();
            assert!(frame[9] * frame[9] / total >= 0.9, "{frame:?}");
        }
    }

    #[test]
    fn c_major_triad_top_three() {
        let m = chromagram(&sines(&[261.63, 329.63, 392.0], 2.0, 22050), 22050).unwrap();
        for frame in m.frames() {
            let mut idx: Vec<usize> = (0..12).collect();
            idx.sort_by(|&a, &b| frame[b].total_cmp(&frame[a]));
            let mut top = idx[..3].to_vec();
            top.sort();
            assert_eq!(top, vec![0, 4, 7]);
        }
    }

    #[test]
    fn silence_is_zero_and_frames_are_unit_or_zero() {
        let m = chromagram(&vec![0.0; 22050], 22050).unwrap();
        assert!(m.as_slice().iter().all(|&x| x == 0.0));
        let mut sig = sines(&[300.0], 1.0, 22050);
        sig.extend(vec![0.0; 22050]);
        let m = chromagram(&sig, 22050).unwrap();
        for frame in m.frames() {
            let n: f64 = frame.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
        }
        assert!(m.frame(m.count() - 1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn too_short() {
        assert!(chromagram(&[0.0; 100], 22050).is_err());
    }

    #[test]
    fn midi_chroma_examples() {
        let c = PianoPerformance::new(vec![NoteEvent::new(60, 0.0, 2.0, 90).unwrap()], vec![], None).unwrap();
        let m = chroma_from_midi(&c, 10.0).unwrap();
        assert_eq!(m.count(), 20);
        assert!(m.frames().all(|f| f[0] == 1.0 && f[1..].iter().all(|&x| x == 0.0)));

        let e = chroma_from_midi(&PianoPerformance::empty(1.0), 10.0).unwrap();
        assert_eq!(e.count(), 10);
        assert!(e.as_slice().iter().all(|&x| x == 0.0));

        let cg = PianoPerformance::new(
            vec![NoteEvent::new(60, 0.0, 1.0, 90).unwrap(), NoteEvent::new(67, 1.0, 1.0, 90).unwrap()],
            vec![],
            None,
        )
        .unwrap();
        let m = chroma_from_midi(&cg, 10.0).unwrap();
        assert_eq!(m.count(), 20);
        for f in 0..20 {
            let expected = if f < 10 { 0 } else { 7 };
            assert_eq!(m.frame(f)[expected], 1.0, "frame {f}");
        }
    }

    #[test]
    fn octave_folding() {
        let p = PianoPerformance::new(
            vec![NoteEvent::new(50, 0.1, 0.7, 70).unwrap(), NoteEvent::new(57, 0.3, 1.0, 100).unwrap()],
            vec![],
            None,
        )
        .unwrap();
        let a = chroma_from_midi(&p, 10.0).unwrap();
        let b = chroma_from_midi(&p.transpose(12).unwrap(), 10.0).unwrap();
        assert_eq!(a, b);
    }
}
