use std::path::Path;

use crate::error::{Error, Result};

/// Mono PCM samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Pcm {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

pub fn read_wav(path: &Path) -> Result<Pcm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_wav_bytes(&bytes)
}

/// Decodes 16-bit PCM WAV, downmixing multi-channel audio by averaging.
pub fn read_wav_bytes(bytes: &[u8]) -> Result<Pcm> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Wav("truncated or missing RIFF/WAVE header".into()));
    }
    let riff_size = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if riff_size + 8 != bytes.len() {
        return Err(Error::Wav(format!("RIFF size field says {} bytes but file has {}", riff_size + 8, bytes.len())));
    }
    let mut reader = hound::WavReader::new(bytes).map_err(|e| Error::Wav(e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "unsupported subformat: {:?} {}-bit (only 16-bit PCM)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<i16> =
        reader.samples::<i16>().collect::<std::result::Result<_, _>>().map_err(|e| Error::Wav(e.to_string()))?;
    let samples = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f32 / 32768.0).sum::<f32>() / channels as f32)
        .collect();
    Ok(Pcm { samples, sample_rate: spec.sample_rate })
}

/// Writes 16-bit PCM with the given channel interleaving.
pub fn write_wav(path: &Path, channels: &[Vec<f32>], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::Wav(e.to_string()))?;
    let n = channels.iter().map(Vec::len).min().unwrap_or(0);
    for i in 0..n {
        for ch in channels {
            let s = (ch[i].clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(s).map_err(|e| Error::Wav(e.to_string()))?;
        }
    }
    w.finalize().map_err(|e| Error::Wav(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_bytes(channels: &[Vec<f32>], sr: u32) -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        write_wav(&p, channels, sr).unwrap();
        std::fs::read(p).unwrap()
    }

    #[test]
    fn silence() {
        let pcm = read_wav_bytes(&wav_bytes(&[vec![0.0; 22050]], 22050)).unwrap();
        assert_eq!(pcm.samples.len(), 22050);
        assert!(pcm.samples.iter().all(|&s| s == 0.0));
        assert_eq!(pcm.sample_rate, 22050);
    }

    #[test]
    fn stereo_downmix() {
        let l = vec![0.5; 100];
        let r = vec![-0.25; 100];
        let pcm = read_wav_bytes(&wav_bytes(&[l, r], 8000)).unwrap();
        let expected = (16384.0 / 32768.0 + -8192.0 / 32768.0) / 2.0;
        assert_eq!(pcm.samples.len(), 100);
        assert!(pcm.samples.iter().all(|&s| (s - expected).abs() < 1e-4));
    }

    #[test]
    fn size_mismatch_and_truncation() {
        let mut b = wav_bytes(&[vec![0.1; 50]], 8000);
        b.push(0);
        assert!(matches!(read_wav_bytes(&b), Err(Error::Wav(_))));
        assert!(matches!(read_wav_bytes(&b[..10]), Err(Error::Wav(_))));
    }

    #[test]
    fn float_subformat_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        let err = read_wav(&p).unwrap_err();
        assert!(err.to_string().contains("unsupported"));
    }
}
