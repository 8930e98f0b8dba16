//! Chroma feature extraction from audio and from symbolic performances.

mod chroma;
mod matrix;
mod wav;

pub use chroma::{chroma_from_midi, chromagram, ChromaConfig, FRAME_RATE};
pub use matrix::{FeatureMatrix, FeatureSource};
pub use wav::{read_wav, read_wav_bytes, write_wav, Pcm};
