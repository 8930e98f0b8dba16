use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    Audio,
    MidiSynthetic,
    /// Precomputed embeddings imported from another system.
    External,
}

/// Row-major `count x dims` frame matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    dims: usize,
    frame_rate: f64,
    source: FeatureSource,
}

#[derive(Serialize, Deserialize)]
struct Header {
    frame_rate: f64,
    dims: usize,
    count: usize,
    #[serde(default = "external")]
    source: FeatureSource,
}

fn external() -> FeatureSource {
    FeatureSource::External
}

impl FeatureMatrix {
    pub fn new(data: Vec<f64>, dims: usize, frame_rate: f64, source: FeatureSource) -> Result<Self> {
        if dims == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dims) {
            return Err(Error::Shape(format!("{} values do not divide into rows of {dims}", data.len())));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::invalid(format!("frame rate {frame_rate} must be positive")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature values must be finite"));
        }
        Ok(FeatureMatrix { data, dims, frame_rate, source })
    }

    pub fn from_rows(rows: &[Vec<f64>], frame_rate: f64, source: FeatureSource) -> Result<Self> {
        let dims = rows.first().map_or(12, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        FeatureMatrix::new(rows.concat(), dims, frame_rate, source)
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dims
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.count() as f64 / self.frame_rate
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dims)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let header = Header { frame_rate: self.frame_rate, dims: self.dims, count: self.count(), source: self.source };
        let io = |e| Error::io("<features>", e);
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n").map_err(io)?;
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.write_all(&payload).map_err(io)
    }

    /// Reads the `JSON header line + little-endian f32 payload` format.
    pub fn read_from(input: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| Error::io("<features>", e))?;
        let header: Header = serde_json::from_str(line.trim_end())?;
        let expected = header.count * header.dims * 4;
        let mut payload = Vec::with_capacity(expected);
        reader.read_to_end(&mut payload).map_err(|e| Error::io("<features>", e))?;
        if payload.len() != expected {
            return Err(Error::Shape(format!(
                "feature payload has {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        FeatureMatrix::new(data, header.dims, header.frame_rate, header.source)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        FeatureMatrix::read_from(file)
    }
}
