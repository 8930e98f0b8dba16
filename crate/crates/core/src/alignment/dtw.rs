use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// Admissible steps `(di, dj)`, in tie-breaking preference order.
pub const STEPS: [(usize, usize); 3] = [(1, 1), (1, 2), (2, 1)];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarpPath {
    pub points: Vec<(usize, usize)>,
}

impl WarpPath {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks endpoints and that every step is admissible.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("warp path: {m}")));
        match (self.points.first(), self.points.last()) {
            (Some(&(0, 0)), Some(&end)) if end == (rows - 1, cols - 1) => {}
            _ => return bad("wrong endpoints".into()),
        }
        for w in self.points.windows(2) {
            let step = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
            if !STEPS.contains(&step) {
                return bad(format!("illegal step {:?} -> {:?}", w[0], w[1]));
            }
        }
        Ok(())
    }
}

/// `1 - cos(a, b)`, with distance 1 whenever either frame is all-zero.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

pub fn cost_matrix(a: &FeatureMatrix, b: &FeatureMatrix) -> Vec<Vec<f64>> {
    (0..a.count()).map(|i| (0..b.count()).map(|j| cosine_distance(a.frame(i), b.frame(j))).collect()).collect()
}

/// Sum of cell costs along a path, accumulated from the start.
pub fn path_cost(cost: &[Vec<f64>], path: &WarpPath) -> f64 {
    path.points.iter().fold(0.0, |acc, &(i, j)| acc + cost[i][j])
}

/// Minimum-cost warping path with unit step weights. Returns the path and
/// its accumulated cost.
pub fn dtw_path(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<(WarpPath, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("dtw needs two non-empty feature sequences"));
    }
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("feature dims {} vs {}", a.dims(), b.dims())));
    }
    if (a.frame_rate() - b.frame_rate()).abs() > 1e-9 {
        return Err(Error::invalid(format!("frame rates differ: {} vs {}", a.frame_rate(), b.frame_rate())));
    }
    dtw_from_cost(&cost_matrix(a, b))
}

pub(crate) fn dtw_from_cost(cost: &[Vec<f64>]) -> Result<(WarpPath, f64)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("empty cost matrix"));
    }
    let mut acc = vec![vec![f64::INFINITY; cols]; rows];
    let mut back = vec![vec![u8::MAX; cols]; rows];
    acc[0][0] = cost[0][0];
    for i in 0..rows {
        for j in 0..cols {
            if i == 0 && j == 0 {
                continue;
            }
            let mut best = f64::INFINITY;
            let mut arg = u8::MAX;
            for (k, &(di, dj)) in STEPS.iter().enumerate() {
                if i >= di && j >= dj {
                    let prev = acc[i - di][j - dj];
                    if prev < best {
                        best = prev;
                        arg = k as u8;
                    }
                }
            }
            if arg != u8::MAX {
                acc[i][j] = best + cost[i][j];
                back[i][j] = arg;
            }
        }
    }
    let total = acc[rows - 1][cols - 1];
    if !total.is_finite() {
        return Err(Error::InfeasiblePath { rows, cols });
    }
    let mut points = vec![(rows - 1, cols - 1)];
    let (mut i, mut j) = (rows - 1, cols - 1);
    while (i, j) != (0, 0) {
        let (di, dj) = STEPS[back[i][j] as usize];
        i -= di;
        j -= dj;
        points.push((i, j));
    }
    points.reverse();
    Ok((WarpPath { points }, total))
}
