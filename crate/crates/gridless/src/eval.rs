//! Reconstruction quality against ground truth: exact radius-tolerant
//! bipartite matching of spike positions, Jaccard index, localization RMSE,
//! and rasterisation of measures to super-resolved images (16-bit PGM).

use std::io::Write;

use thiserror::Error;

use crate::forward::{gaussian_1d_pixel_integral, PsfModel};
use crate::measure::DiscreteMeasure;
#[cfg(test)]
use crate::measure::Point;
use crate::par;

/// Result of matching a reconstruction against ground truth within a
/// tolerance radius.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// (truth index, reconstruction index, distance), distances <= radius.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_truth: Vec<usize>,
    pub unmatched_recon: Vec<usize>,
    pub radius: f64,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no matched pairs")]
    NoMatchedPairs,
}

const FORBIDDEN: f64 = 1e15;

/// Exact minimum-cost bipartite matching on Euclidean distance, restricted to
/// pairs within `radius`. Cardinality is maximised first (disallowed pairs
/// carry a prohibitive cost), then total distance is minimised.
pub fn match_spikes(truth: &DiscreteMeasure, recon: &DiscreteMeasure, radius: f64) -> MatchResult {
    assert!(radius > 0.0, "radius must be positive");
    let nt = truth.len();
    let nr = recon.len();
    let n = nt.max(nr);
    let mut pairs = Vec::new();
    if n > 0 {
        // pad to a square matrix; padded cells cost 0 so they never compete
        let mut cost = vec![0.0f64; n * n];
        for i in 0..nt {
            for j in 0..nr {
                let d = truth.spikes()[i].position.dist(&recon.spikes()[j].position);
                cost[i * n + j] = if d <= radius { d } else { FORBIDDEN };
            }
        }
        let assignment = hungarian(&cost, n);
        for (i, &j) in assignment.iter().enumerate() {
            if i < nt && j < nr {
                let d = cost[i * n + j];
                if d < FORBIDDEN {
                    pairs.push((i, j, d));
                }
            }
        }
    }
    let matched_t: Vec<bool> = {
        let mut v = vec![false; nt];
        for &(i, _, _) in &pairs {
            v[i] = true;
        }
        v
    };
    let matched_r: Vec<bool> = {
        let mut v = vec![false; nr];
        for &(_, j, _) in &pairs {
            v[j] = true;
        }
        v
    };
    MatchResult {
        pairs,
        unmatched_truth: (0..nt).filter(|&i| !matched_t[i]).collect(),
        unmatched_recon: (0..nr).filter(|&j| !matched_r[j]).collect(),
        radius,
    }
}

/// O(n^3) Hungarian algorithm (Jonker-Volgenant style potentials) on a square
/// cost matrix; returns the column assigned to each row. Deterministic.
fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    // potentials and assignment use 1-based internal indexing
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j]: row assigned to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// TP / (TP + FN + FP). Two empty measures count as a perfect match.
pub fn jaccard_index(m: &MatchResult) -> f64 {
    let tp = m.pairs.len();
    let denom = tp + m.unmatched_truth.len() + m.unmatched_recon.len();
    if denom == 0 {
        1.0
    } else {
        tp as f64 / denom as f64
    }
}

/// Root mean square of matched-pair distances.
pub fn localization_rmse(m: &MatchResult) -> Result<f64, EvalError> {
    if m.pairs.is_empty() {
        return Err(EvalError::NoMatchedPairs);
    }
    let acc: f64 = m.pairs.iter().map(|&(_, _, d)| d * d).sum();
    Ok((acc / m.pairs.len() as f64).sqrt())
}

/// Mean relative amplitude error over matched pairs.
pub fn amplitude_relative_error(
    truth: &DiscreteMeasure,
    recon: &DiscreteMeasure,
    m: &MatchResult,
) -> Result<f64, EvalError> {
    if m.pairs.is_empty() {
        return Err(EvalError::NoMatchedPairs);
    }
    let acc: f64 = m
        .pairs
        .iter()
        .map(|&(i, j, _)| {
            let a = truth.spikes()[i].amplitude;
            let b = recon.spikes()[j].amplitude;
            (a - b).abs() / a.abs().max(1e-300)
        })
        .sum();
    Ok(acc / m.pairs.len() as f64)
}

/// Rasterises a measure on an `upscale`-times finer grid: each spike becomes
/// a pixel-integrated Gaussian of width `render_sigma` fine pixels,
/// amplitudes preserved.
pub fn render_measure(
    m: &DiscreteMeasure,
    psf: &PsfModel,
    upscale: usize,
    render_sigma: f64,
) -> Vec<f64> {
    assert!(upscale >= 1);
    assert!(render_sigma > 0.0);
    let fh = psf.height * upscale;
    let fw = psf.width * upscale;
    let scale = upscale as f64;
    let rows = par::map_indexed(fh, |r| {
        let mut row = vec![0.0; fw];
        for s in m.spikes() {
            let fy = s.position.y * scale;
            let ry = gaussian_1d_pixel_integral(fy, r as i64, render_sigma);
            if ry == 0.0 {
                continue;
            }
            let fx = s.position.x * scale;
            for (c, v) in row.iter_mut().enumerate() {
                *v += s.amplitude * ry * gaussian_1d_pixel_integral(fx, c as i64, render_sigma);
            }
        }
        row
    });
    rows.into_iter().flatten().collect()
}

/// Min-max scaling applied when quantising an image to 16 bits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgmScaling {
    pub min: f64,
    pub max: f64,
}

/// Writes a binary 16-bit PGM (`P5`, maxval 65535, big-endian samples) with
/// min-max intensity scaling; the scaling factors are returned so callers can
/// echo them to the metrics log.
pub fn write_pgm16<W: Write>(
    w: &mut W,
    image: &[f64],
    height: usize,
    width: usize,
) -> std::io::Result<PgmScaling> {
    assert_eq!(image.len(), height * width);
    let min = image.iter().copied().fold(f64::INFINITY, f64::min);
    let max = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (min, max) = if image.is_empty() { (0.0, 0.0) } else { (min, max) };
    let span = max - min;
    write!(w, "P5\n{width} {height}\n65535\n")?;
    let mut buf = Vec::with_capacity(image.len() * 2);
    for &v in image {
        let q = if span > 0.0 {
            ((v - min) / span * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        buf.extend_from_slice(&q.to_be_bytes());
    }
    w.write_all(&buf)?;
    Ok(PgmScaling { min, max })
}
