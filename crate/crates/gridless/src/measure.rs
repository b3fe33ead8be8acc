//! Discrete Radon measures: finite sums of weighted Dirac spikes with
//! continuous 2D positions, their TV norm, and the rectangular domain they
//! live on. Includes the spike-list CSV format shared by the simulator,
//! solver and CLI.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use thiserror::Error;

/// 2D position in continuous pixel units (pixel width = 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Rectangular ambient domain: positions `p` with `0 <= p.x <= width` and
/// `0 <= p.y <= height`, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub width: f64,
    pub height: f64,
}

impl Domain {
    pub fn new(width: f64, height: f64) -> Self {
        assert!(width > 0.0 && height > 0.0, "domain sides must be positive");
        Domain { width, height }
    }

    /// Domain covering an H x W pixel grid.
    pub fn for_grid(height: usize, width: usize) -> Self {
        Domain::new(width as f64, height as f64)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= 0.0 && p.x <= self.width && p.y >= 0.0 && p.y <= self.height
    }

    pub fn clamp(&self, p: Point) -> Point {
        Point::new(p.x.clamp(0.0, self.width), p.y.clamp(0.0, self.height))
    }
}

/// A single weighted Dirac mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spike {
    pub amplitude: f64,
    pub position: Point,
}

impl Spike {
    pub fn new(amplitude: f64, position: Point) -> Self {
        Spike { amplitude, position }
    }
}

/// A finite sum of weighted Dirac masses. Immutable after construction;
/// spikes sharing the exact same position are merged by amplitude summation
/// when the measure is built.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiscreteMeasure {
    spikes: Vec<Spike>,
}

impl DiscreteMeasure {
    pub fn new(spikes: Vec<Spike>) -> Self {
        let mut merged: Vec<Spike> = Vec::with_capacity(spikes.len());
        for s in spikes {
            match merged.iter_mut().find(|m| m.position == s.position) {
                Some(m) => m.amplitude += s.amplitude,
                None => merged.push(s),
            }
        }
        DiscreteMeasure { spikes: merged }
    }

    pub fn empty() -> Self {
        DiscreteMeasure { spikes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.spikes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spikes.is_empty()
    }

    pub fn spikes(&self) -> &[Spike] {
        &self.spikes
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.spikes.iter().map(|s| s.amplitude).collect()
    }

    pub fn positions(&self) -> Vec<Point> {
        self.spikes.iter().map(|s| s.position).collect()
    }

    /// Concatenation of two measures (sum of measures).
    pub fn concat(&self, other: &DiscreteMeasure) -> DiscreteMeasure {
        let mut spikes = self.spikes.clone();
        spikes.extend_from_slice(&other.spikes);
        DiscreteMeasure::new(spikes)
    }

    /// Total-variation norm; for a discrete measure this is the l1 norm of
    /// the amplitudes.
    pub fn tv_norm(&self) -> f64 {
        self.spikes.iter().map(|s| s.amplitude.abs()).sum()
    }

    /// Replaces single-linkage clusters of spikes within `radius` of each
    /// other by one spike carrying the summed amplitude at the
    /// amplitude-weighted centroid. Total amplitude mass is preserved.
    pub fn merge_close_spikes(&self, radius: f64) -> DiscreteMeasure {
        assert!(radius >= 0.0);
        let n = self.spikes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            if parent[i] != i {
                let r = find(parent, parent[i]);
                parent[i] = r;
            }
            parent[i]
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if self.spikes[i].position.dist(&self.spikes[j].position) <= radius {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[rj] = ri;
                    }
                }
            }
        }
        let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            let r = find(&mut parent, i);
            clusters[r].push(i);
        }
        let mut out = Vec::new();
        for cluster in clusters.into_iter().filter(|c| !c.is_empty()) {
            let total: f64 = cluster.iter().map(|&i| self.spikes[i].amplitude).sum();
            let (cx, cy) = if total.abs() > 0.0 {
                cluster.iter().fold((0.0, 0.0), |(x, y), &i| {
                    let s = &self.spikes[i];
                    (
                        x + s.amplitude * s.position.x / total,
                        y + s.amplitude * s.position.y / total,
                    )
                })
            } else {
                // zero net mass: plain average keeps the centroid finite
                let k = cluster.len() as f64;
                cluster.iter().fold((0.0, 0.0), |(x, y), &i| {
                    let s = &self.spikes[i];
                    (x + s.position.x / k, y + s.position.y / k)
                })
            };
            out.push(Spike::new(total, Point::new(cx, cy)));
        }
        DiscreteMeasure::new(out)
    }

    /// Removes spikes with `|amplitude| <= threshold`.
    pub fn prune_zero_amplitudes(&self, threshold: f64) -> DiscreteMeasure {
        assert!(threshold >= 0.0);
        DiscreteMeasure {
            spikes: self
                .spikes
                .iter()
                .copied()
                .filter(|s| s.amplitude.abs() > threshold)
                .collect(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected header `x,y,amplitude`, got `{got}`")]
    BadHeader { line: usize, got: String },
    #[error("line {line}: malformed row `{got}`: {reason}")]
    BadRow {
        line: usize,
        got: String,
        reason: String,
    },
}

/// Writes the spike-list CSV: header `x,y,amplitude`, one spike per row,
/// positions in pixel units, LF line endings, >= 9 significant digits.
pub fn write_spikes_csv<W: Write>(w: &mut W, m: &DiscreteMeasure) -> Result<(), CsvError> {
    let mut buf = String::new();
    buf.push_str("x,y,amplitude\n");
    for s in m.spikes() {
        writeln!(
            buf,
            "{:.12e},{:.12e},{:.12e}",
            s.position.x, s.position.y, s.amplitude
        )
        .expect("write to String");
    }
    w.write_all(buf.as_bytes())?;
    Ok(())
}

/// Reads the spike-list CSV written by [`write_spikes_csv`].
pub fn read_spikes_csv<R: BufRead>(r: &mut R) -> Result<DiscreteMeasure, CsvError> {
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => {
            return Err(CsvError::BadHeader {
                line: 1,
                got: String::new(),
            })
        }
    };
    if header.trim() != "x,y,amplitude" {
        return Err(CsvError::BadHeader {
            line: 1,
            got: header,
        });
    }
    let mut spikes = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let lineno = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(CsvError::BadRow {
                line: lineno,
                got: line.clone(),
                reason: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 3];
        for (k, f) in fields.iter().enumerate() {
            vals[k] = f.trim().parse::<f64>().map_err(|e| CsvError::BadRow {
                line: lineno,
                got: line.clone(),
                reason: e.to_string(),
            })?;
        }
        spikes.push(Spike::new(vals[2], Point::new(vals[0], vals[1])));
    }
    Ok(DiscreteMeasure::new(spikes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    #[test]
    fn tv_norm_empty_measure_is_zero() {
        assert_eq!(DiscreteMeasure::empty().tv_norm(), 0.0);
    }

    #[test]
    fn tv_norm_sums_absolute_amplitudes() {
        let m = DiscreteMeasure::new(vec![
            Spike::new(2.0, p(1.0, 1.0)),
            Spike::new(-3.0, p(2.0, 2.0)),
        ]);
        assert_eq!(m.tv_norm(), 5.0);
        let single = DiscreteMeasure::new(vec![Spike::new(0.5, p(0.3, 7.1))]);
        assert_eq!(single.tv_norm(), 0.5);
    }

    #[test]
    fn construction_merges_exact_duplicate_positions() {
        let m = DiscreteMeasure::new(vec![
            Spike::new(1.0, p(1.0, 2.0)),
            Spike::new(2.5, p(1.0, 2.0)),
        ]);
        assert_eq!(m.len(), 1);
        assert_eq!(m.spikes()[0].amplitude, 3.5);
    }

    #[test]
    fn merge_radius_zero_distinct_positions_is_identity() {
        let m = DiscreteMeasure::new(vec![
            Spike::new(1.0, p(0.0, 0.0)),
            Spike::new(2.0, p(1.0, 0.0)),
        ]);
        assert_eq!(m.merge_close_spikes(0.0), m);
    }

    #[test]
    fn merge_symmetric_pair_at_centroid() {
        let m = DiscreteMeasure::new(vec![
            Spike::new(1.0, p(0.0, 0.0)),
            Spike::new(1.0, p(0.05, 0.0)),
        ]);
        let merged = m.merge_close_spikes(0.1);
        assert_eq!(merged.len(), 1);
        assert_relative_eq!(merged.spikes()[0].amplitude, 2.0);
        assert_relative_eq!(merged.spikes()[0].position.x, 0.025);
        assert_relative_eq!(merged.spikes()[0].position.y, 0.0);
    }

    #[test]
    fn merge_weighted_centroid() {
        // weighted centroid (1*0 + 3*0.1)/4 = 0.075
        let m = DiscreteMeasure::new(vec![
            Spike::new(1.0, p(0.0, 0.0)),
            Spike::new(3.0, p(0.1, 0.0)),
        ]);
        let merged = m.merge_close_spikes(0.2);
        assert_eq!(merged.len(), 1);
        assert_relative_eq!(merged.spikes()[0].amplitude, 4.0);
        assert_relative_eq!(merged.spikes()[0].position.x, 0.075);
    }

    #[test]
    fn merge_is_single_linkage() {
        // 0 -- 0.09 -- 0.18: pairwise chain within 0.1 collapses to one spike
        let m = DiscreteMeasure::new(vec![
            Spike::new(1.0, p(0.0, 0.0)),
            Spike::new(1.0, p(0.09, 0.0)),
            Spike::new(1.0, p(0.18, 0.0)),
        ]);
        assert_eq!(m.merge_close_spikes(0.1).len(), 1);
    }

    #[test]
    fn prune_examples() {
        let m = DiscreteMeasure::new(vec![
            Spike::new(0.0, p(0.0, 0.0)),
            Spike::new(1.0, p(1.0, 1.0)),
        ]);
        let pruned = m.prune_zero_amplitudes(0.0);
        assert_eq!(pruned.len(), 1);
        assert_eq!(pruned.spikes()[0].amplitude, 1.0);

        let tiny = DiscreteMeasure::new(vec![Spike::new(1e-12, p(0.0, 0.0))]);
        assert!(tiny.prune_zero_amplitudes(1e-9).is_empty());

        let keep = DiscreteMeasure::new(vec![Spike::new(1.0, p(0.0, 0.0))]);
        assert_eq!(keep.prune_zero_amplitudes(0.5).len(), 1);
    }

    #[test]
    fn csv_round_trip() {
        let m = DiscreteMeasure::new(vec![
            Spike::new(1.25, p(3.0625, 4.5)),
            Spike::new(-0.5, p(0.1, 15.9)),
        ]);
        let mut buf = Vec::new();
        write_spikes_csv(&mut buf, &m).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,y,amplitude\n"));
        assert!(!text.contains('\r'));
        let back = read_spikes_csv(&mut &buf[..]).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn csv_bad_row_reports_line_number() {
        let data = b"x,y,amplitude\n1.0,2.0,3.0\noops,1,2\n";
        let err = read_spikes_csv(&mut &data[..]).unwrap_err();
        match err {
            CsvError::BadRow { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn tv_norm_absolutely_homogeneous(
            amps in proptest::collection::vec(-10.0f64..10.0, 0..6),
            c in -5.0f64..5.0,
        ) {
            let spikes: Vec<Spike> = amps.iter().enumerate()
                .map(|(i, &a)| Spike::new(a, p(i as f64, 0.0)))
                .collect();
            let m = DiscreteMeasure::new(spikes.clone());
            let scaled = DiscreteMeasure::new(
                spikes.iter().map(|s| Spike::new(c * s.amplitude, s.position)).collect());
            prop_assert!((scaled.tv_norm() - c.abs() * m.tv_norm()).abs() <= 1e-12 * (1.0 + m.tv_norm()));
        }

        #[test]
        fn tv_norm_triangle_inequality_and_disjoint_equality(
            a1 in proptest::collection::vec(-10.0f64..10.0, 1..5),
            a2 in proptest::collection::vec(-10.0f64..10.0, 1..5),
        ) {
            let m1 = DiscreteMeasure::new(
                a1.iter().enumerate().map(|(i, &a)| Spike::new(a, p(i as f64, 0.0))).collect());
            let m2 = DiscreteMeasure::new(
                a2.iter().enumerate().map(|(i, &a)| Spike::new(a, p(i as f64, 1.0))).collect());
            let cat = m1.concat(&m2);
            prop_assert!(cat.tv_norm() <= m1.tv_norm() + m2.tv_norm() + 1e-12);
            // disjoint supports: equality
            prop_assert!((cat.tv_norm() - (m1.tv_norm() + m2.tv_norm())).abs() <= 1e-12);
        }

        #[test]
        fn merge_preserves_total_mass(
            spikes in proptest::collection::vec((-5.0f64..5.0, 0.0f64..4.0, 0.0f64..4.0), 0..8),
            radius in 0.0f64..2.0,
        ) {
            let m = DiscreteMeasure::new(
                spikes.iter().map(|&(a, x, y)| Spike::new(a, p(x, y))).collect());
            let mass: f64 = m.spikes().iter().map(|s| s.amplitude).sum();
            let merged = m.merge_close_spikes(radius);
            let mass2: f64 = merged.spikes().iter().map(|s| s.amplitude).sum();
            prop_assert!((mass - mass2).abs() <= 1e-10 * (1.0 + mass.abs()));
        }
    }
}
