//! Temporal statistics of an image stack: empirical mean and empirical
//! second-order cumulant (covariance), plus the binary stack and covariance
//! file formats.
//!
//! Covariance uses the unbiased 1/(T-1) normalisation and a two-pass
//! (mean, then centred products) accumulation in double precision. Each
//! output entry sums frames in index order, so parallel evaluation is
//! bit-identical to sequential.

use std::io::{Read, Write};

use thiserror::Error;

use crate::forward::CovarianceMatrix;
use crate::par;

/// T frames of H x W nonnegative intensities plus acquisition metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    frames: Vec<f64>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Frames per second; metadata only.
    pub frame_rate: f64,
}

impl ImageStack {
    pub fn new(frames: Vec<f64>, t: usize, h: usize, w: usize, frame_rate: f64) -> Self {
        assert!(t >= 1 && h >= 1 && w >= 1);
        assert_eq!(frames.len(), t * h * w);
        assert!(frames.iter().all(|v| v.is_finite()));
        ImageStack {
            frames,
            t,
            h,
            w,
            frame_rate,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.h * self.w
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let p = self.pixel_count();
        &self.frames[t * p..(t + 1) * p]
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }
}

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("covariance requires at least 2 frames")]
    TooFewFrames,
}

/// Temporal mean image: per-pixel average over frames.
pub fn empirical_mean(stack: &ImageStack) -> Vec<f64> {
    let p = stack.pixel_count();
    let t = stack.t;
    par::map_indexed(p, |i| {
        let mut acc = 0.0;
        for f in 0..t {
            acc += stack.frame(f)[i];
        }
        acc / t as f64
    })
}

/// Empirical covariance of the vectorised stack with unbiased 1/(T-1)
/// normalisation; exactly symmetric by construction.
pub fn empirical_covariance(stack: &ImageStack) -> Result<CovarianceMatrix, StatsError> {
    if stack.t < 2 {
        return Err(StatsError::TooFewFrames);
    }
    let mean = empirical_mean(stack);
    let p = stack.pixel_count();
    let t = stack.t;
    let norm = 1.0 / (t - 1) as f64;
    Ok(CovarianceMatrix::from_upper_fn(p, |i, j| {
        let mut acc = 0.0;
        for f in 0..t {
            let frame = stack.frame(f);
            acc += (frame[i] - mean[i]) * (frame[j] - mean[j]);
        }
        acc * norm
    }))
}

const STACK_MAGIC: &str = "FLSTK1";
const COV_MAGIC: &str = "FLCOV1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte 0: expected `{expected}`, got `{got}`")]
    BadMagic { expected: &'static str, got: String },
    #[error("malformed header at byte {offset}: {reason}")]
    BadHeader { offset: usize, reason: String },
    #[error("truncated payload at byte {offset}: expected {expected} bytes")]
    Truncated { offset: usize, expected: usize },
}

/// Writes the stack container: `FLSTK1\n`, a `T= H= W= dtype=f32 endian=LE`
/// header line, then frame-major row-major little-endian f32 samples.
pub fn write_stack<W: Write>(w: &mut W, stack: &ImageStack) -> Result<(), FormatError> {
    write!(
        w,
        "{}\nT={} H={} W={} dtype=f32 endian=LE\n",
        STACK_MAGIC, stack.t, stack.h, stack.w
    )?;
    let mut buf = Vec::with_capacity(stack.frames.len() * 4);
    for &v in &stack.frames {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_line<R: Read>(r: &mut R, offset: &mut usize) -> Result<String, FormatError> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(FormatError::BadHeader {
                offset: *offset,
                reason: "unexpected end of file".into(),
            });
        }
        *offset += 1;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 256 {
            return Err(FormatError::BadHeader {
                offset: *offset,
                reason: "header line too long".into(),
            });
        }
    }
    String::from_utf8(line).map_err(|e| FormatError::BadHeader {
        offset: *offset,
        reason: e.to_string(),
    })
}

fn parse_kv(line: &str, offset: usize, expected: &[&str]) -> Result<Vec<usize>, FormatError> {
    let fields: Vec<&str> = line.split(' ').collect();
    let tail_expected = ["dtype=f32", "endian=LE"];
    if fields.len() != expected.len() + 2 {
        return Err(FormatError::BadHeader {
            offset,
            reason: format!("expected {} header fields", expected.len() + 2),
        });
    }
    let mut out = Vec::new();
    for (field, key) in fields.iter().zip(expected.iter()) {
        let val = field
            .strip_prefix(&format!("{key}="))
            .ok_or_else(|| FormatError::BadHeader {
                offset,
                reason: format!("expected `{key}=<int>`, got `{field}`"),
            })?;
        out.push(val.parse::<usize>().map_err(|e| FormatError::BadHeader {
            offset,
            reason: format!("bad {key}: {e}"),
        })?);
    }
    for (field, want) in fields[expected.len()..].iter().zip(tail_expected.iter()) {
        if field != want {
            return Err(FormatError::BadHeader {
                offset,
                reason: format!("expected `{want}`, got `{field}`"),
            });
        }
    }
    Ok(out)
}

fn read_f32_payload<R: Read>(
    r: &mut R,
    count: usize,
    offset: usize,
) -> Result<Vec<f64>, FormatError> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(|_| FormatError::Truncated {
        offset,
        expected: count * 4,
    })?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Reads the `FLSTK1` stack container; `frame_rate` is not part of the file
/// and must be supplied by the caller (metadata only).
pub fn read_stack<R: Read>(r: &mut R, frame_rate: f64) -> Result<ImageStack, FormatError> {
    let mut offset = 0usize;
    let magic = read_line(r, &mut offset)?;
    if magic != STACK_MAGIC {
        return Err(FormatError::BadMagic {
            expected: STACK_MAGIC,
            got: magic,
        });
    }
    let header_at = offset;
    let header = read_line(r, &mut offset)?;
    let dims = parse_kv(&header, header_at, &["T", "H", "W"])?;
    let (t, h, w) = (dims[0], dims[1], dims[2]);
    if t < 1 || h < 1 || w < 1 {
        return Err(FormatError::BadHeader {
            offset: header_at,
            reason: "dimensions must be positive".into(),
        });
    }
    let frames = read_f32_payload(r, t * h * w, offset)?;
    Ok(ImageStack::new(frames, t, h, w, frame_rate))
}

/// Writes a covariance matrix as `FLCOV1` with a little-endian f64 payload
/// (f32 would lose too much precision for second-moment data).
pub fn write_covariance<W: Write>(w: &mut W, r: &CovarianceMatrix) -> Result<(), FormatError> {
    write!(w, "{}\nP={} dtype=f64 endian=LE\n", COV_MAGIC, r.dim())?;
    let mut buf = Vec::with_capacity(r.as_slice().len() * 8);
    for &v in r.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads the `FLCOV1` covariance container.
pub fn read_covariance<R: Read>(r: &mut R) -> Result<CovarianceMatrix, FormatError> {
    let mut offset = 0usize;
    let magic = read_line(r, &mut offset)?;
    if magic != COV_MAGIC {
        return Err(FormatError::BadMagic {
            expected: COV_MAGIC,
            got: magic,
        });
    }
    let header_at = offset;
    let header = read_line(r, &mut offset)?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 3 || fields[1] != "dtype=f64" || fields[2] != "endian=LE" {
        return Err(FormatError::BadHeader {
            offset: header_at,
            reason: "expected `P=<int> dtype=f64 endian=LE`".into(),
        });
    }
    let p: usize = fields[0]
        .strip_prefix("P=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| FormatError::BadHeader {
            offset: header_at,
            reason: format!("bad P field `{}`", fields[0]),
        })?;
    let mut bytes = vec![0u8; p * p * 8];
    r.read_exact(&mut bytes).map_err(|_| FormatError::Truncated {
        offset,
        expected: p * p * 8,
    })?;
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    // symmetrise defensively against hand-edited files
    Ok(CovarianceMatrix::from_upper_fn(p, |i, j| {
        0.5 * (data[i * p + j] + data[j * p + i])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{lambda_apply, phi_apply, PsfModel};
    use crate::measure::{DiscreteMeasure, Point, Spike};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_frame_stack() -> ImageStack {
        ImageStack::new(vec![1.0, 0.0, 3.0, 0.0], 2, 1, 2, 1.0)
    }

    #[test]
    fn mean_examples() {
        let constant = ImageStack::new(vec![5.0; 12], 3, 2, 2, 1.0);
        assert!(empirical_mean(&constant).iter().all(|&v| v == 5.0));
        assert_eq!(empirical_mean(&two_frame_stack()), vec![2.0, 0.0]);
    }

    #[test]
    fn mean_of_noiseless_static_stack_equals_forward_image() {
        let psf = PsfModel::new(1.0, 6, 6);
        let m = DiscreteMeasure::new(vec![
            Spike::new(2.0, Point::new(2.2, 3.1)),
            Spike::new(1.0, Point::new(4.5, 1.5)),
        ]);
        let img = phi_apply(&m, &psf);
        let t = 4;
        let mut frames = Vec::new();
        for _ in 0..t {
            frames.extend_from_slice(&img);
        }
        let stack = ImageStack::new(frames, t, 6, 6, 1.0);
        let mean = empirical_mean(&stack);
        for (a, b) in mean.iter().zip(img.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-15);
        }
    }

    #[test]
    fn covariance_examples() {
        let constant = ImageStack::new(vec![5.0; 12], 3, 2, 2, 1.0);
        let r = empirical_covariance(&constant).unwrap();
        assert!(r.as_slice().iter().all(|&v| v == 0.0));

        let r2 = empirical_covariance(&two_frame_stack()).unwrap();
        assert_eq!(r2.get(0, 0), 2.0);
        assert_eq!(r2.get(0, 1), 0.0);
        assert_eq!(r2.get(1, 0), 0.0);
        assert_eq!(r2.get(1, 1), 0.0);
    }

    #[test]
    fn covariance_requires_two_frames() {
        let one = ImageStack::new(vec![1.0], 1, 1, 1, 1.0);
        assert!(matches!(
            empirical_covariance(&one),
            Err(StatsError::TooFewFrames)
        ));
    }

    #[test]
    fn covariance_is_symmetric_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t, h, w) = (30, 3, 4);
        let frames: Vec<f64> = (0..t * h * w).map(|_| rng.gen_range(0.0..4.0)).collect();
        let stack = ImageStack::new(frames, t, h, w, 1.0);
        let r = empirical_covariance(&stack).unwrap();
        let p = r.dim();
        for i in 0..p {
            for j in 0..p {
                assert_eq!(r.get(i, j), r.get(j, i));
            }
        }
        let mat = nalgebra::DMatrix::from_fn(p, p, |i, j| r.get(i, j));
        let eigs = mat.symmetric_eigenvalues();
        let max_eig = eigs.iter().fold(0.0f64, |a, &b| a.max(b));
        assert!(eigs.iter().all(|&e| e >= -1e-10 * max_eig));
    }

    #[test]
    fn covariance_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, h, w) = (25, 2, 3);
        let frames: Vec<f64> = (0..t * h * w).map(|_| rng.gen_range(0.0..2.0)).collect();
        let stack = ImageStack::new(frames.clone(), t, h, w, 1.0);
        let shifted = ImageStack::new(frames.iter().map(|v| v + 100.0).collect(), t, h, w, 1.0);
        let r1 = empirical_covariance(&stack).unwrap();
        let r2 = empirical_covariance(&shifted).unwrap();
        let scale = r1.frobenius_norm();
        for (a, b) in r1.as_slice().iter().zip(r2.as_slice().iter()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + scale));
        }
    }

    /// Linear-model stack with independent AR(0) amplitude sequences: the
    /// empirical covariance converges to the covariance-operator image of the
    /// true-variance measure as T grows (monotone averaged trend).
    #[test]
    fn covariance_converges_to_operator_image() {
        let psf = PsfModel::new(1.0, 5, 5);
        let positions = [Point::new(1.6, 2.0), Point::new(3.4, 3.0)];
        let variances = [4.0, 1.0];
        let truth = DiscreteMeasure::new(vec![
            Spike::new(variances[0], positions[0]),
            Spike::new(variances[1], positions[1]),
        ]);
        let target = lambda_apply(&truth, &psf);
        let tnorm = target.frobenius_norm();

        let mut errs = Vec::new();
        for &t in &[100usize, 1000, 10000] {
            let mut err_sum = 0.0;
            for seed in 0..5u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let atoms: Vec<Vec<f64>> = positions
                    .iter()
                    .map(|&x| crate::forward::atom(x, &psf).values)
                    .collect();
                let mut frames = Vec::with_capacity(t * 25);
                for _ in 0..t {
                    let mut frame = vec![0.0; 25];
                    for (k, a) in atoms.iter().enumerate() {
                        let amp: f64 = 5.0 + variances[k].sqrt() * standard_normal(&mut rng);
                        for (f, v) in frame.iter_mut().zip(a.iter()) {
                            *f += amp * v;
                        }
                    }
                    frames.extend_from_slice(&frame);
                }
                let stack = ImageStack::new(
                    frames.iter().map(|v| v.max(0.0)).collect(),
                    t,
                    5,
                    5,
                    1.0,
                );
                let r = empirical_covariance(&stack).unwrap();
                err_sum += r.sub(&target).frobenius_norm() / tnorm;
            }
            errs.push(err_sum / 5.0);
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "errors {errs:?}");
    }

    fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        StandardNormal.sample(rng)
    }

    #[test]
    fn stack_round_trip_and_header() {
        let stack = ImageStack::new(vec![0.0, 1.5, 2.25, 3.0, 4.5, 6.0], 3, 1, 2, 50.0);
        let mut buf = Vec::new();
        write_stack(&mut buf, &stack).unwrap();
        let text = String::from_utf8_lossy(&buf[..32]);
        assert!(text.starts_with("FLSTK1\nT=3 H=1 W=2 dtype=f32 endian=LE\n"[..32].trim_end()));
        let back = read_stack(&mut &buf[..], 50.0).unwrap();
        assert_eq!(back, stack);
    }

    #[test]
    fn stack_bad_magic_reports_offset_zero() {
        let data = b"NOTMAGIC\nT=1 H=1 W=1 dtype=f32 endian=LE\n\x00\x00\x00\x00";
        match read_stack(&mut &data[..], 1.0) {
            Err(FormatError::BadMagic { got, .. }) => assert_eq!(got, "NOTMAGIC"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stack_bad_header_reports_offset() {
        let data = b"FLSTK1\nT=x H=1 W=1 dtype=f32 endian=LE\n";
        match read_stack(&mut &data[..], 1.0) {
            Err(FormatError::BadHeader { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn covariance_round_trip() {
        let r = CovarianceMatrix::from_upper_fn(4, |i, j| (i + j) as f64 * 0.25);
        let mut buf = Vec::new();
        write_covariance(&mut buf, &r).unwrap();
        let back = read_covariance(&mut &buf[..]).unwrap();
        assert_eq!(back, r);
    }
}
