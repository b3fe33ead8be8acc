//! Forward operators: the pixel-integrated Gaussian measurement kernel, the
//! imaging operator acting on measures, the covariance operator built from
//! the squared kernel, their adjoint evaluations and analytic position
//! derivatives.

use crate::measure::{DiscreteMeasure, Domain, Point};
use crate::par;

/// Atom evaluations farther than this many sigmas from a pixel are exactly 0.
/// The erf difference is below double-precision resolution well before 12
/// sigma; atoms are not renormalised after truncation.
pub const TRUNCATION_SIGMAS: f64 = 12.0;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Gaussian PSF on an H x W pixel grid. Sigma is in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsfModel {
    pub sigma: f64,
    pub height: usize,
    pub width: usize,
}

impl PsfModel {
    pub fn new(sigma: f64, height: usize, width: usize) -> Self {
        assert!(sigma > 0.0, "sigma must be positive");
        assert!(height > 0 && width > 0, "grid sides must be positive");
        PsfModel {
            sigma,
            height,
            width,
        }
    }

    /// PSF from a full width at half maximum, FWHM = 2 sqrt(2 ln 2) sigma.
    pub fn from_fwhm(fwhm: f64, height: usize, width: usize) -> Self {
        PsfModel::new(fwhm / fwhm_factor(), height, width)
    }

    pub fn fwhm(&self) -> f64 {
        self.sigma * fwhm_factor()
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn domain(&self) -> Domain {
        Domain::for_grid(self.height, self.width)
    }
}

pub fn fwhm_factor() -> f64 {
    2.0 * (2.0 * std::f64::consts::LN_2).sqrt()
}

/// Integral of the normalised 1D Gaussian of width `sigma` centred at
/// `center` over the pixel interval `[pixel, pixel + 1]`, in closed form via
/// the error function.
pub fn gaussian_1d_pixel_integral(center: f64, pixel: i64, sigma: f64) -> f64 {
    debug_assert!(sigma > 0.0);
    let a = pixel as f64;
    let b = a + 1.0;
    if center < a - TRUNCATION_SIGMAS * sigma || center > b + TRUNCATION_SIGMAS * sigma {
        return 0.0;
    }
    let s = sigma * SQRT_2;
    0.5 * (libm::erf((b - center) / s) - libm::erf((a - center) / s))
}

/// Derivative of [`gaussian_1d_pixel_integral`] with respect to `center`:
/// the difference of Gaussian densities at the pixel edges.
pub fn gaussian_1d_pixel_integral_dcenter(center: f64, pixel: i64, sigma: f64) -> f64 {
    debug_assert!(sigma > 0.0);
    let a = pixel as f64;
    let b = a + 1.0;
    if center < a - TRUNCATION_SIGMAS * sigma || center > b + TRUNCATION_SIGMAS * sigma {
        return 0.0;
    }
    let g = |u: f64| (-u * u / (2.0 * sigma * sigma)).exp() / (sigma * SQRT_2PI);
    g(a - center) - g(b - center)
}

/// Pixel-integrated image of a unit point source: entry `(r, c)` is the
/// product of the 1D pixel integrals in y (rows) and x (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct AtomImage {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl AtomImage {
    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.values, other)
    }
}

fn row_col_integrals(x: Point, psf: &PsfModel) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<f64> = (0..psf.height)
        .map(|r| gaussian_1d_pixel_integral(x.y, r as i64, psf.sigma))
        .collect();
    let cols: Vec<f64> = (0..psf.width)
        .map(|c| gaussian_1d_pixel_integral(x.x, c as i64, psf.sigma))
        .collect();
    (rows, cols)
}

/// The measurement-kernel image of a point source at `x` (separable 2D
/// pixel-integrated Gaussian). Positions slightly outside the grid are
/// allowed; far-outside positions yield the zero image.
pub fn atom(x: Point, psf: &PsfModel) -> AtomImage {
    let (rows, cols) = row_col_integrals(x, psf);
    let mut values = vec![0.0; psf.pixel_count()];
    for (r, &ry) in rows.iter().enumerate() {
        if ry == 0.0 {
            continue;
        }
        let base = r * psf.width;
        for (c, &cx) in cols.iter().enumerate() {
            values[base + c] = ry * cx;
        }
    }
    AtomImage {
        values,
        height: psf.height,
        width: psf.width,
    }
}

/// Analytic partial derivatives of every entry of [`atom`] with respect to
/// the source position: `(d/dx, d/dy)`, each of length P.
pub fn atom_gradient(x: Point, psf: &PsfModel) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = row_col_integrals(x, psf);
    let drows: Vec<f64> = (0..psf.height)
        .map(|r| gaussian_1d_pixel_integral_dcenter(x.y, r as i64, psf.sigma))
        .collect();
    let dcols: Vec<f64> = (0..psf.width)
        .map(|c| gaussian_1d_pixel_integral_dcenter(x.x, c as i64, psf.sigma))
        .collect();
    let p = psf.pixel_count();
    let mut dx = vec![0.0; p];
    let mut dy = vec![0.0; p];
    for r in 0..psf.height {
        let base = r * psf.width;
        for c in 0..psf.width {
            dx[base + c] = rows[r] * dcols[c];
            dy[base + c] = drows[r] * cols[c];
        }
    }
    (dx, dy)
}

/// Image of a measure under the forward operator: the amplitude-weighted sum
/// of atoms.
pub fn phi_apply(m: &DiscreteMeasure, psf: &PsfModel) -> Vec<f64> {
    let mut out = vec![0.0; psf.pixel_count()];
    for s in m.spikes() {
        let a = atom(s.position, psf);
        for (o, v) in out.iter_mut().zip(a.values.iter()) {
            *o += s.amplitude * v;
        }
    }
    out
}

/// Adjoint of the imaging operator evaluated at one position:
/// `<atom(x), residual>`.
pub fn phi_adjoint_eval(residual: &[f64], x: Point, psf: &PsfModel) -> f64 {
    atom(x, psf).dot(residual)
}

/// Gradient of [`phi_adjoint_eval`] with respect to `x`.
pub fn phi_adjoint_gradient(residual: &[f64], x: Point, psf: &PsfModel) -> [f64; 2] {
    let (dx, dy) = atom_gradient(x, psf);
    [dot(&dx, residual), dot(&dy, residual)]
}

/// Dense symmetric P x P matrix; symmetry is enforced by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    p: usize,
    data: Vec<f64>,
}

impl CovarianceMatrix {
    pub fn zeros(p: usize) -> Self {
        CovarianceMatrix {
            p,
            data: vec![0.0; p * p],
        }
    }

    /// Builds the matrix from an upper-triangle generator; the lower triangle
    /// is mirrored, so the result is exactly symmetric.
    pub fn from_upper_fn(p: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let rows = par::map_indexed(p, |i| {
            let mut row = vec![0.0; p - i];
            for (k, j) in (i..p).enumerate() {
                row[k] = f(i, j);
            }
            row
        });
        let mut data = vec![0.0; p * p];
        for (i, row) in rows.into_iter().enumerate() {
            for (k, v) in row.into_iter().enumerate() {
                let j = i + k;
                data[i * p + j] = v;
                data[j * p + i] = v;
            }
        }
        CovarianceMatrix { p, data }
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.p + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn frobenius_dot(&self, other: &CovarianceMatrix) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_dot(self).sqrt()
    }

    pub fn sub(&self, other: &CovarianceMatrix) -> CovarianceMatrix {
        assert_eq!(self.p, other.p);
        CovarianceMatrix {
            p: self.p,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// `v^T R v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.p);
        let mut total = 0.0;
        for i in 0..self.p {
            if v[i] == 0.0 {
                continue;
            }
            total += v[i] * dot(&self.data[i * self.p..(i + 1) * self.p], v);
        }
        total
    }

    /// `R v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.p);
        par::map_indexed(self.p, |i| dot(&self.data[i * self.p..(i + 1) * self.p], v))
    }
}

/// Covariance-domain forward operator applied to a measure, discretised as
/// the rank-N sum of atom outer products weighted by the amplitudes.
pub fn lambda_apply(m: &DiscreteMeasure, psf: &PsfModel) -> CovarianceMatrix {
    let atoms: Vec<Vec<f64>> = m
        .spikes()
        .iter()
        .map(|s| atom(s.position, psf).values)
        .collect();
    let amps = m.amplitudes();
    CovarianceMatrix::from_upper_fn(psf.pixel_count(), |i, j| {
        amps.iter()
            .zip(atoms.iter())
            .map(|(&a, phi)| a * phi[i] * phi[j])
            .sum()
    })
}

/// Adjoint of the covariance operator evaluated at one position: the
/// quadratic form `atom(x)^T R atom(x)`.
pub fn lambda_adjoint_eval(r: &CovarianceMatrix, x: Point, psf: &PsfModel) -> f64 {
    r.quadratic_form(&atom(x, psf).values)
}

/// Gradient of [`lambda_adjoint_eval`] with respect to `x`: by symmetry of R,
/// `2 (d atom/d x)^T R atom(x)`.
pub fn lambda_adjoint_gradient(r: &CovarianceMatrix, x: Point, psf: &PsfModel) -> [f64; 2] {
    let a = atom(x, psf);
    let rv = r.mul_vec(&a.values);
    let (dx, dy) = atom_gradient(x, psf);
    [2.0 * dot(&dx, &rv), 2.0 * dot(&dy, &rv)]
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
