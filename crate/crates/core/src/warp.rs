//! Polynomial coordinate warp: a 2 x K coefficient matrix maps monomial
//! features of the (normalized) pixel coordinates to source coordinates,
//! which are sampled with bicubic interpolation to produce the warped
//! image. Includes the alignment loss between a warped blurry image and
//! a sharp reference, with analytic gradients, and the fitting routine.
//!
//! Pixel indices are mapped to [-1, 1] per axis before featurization.
//! Raw third powers of indices in the thousands would destroy the
//! conditioning of the quasi-Newton solve; normalization preserves the
//! model class exactly while keeping coefficients O(1).

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{lbfgs_minimize, LbfgsConfig, OptimProblem, OptimReport};

/// Number of monomials of total degree <= `degree` in two variables.
pub fn feature_count(degree: usize) -> usize {
    (degree + 1) * (degree + 2) / 2
}

/// Monomials of `(i, j)` up to the given total degree, graded
/// lexicographic: `1; i, j; i^2, ij, j^2; i^3, i^2 j, i j^2, j^3; ...`
pub fn poly_features(i: f64, j: f64, degree: usize) -> Vec<f64> {
    assert!(degree >= 1, "degree must be >= 1");
    let mut pow_i = vec![1.0; degree + 1];
    let mut pow_j = vec![1.0; degree + 1];
    for t in 1..=degree {
        pow_i[t] = pow_i[t - 1] * i;
        pow_j[t] = pow_j[t - 1] * j;
    }
    let mut f = Vec::with_capacity(feature_count(degree));
    for t in 0..=degree {
        for k in 0..=t {
            f.push(pow_i[t - k] * pow_j[k]);
        }
    }
    f
}

/// 2 x K coefficient matrix of the polynomial coordinate transform,
/// acting on normalized coordinates. Row 0 produces the source row
/// coordinate, row 1 the source column coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpMatrix {
    degree: usize,
    coeffs: Vec<f64>, // 2 rows x K columns, row-major
}

impl WarpMatrix {
    /// Identity transform: unit weight on the linear feature of each axis.
    pub fn identity(degree: usize) -> WarpMatrix {
        assert!(degree >= 1);
        let k = feature_count(degree);
        let mut coeffs = vec![0.0; 2 * k];
        coeffs[1] = 1.0; // i' = i
        coeffs[k + 2] = 1.0; // j' = j
        WarpMatrix { degree, coeffs }
    }

    pub fn from_coeffs(degree: usize, coeffs: Vec<f64>) -> Result<WarpMatrix> {
        if degree < 1 {
            return Err(Error::InvalidParameter("warp degree must be >= 1".into()));
        }
        let k = feature_count(degree);
        if coeffs.len() != 2 * k {
            return Err(Error::InvalidParameter(format!(
                "warp matrix needs 2x{k} coefficients for degree {degree}, got {}",
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter(
                "non-finite warp coefficient".into(),
            ));
        }
        Ok(WarpMatrix { degree, coeffs })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn k(&self) -> usize {
        feature_count(self.degree)
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < 2 && col < self.k());
        self.coeffs[row * self.k() + col]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Re-express this warp at a higher degree by zero-extending the
    /// coefficients (degree-d features are a prefix of degree-(d+1) ones).
    pub fn promote(&self, degree: usize) -> Result<WarpMatrix> {
        if degree < self.degree {
            return Err(Error::InvalidParameter(format!(
                "cannot demote degree {} warp to degree {degree}",
                self.degree
            )));
        }
        let k_old = self.k();
        let k_new = feature_count(degree);
        let mut coeffs = vec![0.0; 2 * k_new];
        coeffs[..k_old].copy_from_slice(&self.coeffs[..k_old]);
        coeffs[k_new..k_new + k_old].copy_from_slice(&self.coeffs[k_old..]);
        WarpMatrix::from_coeffs(degree, coeffs)
    }

    /// Map a pixel coordinate through the transform, for an image of the
    /// given `(height, width)`. Returns the source `(y, x)` in pixels.
    pub fn map_point(&self, y: f64, x: f64, dims: (usize, usize)) -> (f64, f64) {
        let (m, n) = dims;
        let (yn, xn) = normalize(y, x, m, n);
        let f = poly_features(yn, xn, self.degree);
        let k = self.k();
        let mut iy = 0.0;
        let mut jx = 0.0;
        for (c, fv) in f.iter().enumerate() {
            iy += self.coeffs[c] * fv;
            jx += self.coeffs[k + c] * fv;
        }
        (
            (iy + 1.0) * 0.5 * (m - 1) as f64,
            (jx + 1.0) * 0.5 * (n - 1) as f64,
        )
    }

    /// Plain-text serialization: `degree d` then the two coefficient rows
    /// at 17 significant digits.
    pub fn to_text(&self) -> String {
        let k = self.k();
        let mut s = String::new();
        let _ = writeln!(s, "degree {}", self.degree);
        for row in 0..2 {
            let cols: Vec<String> = (0..k)
                .map(|c| format!("{:.16e}", self.coeffs[row * k + c]))
                .collect();
            let _ = writeln!(s, "{}", cols.join(" "));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|source| Error::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<WarpMatrix> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let perr = |line: usize, msg: String| Error::ParseFile {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
        let degree: usize = header
            .trim()
            .strip_prefix("degree")
            .ok_or_else(|| perr(1, "expected `degree d` header".into()))?
            .trim()
            .parse()
            .map_err(|e| perr(1, format!("bad degree: {e}")))?;
        let k = feature_count(degree);
        let mut coeffs = Vec::with_capacity(2 * k);
        for row in 0..2 {
            let line = lines
                .next()
                .ok_or_else(|| perr(row + 2, "missing coefficient row".into()))?;
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| perr(row + 2, format!("bad coefficient: {e}")))?;
            if values.len() != k {
                return Err(perr(
                    row + 2,
                    format!("expected {k} coefficients, got {}", values.len()),
                ));
            }
            coeffs.extend_from_slice(&values);
        }
        WarpMatrix::from_coeffs(degree, coeffs)
    }
}

#[inline]
fn normalize(y: f64, x: f64, m: usize, n: usize) -> (f64, f64) {
    (
        2.0 * y / (m - 1) as f64 - 1.0,
        2.0 * x / (n - 1) as f64 - 1.0,
    )
}

/// Resample `img` through the warp: `out[i][j] = img(W(i, j))` with
/// bicubic interpolation and border clamping. Output matches the input
/// dimensions.
pub fn warp_image(img: &Image, w: &WarpMatrix) -> Image {
    let (m, n) = img.dims();
    warp_patch(img, w, (0, 0, m, n), (m, n))
}

/// Warp restricted to the rectangle `(top, left, h, w)` of the output
/// frame. `frame_dims` is the full frame used for coordinate
/// normalization (the input image's dimensions in the unrestricted case).
pub(crate) fn warp_patch(
    img: &Image,
    w: &WarpMatrix,
    rect: (usize, usize, usize, usize),
    frame_dims: (usize, usize),
) -> Image {
    let (top, left, h, wd) = rect;
    let (fm, fn_) = frame_dims;
    let mut out = Image::zeros(wd, h);
    let rows: Vec<(usize, &mut [f64])> = out
        .as_mut_slice()
        .chunks_mut(wd)
        .enumerate()
        .collect();
    rows.into_par_iter().for_each(|(r, row)| {
        let y = (top + r) as f64;
        for (c, slot) in row.iter_mut().enumerate() {
            let x = (left + c) as f64;
            let (sy, sx) = w.map_point(y, x, (fm, fn_));
            *slot = img.sample_bicubic(sy, sx);
        }
    });
    out
}

/// Vector-Jacobian product of the warp against a per-pixel weight array:
/// `sum_px weight[px] * d warp(img, W)[px] / d W`, over the same rectangle
/// conventions as [`warp_patch`]. Returns a gradient of length `2K`.
pub(crate) fn warp_vjp(
    img: &Image,
    w: &WarpMatrix,
    rect: (usize, usize, usize, usize),
    frame_dims: (usize, usize),
    weights: &Image,
) -> Vec<f64> {
    let (top, left, h, wd) = rect;
    debug_assert_eq!(weights.dims(), (h, wd));
    let (fm, fn_) = frame_dims;
    let k = w.k();
    let scale_y = 0.5 * (fm - 1) as f64;
    let scale_x = 0.5 * (fn_ - 1) as f64;

    let partials: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|r| {
            let mut grad = vec![0.0; 2 * k];
            let y = (top + r) as f64;
            for c in 0..wd {
                let x = (left + c) as f64;
                let (yn, xn) = normalize(y, x, fm, fn_);
                let f = poly_features(yn, xn, w.degree);
                let kk = w.k();
                let mut sy = 0.0;
                let mut sx = 0.0;
                for (ci, fv) in f.iter().enumerate() {
                    sy += w.coeffs[ci] * fv;
                    sx += w.coeffs[kk + ci] * fv;
                }
                let sy = (sy + 1.0) * scale_y;
                let sx = (sx + 1.0) * scale_x;
                let (_, dy, dx) = img.sample_bicubic_with_grad(sy, sx);
                let wt = weights.at(r, c);
                let gy = wt * dy * scale_y;
                let gx = wt * dx * scale_x;
                for (ci, fv) in f.iter().enumerate() {
                    grad[ci] += gy * fv;
                    grad[k + ci] += gx * fv;
                }
            }
            grad
        })
        .collect();

    // sequential reduction keeps the result bit-deterministic
    let mut grad = vec![0.0; 2 * k];
    for part in &partials {
        for (g, p) in grad.iter_mut().zip(part) {
            *g += p;
        }
    }
    grad
}

/// Alignment loss between the warped blurry image and the sharp image:
/// mean squared error of the centered images, with the analytic gradient
/// with respect to the `2K` warp coefficients.
pub fn warping_loss(w: &WarpMatrix, blurry: &Image, sharp: &Image) -> Result<(f64, Vec<f64>)> {
    if blurry.dims() != sharp.dims() {
        return Err(Error::DimensionMismatch {
            context: "warping_loss",
            expected_h: sharp.height(),
            expected_w: sharp.width(),
            got_h: blurry.height(),
            got_w: blurry.width(),
        });
    }
    let (m, n) = sharp.dims();
    let count = (m * n) as f64;

    let warped = warp_image(blurry, w);
    let mean_w = warped.mean();
    let mean_s = sharp.mean();

    let mut residual = Image::zeros(n, m);
    let mut loss = 0.0;
    for i in 0..m {
        for j in 0..n {
            let r = (warped.at(i, j) - mean_w) - (sharp.at(i, j) - mean_s);
            residual.set(i, j, r);
            loss += r * r;
        }
    }
    loss /= count;

    // adjoint of the centering operator: subtract the residual mean
    let mean_r = residual.mean();
    let mut weights = residual;
    for v in weights.as_mut_slice() {
        *v = 2.0 * (*v - mean_r) / count;
    }
    let grad = warp_vjp(blurry, w, (0, 0, m, n), (m, n), &weights);
    Ok((loss, grad))
}

/// Estimate the warp aligning `blurry` to `sharp` by minimizing
/// [`warping_loss`] with L-BFGS, starting from `init` (identity when
/// `None`). The returned loss never exceeds the initial loss.
pub fn fit_warp(
    blurry: &Image,
    sharp: &Image,
    degree: usize,
    init: Option<WarpMatrix>,
) -> Result<(WarpMatrix, OptimReport)> {
    fit_warp_with_config(blurry, sharp, degree, init, &LbfgsConfig::default())
}

pub fn fit_warp_with_config(
    blurry: &Image,
    sharp: &Image,
    degree: usize,
    init: Option<WarpMatrix>,
    config: &LbfgsConfig,
) -> Result<(WarpMatrix, OptimReport)> {
    if degree < 1 {
        return Err(Error::InvalidParameter("warp degree must be >= 1".into()));
    }
    let init = match init {
        Some(w) if w.degree() != degree => {
            return Err(Error::InvalidParameter(format!(
                "init warp degree {} != requested degree {degree}",
                w.degree()
            )))
        }
        Some(w) => w,
        None => WarpMatrix::identity(degree),
    };
    let k = feature_count(degree);
    let problem = OptimProblem::new(2 * k, |params: &[f64]| {
        let w = WarpMatrix {
            degree,
            coeffs: params.to_vec(),
        };
        warping_loss(&w, blurry, sharp).expect("dimensions already validated")
    });
    let report = lbfgs_minimize(&problem, init.coeffs(), config)?;
    let fitted = WarpMatrix::from_coeffs(degree, report.final_params.clone())?;
    Ok((fitted, report))
}

/// Mean distance in pixels between the mappings of two warps over an
/// evenly spaced `grid_n x grid_n` set of interior points.
pub fn grid_mapping_error(
    a: &WarpMatrix,
    b: &WarpMatrix,
    dims: (usize, usize),
    grid_n: usize,
) -> f64 {
    let (m, n) = dims;
    let mut total = 0.0;
    for gi in 0..grid_n {
        // interior grid: skip a 10% margin at each border
        let y = (m - 1) as f64 * (0.1 + 0.8 * gi as f64 / (grid_n - 1) as f64);
        for gj in 0..grid_n {
            let x = (n - 1) as f64 * (0.1 + 0.8 * gj as f64 / (grid_n - 1) as f64);
            let (ay, ax) = a.map_point(y, x, dims);
            let (by, bx) = b.map_point(y, x, dims);
            total += ((ay - by).powi(2) + (ax - bx).powi(2)).sqrt();
        }
    }
    total / (grid_n * grid_n) as f64
}
