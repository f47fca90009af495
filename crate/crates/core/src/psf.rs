//! Point-spread-function estimation from an aligned sharp/blurry pair:
//! least squares on the valid convolution region with a smoothed L1
//! penalty on the kernel, plus an additive brightness offset, solved with
//! L-BFGS. Optionally alternates with warp refinement.

use std::fmt::Write as _;
use std::path::Path;

use crate::conv::{conv_fft, ConvMode, Kernel2D};
use crate::error::{Error, Result};
use crate::fft;
use crate::image::Image;
use crate::optim::{lbfgs_minimize, LbfgsConfig, OptimProblem, OptimReport};
use crate::warp::{warp_patch, warp_vjp, WarpMatrix};

/// Smoothing half-width of the L1 penalty: `sum sqrt(P^2 + EPS^2)`.
/// Negligible bias, but keeps the objective differentiable for L-BFGS.
const L1_SMOOTHING: f64 = 1e-8;

/// Convolution kernel plus brightness offset and the regularization
/// weight used when it was estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfModel {
    pub kernel: Kernel2D,
    pub tau: f64,
    pub lambda: f64,
}

impl PsfModel {
    pub fn new(kernel: Kernel2D, tau: f64, lambda: f64) -> Result<PsfModel> {
        if !tau.is_finite() {
            return Err(Error::InvalidParameter("tau must be finite".into()));
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        Ok(PsfModel {
            kernel,
            tau,
            lambda,
        })
    }

    pub fn size(&self) -> usize {
        self.kernel.size()
    }

    /// Kernel text format followed by `tau <value>` and `lambda <value>`.
    pub fn to_text(&self) -> String {
        let mut s = self.kernel.to_text();
        let _ = writeln!(s, "tau {:.16e}", self.tau);
        let _ = writeln!(s, "lambda {:.16e}", self.lambda);
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|source| Error::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PsfModel> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = text.lines();
        let kernel = Kernel2D::parse_text(&mut lines, path)?;
        let base = kernel.size() + 1;
        let mut tau = None;
        let mut lambda = None;
        for (off, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("");
            let value: f64 = parts
                .next()
                .ok_or_else(|| Error::ParseFile {
                    path: path.to_path_buf(),
                    line: base + off + 1,
                    msg: format!("missing value for `{key}`"),
                })?
                .parse()
                .map_err(|e| Error::ParseFile {
                    path: path.to_path_buf(),
                    line: base + off + 1,
                    msg: format!("bad value: {e}"),
                })?;
            match key {
                "tau" => tau = Some(value),
                "lambda" => lambda = Some(value),
                other => {
                    return Err(Error::ParseFile {
                        path: path.to_path_buf(),
                        line: base + off + 1,
                        msg: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        let make_err = |what: &str| Error::ParseFile {
            path: path.to_path_buf(),
            line: base,
            msg: format!("missing `{what}` line"),
        };
        PsfModel::new(
            kernel,
            tau.ok_or_else(|| make_err("tau"))?,
            lambda.ok_or_else(|| make_err("lambda"))?,
        )
    }
}

fn expected_valid_dims(sharp: &Image, p: usize) -> (usize, usize) {
    (sharp.height() - p + 1, sharp.width() - p + 1)
}

/// Loss of the forward model `conv_valid(sharp, P) + tau` against the
/// pre-cropped warped blurry target, with the analytic gradient over the
/// `p^2 + 1` parameters (kernel row-major, then tau).
///
/// `blurry_warped` must already be cropped to the valid-convolution
/// footprint of `sharp`.
pub fn psf_loss(
    model: &PsfModel,
    sharp: &Image,
    blurry_warped: &Image,
) -> Result<(f64, Vec<f64>)> {
    let p = model.kernel.size();
    if p > sharp.height() || p > sharp.width() {
        return Err(Error::KernelTooLarge {
            kernel: p,
            img_h: sharp.height(),
            img_w: sharp.width(),
        });
    }
    let (vh, vw) = expected_valid_dims(sharp, p);
    if blurry_warped.dims() != (vh, vw) {
        return Err(Error::DimensionMismatch {
            context: "psf_loss valid-region target",
            expected_h: vh,
            expected_w: vw,
            got_h: blurry_warped.height(),
            got_w: blurry_warped.width(),
        });
    }

    let pred = conv_fft(sharp, &model.kernel, ConvMode::Valid)?;
    let count = (vh * vw) as f64;
    let mut residual = Image::zeros(vw, vh);
    let mut data_loss = 0.0;
    for i in 0..vh {
        for j in 0..vw {
            let r = pred.at(i, j) + model.tau - blurry_warped.at(i, j);
            residual.set(i, j, r);
            data_loss += r * r;
        }
    }
    data_loss /= count;

    let p2 = (p * p) as f64;
    let mut reg_loss = 0.0;
    let mut grad = vec![0.0; p * p + 1];
    for (idx, &w) in model.kernel.as_slice().iter().enumerate() {
        let smooth = (w * w + L1_SMOOTHING * L1_SMOOTHING).sqrt();
        reg_loss += smooth;
        grad[idx] = model.lambda / p2 * (w / smooth);
    }
    reg_loss *= model.lambda / p2;

    // d(data)/dP via valid cross-correlation of the sharp image with the
    // residual, index-flipped (adjoint of the valid convolution)
    let xc = fft::xcorr2d_full(
        sharp.as_slice(),
        sharp.dims(),
        residual.as_slice(),
        residual.dims(),
    );
    let xc_w = sharp.width() + vw - 1;
    let (off_y, off_x) = (vh - 1, vw - 1);
    for u in 0..p {
        for v in 0..p {
            let a = off_y + (p - 1 - u);
            let b = off_x + (p - 1 - v);
            grad[u * p + v] += 2.0 / count * xc[a * xc_w + b];
        }
    }
    grad[p * p] = 2.0 / count * residual.as_slice().iter().sum::<f64>();

    Ok((data_loss + reg_loss, grad))
}

/// Configuration for [`fit_psf`].
#[derive(Debug, Clone)]
pub struct PsfFitConfig {
    pub lambda: f64,
    /// Alternate warp and PSF refinement after the initial solve.
    pub refine_warp: bool,
    /// Alternation rounds used when `refine_warp` is set.
    pub refine_rounds: usize,
    pub solver: LbfgsConfig,
}

impl Default for PsfFitConfig {
    fn default() -> Self {
        PsfFitConfig {
            lambda: 1e-3,
            refine_warp: false,
            refine_rounds: 2,
            solver: LbfgsConfig::default(),
        }
    }
}

/// Estimate the PSF and brightness offset from a sharp/blurry pair given
/// an aligning warp.
///
/// Stage 1 warps the blurry image, crops it to the valid-convolution
/// footprint, and solves for `(P, tau)` from a box-kernel start. When
/// `refine_warp` is set, the warp and `(P, tau)` are then re-fit
/// alternately for `refine_rounds` rounds; the final loss never exceeds
/// the stage-1 loss. The returned report covers the last `(P, tau)` solve.
pub fn fit_psf(
    sharp: &Image,
    blurry: &Image,
    warp: &WarpMatrix,
    p: usize,
    config: &PsfFitConfig,
) -> Result<(PsfModel, WarpMatrix, OptimReport)> {
    if p % 2 == 0 || p == 0 {
        return Err(Error::InvalidKernel(format!(
            "psf size must be odd and >= 1, got {p}"
        )));
    }
    if p > sharp.height().min(sharp.width()) {
        return Err(Error::KernelTooLarge {
            kernel: p,
            img_h: sharp.height(),
            img_w: sharp.width(),
        });
    }
    if sharp.dims() != blurry.dims() {
        return Err(Error::DimensionMismatch {
            context: "fit_psf image pair",
            expected_h: sharp.height(),
            expected_w: sharp.width(),
            got_h: blurry.height(),
            got_w: blurry.width(),
        });
    }
    if !(config.lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lambda must be >= 0, got {}",
            config.lambda
        )));
    }

    let (m, n) = sharp.dims();
    let (vh, vw) = expected_valid_dims(sharp, p);
    let c = p / 2;
    let mut w_cur = warp.clone();
    let mut target = valid_target(blurry, &w_cur, c, vh, vw, (m, n));

    // box-kernel start; tau matches the mean brightness difference
    let kernel0 = Kernel2D::boxcar(p)?;
    let pred0 = conv_fft(sharp, &kernel0, ConvMode::Valid)?;
    let tau0 = target.mean() - pred0.mean();
    let mut params: Vec<f64> = kernel0.as_slice().to_vec();
    params.push(tau0);

    let solve_psf = |params: &[f64], target: &Image| -> Result<OptimReport> {
        let problem = OptimProblem::new(p * p + 1, |x: &[f64]| {
            let kernel = Kernel2D::from_vec(p, x[..p * p].to_vec()).expect("finite params");
            let model = PsfModel {
                kernel,
                tau: x[p * p],
                lambda: config.lambda,
            };
            psf_loss(&model, sharp, target).expect("dimensions already validated")
        });
        lbfgs_minimize(&problem, params, &config.solver)
    };

    let mut report = solve_psf(&params, &target)?;
    params = report.final_params.clone();

    if config.refine_warp {
        for _ in 0..config.refine_rounds {
            let kernel = Kernel2D::from_vec(p, params[..p * p].to_vec())?;
            let tau = params[p * p];
            let pred = conv_fft(sharp, &kernel, ConvMode::Valid)?;
            let reg_loss = {
                let p2 = (p * p) as f64;
                config.lambda / p2
                    * kernel
                        .as_slice()
                        .iter()
                        .map(|w| (w * w + L1_SMOOTHING * L1_SMOOTHING).sqrt())
                        .sum::<f64>()
            };

            // re-fit the warp holding (P, tau): residual over the valid window
            let dim = 2 * w_cur.k();
            let degree = w_cur.degree();
            let count = (vh * vw) as f64;
            let warp_problem = OptimProblem::new(dim, |x: &[f64]| {
                let w = WarpMatrix::from_coeffs(degree, x.to_vec()).expect("finite params");
                let warped = warp_patch(blurry, &w, (c, c, vh, vw), (m, n));
                let mut weights = Image::zeros(vw, vh);
                let mut loss = 0.0;
                for i in 0..vh {
                    for j in 0..vw {
                        let r = pred.at(i, j) + tau - warped.at(i, j);
                        loss += r * r;
                        weights.set(i, j, -2.0 * r / count);
                    }
                }
                let grad = warp_vjp(blurry, &w, (c, c, vh, vw), (m, n), &weights);
                (loss / count + reg_loss, grad)
            });
            let w_report = lbfgs_minimize(&warp_problem, w_cur.coeffs(), &config.solver)?;
            w_cur = WarpMatrix::from_coeffs(degree, w_report.final_params)?;
            target = valid_target(blurry, &w_cur, c, vh, vw, (m, n));

            report = solve_psf(&params, &target)?;
            params = report.final_params.clone();
        }
    }

    let kernel = Kernel2D::from_vec(p, params[..p * p].to_vec())?;
    let model = PsfModel::new(kernel, params[p * p], config.lambda)?;
    Ok((model, w_cur, report))
}

/// Warp the blurry image and crop to the valid-convolution footprint.
fn valid_target(
    blurry: &Image,
    w: &WarpMatrix,
    c: usize,
    vh: usize,
    vw: usize,
    frame: (usize, usize),
) -> Image {
    warp_patch(blurry, w, (c, c, vh, vw), frame)
}

/// Shape statistics of an estimated kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelShapeReport {
    /// Max distance from the mass center among the pixels holding 99% of
    /// the absolute mass.
    pub support_radius: f64,
    /// Absolute-mass centroid, `(row, col)`.
    pub mass_center: (f64, f64),
    /// Fraction of absolute mass carried by negative weights.
    pub negativity_fraction: f64,
}

/// Support, centroid, and negativity diagnostics for a kernel.
pub fn psf_octagon_report(kernel: &Kernel2D) -> Result<KernelShapeReport> {
    let p = kernel.size();
    let total = kernel.abs_sum();
    if total == 0.0 {
        return Err(Error::DegenerateKernel);
    }
    let mut cy = 0.0;
    let mut cx = 0.0;
    let mut neg = 0.0;
    for u in 0..p {
        for v in 0..p {
            let w = kernel.at(u, v);
            cy += w.abs() * u as f64;
            cx += w.abs() * v as f64;
            if w < 0.0 {
                neg += -w;
            }
        }
    }
    cy /= total;
    cx /= total;

    let mut by_dist: Vec<(f64, f64)> = Vec::with_capacity(p * p);
    for u in 0..p {
        for v in 0..p {
            let w = kernel.at(u, v).abs();
            if w > 0.0 {
                let d = ((u as f64 - cy).powi(2) + (v as f64 - cx).powi(2)).sqrt();
                by_dist.push((d, w));
            }
        }
    }
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc = 0.0;
    let mut support_radius = 0.0;
    for (d, w) in by_dist {
        acc += w;
        support_radius = d;
        if acc >= 0.99 * total {
            break;
        }
    }

    Ok(KernelShapeReport {
        support_radius,
        mass_center: (cy, cx),
        negativity_fraction: neg / total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn broadband_image(w: usize, h: usize, seed: u64) -> Image {
        // white noise lightly smoothed, values around [0.2, 0.8]
        let mut s = seed;
        let noise = Image::from_fn(w, h, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64).fract()
        });
        let g = Kernel2D::gaussian(5, 1.0).unwrap();
        let smooth = conv_fft(&noise, &g, ConvMode::Same).unwrap();
        Image::from_fn(w, h, |i, j| 0.2 + 0.6 * smooth.at(i, j).clamp(0.0, 1.0))
    }

    #[test]
    fn exact_forward_model_leaves_only_the_penalty() {
        let sharp = broadband_image(40, 32, 7);
        let kernel = Kernel2D::gaussian(7, 1.5).unwrap();
        let tau = 0.04;
        let lambda = 1e-3;
        let pred = conv_fft(&sharp, &kernel, ConvMode::Valid).unwrap();
        let target = Image::from_fn(pred.width(), pred.height(), |i, j| pred.at(i, j) + tau);
        let model = PsfModel::new(kernel.clone(), tau, lambda).unwrap();
        let (loss, _) = psf_loss(&model, &sharp, &target).unwrap();
        let want = lambda / 49.0 * kernel.abs_sum();
        assert!((loss - want).abs() < 1e-10, "loss {loss} vs penalty {want}");
    }

    #[test]
    fn constant_predictor_loss_is_target_variance() {
        let target_src = broadband_image(30, 24, 9);
        let p = 5;
        let sharp = broadband_image(30 + p - 1, 24 + p - 1, 10);
        let model = PsfModel::new(
            Kernel2D::from_vec(p, vec![0.0; p * p]).unwrap(),
            target_src.mean(),
            0.0,
        )
        .unwrap();
        let (loss, _) = psf_loss(&model, &sharp, &target_src).unwrap();
        let mean = target_src.mean();
        let variance = target_src
            .as_slice()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / target_src.len() as f64;
        assert!((loss - variance).abs() < 1e-12);
    }

    #[test]
    fn mismatched_target_names_expected_size() {
        let sharp = Image::zeros(20, 20);
        let model = PsfModel::new(Kernel2D::delta(5).unwrap(), 0.0, 0.0).unwrap();
        let bad = Image::zeros(20, 20);
        match psf_loss(&model, &sharp, &bad) {
            Err(Error::DimensionMismatch {
                expected_h: 16,
                expected_w: 16,
                ..
            }) => {}
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn octagon_report_delta() {
        let r = psf_octagon_report(&Kernel2D::delta(9).unwrap()).unwrap();
        assert_eq!(r.support_radius, 0.0);
        assert_eq!(r.negativity_fraction, 0.0);
        assert_eq!(r.mass_center, (4.0, 4.0));
    }

    #[test]
    fn octagon_report_gaussian_centroid() {
        let r = psf_octagon_report(&Kernel2D::gaussian(21, 2.0).unwrap()).unwrap();
        assert!((r.mass_center.0 - 10.0).abs() < 0.01);
        assert!((r.mass_center.1 - 10.0).abs() < 0.01);
        assert!(r.support_radius > 2.0);
    }

    #[test]
    fn octagon_report_negativity() {
        let mut k = Kernel2D::from_vec(3, vec![0.0; 9]).unwrap();
        k.as_mut_slice()[4] = 0.9;
        k.as_mut_slice()[0] = -0.1;
        let r = psf_octagon_report(&k).unwrap();
        assert!((r.negativity_fraction - 0.1).abs() < 1e-12);
    }

    #[test]
    fn octagon_report_rejects_zero_kernel() {
        let k = Kernel2D::from_vec(3, vec![0.0; 9]).unwrap();
        assert!(matches!(
            psf_octagon_report(&k),
            Err(Error::DegenerateKernel)
        ));
    }

    #[test]
    fn psf_model_text_round_trip() {
        let model = PsfModel::new(Kernel2D::gaussian(5, 0.9).unwrap(), -0.0123, 4.5e-4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("psf.txt");
        model.save(&path).unwrap();
        assert_eq!(PsfModel::load(&path).unwrap(), model);
    }

    #[test]
    fn psf_model_rejects_negative_lambda() {
        assert!(PsfModel::new(Kernel2D::delta(3).unwrap(), 0.0, -1.0).is_err());
    }
}
