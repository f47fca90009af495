//! 2D convolution and cross-correlation over [`Image`], in a direct
//! quadruple-loop form and an FFT-based form that agree to within 1e-9.
//!
//! Indexing conventions (true convolution flips the kernel):
//!
//! - valid conv:      `out[i][j] = sum k[u][v] * img[i+p-1-u][j+p-1-v]`
//! - same conv:       `out[i][j] = sum k[u][v] * img~[i+c-u][j+c-v]`, `c = (p-1)/2`
//! - valid correlate: `out[i][j] = sum k[u][v] * img[i+u][j+v]`
//!
//! where `img~` is the zero-padded extension.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fft;
use crate::image::Image;

/// Odd-sized square convolution kernel (the p x p point spread function).
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    size: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Output restricted to positions where the kernel fits entirely
    /// inside the image; each axis shrinks by `p - 1`.
    Valid,
    /// Output of the input size, borders zero-padded.
    Same,
}

impl Kernel2D {
    pub fn from_vec(size: usize, data: Vec<f64>) -> Result<Kernel2D> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::InvalidKernel(format!(
                "kernel size must be odd and >= 1, got {size}"
            )));
        }
        if data.len() != size * size {
            return Err(Error::InvalidKernel(format!(
                "buffer length {} != {size}x{size}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidKernel("non-finite weight".into()));
        }
        Ok(Kernel2D { size, data })
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Kernel2D> {
        let mut data = Vec::with_capacity(size * size);
        for u in 0..size {
            for v in 0..size {
                data.push(f(u, v));
            }
        }
        Kernel2D::from_vec(size, data)
    }

    /// Identity kernel: 1 at the center, 0 elsewhere.
    pub fn delta(size: usize) -> Result<Kernel2D> {
        let c = size / 2;
        Kernel2D::from_fn(size, |u, v| if u == c && v == c { 1.0 } else { 0.0 })
    }

    /// Uniform kernel with total mass 1.
    pub fn boxcar(size: usize) -> Result<Kernel2D> {
        let w = 1.0 / (size * size) as f64;
        Kernel2D::from_fn(size, |_, _| w)
    }

    /// Isotropic Gaussian, normalized to total mass 1.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Kernel2D> {
        if sigma <= 0.0 {
            return Err(Error::InvalidKernel(format!(
                "gaussian sigma must be positive, got {sigma}"
            )));
        }
        let c = (size / 2) as f64;
        let mut k = Kernel2D::from_fn(size, |u, v| {
            let du = u as f64 - c;
            let dv = v as f64 - c;
            (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp()
        })?;
        let sum: f64 = k.data.iter().sum();
        for w in &mut k.data {
            *w /= sum;
        }
        Ok(k)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[u * self.size + v]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Kernel reversed along both axes.
    pub fn flip(&self) -> Kernel2D {
        let mut data = self.data.clone();
        data.reverse();
        Kernel2D {
            size: self.size,
            data,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn abs_sum(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    /// Serialize as plain text: a line with `p`, then `p` rows of `p`
    /// decimal reals at 17 significant digits (lossless round trip).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.size);
        for u in 0..self.size {
            let row: Vec<String> = (0..self.size)
                .map(|v| format!("{:.16e}", self.at(u, v)))
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    /// Parse the [`to_text`](Self::to_text) format. Extra trailing lines are
    /// left for the caller (see the PSF file format).
    pub fn parse_text(lines: &mut std::str::Lines<'_>, path: &Path) -> Result<Kernel2D> {
        let perr = |line: usize, msg: String| Error::ParseFile {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let first = lines
            .next()
            .ok_or_else(|| perr(1, "empty kernel file".into()))?;
        let size: usize = first
            .trim()
            .parse()
            .map_err(|e| perr(1, format!("bad kernel size: {e}")))?;
        let mut data = Vec::with_capacity(size * size);
        for u in 0..size {
            let row = lines
                .next()
                .ok_or_else(|| perr(u + 2, "missing kernel row".into()))?;
            let values: Vec<f64> = row
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| perr(u + 2, format!("bad weight: {e}")))?;
            if values.len() != size {
                return Err(perr(
                    u + 2,
                    format!("expected {size} weights, got {}", values.len()),
                ));
            }
            data.extend_from_slice(&values);
        }
        Kernel2D::from_vec(size, data).map_err(|e| perr(1, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|source| Error::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Kernel2D> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Kernel2D::parse_text(&mut text.lines(), path)
    }
}

fn check_valid_fit(img: &Image, k: &Kernel2D, mode: ConvMode) -> Result<()> {
    if mode == ConvMode::Valid && (k.size > img.height() || k.size > img.width()) {
        return Err(Error::KernelTooLarge {
            kernel: k.size,
            img_h: img.height(),
            img_w: img.width(),
        });
    }
    Ok(())
}

/// Direct O(m n p^2) convolution.
pub fn conv_naive(img: &Image, k: &Kernel2D, mode: ConvMode) -> Result<Image> {
    check_valid_fit(img, k, mode)?;
    let (m, n) = img.dims();
    let p = k.size;
    match mode {
        ConvMode::Valid => {
            let (oh, ow) = (m - p + 1, n - p + 1);
            let mut out = Image::zeros(ow, oh);
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for u in 0..p {
                        for v in 0..p {
                            acc += k.at(u, v) * img.at(i + p - 1 - u, j + p - 1 - v);
                        }
                    }
                    out.set(i, j, acc);
                }
            }
            Ok(out)
        }
        ConvMode::Same => {
            let c = (p / 2) as isize;
            let mut out = Image::zeros(n, m);
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for u in 0..p {
                        for v in 0..p {
                            let y = i as isize + c - u as isize;
                            let x = j as isize + c - v as isize;
                            if y >= 0 && x >= 0 && (y as usize) < m && (x as usize) < n {
                                acc += k.at(u, v) * img.at(y as usize, x as usize);
                            }
                        }
                    }
                    out.set(i, j, acc);
                }
            }
            Ok(out)
        }
    }
}

/// Direct cross-correlation (unflipped kernel). Kernel entries accumulate
/// in descending index order so that `correlate_naive(x, flip(k))` is
/// bit-identical to `conv_naive(x, k)`.
pub fn correlate_naive(img: &Image, k: &Kernel2D, mode: ConvMode) -> Result<Image> {
    check_valid_fit(img, k, mode)?;
    let (m, n) = img.dims();
    let p = k.size;
    match mode {
        ConvMode::Valid => {
            let (oh, ow) = (m - p + 1, n - p + 1);
            let mut out = Image::zeros(ow, oh);
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for u in (0..p).rev() {
                        for v in (0..p).rev() {
                            acc += k.at(u, v) * img.at(i + u, j + v);
                        }
                    }
                    out.set(i, j, acc);
                }
            }
            Ok(out)
        }
        ConvMode::Same => {
            let c = (p / 2) as isize;
            let mut out = Image::zeros(n, m);
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for u in (0..p).rev() {
                        for v in (0..p).rev() {
                            let y = i as isize + u as isize - c;
                            let x = j as isize + v as isize - c;
                            if y >= 0 && x >= 0 && (y as usize) < m && (x as usize) < n {
                                acc += k.at(u, v) * img.at(y as usize, x as usize);
                            }
                        }
                    }
                    out.set(i, j, acc);
                }
            }
            Ok(out)
        }
    }
}

/// FFT-based convolution; numerically equal to [`conv_naive`] within 1e-9
/// per pixel for unit-range inputs, and asymptotically cheaper for large
/// kernels.
pub fn conv_fft(img: &Image, k: &Kernel2D, mode: ConvMode) -> Result<Image> {
    check_valid_fit(img, k, mode)?;
    let (m, n) = img.dims();
    let p = k.size;
    let full = fft::conv2d_full(img.as_slice(), (m, n), k.as_slice(), (p, p));
    let full_w = n + p - 1;
    Ok(extract(&full, full_w, m, n, p, mode))
}

/// FFT-based cross-correlation, computed through a conjugated kernel
/// spectrum (not by delegating to [`conv_fft`] with a flipped kernel).
pub fn correlate_fft(img: &Image, k: &Kernel2D, mode: ConvMode) -> Result<Image> {
    check_valid_fit(img, k, mode)?;
    let (m, n) = img.dims();
    let p = k.size;
    let full = fft::xcorr2d_full(img.as_slice(), (m, n), k.as_slice(), (p, p));
    let full_w = n + p - 1;
    Ok(extract(&full, full_w, m, n, p, mode))
}

fn extract(full: &[f64], full_w: usize, m: usize, n: usize, p: usize, mode: ConvMode) -> Image {
    let (off, oh, ow) = match mode {
        ConvMode::Valid => (p - 1, m - p + 1, n - p + 1),
        ConvMode::Same => (p / 2, m, n),
    };
    Image::from_fn(ow, oh, |i, j| full[(i + off) * full_w + (j + off)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(w: usize, h: usize, seed: u64) -> Image {
        let mut s = seed;
        Image::from_fn(w, h, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64).fract()
        })
    }

    fn test_kernel(p: usize, seed: u64) -> Kernel2D {
        let mut s = seed;
        Kernel2D::from_fn(p, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64).fract() - 0.5
        })
        .unwrap()
    }

    #[test]
    fn delta_kernel_same_mode_is_identity() {
        let img = test_image(9, 7, 5);
        for p in [1, 3, 5] {
            let d = Kernel2D::delta(p).unwrap();
            let out = conv_naive(&img, &d, ConvMode::Same).unwrap();
            assert_eq!(out, img, "p={p}");
            let out_fft = conv_fft(&img, &d, ConvMode::Same).unwrap();
            let max_dev = out_fft
                .as_slice()
                .iter()
                .zip(img.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_dev < 1e-9, "p={p} dev {max_dev}");
        }
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let img = Image::constant(8, 8, 0.25);
        let ones = Kernel2D::from_fn(3, |_, _| 1.0).unwrap();
        let out = conv_naive(&img, &ones, ConvMode::Valid).unwrap();
        assert_eq!(out.dims(), (6, 6));
        for &v in out.as_slice() {
            assert!((v - 9.0 * 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn naive_matches_quadruple_loop_reference() {
        // Independent reference written directly from the valid-mode
        // indexing definition.
        let img = test_image(16, 16, 42);
        let k = test_kernel(5, 43);
        let out = conv_naive(&img, &k, ConvMode::Valid).unwrap();
        let p = 5;
        for i in 0..out.height() {
            for j in 0..out.width() {
                let mut want = 0.0;
                for u in 0..p {
                    for v in 0..p {
                        want += k.at(u, v) * img.at(i + p - 1 - u, j + p - 1 - v);
                    }
                }
                assert!((out.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fft_matches_naive_both_modes() {
        for &(w, h, p) in &[(16usize, 12, 3), (9, 13, 5), (21, 8, 7), (8, 8, 9)] {
            let img = test_image(w, h, w as u64 * 31 + h as u64);
            let k = test_kernel(p, p as u64);
            for mode in [ConvMode::Same, ConvMode::Valid] {
                if mode == ConvMode::Valid && (p > w || p > h) {
                    continue;
                }
                let a = conv_naive(&img, &k, mode).unwrap();
                let b = conv_fft(&img, &k, mode).unwrap();
                let max_dev = a
                    .as_slice()
                    .iter()
                    .zip(b.as_slice())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(max_dev < 1e-9, "w={w} h={h} p={p} {mode:?}: {max_dev}");
            }
        }
    }

    #[test]
    fn correlate_equals_conv_with_flipped_kernel_exactly() {
        let img = test_image(11, 9, 7);
        let k = test_kernel(3, 8);
        for mode in [ConvMode::Valid, ConvMode::Same] {
            let a = conv_naive(&img, &k, mode).unwrap();
            let b = correlate_naive(&img, &k.flip(), mode).unwrap();
            assert_eq!(a, b, "{mode:?}");
        }
    }

    #[test]
    fn correlate_fft_matches_loop_oracle() {
        let img = test_image(14, 10, 17);
        let k = test_kernel(5, 18);
        for mode in [ConvMode::Valid, ConvMode::Same] {
            let a = correlate_naive(&img, &k, mode).unwrap();
            let b = correlate_fft(&img, &k, mode).unwrap();
            let max_dev = a
                .as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(max_dev < 1e-9, "{mode:?}: {max_dev}");
        }
    }

    #[test]
    fn symmetric_kernel_correlation_equals_convolution() {
        let img = test_image(12, 12, 23);
        let k = Kernel2D::gaussian(5, 1.2).unwrap();
        let a = conv_fft(&img, &k, ConvMode::Same).unwrap();
        let b = correlate_fft(&img, &k, ConvMode::Same).unwrap();
        let max_dev = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-9);
    }

    #[test]
    fn valid_mode_rejects_oversized_kernel() {
        let img = test_image(4, 4, 1);
        let k = Kernel2D::delta(5).unwrap();
        assert!(matches!(
            conv_naive(&img, &k, ConvMode::Valid),
            Err(Error::KernelTooLarge { .. })
        ));
        assert!(conv_fft(&img, &k, ConvMode::Same).is_ok());
    }

    #[test]
    fn kernel_rejects_even_or_bad_sizes() {
        assert!(Kernel2D::from_vec(2, vec![0.0; 4]).is_err());
        assert!(Kernel2D::from_vec(0, vec![]).is_err());
        assert!(Kernel2D::from_vec(3, vec![0.0; 8]).is_err());
        assert!(Kernel2D::from_vec(1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn kernel_text_round_trip_is_lossless() {
        let k = test_kernel(5, 99);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.txt");
        k.save(&path).unwrap();
        let back = Kernel2D::load(&path).unwrap();
        assert_eq!(k, back);
    }
}
