//! Grayscale raster type and the resampling / padding primitives built on it.
//!
//! Intensities are `f64`, nominally in `[0, 1]`. Intermediate results
//! (centered images, residuals) may leave that range; values are clipped
//! only when written to disk.

use std::path::Path;

use crate::error::{Error, Result};

/// 2D grayscale image, row-major `f64` intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    /// All-zero image.
    pub fn zeros(width: usize, height: usize) -> Image {
        Image::constant(width, height, 0.0)
    }

    /// Image filled with a single value.
    pub fn constant(width: usize, height: usize, value: f64) -> Image {
        assert!(width >= 1 && height >= 1, "image dimensions must be >= 1");
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Build an image from a row-major buffer. The buffer length must be
    /// exactly `width * height` and every value must be finite.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Image> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage {
                width,
                height,
                reason: "dimensions must be >= 1".into(),
            });
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage {
                width,
                height,
                reason: format!(
                    "buffer length {} != width*height {}",
                    data.len(),
                    width * height
                ),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage {
                width,
                height,
                reason: format!("non-finite value at index {pos}"),
            });
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    /// Build an image by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Image {
        let mut data = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// (height, width) pair, the order used by loop bounds.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: dimensions >= 1
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.height && col < self.width);
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.height && col < self.width);
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    /// Mean intensity over all pixels.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Subtract the mean intensity from every pixel, so the result has
    /// zero mean.
    pub fn center(&self) -> Image {
        let m = self.mean();
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v - m).collect(),
        }
    }

    /// Frobenius norm: sqrt of the sum of squared intensities.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Catmull-Rom bicubic sample at continuous coordinates `(y, x)`.
    /// Coordinates outside `[0, h-1] x [0, w-1]` are clamped to the border.
    /// Needs at least a 4x4 image.
    pub fn sample_bicubic(&self, y: f64, x: f64) -> f64 {
        self.sample_bicubic_with_grad(y, x).0
    }

    /// Bicubic sample plus its spatial derivatives `(value, dv/dy, dv/dx)`.
    /// Derivatives are zero along an axis where the coordinate was clamped.
    pub(crate) fn sample_bicubic_with_grad(&self, y: f64, x: f64) -> (f64, f64, f64) {
        debug_assert!(
            self.height >= 4 && self.width >= 4,
            "bicubic sampling needs a 4x4 image"
        );
        let y_max = (self.height - 1) as f64;
        let x_max = (self.width - 1) as f64;
        let yc = y.clamp(0.0, y_max);
        let xc = x.clamp(0.0, x_max);
        let y_clamped = yc != y;
        let x_clamped = xc != x;

        let iy = yc.floor();
        let ix = xc.floor();
        let ty = yc - iy;
        let tx = xc - ix;
        let (wx, dwx) = catmull_rom_weights(tx);
        let (wy, dwy) = catmull_rom_weights(ty);

        let last_row = self.height - 1;
        let last_col = self.width - 1;
        let base_y = iy as isize;
        let base_x = ix as isize;

        let mut value = 0.0;
        let mut dy = 0.0;
        let mut dx = 0.0;
        for r in 0..4 {
            let row = (base_y + r as isize - 1).clamp(0, last_row as isize) as usize;
            let row_off = row * self.width;
            let mut s = 0.0;
            let mut ds = 0.0;
            for c in 0..4 {
                let col = (base_x + c as isize - 1).clamp(0, last_col as isize) as usize;
                let p = self.data[row_off + col];
                s += wx[c] * p;
                ds += dwx[c] * p;
            }
            value += wy[r] * s;
            dy += dwy[r] * s;
            dx += wy[r] * ds;
        }
        if y_clamped {
            dy = 0.0;
        }
        if x_clamped {
            dx = 0.0;
        }
        (value, dy, dx)
    }

    /// Mirror-pad across each edge without repeating the border pixel
    /// (`[a,b,c]` padded left by 2 becomes `[c,b,a,b,c]`). Each pad amount
    /// must be strictly smaller than the corresponding dimension.
    pub fn reflect_pad(&self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Image> {
        for (pad, dim) in [
            (top, self.height),
            (bottom, self.height),
            (left, self.width),
            (right, self.width),
        ] {
            if pad >= dim {
                return Err(Error::PadExceedsImage { pad, dim });
            }
        }
        Ok(self.reflect_pad_unbounded(top, bottom, left, right))
    }

    /// Mirror-pad with periodic folding, valid for arbitrarily large pads.
    /// Used by the tiling layer, where the pad can exceed the image size.
    pub(crate) fn reflect_pad_unbounded(
        &self,
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    ) -> Image {
        let out_h = self.height + top + bottom;
        let out_w = self.width + left + right;
        let mut out = Image::zeros(out_w, out_h);
        for i in 0..out_h {
            let src_i = mirror_index(i as isize - top as isize, self.height);
            for j in 0..out_w {
                let src_j = mirror_index(j as isize - left as isize, self.width);
                out.data[i * out_w + j] = self.data[src_i * self.width + src_j];
            }
        }
        out
    }

    /// Copy of the `h x w` subrectangle with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::CropOutOfBounds {
                top,
                left,
                h,
                w,
                img_h: self.height,
                img_w: self.width,
            });
        }
        let mut data = Vec::with_capacity(h * w);
        for i in top..top + h {
            data.extend_from_slice(&self.data[i * self.width + left..i * self.width + left + w]);
        }
        Ok(Image {
            width: w,
            height: h,
            data,
        })
    }

    /// Load a grayscale image from a PNG or PGM file. 8- and 16-bit gray
    /// map linearly onto `[0, 1]`; RGB(A) inputs are converted with luma
    /// weights (0.299, 0.587, 0.114).
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let dyn_img = image::open(path).map_err(|source| Error::ImageDecode {
            path: path.to_path_buf(),
            source,
        })?;
        use image::DynamicImage::*;
        let (w, h) = (dyn_img.width() as usize, dyn_img.height() as usize);
        let data: Vec<f64> = match dyn_img {
            ImageLuma8(buf) => buf.into_raw().iter().map(|&v| v as f64 / 255.0).collect(),
            ImageLuma16(buf) => buf.into_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
            ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
            ImageLumaA16(buf) => buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
            ImageRgb8(buf) => buf.pixels().map(|p| luma(&p.0, 255.0)).collect(),
            ImageRgba8(buf) => buf.pixels().map(|p| luma(&p.0[..3], 255.0)).collect(),
            ImageRgb16(buf) => buf.pixels().map(|p| luma16(&p.0)).collect(),
            ImageRgba16(buf) => buf.pixels().map(|p| luma16(&p.0[..3])).collect(),
            other => {
                return Err(Error::UnsupportedFormat {
                    path: path.to_path_buf(),
                    reason: format!("unhandled color type {:?}", other.color()),
                })
            }
        };
        Image::from_vec(w, h, data)
    }

    /// Write as 8-bit grayscale. The format is chosen by extension:
    /// `.png` or `.pgm` (binary P5). Intensities are clipped to `[0, 1]`
    /// and quantized to 256 levels.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer size matches dimensions");
        save_gray(path, image::DynamicImage::ImageLuma8(img))
    }

    /// Write as 16-bit grayscale PNG or PGM.
    pub fn save_16bit(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf: Vec<u16> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
            self.width as u32,
            self.height as u32,
            buf,
        )
        .expect("buffer size matches dimensions");
        save_gray(path, image::DynamicImage::ImageLuma16(img))
    }
}

fn luma(rgb: &[u8], scale: f64) -> f64 {
    (0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64) / scale
}

fn luma16(rgb: &[u16]) -> f64 {
    (0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64) / 65535.0
}

fn save_gray(path: &Path, img: image::DynamicImage) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let format = match ext.as_deref() {
        Some("png") => image::ImageFormat::Png,
        Some("pgm") => image::ImageFormat::Pnm,
        _ => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: "expected .png or .pgm extension".into(),
            })
        }
    };
    img.save_with_format(path, format)
        .map_err(|source| Error::ImageEncode {
            path: path.to_path_buf(),
            source,
        })
}

/// Fold an index into `[0, d)` by mirroring about the endpoints without
/// repeating them (reflect-101 convention).
pub(crate) fn mirror_index(i: isize, d: usize) -> usize {
    debug_assert!(d >= 1);
    if d == 1 {
        return 0;
    }
    let period = 2 * (d as isize - 1);
    let mut k = i % period;
    if k < 0 {
        k += period;
    }
    let k = k as usize;
    if k >= d {
        2 * (d - 1) - k
    } else {
        k
    }
}

/// Catmull-Rom weights and their derivatives with respect to the fractional
/// offset `t` in `[0, 1)`.
#[inline]
fn catmull_rom_weights(t: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    let w = [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ];
    let dw = [
        0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
        0.5 * (9.0 * t2 - 10.0 * t),
        0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
        0.5 * (3.0 * t2 - 2.0 * t),
    ];
    (w, dw)
}

/// Mean squared error between two images of identical dimensions.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            context: "mse",
            expected_h: a.height,
            expected_w: a.width,
            got_h: b.height,
            got_w: b.width,
        });
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB for a unit intensity range.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let e = mse(a, b)?;
    Ok(-10.0 * (e.max(1e-300)).log10())
}
