//! Iterative radix-2 Cooley-Tukey FFT and the 2D real convolution built
//! on it. Real input rows use the packed half-size complex transform, so
//! a full 2D pass stores only `h * (w/2 + 1)` spectrum entries.

use num_complex::Complex64;

/// Precomputed twiddle table for one power-of-two transform length.
pub(crate) struct FftPlan {
    n: usize,
    // exp(-2*pi*i*k/n) for k in 0..n/2
    twiddles: Vec<Complex64>,
}

impl FftPlan {
    pub(crate) fn new(n: usize) -> FftPlan {
        assert!(n.is_power_of_two(), "FFT length must be a power of two");
        let step = -2.0 * std::f64::consts::PI / n as f64;
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, step * k as f64))
            .collect();
        FftPlan { n, twiddles }
    }

    /// In-place transform. The inverse divides by `n`.
    pub(crate) fn process(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.n;
        assert_eq!(data.len(), n);
        if n == 1 {
            return;
        }
        let shift = usize::BITS - n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> shift;
            if i < j {
                data.swap(i, j);
            }
        }
        let mut m = 2;
        while m <= n {
            let t_step = n / m;
            for chunk in data.chunks_exact_mut(m) {
                for k in 0..m / 2 {
                    let mut z = self.twiddles[k * t_step];
                    if inverse {
                        z = z.conj();
                    }
                    let e = chunk[k];
                    let o = z * chunk[k + m / 2];
                    chunk[k] = e + o;
                    chunk[k + m / 2] = e - o;
                }
            }
            m <<= 1;
        }
        if inverse {
            let scale = 1.0 / n as f64;
            for v in data.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Real-to-complex transform of length `n` (power of two, >= 2), computed
/// through one complex FFT of length `n/2`. Produces the `n/2 + 1`
/// non-redundant spectrum bins.
pub(crate) struct RealFftPlan {
    n: usize,
    half: FftPlan,
    // exp(-2*pi*i*k/n) for k in 0..=n/2
    untangle: Vec<Complex64>,
}

impl RealFftPlan {
    pub(crate) fn new(n: usize) -> RealFftPlan {
        assert!(n.is_power_of_two() && n >= 2);
        let step = -2.0 * std::f64::consts::PI / n as f64;
        let untangle = (0..=n / 2)
            .map(|k| Complex64::from_polar(1.0, step * k as f64))
            .collect();
        RealFftPlan {
            n,
            half: FftPlan::new(n / 2),
            untangle,
        }
    }

    pub(crate) fn spectrum_len(&self) -> usize {
        self.n / 2 + 1
    }

    /// Forward transform; `out` receives `n/2 + 1` bins.
    pub(crate) fn forward(&self, x: &[f64], out: &mut [Complex64]) {
        let n = self.n;
        let h = n / 2;
        assert_eq!(x.len(), n);
        assert_eq!(out.len(), h + 1);
        let mut z: Vec<Complex64> = (0..h).map(|k| Complex64::new(x[2 * k], x[2 * k + 1])).collect();
        self.half.process(&mut z, false);
        for k in 0..=h {
            let zk = if k == h { z[0] } else { z[k] };
            let zr = z[(h - k) % h].conj();
            let even = 0.5 * (zk + zr);
            let odd = Complex64::new(0.0, -0.5) * (zk - zr);
            out[k] = even + self.untangle[k] * odd;
        }
    }

    /// Inverse of `forward`; exact round trip including normalization.
    pub(crate) fn inverse(&self, spec: &[Complex64], out: &mut [f64]) {
        let n = self.n;
        let h = n / 2;
        assert_eq!(spec.len(), h + 1);
        assert_eq!(out.len(), n);
        let mut z: Vec<Complex64> = (0..h)
            .map(|k| {
                let xk = spec[k];
                let xr = spec[h - k].conj();
                let even = 0.5 * (xk + xr);
                let odd = self.untangle[k].conj() * (0.5 * (xk - xr));
                even + Complex64::new(0.0, 1.0) * odd
            })
            .collect();
        self.half.process(&mut z, true);
        for k in 0..h {
            out[2 * k] = z[k].re;
            out[2 * k + 1] = z[k].im;
        }
    }
}

fn next_pow2(n: usize) -> usize {
    n.next_power_of_two().max(2)
}

/// Half-spectrum 2D transform of a real array zero-padded to `ph x pw`.
pub(crate) fn spectrum2d(
    data: &[f64],
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
) -> Vec<Complex64> {
    assert!(ph >= h && pw >= w);
    let row_plan = RealFftPlan::new(pw);
    let col_plan = FftPlan::new(ph);
    let sw = row_plan.spectrum_len();
    let mut spec = vec![Complex64::new(0.0, 0.0); ph * sw];

    let mut row_buf = vec![0.0f64; pw];
    let mut row_out = vec![Complex64::new(0.0, 0.0); sw];
    for i in 0..h {
        row_buf[..w].copy_from_slice(&data[i * w..(i + 1) * w]);
        row_buf[w..].fill(0.0);
        row_plan.forward(&row_buf, &mut row_out);
        spec[i * sw..(i + 1) * sw].copy_from_slice(&row_out);
    }
    // remaining rows are all-zero and stay zero in the spectrum buffer

    let mut col_buf = vec![Complex64::new(0.0, 0.0); ph];
    for c in 0..sw {
        for r in 0..ph {
            col_buf[r] = spec[r * sw + c];
        }
        col_plan.process(&mut col_buf, false);
        for r in 0..ph {
            spec[r * sw + c] = col_buf[r];
        }
    }
    spec
}

/// Inverse of [`spectrum2d`], returning the full `ph x pw` real array.
pub(crate) fn inverse2d(spec: &mut [Complex64], ph: usize, pw: usize) -> Vec<f64> {
    let row_plan = RealFftPlan::new(pw);
    let col_plan = FftPlan::new(ph);
    let sw = row_plan.spectrum_len();
    assert_eq!(spec.len(), ph * sw);

    let mut col_buf = vec![Complex64::new(0.0, 0.0); ph];
    for c in 0..sw {
        for r in 0..ph {
            col_buf[r] = spec[r * sw + c];
        }
        col_plan.process(&mut col_buf, true);
        for r in 0..ph {
            spec[r * sw + c] = col_buf[r];
        }
    }

    let mut out = vec![0.0f64; ph * pw];
    let mut row_buf = vec![0.0f64; pw];
    for i in 0..ph {
        row_plan.inverse(&spec[i * sw..(i + 1) * sw], &mut row_buf);
        out[i * pw..(i + 1) * pw].copy_from_slice(&row_buf);
    }
    out
}

/// Padded transform size for a linear convolution of the given extents.
pub(crate) fn conv_pad_dims(ah: usize, aw: usize, bh: usize, bw: usize) -> (usize, usize) {
    (next_pow2(ah + bh - 1), next_pow2(aw + bw - 1))
}

/// Full linear convolution of two real arrays; output is
/// `(ah + bh - 1) x (aw + bw - 1)`.
pub(crate) fn conv2d_full(
    a: &[f64],
    (ah, aw): (usize, usize),
    b: &[f64],
    (bh, bw): (usize, usize),
) -> Vec<f64> {
    let (ph, pw) = conv_pad_dims(ah, aw, bh, bw);
    let sa = spectrum2d(a, ah, aw, ph, pw);
    let sb = spectrum2d(b, bh, bw, ph, pw);
    let mut prod: Vec<Complex64> = sa.iter().zip(&sb).map(|(x, y)| x * y).collect();
    let padded = inverse2d(&mut prod, ph, pw);
    let (oh, ow) = (ah + bh - 1, aw + bw - 1);
    let mut out = vec![0.0f64; oh * ow];
    for i in 0..oh {
        out[i * ow..(i + 1) * ow].copy_from_slice(&padded[i * pw..i * pw + ow]);
    }
    out
}

/// Full linear cross-correlation of `a` with template `k`; output is
/// `(ah + kh - 1) x (aw + kw - 1)` with the zero lag at index `(kh-1, kw-1)`:
/// `out[i][j] = sum_{u,v} k[u][v] * a[i - (kh-1) + u][j - (kw-1) + v]`.
pub(crate) fn xcorr2d_full(
    a: &[f64],
    (ah, aw): (usize, usize),
    k: &[f64],
    (kh, kw): (usize, usize),
) -> Vec<f64> {
    let (ph, pw) = conv_pad_dims(ah, aw, kh, kw);
    let sa = spectrum2d(a, ah, aw, ph, pw);
    let sk = spectrum2d(k, kh, kw, ph, pw);
    let mut prod: Vec<Complex64> = sa.iter().zip(&sk).map(|(x, y)| x * y.conj()).collect();
    let circ = inverse2d(&mut prod, ph, pw);
    let (oh, ow) = (ah + kh - 1, aw + kw - 1);
    let mut out = vec![0.0f64; oh * ow];
    for i in 0..oh {
        let si = (i + ph - (kh - 1)) % ph;
        for j in 0..ow {
            let sj = (j + pw - (kw - 1)) % pw;
            out[i * ow + j] = circ[si * pw + sj];
        }
    }
    out
}
