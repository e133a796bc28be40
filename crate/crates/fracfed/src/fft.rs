//! Unitary 2-D FFT helpers on row-major `H x W` planes.
//!
//! Both directions carry a `1/sqrt(H*W)` factor so spatial and spectral
//! energies agree (Parseval) without extra bookkeeping.

use num_complex::Complex64;
use rustfft::FftPlanner;

fn transform_2d(plane: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let row_fft = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    for row in plane.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = plane[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            plane[y * w + x] = col[y];
        }
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in plane.iter_mut() {
        *v *= scale;
    }
}

/// Unitary forward transform of a real plane.
pub fn fft2(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut spec: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_2d(&mut spec, h, w, false);
    spec
}

/// Unitary inverse transform; returns the real part.
pub fn ifft2_real(spec: &[Complex64], h: usize, w: usize) -> Vec<f64> {
    let mut out = spec.to_vec();
    transform_2d(&mut out, h, w, true);
    out.into_iter().map(|c| c.re).collect()
}

/// Unitary inverse transform keeping the imaginary part.
pub fn ifft2(spec: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = spec.to_vec();
    transform_2d(&mut out, h, w, true);
    out
}

/// Radial frequency of bin `(u, v)` as a fraction of Nyquist (DC = 0,
/// axis Nyquist = 1, corners reach sqrt(2)).
pub fn radial_fraction(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let fu = u.min(h - u) as f64 / h as f64;
    let fv = v.min(w - v) as f64 / w as f64;
    (fu * fu + fv * fv).sqrt() / 0.5
}
