//! Fractal trigger synthesis and frequency-domain embedding.
//!
//! The base template is spectrally synthesized: a Hermitian-symmetric
//! spectrum filled with seeded unit-variance complex Gaussians scaled by
//! `1/f^(exponent/2)` gives a real field whose radially averaged power
//! spectrum follows the requested power law. Multi-scale composition sums
//! Gaussian-blurred copies, and embedding mixes the perturbation into the
//! sample spectrum with an SCC-adaptive, windowed weight.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2_real, radial_fraction};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

/// Radial bands in the spectral report.
pub const SPECTRAL_BANDS: usize = 8;
/// Energy fraction above which a band counts as dominant.
pub const DOMINANT_BAND_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractalTemplateSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Target power-law slope of the radially averaged spectrum.
    pub spectral_exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiScaleSpec {
    pub sigmas: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl MultiScaleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.sigmas.len() != self.alphas.len() {
            return Err(Error::Config(format!(
                "multi-scale spec needs matching non-empty sigmas/alphas, got {}/{}",
                self.sigmas.len(),
                self.alphas.len()
            )));
        }
        if self.sigmas.iter().any(|&s| s < 0.0) {
            return Err(Error::Config("negative blur scale".into()));
        }
        Ok(())
    }
}

/// Raised-cosine low-pass window over normalized radial frequency.
/// The radius is normalized so the spectrum corner sits at 1; the window
/// is 1 up to `cutoff`, rolls off over `rolloff`, then 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyWindow {
    pub cutoff: f64,
    pub rolloff: f64,
}

impl FrequencyWindow {
    /// Pass-through window (identically 1).
    pub fn open() -> Self {
        FrequencyWindow { cutoff: 1.0, rolloff: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff <= 1.0) || self.rolloff < 0.0 {
            return Err(Error::Config(format!(
                "window cutoff must be in (0, 1] and rolloff >= 0, got c={} r={}",
                self.cutoff, self.rolloff
            )));
        }
        Ok(())
    }

    /// Window value at normalized radius `rho` in `[0, 1]`.
    pub fn value(&self, rho: f64) -> f64 {
        if rho <= self.cutoff {
            1.0
        } else if self.rolloff > 0.0 && rho <= self.cutoff + self.rolloff {
            0.5 * (1.0 + (std::f64::consts::PI * (rho - self.cutoff) / self.rolloff).cos())
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    /// Client-level base strength.
    pub eps_base: f64,
    /// Sublinear SCC amplification exponent, strictly inside (0, 1).
    pub compat_exponent: f64,
    pub window: FrequencyWindow,
    /// Structural compatibility of the embedding target.
    pub scc: f64,
}

impl EmbeddingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.compat_exponent > 0.0 && self.compat_exponent < 1.0) {
            return Err(Error::Config(format!(
                "compat_exponent must lie in (0, 1), got {}",
                self.compat_exponent
            )));
        }
        if self.eps_base < 0.0 || self.scc <= 0.0 {
            return Err(Error::Config("eps_base must be >= 0 and scc > 0".into()));
        }
        self.window.validate()
    }

    /// Effective spatial strength `eps_base * scc^gamma`.
    pub fn effective_strength(&self) -> f64 {
        self.eps_base * self.scc.powf(self.compat_exponent)
    }
}

/// Square constant-value corner patch, energy-matched to the fractal
/// perturbation so the SCC ratio is well posed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticPatchSpec {
    pub side: usize,
    pub offset: (usize, usize),
}

impl Default for StaticPatchSpec {
    fn default() -> Self {
        StaticPatchSpec { side: 3, offset: (0, 0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub template: FractalTemplateSpec,
    pub scales: MultiScaleSpec,
    pub embedding: EmbeddingSpec,
    #[serde(default)]
    pub static_patch: StaticPatchSpec,
}

/// A trigger spec with its perturbations materialized.
#[derive(Debug, Clone)]
pub struct BuiltTrigger {
    pub embedding: EmbeddingSpec,
    /// Composed multi-scale fractal perturbation, unit L2.
    pub fractal: Tensor,
    /// Energy-matched static counterpart.
    pub static_counterpart: Tensor,
}

impl TriggerSpec {
    pub fn build(&self) -> Result<BuiltTrigger> {
        self.embedding.validate()?;
        let template = generate_template(&self.template)?;
        let fractal = compose_multiscale(&template, &self.scales)?;
        let static_counterpart = static_patch(
            &self.static_patch,
            self.template.channels,
            self.template.height,
            self.template.width,
            fractal.norm(),
        )?;
        Ok(BuiltTrigger { embedding: self.embedding.clone(), fractal, static_counterpart })
    }
}

impl BuiltTrigger {
    /// Frequency-domain embedding, clamped to the valid input range.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = embed_perturbation(x, &self.fractal, &self.embedding)?;
        out.clamp_in_place(0.0, 1.0);
        Ok(out)
    }

    /// Embedding without the final clamp (analysis only).
    pub fn embed_unclamped(&self, x: &Tensor) -> Result<Tensor> {
        embed_perturbation(x, &self.fractal, &self.embedding)
    }

    /// Embedding with the base strength overridden for one call.
    pub fn embed_with_strength(&self, x: &Tensor, eps_base: f64) -> Result<Tensor> {
        let spec = EmbeddingSpec { eps_base, ..self.embedding.clone() };
        let mut out = embed_perturbation(x, &self.fractal, &spec)?;
        out.clamp_in_place(0.0, 1.0);
        Ok(out)
    }

    /// Adds the energy-matched static patch at strength `eps`, clamped.
    pub fn stamp_static(&self, x: &Tensor, eps: f64) -> Result<Tensor> {
        let mut out = x.add(&self.static_counterpart.scaled(eps))?;
        out.clamp_in_place(0.0, 1.0);
        Ok(out)
    }
}

/// Spectrally synthesized self-similar base template: zero-mean, unit L2,
/// deterministic in the seed.
pub fn generate_template(spec: &FractalTemplateSpec) -> Result<Tensor> {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    if h < 4 || w < 4 || c == 0 {
        return Err(Error::Config(format!("degenerate template size {h}x{w}x{c}")));
    }
    if spec.spectral_exponent <= 0.0 {
        return Err(Error::Config("spectral_exponent must be positive".into()));
    }
    let mut rng = rng::stream(spec.seed, &[tag::TEMPLATE, h as u64, w as u64]);
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let spectrum = power_law_spectrum(h, w, spec.spectral_exponent, &mut rng);
        data.extend(ifft2_real(&spectrum, h, w));
    }
    let mut t = Tensor::new(vec![c, h, w], data)?;
    normalize_zero_mean_unit_l2(&mut t)?;
    Ok(t)
}

fn power_law_spectrum(h: usize, w: usize, exponent: f64, rng: &mut impl Rng) -> Vec<Complex64> {
    let mut spec = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let idx = u * w + v;
            let mu = (h - u) % h;
            let mv = (w - v) % w;
            let mirror = mu * w + mv;
            if idx > mirror {
                continue; // filled from the mirror bin
            }
            if u == 0 && v == 0 {
                continue; // zero DC keeps the field zero-mean
            }
            let fu = u.min(h - u) as f64;
            let fv = v.min(w - v) as f64;
            let amp = (fu * fu + fv * fv).sqrt().powf(-exponent / 2.0);
            if idx == mirror {
                let g: f64 = StandardNormal.sample(rng);
                spec[idx] = Complex64::new(amp * g, 0.0);
            } else {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                let z = Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2;
                spec[idx] = amp * z;
                spec[mirror] = amp * z.conj();
            }
        }
    }
    spec
}

fn normalize_zero_mean_unit_l2(t: &mut Tensor) -> Result<()> {
    let mean = t.mean();
    for v in t.data_mut() {
        *v -= mean;
    }
    let norm = t.norm();
    if norm < 1e-12 {
        return Err(Error::DegenerateTrigger("zero-energy perturbation after normalization".into()));
    }
    for v in t.data_mut() {
        *v /= norm;
    }
    Ok(())
}

/// Weighted sum of Gaussian-blurred template copies (periodic boundary),
/// re-normalized to zero mean and unit L2.
pub fn compose_multiscale(template: &Tensor, scales: &MultiScaleSpec) -> Result<Tensor> {
    let mut acc = compose_multiscale_raw(template, scales)?;
    normalize_zero_mean_unit_l2(&mut acc)
        .map_err(|_| Error::DegenerateTrigger("all-zero multi-scale composition".into()))?;
    Ok(acc)
}

/// The weighted blur sum before re-normalization (linear in the template).
pub fn compose_multiscale_raw(template: &Tensor, scales: &MultiScaleSpec) -> Result<Tensor> {
    scales.validate()?;
    template.check_finite("compose_multiscale input")?;
    let shape = template.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch { expected: vec![0, 0, 0], got: shape });
    }
    let mut acc = Tensor::zeros(shape);
    for (&sigma, &alpha) in scales.sigmas.iter().zip(&scales.alphas) {
        let blurred = gaussian_blur(template, sigma);
        acc.axpy_tensor(alpha, &blurred);
    }
    Ok(acc)
}

impl Tensor {
    fn axpy_tensor(&mut self, c: f64, other: &Tensor) {
        for (a, b) in self.data_mut().iter_mut().zip(other.data()) {
            *a += c * b;
        }
    }
}

/// Separable Gaussian blur with periodic boundary; `sigma == 0` is the
/// identity. Kernel truncated at `ceil(3 sigma)` and renormalized.
pub fn gaussian_blur(t: &Tensor, sigma: f64) -> Tensor {
    if sigma == 0.0 {
        return t.clone();
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let kernel = gaussian_kernel(sigma);
    let r = kernel.len() / 2;
    let mut out = t.clone();
    let src = t.data();
    let dst = out.data_mut();
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        // horizontal pass
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = (x + w + k).wrapping_sub(r) % w;
                    acc += kv * plane[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        // vertical pass
        let out_plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = (y + h + k).wrapping_sub(r) % h;
                    acc += kv * tmp[sy * w + x];
                }
                out_plane[y * w + x] = acc;
            }
        }
    }
    out
}

/// Normalized 1-D Gaussian kernel of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn static_patch(
    spec: &StaticPatchSpec,
    c: usize,
    h: usize,
    w: usize,
    target_norm: f64,
) -> Result<Tensor> {
    let (oy, ox) = spec.offset;
    if spec.side == 0 || oy + spec.side > h || ox + spec.side > w {
        return Err(Error::Config(format!("static patch {spec:?} does not fit {h}x{w}")));
    }
    let pixels = (spec.side * spec.side * c) as f64;
    let value = target_norm / pixels.sqrt();
    let mut t = Tensor::zeros(vec![c, h, w]);
    let data = t.data_mut();
    for ch in 0..c {
        for y in oy..oy + spec.side {
            for x in ox..ox + spec.side {
                data[(ch * h + y) * w + x] = value;
            }
        }
    }
    Ok(t)
}

/// `X(w) + beta(w) * Delta(w)` per channel, inverse-transformed; no clamp.
fn embed_perturbation(x: &Tensor, delta: &Tensor, emb: &EmbeddingSpec) -> Result<Tensor> {
    emb.validate()?;
    if !x.same_shape(delta) {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            got: delta.shape().to_vec(),
        });
    }
    if emb.eps_base == 0.0 {
        return Ok(x.clone());
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let strength = emb.effective_strength();
    let corner = 2f64.sqrt(); // corner radius in Nyquist units
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let xs = fft2(&x.data()[ch * h * w..(ch + 1) * h * w], h, w);
        let ds = fft2(&delta.data()[ch * h * w..(ch + 1) * h * w], h, w);
        let mut mixed = Vec::with_capacity(h * w);
        for u in 0..h {
            for v in 0..w {
                let rho = radial_fraction(u, v, h, w) / corner;
                let beta = strength * emb.window.value(rho);
                mixed.push(xs[u * w + v] + beta * ds[u * w + v]);
            }
        }
        let plane = ifft2_real(&mixed, h, w);
        if plane.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "embedded spectrum".into() });
        }
        out.extend(plane);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-band energy fractions, dominant band count, and PSNR against a
/// reference sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralReport {
    pub band_energy: Vec<f64>,
    pub dominant_band_count: usize,
    pub psnr: f64,
}

/// Peak signal-to-noise ratio for unit-range images; +inf when identical.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch { expected: a.shape().to_vec(), got: b.shape().to_vec() });
    }
    let mse: f64 =
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Radial-band energy profile of a perturbation plus PSNR of `(x, x + delta)`.
pub fn spectral_report(delta: &Tensor, x: &Tensor) -> Result<SpectralReport> {
    delta.check_finite("spectral_report input")?;
    if delta.norm() < 1e-12 {
        return Err(Error::DegenerateTrigger("zero-energy perturbation".into()));
    }
    let (c, h, w) = (delta.shape()[0], delta.shape()[1], delta.shape()[2]);
    let corner = 2f64.sqrt();
    let mut bands = vec![0.0; SPECTRAL_BANDS];
    for ch in 0..c {
        let ds = fft2(&delta.data()[ch * h * w..(ch + 1) * h * w], h, w);
        for u in 0..h {
            for v in 0..w {
                let rho = radial_fraction(u, v, h, w) / corner;
                let band = ((rho * SPECTRAL_BANDS as f64) as usize).min(SPECTRAL_BANDS - 1);
                bands[band] += ds[u * w + v].norm_sqr();
            }
        }
    }
    let total: f64 = bands.iter().sum();
    for b in &mut bands {
        *b /= total;
    }
    let dominant = bands.iter().filter(|&&b| b > DOMINANT_BAND_THRESHOLD).count();
    let poisoned = x.add(delta)?;
    Ok(SpectralReport { band_energy: bands, dominant_band_count: dominant, psnr: psnr(x, &poisoned)? })
}
