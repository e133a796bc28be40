//! Structural response metrics: exact layer-response SRS/SCC and their
//! gradient-based probe estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ArchitectureGraph, ParamVector};
use crate::tensor::Tensor;
use crate::trigger::BuiltTrigger;

/// Probe estimates below this are treated as a degenerate denominator.
pub const SCC_DENOMINATOR_FLOOR: f64 = 1e-9;

/// Layer weights for the SRS sum; nonnegative, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrsConfig {
    pub layer_weights: Vec<f64>,
}

impl SrsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_weights.iter().any(|&a| a < 0.0) {
            return Err(Error::Config("negative layer weight".into()));
        }
        let sum: f64 = self.layer_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("layer weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Exact SRS values for the fractal/static trigger pair and their ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureScore {
    pub srs_fractal: f64,
    pub srs_static: f64,
    pub scc: f64,
}

/// Held-out labeled samples used for gradient-based probing.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub samples: Vec<(Tensor, usize)>,
}

impl ProbeSet {
    pub fn m(&self) -> usize {
        self.samples.len()
    }
}

/// Depth-linear layer weights with a connectivity bonus for skip-fed taps,
/// normalized to sum 1.
pub fn layer_weights(arch: &ArchitectureGraph, bonus: f64) -> Result<SrsConfig> {
    if bonus < 1.0 {
        return Err(Error::Config(format!("connectivity bonus must be >= 1, got {bonus}")));
    }
    let count = arch.tap_count();
    let mut raw: Vec<f64> = (1..=count).map(|l| l as f64).collect();
    for (i, w) in raw.iter_mut().enumerate() {
        if arch.tap_is_skip_fed(i + 1) {
            *w *= bonus;
        }
    }
    let sum: f64 = raw.iter().sum();
    for w in &mut raw {
        *w /= sum;
    }
    Ok(SrsConfig { layer_weights: raw })
}

/// Eq.-style weighted sum of per-tap input-Jacobian norms, averaged over
/// the sample batch.
pub fn compute_srs(
    arch: &ArchitectureGraph,
    params: &ParamVector,
    batch: &[Tensor],
    delta: &Tensor,
    cfg: &SrsConfig,
) -> Result<f64> {
    cfg.validate()?;
    if cfg.layer_weights.len() != arch.tap_count() {
        return Err(Error::Config(format!(
            "{} layer weights for {} taps",
            cfg.layer_weights.len(),
            arch.tap_count()
        )));
    }
    if batch.is_empty() {
        return Err(Error::Empty("compute_srs sample batch".into()));
    }
    let mut total = 0.0;
    for x in batch {
        let mut srs = 0.0;
        for (i, &alpha) in cfg.layer_weights.iter().enumerate() {
            if alpha == 0.0 {
                continue;
            }
            srs += alpha * arch.input_jacobian_norm(params, x, delta, i + 1)?;
        }
        total += srs;
    }
    Ok(total / batch.len() as f64)
}

/// Exact SCC: the ratio of SRS under the fractal perturbation to SRS
/// under the energy-matched static counterpart, both evaluated at the
/// embedding's effective strength (the operating point; at unit strength
/// a piecewise-linear network looks locally linear and the ratio
/// collapses to 1).
pub fn compute_scc(
    arch: &ArchitectureGraph,
    params: &ParamVector,
    batch: &[Tensor],
    trigger: &BuiltTrigger,
    cfg: &SrsConfig,
) -> Result<StructureScore> {
    let eps = trigger.embedding.effective_strength();
    let srs_fractal = compute_srs(arch, params, batch, &trigger.fractal.scaled(eps), cfg)?;
    let srs_static =
        compute_srs(arch, params, batch, &trigger.static_counterpart.scaled(eps), cfg)?;
    if srs_static <= 0.0 {
        return Err(Error::DegenerateDenominator(srs_static));
    }
    Ok(StructureScore { srs_fractal, srs_static, scc: srs_fractal / srs_static })
}

fn grad_norm(arch: &ArchitectureGraph, params: &ParamVector, x: &Tensor, label: usize) -> Result<f64> {
    Ok(arch.backward(params, x, label)?.param_grad.norm())
}

/// Gradient-norm probe estimate of SRS: mean over probe samples of
/// (perturbed-gradient norm minus clean-gradient norm). May be negative.
pub fn estimate_srs(
    arch: &ArchitectureGraph,
    params: &ParamVector,
    probe: &ProbeSet,
    trigger: &BuiltTrigger,
) -> Result<f64> {
    estimate_response_gap(arch, params, probe, |x| trigger.embed(x))
}

/// Same difference form with the static counterpart at matched strength.
pub fn estimate_srs_static(
    arch: &ArchitectureGraph,
    params: &ParamVector,
    probe: &ProbeSet,
    trigger: &BuiltTrigger,
) -> Result<f64> {
    let eps = trigger.embedding.effective_strength();
    estimate_response_gap(arch, params, probe, |x| trigger.stamp_static(x, eps))
}

fn estimate_response_gap(
    arch: &ArchitectureGraph,
    params: &ParamVector,
    probe: &ProbeSet,
    perturb: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<f64> {
    if probe.m() == 0 {
        return Err(Error::Empty("probe set".into()));
    }
    let mut total = 0.0;
    for (x, label) in &probe.samples {
        let perturbed = perturb(x)?;
        total += grad_norm(arch, params, &perturbed, *label)? - grad_norm(arch, params, x, *label)?;
    }
    Ok(total / probe.m() as f64)
}

/// Probe SCC estimate: fractal gap over static gap, or `None` when either
/// gap is non-positive; a noise-dominated estimate carries no usable
/// compatibility signal and the client is excluded from preference.
pub fn estimate_scc(
    arch: &ArchitectureGraph,
    params: &ParamVector,
    probe: &ProbeSet,
    trigger: &BuiltTrigger,
) -> Result<Option<f64>> {
    let numerator = estimate_srs(arch, params, probe, trigger)?;
    let denominator = estimate_srs_static(arch, params, probe, trigger)?;
    if denominator <= SCC_DENOMINATOR_FLOOR || numerator <= 0.0 {
        return Ok(None);
    }
    Ok(Some(numerator / denominator))
}
