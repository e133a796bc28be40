//! Attack orchestration: client valuation and greedy budgeted selection,
//! the temporal intensity schedule, adaptive per-round strengths, batch
//! poisoning for the fractal attack, and the MR/DBA/LP baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::ClientProfile;
use crate::net::ParamVector;
use crate::tensor::Tensor;
use crate::trigger::BuiltTrigger;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Tfi,
    Mr,
    Dba,
    Lp,
}

/// Bounds on the attacker's reach; at least one must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub max_malicious: Option<usize>,
    pub max_total_weight: Option<f64>,
}

impl AttackBudget {
    pub fn count(max_malicious: usize) -> Self {
        AttackBudget { max_malicious: Some(max_malicious), max_total_weight: None }
    }

    pub fn validate(&self, n_clients: usize) -> Result<()> {
        match (self.max_malicious, self.max_total_weight) {
            (None, None) => Err(Error::Config("attack budget sets no bound".into())),
            (Some(b), _) if b > n_clients => {
                Err(Error::Config(format!("budget {b} exceeds {n_clients} clients")))
            }
            _ => Ok(()),
        }
    }
}

/// Saturating-exponential attack intensity `I(t) = I_max * (1 - e^(-lambda t))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalSchedule {
    pub i_max: f64,
    pub lambda: f64,
}

impl TemporalSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.i_max <= 0.0 || self.lambda <= 0.0 {
            return Err(Error::Config(format!(
                "schedule needs i_max > 0 and lambda > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn intensity(&self, t: usize) -> f64 {
        self.i_max * (1.0 - (-self.lambda * t as f64).exp())
    }
}

/// Attack value of one client: aggregation weight times SCC estimate.
/// `None` (skipped) when the client's SCC is unknown.
pub fn client_value(profile: &ClientProfile) -> Option<f64> {
    profile.value
}

/// Greedy descending-value selection under the budget. A client whose
/// weight would break the weight cap is skipped, later candidates may
/// still fit (greedy, not optimal knapsack).
pub fn select_clients(profiles: &[ClientProfile], budget: &AttackBudget) -> Result<Vec<usize>> {
    budget.validate(profiles.len())?;
    let mut valued: Vec<&ClientProfile> = profiles.iter().filter(|p| p.value.is_some()).collect();
    if valued.is_empty() {
        return Err(Error::Empty("no clients with a valid attack value".into()));
    }
    valued.sort_by(|a, b| {
        b.value
            .unwrap()
            .partial_cmp(&a.value.unwrap())
            .unwrap()
            .then(a.id.cmp(&b.id))
    });
    let mut selected = Vec::new();
    let mut weight_used = 0.0;
    for p in valued {
        if let Some(limit) = budget.max_malicious {
            if selected.len() >= limit {
                break;
            }
        }
        if let Some(cap) = budget.max_total_weight {
            if weight_used + p.aggregation_weight > cap + 1e-12 {
                continue;
            }
        }
        weight_used += p.aggregation_weight;
        selected.push(p.id);
    }
    selected.sort_unstable();
    Ok(selected)
}

/// Sensitivity-adaptive base strength:
/// `eps_0 * min(2, SRS_ref / SRS_hat)`.
pub fn base_strength(srs_hat: f64, eps0: f64, srs_ref: f64) -> Result<f64> {
    if srs_hat <= 0.0 {
        return Err(Error::Config(format!("base_strength needs srs_hat > 0, got {srs_hat}")));
    }
    Ok(eps0 * (srs_ref / srs_hat).min(2.0))
}

/// Per-round per-client strength:
/// `eps_base * (V_i / V_bar) * I(t) / n_attackers`.
pub fn round_strength(
    eps_base: f64,
    value: f64,
    value_mean: f64,
    intensity: f64,
    n_attackers: usize,
) -> Result<f64> {
    if n_attackers == 0 {
        return Err(Error::Config("round_strength with zero participating attackers".into()));
    }
    if value_mean <= 0.0 {
        return Err(Error::Config(format!("round_strength needs V_bar > 0, got {value_mean}")));
    }
    Ok(eps_base * (value / value_mean) * intensity / n_attackers as f64)
}

/// Number of samples poisoned out of a batch of `len`.
pub fn poison_count(len: usize, poison_fraction: f64) -> usize {
    ((len as f64 * poison_fraction).ceil() as usize).min(len)
}

/// Fractal-trigger poisoning: embeds the trigger into the first
/// `ceil(poison_fraction * batch)` samples and relabels them.
pub fn poison_batch_tfi(
    inputs: &mut [Tensor],
    labels: &mut [usize],
    trigger: &BuiltTrigger,
    eps: f64,
    target_class: usize,
    poison_fraction: f64,
) -> Result<()> {
    if eps < 0.0 {
        return Err(Error::Config(format!("poison strength must be >= 0, got {eps}")));
    }
    let count = poison_count(inputs.len(), poison_fraction);
    for i in 0..count {
        inputs[i] = trigger.embed_with_strength(&inputs[i], eps)?;
        labels[i] = target_class;
    }
    Ok(())
}

/// Model replacement: scales the target offset so FedAvg lands exactly on
/// `w_target` when this is the only malicious update.
pub fn baseline_mr(
    w_target: &ParamVector,
    w_global: &ParamVector,
    aggregation_weight: f64,
) -> Result<ParamVector> {
    if aggregation_weight <= 0.0 {
        return Err(Error::Config(format!(
            "model replacement needs a positive weight, got {aggregation_weight}"
        )));
    }
    Ok(w_target.sub(w_global).scaled(1.0 / aggregation_weight))
}

/// Distributed backdoor: stamps only the assigned quadrant of the static
/// patch. The full patch appears only when all quadrants are composed.
pub fn baseline_dba(
    inputs: &mut [Tensor],
    labels: &mut [usize],
    trigger: &BuiltTrigger,
    eps: f64,
    quadrant: usize,
    target_class: usize,
    poison_fraction: f64,
) -> Result<()> {
    if quadrant > 3 {
        return Err(Error::Config(format!("quadrant must be in 0..4, got {quadrant}")));
    }
    let sub = quadrant_patch(&trigger.static_counterpart, quadrant);
    let count = poison_count(inputs.len(), poison_fraction);
    for i in 0..count {
        let mut poisoned = inputs[i].add(&sub.scaled(eps))?;
        poisoned.clamp_in_place(0.0, 1.0);
        inputs[i] = poisoned;
        labels[i] = target_class;
    }
    Ok(())
}

/// Restricts a patch perturbation to one quadrant of its nonzero bounding
/// box. The four quadrants are disjoint and their union is the full patch.
pub fn quadrant_patch(patch: &Tensor, quadrant: usize) -> Tensor {
    let (c, h, w) = (patch.shape()[0], patch.shape()[1], patch.shape()[2]);
    // bounding box of the nonzero support (same across channels)
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
    for y in 0..h {
        for x in 0..w {
            if (0..c).any(|ch| patch.data()[(ch * h + y) * w + x] != 0.0) {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    if y0 >= y1 {
        return patch.clone(); // empty patch
    }
    let my = y0 + (y1 - y0).div_ceil(2);
    let mx = x0 + (x1 - x0).div_ceil(2);
    let mut out = Tensor::zeros(patch.shape().to_vec());
    for y in y0..y1 {
        for x in x0..x1 {
            let q = match (y < my, x < mx) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            if q == quadrant {
                for ch in 0..c {
                    let idx = (ch * h + y) * w + x;
                    out.data_mut()[idx] = patch.data()[idx];
                }
            }
        }
    }
    out
}

/// Label poisoning: relabels the chosen fraction without touching inputs.
pub fn baseline_lp(labels: &mut [usize], flip_fraction: f64, target_class: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&flip_fraction) {
        return Err(Error::Config(format!("flip_fraction must be in [0, 1], got {flip_fraction}")));
    }
    let count = poison_count(labels.len(), flip_fraction);
    for l in labels.iter_mut().take(count) {
        *l = target_class;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trigger::{
        EmbeddingSpec, FractalTemplateSpec, FrequencyWindow, MultiScaleSpec, StaticPatchSpec,
        TriggerSpec,
    };

    fn profile(id: usize, weight: f64, value: Option<f64>) -> ClientProfile {
        ClientProfile {
            id,
            aggregation_weight: weight,
            shard: vec![id],
            malicious: false,
            structure: None,
            value,
        }
    }

    fn trigger() -> crate::trigger::BuiltTrigger {
        TriggerSpec {
            template: FractalTemplateSpec {
                seed: 1,
                height: 8,
                width: 8,
                channels: 1,
                spectral_exponent: 2.0,
            },
            scales: MultiScaleSpec { sigmas: vec![0.0], alphas: vec![1.0] },
            embedding: EmbeddingSpec {
                eps_base: 0.5,
                compat_exponent: 0.5,
                window: FrequencyWindow::open(),
                scc: 1.0,
            },
            static_patch: StaticPatchSpec { side: 4, offset: (2, 2) },
        }
        .build()
        .unwrap()
    }

    #[test]
    fn intensity_schedule_values() {
        let s = TemporalSchedule { i_max: 2.0, lambda: 0.1 };
        assert_eq!(s.intensity(0), 0.0);
        let expected = 2.0 * (1.0 - (-1.0f64).exp());
        assert!((s.intensity(10) - expected).abs() < 1e-12);
        assert!((s.intensity(300) - 2.0).abs() < 1e-9);
        // strictly increasing, bounded by i_max
        for t in 0..50 {
            assert!(s.intensity(t) < s.intensity(t + 1));
            assert!(s.intensity(t + 1) <= 2.0);
        }
    }

    #[test]
    fn base_strength_clamp_cases() {
        let eps0 = 0.3;
        assert!((base_strength(1.0, eps0, 1.0).unwrap() - eps0).abs() < 1e-15);
        assert!((base_strength(0.25, eps0, 1.0).unwrap() - 2.0 * eps0).abs() < 1e-15);
        assert!((base_strength(2.0, eps0, 1.0).unwrap() - 0.5 * eps0).abs() < 1e-15);
        assert!(base_strength(0.0, eps0, 1.0).is_err());
    }

    #[test]
    fn round_strength_factor_product() {
        // neutral factors -> eps_base
        assert_eq!(round_strength(0.4, 1.0, 1.0, 1.0, 1).unwrap(), 0.4);
        // V = 2 V_bar, I = 0.5, two attackers -> 0.5 eps_base
        assert!((round_strength(0.4, 2.0, 1.0, 0.5, 2).unwrap() - 0.2).abs() < 1e-15);
        // schedule onset
        assert_eq!(round_strength(0.4, 1.0, 1.0, 0.0, 1).unwrap(), 0.0);
        assert!(round_strength(0.4, 1.0, 1.0, 1.0, 0).is_err());
    }

    #[test]
    fn greedy_selection_by_value() {
        let profiles =
            vec![profile(0, 0.1, Some(0.3)), profile(1, 0.1, Some(0.5))];
        assert_eq!(select_clients(&profiles, &AttackBudget::count(1)).unwrap(), vec![1]);
        let profiles = vec![
            profile(0, 0.1, Some(0.5)),
            profile(1, 0.1, Some(0.4)),
            profile(2, 0.1, Some(0.3)),
        ];
        assert_eq!(select_clients(&profiles, &AttackBudget::count(2)).unwrap(), vec![0, 1]);
    }

    #[test]
    fn weight_cap_skips_and_continues() {
        // weights {0.03, 0.03, 0.01} in value order, cap 0.05 -> first and
        // third selected
        let profiles = vec![
            profile(0, 0.03, Some(0.9)),
            profile(1, 0.03, Some(0.8)),
            profile(2, 0.01, Some(0.7)),
        ];
        let budget = AttackBudget { max_malicious: None, max_total_weight: Some(0.05) };
        assert_eq!(select_clients(&profiles, &budget).unwrap(), vec![0, 2]);
    }

    #[test]
    fn selection_ignores_unknown_scc_and_positive_rescaling() {
        let profiles = vec![
            profile(0, 0.1, None),
            profile(1, 0.1, Some(0.2)),
            profile(2, 0.1, Some(0.1)),
        ];
        let picked = select_clients(&profiles, &AttackBudget::count(1)).unwrap();
        assert_eq!(picked, vec![1]);
        let rescaled: Vec<ClientProfile> = profiles
            .iter()
            .map(|p| ClientProfile { value: p.value.map(|v| v * 17.0), ..p.clone() })
            .collect();
        assert_eq!(select_clients(&rescaled, &AttackBudget::count(1)).unwrap(), picked);
    }

    #[test]
    fn tfi_poison_counts_and_zero_strength() {
        let trig = trigger();
        let mut inputs: Vec<Tensor> =
            (0..8).map(|_| Tensor::new(vec![1, 8, 8], vec![0.5; 64]).unwrap()).collect();
        let clean = inputs.clone();
        let mut labels = vec![1usize; 8];
        poison_batch_tfi(&mut inputs, &mut labels, &trig, 0.5, 0, 0.5).unwrap();
        assert_eq!(labels, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        for i in 0..4 {
            assert_ne!(inputs[i], clean[i]);
        }
        for i in 4..8 {
            assert_eq!(inputs[i], clean[i]);
        }
        // zero strength: labels flip but inputs stay identical
        let mut inputs = clean.clone();
        let mut labels = vec![1usize; 8];
        poison_batch_tfi(&mut inputs, &mut labels, &trig, 0.0, 0, 1.0).unwrap();
        assert_eq!(inputs, clean);
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn mr_scaling_and_fedavg_exactness() {
        let layout = Vec::new();
        let global = ParamVector::new(vec![0.0, 0.0], layout.clone());
        let target = ParamVector::new(vec![1.0, -2.0], layout.clone());
        let d1 = baseline_mr(&target, &global, 1.0).unwrap();
        let d2 = baseline_mr(&target, &global, 0.5).unwrap();
        assert!((d2.norm() - 2.0 * d1.norm()).abs() < 1e-12);
        // 9 benign zero updates + 1 malicious at uniform weight 0.1
        let dm = baseline_mr(&target, &global, 0.1).unwrap();
        let mut agg = global.clone();
        agg.axpy(0.1, &dm);
        assert_eq!(agg.values(), target.values());
    }

    #[test]
    fn dba_quadrants_compose_to_full_patch() {
        let trig = trigger();
        let full = &trig.static_counterpart;
        let mut sum = Tensor::zeros(full.shape().to_vec());
        for q in 0..4 {
            let part = quadrant_patch(full, q);
            for (s, p) in sum.data_mut().iter_mut().zip(part.data()) {
                *s += p;
            }
        }
        assert_eq!(&sum, full);
        // locality: quadrant 0 stamps nothing outside its own quadrant
        let q0 = quadrant_patch(full, 0);
        let both_nonzero = q0
            .data()
            .iter()
            .zip(quadrant_patch(full, 3).data())
            .filter(|(a, b)| **a != 0.0 && **b != 0.0)
            .count();
        assert_eq!(both_nonzero, 0);
        assert!(q0.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn lp_counts_without_touching_inputs() {
        let mut labels = vec![5usize; 32];
        baseline_lp(&mut labels, 0.25, 0).unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 8);
        baseline_lp(&mut labels, 0.0, 0).unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 8);
        baseline_lp(&mut labels, 1.0, 0).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn budget_must_bound_something() {
        let b = AttackBudget { max_malicious: None, max_total_weight: None };
        assert!(b.validate(10).is_err());
        assert!(AttackBudget::count(11).validate(10).is_err());
        assert!(AttackBudget::count(2).validate(10).is_ok());
    }
}
