//! Detection mechanisms, evaluation metrics, the feasibility-margin
//! tracker, and the SCC-vs-ASR correlation analysis.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{ArchitectureGraph, ParamVector};
use crate::tensor::Tensor;

/// Spectral-signatures flag budget: 1.5x the expected poison fraction.
pub const SPECTRAL_FLAG_MULTIPLIER: f64 = 1.5;

/// Per-client anomaly scores and flags against planted ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    pub scores: Vec<f64>,
    pub flagged: Vec<bool>,
    /// Fraction of planted malicious entries flagged.
    pub detection_rate: f64,
    /// Fraction of benign entries flagged.
    pub false_positive_rate: f64,
}

impl DetectionReport {
    fn from_flags(scores: Vec<f64>, flagged: Vec<bool>, truth: &[bool]) -> Self {
        let malicious = truth.iter().filter(|&&t| t).count();
        let benign = truth.len() - malicious;
        let hits = truth.iter().zip(&flagged).filter(|(&t, &f)| t && f).count();
        let fps = truth.iter().zip(&flagged).filter(|(&t, &f)| !t && f).count();
        DetectionReport {
            scores,
            flagged,
            detection_rate: if malicious == 0 { 0.0 } else { hits as f64 / malicious as f64 },
            false_positive_rate: if benign == 0 { 0.0 } else { fps as f64 / benign as f64 },
        }
    }
}

/// Per-round evaluation snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub mta: f64,
    pub asr: f64,
    pub mean_update_cosine: f64,
    pub retention: f64,
}

/// Clean-test accuracy.
pub fn mta(arch: &ArchitectureGraph, params: &ParamVector, testset: &Dataset) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::Empty("clean test set".into()));
    }
    let mut correct = 0usize;
    for (x, &label) in testset.inputs.iter().zip(&testset.labels) {
        if arch.predict(params, x)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / testset.len() as f64)
}

/// Attack success rate: fraction of non-target-class test samples that the
/// model assigns to the target class after trigger application.
pub fn asr(
    arch: &ArchitectureGraph,
    params: &ParamVector,
    testset: &Dataset,
    target_class: usize,
    apply_trigger: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<f64> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for (x, &label) in testset.inputs.iter().zip(&testset.labels) {
        if label == target_class {
            continue;
        }
        total += 1;
        if arch.predict(params, &apply_trigger(x)?)? == target_class {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("triggered test set (all samples in target class)".into()));
    }
    Ok(hits as f64 / total as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Config("cosine of zero-norm vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean cosine between each malicious update and the benign-mean update.
pub fn update_similarity(malicious: &[ParamVector], benign: &[ParamVector]) -> Result<f64> {
    if malicious.is_empty() || benign.is_empty() {
        return Err(Error::Empty("update similarity needs both sets".into()));
    }
    let mut mean = benign[0].scaled(1.0 / benign.len() as f64);
    for b in &benign[1..] {
        mean.axpy(1.0 / benign.len() as f64, b);
    }
    let mut total = 0.0;
    for m in malicious {
        total += cosine(m.values(), mean.values())?;
    }
    Ok(total / malicious.len() as f64)
}

/// Defended-over-undefended ASR ratio.
pub fn retention(asr_defended: f64, asr_undefended: f64) -> Result<f64> {
    if asr_undefended <= 0.0 {
        return Err(Error::Config(format!(
            "retention needs undefended ASR > 0, got {asr_undefended}"
        )));
    }
    Ok(asr_defended / asr_undefended)
}

/// Top right-singular direction of the centered representation matrix,
/// by power iteration on the covariance.
fn top_direction(centered: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    for _ in 0..200 {
        // u = C v with C = X^T X, computed as sum of x (x . v)
        let mut u = vec![0.0; dim];
        for row in centered {
            let proj: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (ui, xi) in u.iter_mut().zip(row) {
                *ui += proj * xi;
            }
        }
        let norm: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return v; // rank-0: all representations identical
        }
        for (vi, ui) in v.iter_mut().zip(&u) {
            *vi = ui / norm;
        }
    }
    v
}

/// Spectral signatures: scores samples by squared projection onto the top
/// singular direction of the centered representations; flags the top
/// `1.5 * expected_poison_fraction` candidates whose projection stands
/// out from the non-candidate bulk.
pub fn spectral_signatures(
    representations: &[Vec<f64>],
    expected_poison_fraction: f64,
    truth: &[bool],
) -> Result<DetectionReport> {
    let n = representations.len();
    if n < 2 {
        return Err(Error::Empty("spectral signatures needs >= 2 samples".into()));
    }
    let dim = representations[0].len();
    if representations.iter().any(|r| r.len() != dim) {
        return Err(Error::ShapeMismatch { expected: vec![dim], got: vec![0] });
    }
    let mut mean = vec![0.0; dim];
    for r in representations {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = representations
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let direction = top_direction(&centered, dim);
    let projections: Vec<f64> = centered
        .iter()
        .map(|r| r.iter().zip(&direction).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let scores: Vec<f64> = projections.iter().map(|p| p * p).collect();

    let budget = ((SPECTRAL_FLAG_MULTIPLIER * expected_poison_fraction * n as f64).ceil()
        as usize)
        .min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let candidates = &order[..budget];

    // Threshold from the non-candidate bulk of |projection| values.
    let bulk: Vec<f64> = order[budget..].iter().map(|&i| projections[i].abs()).collect();
    let threshold = if bulk.is_empty() {
        0.0
    } else {
        let m = bulk.iter().sum::<f64>() / bulk.len() as f64;
        let var = bulk.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / bulk.len() as f64;
        m + 4.0 * var.sqrt()
    };
    let mut flagged = vec![false; n];
    for &i in candidates {
        if projections[i].abs() > threshold {
            flagged[i] = true;
        }
    }
    Ok(DetectionReport::from_flags(scores, flagged, truth))
}

/// Flags update `i` when its cosine to the leave-one-out mean falls below
/// `tau`.
pub fn cosine_anomaly_detector(
    updates: &[ParamVector],
    tau: f64,
    truth: &[bool],
) -> Result<DetectionReport> {
    let n = updates.len();
    if n < 3 {
        return Err(Error::Empty("cosine anomaly detector needs >= 3 updates".into()));
    }
    let dim = updates[0].len();
    let mut sum = vec![0.0; dim];
    for u in updates {
        for (s, v) in sum.iter_mut().zip(u.values()) {
            *s += v;
        }
    }
    let mut scores = Vec::with_capacity(n);
    let mut flagged = Vec::with_capacity(n);
    for u in updates {
        let loo: Vec<f64> = sum
            .iter()
            .zip(u.values())
            .map(|(s, v)| (s - v) / (n - 1) as f64)
            .collect();
        let c = cosine(u.values(), &loo)?;
        flagged.push(c < tau);
        scores.push(c);
    }
    Ok(DetectionReport::from_flags(scores, flagged, truth))
}

/// One round's contribution magnitudes for the persistence inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityRound {
    pub adv: f64,
    pub benign: f64,
    pub noise: f64,
}

/// Round-by-round ledger of adversarial vs benign contribution magnitudes
/// and aggregation noise.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FeasibilityLedger {
    pub rounds: Vec<FeasibilityRound>,
}

impl FeasibilityLedger {
    pub fn push(&mut self, adv: f64, benign: f64, noise: f64) {
        self.rounds.push(FeasibilityRound { adv, benign, noise });
    }

    /// Cumulative `sum_t (adv - benign - noise)`; a positive margin
    /// predicts attack persistence.
    pub fn margin(&self) -> f64 {
        self.rounds.iter().map(|r| r.adv - r.benign - r.noise).sum()
    }
}

/// Cumulative feasibility margin of a recorded run.
pub fn feasibility_margin(ledger: &FeasibilityLedger) -> Result<f64> {
    if ledger.rounds.is_empty() {
        return Err(Error::Empty("feasibility ledger".into()));
    }
    Ok(ledger.margin())
}

/// Standard Pearson correlation over `(scc, asr)` points.
pub fn scc_asr_correlation(points: &[(f64, f64)]) -> Result<f64> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Empty(format!("correlation needs >= 3 points, got {n}")));
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in points {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Config("zero variance in correlation input".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
