//! The federated loop's building blocks: non-IID partitioning, client
//! sampling, local momentum-SGD training, and the aggregation rules
//! (FedAvg, Krum, trimmed mean, DP clip+noise).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::StructureScore;
use crate::net::{ArchitectureGraph, ParamVector};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

/// One federated participant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientProfile {
    pub id: usize,
    /// Shard-size-proportional weight; renormalized over the selected set
    /// each round.
    pub aggregation_weight: f64,
    /// Indices into the training set.
    pub shard: Vec<usize>,
    pub malicious: bool,
    pub structure: Option<StructureScore>,
    /// Attack value `gamma_i * SCC_hat`; `None` when scc is unknown.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub dirichlet_alpha: f64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec { n_clients: 100, dirichlet_alpha: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; decayed by 10x at 50% and 75% of `rounds`.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub participation_fraction: f64,
    pub rounds: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            local_epochs: 5,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            participation_fraction: 0.1,
            rounds: 30,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("local_epochs and batch_size must be positive".into()));
        }
        if self.lr < 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("negative training hyperparameter".into()));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "participation_fraction must be in (0, 1], got {}",
                self.participation_fraction
            )));
        }
        Ok(())
    }

    /// Step-decayed learning rate for communication round `t`.
    pub fn lr_at(&self, round: usize) -> f64 {
        let frac = if self.rounds == 0 { 0.0 } else { round as f64 / self.rounds as f64 };
        if frac >= 0.75 {
            self.lr * 0.01
        } else if frac >= 0.5 {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregationRule {
    Fedavg,
    Krum { byzantine_count: usize },
    TrimmedMean { trim_fraction: f64 },
    Dp { clip_norm: f64, noise_sigma: f64 },
}

impl AggregationRule {
    pub fn validate(&self) -> Result<()> {
        match self {
            AggregationRule::TrimmedMean { trim_fraction } => {
                if !(0.0..0.5).contains(trim_fraction) {
                    return Err(Error::Config(format!(
                        "trim_fraction must be in [0, 0.5), got {trim_fraction}"
                    )));
                }
            }
            AggregationRule::Dp { clip_norm, noise_sigma } => {
                if *clip_norm <= 0.0 || *noise_sigma < 0.0 {
                    return Err(Error::Config(format!(
                        "dp needs clip_norm > 0 and noise_sigma >= 0, got C={clip_norm} sigma={noise_sigma}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Per-round ledger entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub update_norms: Vec<f64>,
    /// L2 norm of the weighted sum of malicious updates.
    pub adv_contribution: f64,
    /// L2 norm of the weighted sum of benign updates.
    pub benign_contribution: f64,
    /// Effective aggregation noise magnitude (DP noise vector norm).
    pub noise_magnitude: f64,
    /// Per-attacker poisoning strength applied this round.
    pub attack_strengths: Vec<(usize, f64)>,
    pub mta: f64,
    pub asr: f64,
}

/// Dirichlet non-IID partition into `n_clients` disjoint, non-empty shards.
pub fn partition(dataset: &Dataset, spec: &PartitionSpec, seed: u64) -> Result<Vec<ClientProfile>> {
    let n = spec.n_clients;
    if n == 0 {
        return Err(Error::Config("n_clients must be positive".into()));
    }
    if dataset.len() < n {
        return Err(Error::Dataset(format!(
            "{} samples cannot cover {} clients",
            dataset.len(),
            n
        )));
    }
    if spec.dirichlet_alpha <= 0.0 {
        return Err(Error::Config("dirichlet_alpha must be positive".into()));
    }
    let mut prng = rng::stream(seed, &[tag::PARTITION]);
    let classes = dataset.classes.max(1);
    // Per-client class proportions p_i ~ Dir(alpha * 1_C).
    let dir = Dirichlet::new_with_size(spec.dirichlet_alpha, classes)
        .map_err(|e| Error::Config(format!("dirichlet: {e}")))?;
    let props: Vec<Vec<f64>> = (0..n).map(|_| dir.sample(&mut prng)).collect();

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];
    for class in 0..classes {
        let mut members: Vec<usize> =
            (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        members.shuffle(&mut prng);
        let weights: Vec<f64> = props.iter().map(|p| p[class]).collect();
        let total: f64 = weights.iter().sum();
        // Largest-remainder allocation of this class across clients.
        let mut counts: Vec<usize> = Vec::with_capacity(n);
        let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(n);
        let mut assigned = 0usize;
        for (i, &wgt) in weights.iter().enumerate() {
            let exact = wgt / total * members.len() as f64;
            let floor = exact.floor() as usize;
            counts.push(floor);
            remainders.push((i, exact - floor as f64));
            assigned += floor;
        }
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(i, _) in remainders.iter().take(members.len() - assigned) {
            counts[i] += 1;
        }
        let mut cursor = 0;
        for (i, &count) in counts.iter().enumerate() {
            shards[i].extend(&members[cursor..cursor + count]);
            cursor += count;
        }
    }
    // Repair empty clients by stealing one sample from the largest shard.
    for i in 0..n {
        if shards[i].is_empty() {
            let largest = (0..n).max_by_key(|&j| shards[j].len()).unwrap();
            let stolen = shards[largest].pop().unwrap();
            shards[i].push(stolen);
        }
    }
    let total_samples: usize = shards.iter().map(|s| s.len()).sum();
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(id, mut shard)| {
            shard.sort_unstable();
            ClientProfile {
                id,
                aggregation_weight: shard.len() as f64 / total_samples as f64,
                shard,
                malicious: false,
                structure: None,
                value: None,
            }
        })
        .collect())
}

/// Uniform without-replacement participant draw, deterministic in
/// `(master_seed, round)`.
pub fn sample_participants(
    n_clients: usize,
    fraction: f64,
    master_seed: u64,
    round: usize,
) -> Vec<usize> {
    let k = ((n_clients as f64 * fraction).round() as usize).clamp(1, n_clients);
    let mut ids: Vec<usize> = (0..n_clients).collect();
    let mut srng = rng::stream(master_seed, &[tag::SAMPLING, round as u64]);
    let (selected, _) = ids.partial_shuffle(&mut srng, k);
    let mut selected = selected.to_vec();
    selected.sort_unstable();
    selected
}

/// Plain momentum SGD with decoupled velocity state:
/// `v = mu * v + g; w -= lr * v`.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    velocity: Vec<f64>,
    pub momentum: f64,
}

impl MomentumSgd {
    pub fn new(dim: usize, momentum: f64) -> Self {
        MomentumSgd { velocity: vec![0.0; dim], momentum }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector, lr: f64) {
        for ((v, w), g) in
            self.velocity.iter_mut().zip(params.values_mut()).zip(grad.values())
        {
            *v = self.momentum * *v + g;
            *w -= lr * *v;
        }
    }
}

/// Rewrites a batch in place before the gradient step.
pub type BatchPoisoner<'a> = &'a dyn Fn(&mut [Tensor], &mut [usize]) -> Result<()>;

/// A client's update after local training.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta: ParamVector,
    pub weight: f64,
}

/// Local momentum-SGD pass over the client shard; returns
/// `w_local - w_global`.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    client: &ClientProfile,
    dataset: &Dataset,
    arch: &ArchitectureGraph,
    global: &ParamVector,
    cfg: &TrainingConfig,
    round: usize,
    master_seed: u64,
    poisoner: Option<BatchPoisoner<'_>>,
) -> Result<ClientUpdate> {
    if client.shard.is_empty() {
        return Err(Error::Empty(format!("client {} shard", client.id)));
    }
    let mut params = global.clone();
    let mut opt = MomentumSgd::new(params.len(), cfg.momentum);
    let lr = cfg.lr_at(round);
    let mut trng = rng::stream(master_seed, &[tag::CLIENT_TRAIN, client.id as u64, round as u64]);
    let mut order = client.shard.clone();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut trng);
        for batch_ids in order.chunks(cfg.batch_size) {
            let mut inputs: Vec<Tensor> =
                batch_ids.iter().map(|&i| dataset.inputs[i].clone()).collect();
            let mut labels: Vec<usize> = batch_ids.iter().map(|&i| dataset.labels[i]).collect();
            if let Some(poison) = poisoner {
                poison(&mut inputs, &mut labels)?;
            }
            let mut grad = arch.zero_params();
            for (x, &label) in inputs.iter().zip(&labels) {
                let g = arch.backward(&params, x, label).map_err(|e| Error::Diverged {
                    client: client.id,
                    round,
                    detail: e.to_string(),
                })?;
                grad.axpy(1.0 / inputs.len() as f64, &g.param_grad);
            }
            if cfg.weight_decay != 0.0 {
                grad.axpy(cfg.weight_decay, &params);
            }
            opt.step(&mut params, &grad, lr);
            if !params.is_finite() {
                return Err(Error::Diverged {
                    client: client.id,
                    round,
                    detail: "non-finite parameters after SGD step".into(),
                });
            }
        }
    }
    Ok(ClientUpdate {
        client_id: client.id,
        delta: params.sub(global),
        weight: client.aggregation_weight,
    })
}

/// Relative tolerance for Krum score ties; scores this close count as
/// equal so the lowest-index rule is robust to float rounding.
pub const KRUM_TIE_RTOL: f64 = 1e-9;

/// Krum: index minimizing the sum of squared distances to its
/// `n - f - 2` nearest neighbors; ties (within [`KRUM_TIE_RTOL`]) broken
/// by lowest index.
pub fn krum_select(updates: &[ParamVector], byzantine_count: usize) -> Result<usize> {
    let n = updates.len();
    let needed = byzantine_count + 3;
    if n < needed {
        return Err(Error::KrumTooFewUpdates { needed, got: n });
    }
    let neighbors = n - byzantine_count - 2;
    let mut best = (0usize, f64::INFINITY);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                updates[i]
                    .values()
                    .iter()
                    .zip(updates[j].values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let score: f64 = dists[..neighbors].iter().sum();
        let tol = if best.1.is_finite() {
            KRUM_TIE_RTOL * best.1.abs().max(score.abs())
        } else {
            0.0
        };
        if score < best.1 - tol {
            best = (i, score);
        }
    }
    Ok(best.0)
}

/// Coordinate-wise mean after trimming `floor(trim_fraction * n)` values
/// from each tail.
pub fn trimmed_mean(updates: &[ParamVector], trim_fraction: f64) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::Empty("trimmed mean updates".into()));
    }
    let n = updates.len();
    let k = (trim_fraction * n as f64).floor() as usize;
    if 2 * k >= n {
        return Err(Error::Config(format!("trim {k} from each end leaves no updates (n={n})")));
    }
    let dim = updates[0].len();
    let mut out = updates[0].scaled(0.0);
    let mut column = vec![0.0; n];
    for d in 0..dim {
        for (i, u) in updates.iter().enumerate() {
            column[i] = u.values()[d];
        }
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.values_mut()[d] =
            column[k..n - k].iter().sum::<f64>() / (n - 2 * k) as f64;
    }
    Ok(out)
}

/// Result of one aggregation step.
#[derive(Debug, Clone)]
pub struct AggregateOutcome {
    pub new_global: ParamVector,
    /// Index into `updates` chosen by Krum, when applicable.
    pub krum_selected: Option<usize>,
    /// L2 norm of the injected DP noise vector.
    pub noise_magnitude: f64,
}

/// Applies the aggregation rule to the client updates and advances the
/// global model.
pub fn aggregate(
    global: &ParamVector,
    updates: &[ClientUpdate],
    rule: &AggregationRule,
    noise_rng: &mut impl Rng,
) -> Result<AggregateOutcome> {
    if updates.is_empty() {
        return Err(Error::Empty("aggregation updates".into()));
    }
    let dim = global.len();
    for u in updates {
        if u.delta.len() != dim {
            return Err(Error::ShapeMismatch { expected: vec![dim], got: vec![u.delta.len()] });
        }
    }
    rule.validate()?;
    let mut new_global = global.clone();
    let mut krum_selected = None;
    let mut noise_magnitude = 0.0;
    match rule {
        AggregationRule::Fedavg => {
            let total: f64 = updates.iter().map(|u| u.weight).sum();
            for u in updates {
                new_global.axpy(u.weight / total, &u.delta);
            }
        }
        AggregationRule::Krum { byzantine_count } => {
            let deltas: Vec<ParamVector> = updates.iter().map(|u| u.delta.clone()).collect();
            let idx = krum_select(&deltas, *byzantine_count)?;
            new_global.axpy(1.0, &updates[idx].delta);
            krum_selected = Some(idx);
        }
        AggregationRule::TrimmedMean { trim_fraction } => {
            let deltas: Vec<ParamVector> = updates.iter().map(|u| u.delta.clone()).collect();
            let mean = trimmed_mean(&deltas, *trim_fraction)?;
            new_global.axpy(1.0, &mean);
        }
        AggregationRule::Dp { clip_norm, noise_sigma } => {
            let n = updates.len() as f64;
            for u in updates {
                let norm = u.delta.norm();
                let scale = if norm > *clip_norm { clip_norm / norm } else { 1.0 };
                new_global.axpy(scale / n, &u.delta);
            }
            if *noise_sigma > 0.0 {
                let std = noise_sigma * clip_norm / n;
                let mut sq = 0.0;
                for w in new_global.values_mut() {
                    let z: f64 = StandardNormal.sample(noise_rng);
                    let noise = std * z;
                    *w += noise;
                    sq += noise * noise;
                }
                noise_magnitude = sq.sqrt();
            }
        }
    }
    if !new_global.is_finite() {
        return Err(Error::NonFinite { context: "aggregated global model".into() });
    }
    Ok(AggregateOutcome { new_global, krum_selected, noise_magnitude })
}
