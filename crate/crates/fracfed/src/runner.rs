//! Config-driven experiment execution: the full federated round loop with
//! probing, attacker selection, scheduled poisoning, aggregation, round
//! metrics, and artifact persistence, plus parameter sweeps.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    self, baseline_dba, baseline_lp, baseline_mr, poison_batch_tfi, select_clients, AttackMethod,
};
use crate::config::{
    AttackConfig, DatasetSpec, ExperimentConfig, RunManifest, OUTPUT_ROOT_ENV,
};
use crate::data::{self, Split};
use crate::defense::{self, FeasibilityLedger};
use crate::error::{Error, Result};
use crate::federation::{
    self, aggregate, local_train, sample_participants, AggregationRule, ClientProfile,
    ClientUpdate, RoundRecord, TrainingConfig,
};
use crate::metrics::{compute_scc, estimate_scc, estimate_srs, layer_weights, ProbeSet};
use crate::net::{build_architecture, ArchName, ArchitectureGraph, ParamSegment, ParamVector};
use crate::rng::{self, tag};
use crate::tensor::Tensor;
use crate::trigger::{BuiltTrigger, EmbeddingSpec};

/// Stream tag for the random attacker draw used by baselines/ablation.
const RANDOM_SELECTION_TAG: u64 = 9;
/// Cosine anomaly threshold used for the per-round detection column.
const DETECTION_TAU: f64 = 0.5;
/// Connectivity bonus in the SRS layer weighting.
const SKIP_BONUS: f64 = 1.5;
/// Samples used for the exact initial-model structure score.
const EXACT_SCC_BATCH: usize = 2;

pub const METRICS_HEADER: &str = "round,mta,asr,mean_cosine,detection_rate,margin";
pub const PROBES_HEADER: &str = "client_id,weight,srs_hat,scc_hat,value,eps_base,selected";

/// Per-repeat result summary, persisted as `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub seed: u64,
    pub final_mta: f64,
    pub final_asr: f64,
    /// ASR averaged over every evaluation point (round 0 through T); a
    /// stability measure that is less noisy than the last round alone.
    pub mean_asr: f64,
    /// Exact initial-model structural compatibility, when well posed.
    pub scc_exact: Option<f64>,
    /// Exact final-model structural compatibility, when well posed.
    pub scc_exact_final: Option<f64>,
    pub feasibility_margin: f64,
    pub attackers: Vec<usize>,
    pub rounds: usize,
}

#[derive(Debug)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub repeats: Vec<RepeatSummary>,
}

/// Per-client probing result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRow {
    pub client_id: usize,
    pub weight: f64,
    pub srs_hat: f64,
    pub scc_hat: Option<f64>,
    pub value: Option<f64>,
    pub eps_base: f64,
    pub selected: bool,
}

/// Applies `FRACFED_OUT` as an output root when set.
pub fn resolve_output_dir(configured: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(configured),
        None => configured.to_path_buf(),
    }
}

fn fmt_csv(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

/// How poisoned inputs look at evaluation time.
enum EvalTrigger {
    Embed(BuiltTrigger),
    Static(BuiltTrigger, f64),
    Identity,
}

impl EvalTrigger {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            EvalTrigger::Embed(t) => t.embed(x),
            EvalTrigger::Static(t, eps) => t.stamp_static(x, *eps),
            EvalTrigger::Identity => Ok(x.clone()),
        }
    }
}

struct AttackState {
    cfg: AttackConfig,
    /// Sorted ids of compromised clients.
    attackers: Vec<usize>,
    /// Per-attacker sensitivity-adapted base strength.
    eps_base: HashMap<usize, f64>,
    /// Per-attacker value V_i; missing entries fall back to the mean.
    value: HashMap<usize, f64>,
    value_mean: f64,
    trigger: BuiltTrigger,
}

impl AttackState {
    fn round_eps(&self, client: usize, intensity: f64, n_attackers: usize) -> Result<f64> {
        let base = *self.eps_base.get(&client).unwrap_or(&self.cfg.eps0);
        if self.cfg.ablation.no_dynamic_strength {
            return Ok(self.cfg.eps0 * intensity);
        }
        let value = *self.value.get(&client).unwrap_or(&self.value_mean);
        attacks::round_strength(base, value, self.value_mean, intensity, n_attackers)
    }
}

fn load_split(cfg: &ExperimentConfig, seed: u64) -> Result<Split> {
    match &cfg.dataset {
        DatasetSpec::Procedural { classes, train, test, height, width } => {
            data::procedural_split(seed, *classes, *train, *test, *height, *width)
        }
        DatasetSpec::Idx { train_images, train_labels, test_images, test_labels } => Ok(Split {
            train: data::read_idx_dataset(train_images, train_labels)?,
            test: data::read_idx_dataset(test_images, test_labels)?,
        }),
    }
}

fn check_trigger_shape(cfg: &ExperimentConfig, input_shape: &[usize]) -> Result<()> {
    let t = &cfg.trigger.template;
    let expected = [t.channels, t.height, t.width];
    if input_shape != expected {
        return Err(Error::Config(format!(
            "trigger template shape {expected:?} does not match input shape {input_shape:?}"
        )));
    }
    Ok(())
}

/// Repeat seeds derived from the master seed.
pub fn repeat_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.seeds.repeats).map(|r| cfg.seeds.master.wrapping_add(r as u64)).collect()
}

/// Executes the configured experiment across all repeats and persists
/// metrics, round logs, probes, checkpoints, and the manifest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_at(cfg, &resolve_output_dir(&cfg.output_dir))
}

fn run_at(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let out_dir = out_dir.to_path_buf();
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("config.json"), cfg.to_json()?)?;

    let seeds = repeat_seeds(cfg);
    let repeat_dirs: Vec<PathBuf> =
        (0..seeds.len()).map(|r| out_dir.join(format!("repeat_{r}"))).collect();
    let repeats: Vec<RepeatSummary> = seeds
        .par_iter()
        .zip(&repeat_dirs)
        .map(|(&seed, dir)| run_repeat(cfg, seed, dir))
        .collect::<Result<Vec<_>>>()?;

    let manifest = RunManifest {
        kind: "run".into(),
        config_hash: cfg.hash()?,
        code_version: env!("CARGO_PKG_VERSION").into(),
        master_seed: cfg.seeds.master,
        repeat_seeds: seeds,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        output_dir: out_dir.clone(),
        metrics_files: repeat_dirs.iter().map(|d| d.join("metrics.csv")).collect(),
        rounds_files: repeat_dirs.iter().map(|d| d.join("rounds.jsonl")).collect(),
        probe_files: if cfg.attack.is_some() {
            repeat_dirs.iter().map(|d| d.join("probes.csv")).collect()
        } else {
            Vec::new()
        },
        checkpoint_files: repeat_dirs.iter().map(|d| d.join("checkpoint.bin")).collect(),
        summary_file: Some(out_dir.join("summary.json")),
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&repeats)?)?;
    Ok(RunOutput { manifest, repeats })
}

/// Probes every client against the configured trigger without running any
/// federated rounds.
pub fn probe_only(cfg: &ExperimentConfig) -> Result<Vec<ProbeRow>> {
    cfg.validate()?;
    let attack = cfg
        .attack
        .as_ref()
        .ok_or_else(|| Error::Config("probe requires an attack section".into()))?;
    let seed = cfg.seeds.master;
    let split = load_split(cfg, seed)?;
    let input_shape = split.train.input_shape().to_vec();
    check_trigger_shape(cfg, &input_shape)?;
    let arch = build_architecture(cfg.architecture, &input_shape, split.train.classes)?;
    let params = arch.init_params(&mut rng::stream(seed, &[tag::INIT_PARAMS]));
    let mut profiles = federation::partition(&split.train, &cfg.partition, seed)?;
    let trigger = cfg.trigger.build()?;
    let scc_exact = exact_scc(&arch, &params, &split, &trigger)?;
    let state =
        setup_attack(cfg, attack, &arch, &params, &split, &mut profiles, &trigger, scc_exact, seed)?;
    Ok(probe_rows(&profiles, &state))
}

fn probe_rows(profiles: &[ClientProfile], state: &AttackState) -> Vec<ProbeRow> {
    profiles
        .iter()
        .map(|p| ProbeRow {
            client_id: p.id,
            weight: p.aggregation_weight,
            srs_hat: p.structure.as_ref().map(|s| s.srs_fractal).unwrap_or(f64::NAN),
            scc_hat: p.structure.as_ref().map(|s| s.scc),
            value: p.value,
            eps_base: *state.eps_base.get(&p.id).unwrap_or(&f64::NAN),
            selected: state.attackers.contains(&p.id),
        })
        .collect()
}

fn exact_scc(
    arch: &ArchitectureGraph,
    params: &ParamVector,
    split: &Split,
    trigger: &BuiltTrigger,
) -> Result<Option<f64>> {
    let weights = layer_weights(arch, SKIP_BONUS)?;
    let batch: Vec<Tensor> = split.test.inputs.iter().take(EXACT_SCC_BATCH).cloned().collect();
    match compute_scc(arch, params, &batch, trigger, &weights) {
        Ok(score) => Ok(Some(score.scc)),
        Err(Error::DegenerateDenominator(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Probes clients, derives values and base strengths, and selects the
/// compromised set.
#[allow(clippy::too_many_arguments)]
fn setup_attack(
    cfg: &ExperimentConfig,
    attack: &AttackConfig,
    arch: &ArchitectureGraph,
    global: &ParamVector,
    split: &Split,
    profiles: &mut [ClientProfile],
    trigger: &BuiltTrigger,
    scc_exact: Option<f64>,
    seed: u64,
) -> Result<AttackState> {
    // Probe trigger: attack-strength embedding with the exact SCC of the
    // initial model as the compatibility estimate.
    let probe_trigger = BuiltTrigger {
        embedding: EmbeddingSpec {
            eps_base: attack.eps0,
            scc: scc_exact.unwrap_or(1.0).max(1e-6),
            ..cfg.trigger.embedding.clone()
        },
        fractal: trigger.fractal.clone(),
        static_counterpart: trigger.static_counterpart.clone(),
    };
    let probe = ProbeSet {
        samples: split
            .test
            .inputs
            .iter()
            .zip(&split.test.labels)
            .take(attack.probe_count)
            .map(|(x, &l)| (x.clone(), l))
            .collect(),
    };
    // One local warmup epoch adapts each clone to its shard so probe
    // responses reflect client heterogeneity.
    let warmup_cfg = TrainingConfig { local_epochs: 1, ..cfg.training.clone() };
    let probed: Vec<(f64, Option<f64>)> = profiles
        .par_iter()
        .map(|p| {
            let update = local_train(p, &split.train, arch, global, &warmup_cfg, 0, seed, None)?;
            let local = global.add(&update.delta);
            let srs_hat = estimate_srs(arch, &local, &probe, &probe_trigger)?;
            let scc_hat = estimate_scc(arch, &local, &probe, &probe_trigger)?;
            Ok((srs_hat, scc_hat))
        })
        .collect::<Result<Vec<_>>>()?;

    let positive: Vec<f64> = probed.iter().map(|p| p.0).filter(|&s| s > 0.0).collect();
    let srs_ref = if positive.is_empty() {
        None
    } else {
        Some(positive.iter().sum::<f64>() / positive.len() as f64)
    };

    let mut eps_base = HashMap::new();
    for (p, &(srs_hat, scc_hat)) in profiles.iter_mut().zip(&probed) {
        p.value = scc_hat.map(|scc| p.aggregation_weight * scc);
        p.structure = Some(crate::metrics::StructureScore {
            srs_fractal: srs_hat,
            srs_static: f64::NAN,
            scc: scc_hat.unwrap_or(f64::NAN),
        });
        let eps = match (srs_hat > 0.0, srs_ref) {
            (true, Some(r)) => attacks::base_strength(srs_hat, attack.eps0, r)?,
            _ => attack.eps0,
        };
        eps_base.insert(p.id, eps);
    }

    let structure_aware =
        attack.method == AttackMethod::Tfi && !attack.ablation.no_scc_selection;
    let attackers = if structure_aware {
        // Every client can be unknown-SCC on noisy probes; fall back to
        // the random draw rather than aborting the run.
        match select_clients(profiles, &attack.budget) {
            Ok(sel) => sel,
            Err(Error::Empty(_)) => random_attackers(profiles, attack, seed)?,
            Err(e) => return Err(e),
        }
    } else {
        random_attackers(profiles, attack, seed)?
    };
    for p in profiles.iter_mut() {
        p.malicious = attackers.contains(&p.id);
    }

    let mut value = HashMap::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    for &id in &attackers {
        if let Some(v) = profiles[id].value {
            value.insert(id, v);
            sum += v;
            count += 1;
        }
    }
    let value_mean = if count > 0 && sum > 0.0 { sum / count as f64 } else { 1.0 };
    if !(count > 0 && sum > 0.0) {
        // Degenerate values: neutralize the ratio for every attacker.
        value.clear();
    }

    Ok(AttackState {
        cfg: attack.clone(),
        attackers,
        eps_base,
        value,
        value_mean,
        trigger: probe_trigger,
    })
}

fn random_attackers(
    profiles: &[ClientProfile],
    attack: &AttackConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    let k = attack
        .budget
        .max_malicious
        .unwrap_or(profiles.len())
        .min(profiles.len());
    let mut ids: Vec<usize> = profiles.iter().map(|p| p.id).collect();
    let mut srng = rng::stream(seed, &[RANDOM_SELECTION_TAG]);
    let (picked, _) = ids.partial_shuffle(&mut srng, k);
    let mut picked = picked.to_vec();
    // Honor a weight cap if one is set.
    if let Some(cap) = attack.budget.max_total_weight {
        picked.sort_unstable();
        let mut kept = Vec::new();
        let mut used = 0.0;
        for id in picked {
            if used + profiles[id].aggregation_weight <= cap + 1e-12 {
                used += profiles[id].aggregation_weight;
                kept.push(id);
            }
        }
        return Ok(kept);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Test-time trigger. All methods are judged with the strength from the
/// trigger config (not the attack's training strength) so attack and
/// control columns are directly comparable; the exact SCC of the initial
/// model stands in for the configured compatibility estimate.
fn eval_trigger_for(
    cfg: &ExperimentConfig,
    state: Option<&AttackState>,
    base: &BuiltTrigger,
    scc_exact: Option<f64>,
) -> EvalTrigger {
    let embedded = BuiltTrigger {
        embedding: EmbeddingSpec {
            scc: scc_exact.unwrap_or(1.0).max(1e-6),
            ..cfg.trigger.embedding.clone()
        },
        fractal: base.fractal.clone(),
        static_counterpart: base.static_counterpart.clone(),
    };
    match state.map(|s| (s.cfg.method, s.cfg.ablation.no_fractal)) {
        None | Some((AttackMethod::Tfi, false)) => EvalTrigger::Embed(embedded),
        Some((AttackMethod::Tfi, true)) | Some((AttackMethod::Mr, _)) | Some((AttackMethod::Dba, _)) => {
            EvalTrigger::Static(embedded, cfg.trigger.embedding.eps_base)
        }
        Some((AttackMethod::Lp, _)) => EvalTrigger::Identity,
    }
}

fn run_repeat(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RepeatSummary> {
    fs::create_dir_all(dir)?;
    let split = load_split(cfg, seed)?;
    let input_shape = split.train.input_shape().to_vec();
    check_trigger_shape(cfg, &input_shape)?;
    let arch = build_architecture(cfg.architecture, &input_shape, split.train.classes)?;
    let mut params = arch.init_params(&mut rng::stream(seed, &[tag::INIT_PARAMS]));
    let mut profiles = federation::partition(&split.train, &cfg.partition, seed)?;
    let trigger = cfg.trigger.build()?;
    let scc_exact = exact_scc(&arch, &params, &split, &trigger)?;

    let state = match &cfg.attack {
        Some(attack) => Some(setup_attack(
            cfg,
            attack,
            &arch,
            &params,
            &split,
            &mut profiles,
            &trigger,
            scc_exact,
            seed,
        )?),
        None => None,
    };
    let eval = eval_trigger_for(cfg, state.as_ref(), &trigger, scc_exact);
    let target_class = state.as_ref().map(|s| s.cfg.target_class).unwrap_or(0);

    if let Some(s) = &state {
        let mut f = fs::File::create(dir.join("probes.csv"))?;
        writeln!(f, "{PROBES_HEADER}")?;
        for row in probe_rows(&profiles, s) {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                row.client_id,
                fmt_csv(row.weight),
                fmt_csv(row.srs_hat),
                fmt_csv(row.scc_hat.unwrap_or(f64::NAN)),
                fmt_csv(row.value.unwrap_or(f64::NAN)),
                fmt_csv(row.eps_base),
                row.selected
            )?;
        }
    }

    let mut metrics = fs::File::create(dir.join("metrics.csv"))?;
    writeln!(metrics, "{METRICS_HEADER}")?;
    let mut rounds_log = fs::File::create(dir.join("rounds.jsonl"))?;
    let mut ledger = FeasibilityLedger::default();

    let mut mta = defense::mta(&arch, &params, &split.test)?;
    let mut asr =
        defense::asr(&arch, &params, &split.test, target_class, |x| eval.apply(x))?;
    let mut asr_sum = asr;
    writeln!(
        metrics,
        "0,{},{},nan,nan,{}",
        fmt_csv(mta),
        fmt_csv(asr),
        fmt_csv(0.0)
    )?;

    for t in 1..=cfg.training.rounds {
        let selected = sample_participants(
            cfg.partition.n_clients,
            cfg.training.participation_fraction,
            seed,
            t,
        );
        let round_attackers: Vec<usize> = selected
            .iter()
            .copied()
            .filter(|id| profiles[*id].malicious)
            .collect();
        let n_att = round_attackers.len();
        let intensity = state
            .as_ref()
            .map(|s| {
                if s.cfg.ablation.no_temporal {
                    s.cfg.schedule.i_max
                } else {
                    s.cfg.schedule.intensity(t)
                }
            })
            .unwrap_or(0.0);
        let total_weight: f64 = selected.iter().map(|&id| profiles[id].aggregation_weight).sum();

        let mut strengths: Vec<(usize, f64)> = Vec::new();
        if let Some(s) = &state {
            for &id in &round_attackers {
                strengths.push((id, s.round_eps(id, intensity, n_att.max(1))?));
            }
        }
        let strength_of: HashMap<usize, f64> = strengths.iter().copied().collect();

        let updates: Vec<ClientUpdate> = selected
            .par_iter()
            .map(|&id| {
                let p = &profiles[id];
                match (&state, p.malicious) {
                    (Some(s), true) => malicious_update(
                        cfg,
                        s,
                        p,
                        &split,
                        &arch,
                        &params,
                        t,
                        seed,
                        *strength_of.get(&id).unwrap_or(&0.0),
                        total_weight,
                    ),
                    _ => local_train(p, &split.train, &arch, &params, &cfg.training, t, seed, None),
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let mut noise_rng = rng::stream(seed, &[tag::DP_NOISE, t as u64]);
        let outcome = aggregate(&params, &updates, &cfg.aggregation, &mut noise_rng)?;

        // FedAvg-weighted contribution norms for the persistence margin.
        let mut adv = arch.zero_params();
        let mut benign = arch.zero_params();
        for u in &updates {
            let target = if profiles[u.client_id].malicious { &mut adv } else { &mut benign };
            target.axpy(u.weight / total_weight, &u.delta);
        }
        let (adv_norm, benign_norm) = (adv.norm(), benign.norm());
        ledger.push(adv_norm, benign_norm, outcome.noise_magnitude);

        let mal_deltas: Vec<ParamVector> = updates
            .iter()
            .filter(|u| profiles[u.client_id].malicious)
            .map(|u| u.delta.clone())
            .collect();
        let ben_deltas: Vec<ParamVector> = updates
            .iter()
            .filter(|u| !profiles[u.client_id].malicious)
            .map(|u| u.delta.clone())
            .collect();
        let mean_cosine = if !mal_deltas.is_empty() && !ben_deltas.is_empty() {
            defense::update_similarity(&mal_deltas, &ben_deltas).unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        let detection_rate = if updates.len() >= 3 {
            let truth: Vec<bool> =
                updates.iter().map(|u| profiles[u.client_id].malicious).collect();
            let deltas: Vec<ParamVector> = updates.iter().map(|u| u.delta.clone()).collect();
            defense::cosine_anomaly_detector(&deltas, DETECTION_TAU, &truth)
                .map(|r| r.detection_rate)
                .unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };

        params = outcome.new_global;
        mta = defense::mta(&arch, &params, &split.test)?;
        asr = defense::asr(&arch, &params, &split.test, target_class, |x| eval.apply(x))?;
        asr_sum += asr;

        let record = RoundRecord {
            round: t,
            selected: selected.clone(),
            update_norms: updates.iter().map(|u| u.delta.norm()).collect(),
            adv_contribution: adv_norm,
            benign_contribution: benign_norm,
            noise_magnitude: outcome.noise_magnitude,
            attack_strengths: strengths,
            mta,
            asr,
        };
        writeln!(rounds_log, "{}", serde_json::to_string(&record)?)?;
        writeln!(
            metrics,
            "{t},{},{},{},{},{}",
            fmt_csv(mta),
            fmt_csv(asr),
            fmt_csv(mean_cosine),
            fmt_csv(detection_rate),
            fmt_csv(ledger.margin())
        )?;
    }

    save_params(&params, &dir.join("checkpoint"))?;
    let scc_exact_final = exact_scc(&arch, &params, &split, &trigger)?;
    let summary = RepeatSummary {
        seed,
        final_mta: mta,
        final_asr: asr,
        mean_asr: asr_sum / (cfg.training.rounds + 1) as f64,
        scc_exact,
        scc_exact_final,
        feasibility_margin: ledger.margin(),
        attackers: state.as_ref().map(|s| s.attackers.clone()).unwrap_or_default(),
        rounds: cfg.training.rounds,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn malicious_update(
    cfg: &ExperimentConfig,
    state: &AttackState,
    p: &ClientProfile,
    split: &Split,
    arch: &ArchitectureGraph,
    global: &ParamVector,
    round: usize,
    seed: u64,
    eps_t: f64,
    total_weight: f64,
) -> Result<ClientUpdate> {
    let attack = &state.cfg;
    let target = attack.target_class;
    let frac = attack.poison_fraction;
    let trigger = &state.trigger;
    match attack.method {
        AttackMethod::Tfi => {
            let no_fractal = attack.ablation.no_fractal;
            let poisoner = move |inputs: &mut [Tensor], labels: &mut [usize]| -> Result<()> {
                if no_fractal {
                    let count = attacks::poison_count(inputs.len(), frac);
                    for i in 0..count {
                        inputs[i] = trigger.stamp_static(&inputs[i], eps_t)?;
                        labels[i] = target;
                    }
                    Ok(())
                } else {
                    poison_batch_tfi(inputs, labels, trigger, eps_t, target, frac)
                }
            };
            local_train(p, &split.train, arch, global, &cfg.training, round, seed, Some(&poisoner))
        }
        AttackMethod::Mr => {
            // Train a backdoored target model, then scale the offset so the
            // weighted average lands on it.
            let eps0 = attack.eps0;
            let poisoner = move |inputs: &mut [Tensor], labels: &mut [usize]| -> Result<()> {
                let count = attacks::poison_count(inputs.len(), frac);
                for i in 0..count {
                    inputs[i] = trigger.stamp_static(&inputs[i], eps0)?;
                    labels[i] = target;
                }
                Ok(())
            };
            let honest = local_train(
                p,
                &split.train,
                arch,
                global,
                &cfg.training,
                round,
                seed,
                Some(&poisoner),
            )?;
            let w_target = global.add(&honest.delta);
            let gamma = p.aggregation_weight / total_weight;
            Ok(ClientUpdate {
                client_id: p.id,
                delta: baseline_mr(&w_target, global, gamma)?,
                weight: p.aggregation_weight,
            })
        }
        AttackMethod::Dba => {
            let quadrant =
                state.attackers.iter().position(|&id| id == p.id).unwrap_or(0) % 4;
            let eps0 = attack.eps0;
            let poisoner = move |inputs: &mut [Tensor], labels: &mut [usize]| -> Result<()> {
                baseline_dba(inputs, labels, trigger, eps0, quadrant, target, frac)
            };
            local_train(p, &split.train, arch, global, &cfg.training, round, seed, Some(&poisoner))
        }
        AttackMethod::Lp => {
            let poisoner = move |_inputs: &mut [Tensor], labels: &mut [usize]| -> Result<()> {
                baseline_lp(labels, frac, target)
            };
            local_train(p, &split.train, arch, global, &cfg.training, round, seed, Some(&poisoner))
        }
    }
}

/// Little-endian f64 blob plus a JSON segment-table sidecar.
pub fn save_params(params: &ParamVector, base: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for v in params.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(base.with_extension("bin"), bytes)?;
    fs::write(
        base.with_extension("layout.json"),
        serde_json::to_string_pretty(params.layout())?,
    )?;
    Ok(())
}

pub fn load_params(base: &Path) -> Result<ParamVector> {
    let bytes = fs::read(base.with_extension("bin"))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Config(format!(
            "parameter blob length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let layout: Vec<ParamSegment> =
        serde_json::from_str(&fs::read_to_string(base.with_extension("layout.json"))?)?;
    let expected: usize = layout.iter().map(|s| s.len).sum();
    if expected != values.len() {
        return Err(Error::Config(format!(
            "layout expects {expected} parameters, blob holds {}",
            values.len()
        )));
    }
    Ok(ParamVector::new(values, layout))
}

/// Sweepable configuration axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PoisonClientFraction,
    DpSigma,
    Architecture,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poison_client_fraction" => Ok(SweepAxis::PoisonClientFraction),
            "dp_sigma" => Ok(SweepAxis::DpSigma),
            "architecture" => Ok(SweepAxis::Architecture),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub mta: f64,
    pub asr: f64,
    /// ASR relative to the first sweep point.
    pub retention: f64,
    pub scc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    /// Smallest sweep value whose ASR reaches the target, when requested.
    pub threshold_value: Option<String>,
}

#[derive(Debug)]
pub struct SweepOutput {
    pub manifest: RunManifest,
    pub summary: SweepSummary,
}

fn derive_config(
    base: &ExperimentConfig,
    axis: SweepAxis,
    value: &str,
    out_dir: &Path,
) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.output_dir = out_dir.to_path_buf();
    match axis {
        SweepAxis::PoisonClientFraction => {
            let frac: f64 = value
                .parse()
                .map_err(|_| Error::Config(format!("bad poison fraction {value:?}")))?;
            if !(0.0..=1.0).contains(&frac) {
                return Err(Error::Config(format!("poison fraction {frac} out of [0, 1]")));
            }
            let count = (frac * cfg.partition.n_clients as f64).round() as usize;
            if count == 0 {
                cfg.attack = None;
            } else {
                let attack = cfg
                    .attack
                    .as_mut()
                    .ok_or_else(|| Error::Config("sweep needs an attack section".into()))?;
                attack.budget.max_malicious = Some(count);
            }
        }
        SweepAxis::DpSigma => {
            let sigma: f64 =
                value.parse().map_err(|_| Error::Config(format!("bad dp sigma {value:?}")))?;
            let clip = match cfg.aggregation {
                AggregationRule::Dp { clip_norm, .. } => clip_norm,
                _ => 1.0,
            };
            cfg.aggregation = AggregationRule::Dp { clip_norm: clip, noise_sigma: sigma };
        }
        SweepAxis::Architecture => {
            cfg.architecture = value.parse::<ArchName>()?;
        }
    }
    Ok(cfg)
}

/// Runs the experiment once per axis value and tabulates final metrics.
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    target_asr: Option<f64>,
) -> Result<SweepOutput> {
    if values.is_empty() {
        return Err(Error::Empty("sweep values".into()));
    }
    base.validate()?;
    let started = Instant::now();
    let out_dir = resolve_output_dir(&base.output_dir);
    fs::create_dir_all(&out_dir)?;

    let mut points = Vec::new();
    let mut metrics_files = Vec::new();
    let mut rounds_files = Vec::new();
    for (i, value) in values.iter().enumerate() {
        let sub = out_dir.join(format!("point_{i}"));
        let cfg = derive_config(base, axis, value, &sub)?;
        // The derived config already points inside the resolved root.
        let output = run_without_env_root(&cfg)?;
        let n = output.repeats.len() as f64;
        let mta = output.repeats.iter().map(|r| r.final_mta).sum::<f64>() / n;
        let asr = output.repeats.iter().map(|r| r.final_asr).sum::<f64>() / n;
        let sccs: Vec<f64> = output.repeats.iter().filter_map(|r| r.scc_exact).collect();
        let scc = if sccs.is_empty() {
            f64::NAN
        } else {
            sccs.iter().sum::<f64>() / sccs.len() as f64
        };
        metrics_files.extend(output.manifest.metrics_files);
        rounds_files.extend(output.manifest.rounds_files);
        points.push(SweepPoint { value: value.clone(), mta, asr, retention: f64::NAN, scc });
    }
    let reference = points[0].asr;
    for p in &mut points {
        p.retention = if reference > 0.0 { p.asr / reference } else { f64::NAN };
    }
    let threshold_value = target_asr.and_then(|target| {
        points.iter().find(|p| p.asr >= target).map(|p| p.value.clone())
    });

    let summary_path = out_dir.join("sweep_summary.csv");
    let mut f = fs::File::create(&summary_path)?;
    writeln!(f, "axis,value,mta,asr,retention,scc")?;
    for p in &points {
        writeln!(
            f,
            "{:?},{},{},{},{},{}",
            axis,
            p.value,
            fmt_csv(p.mta),
            fmt_csv(p.asr),
            fmt_csv(p.retention),
            fmt_csv(p.scc)
        )?;
    }

    let summary = SweepSummary { axis, points, threshold_value };
    fs::write(out_dir.join("sweep_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let manifest = RunManifest {
        kind: "sweep".into(),
        config_hash: base.hash()?,
        code_version: env!("CARGO_PKG_VERSION").into(),
        master_seed: base.seeds.master,
        repeat_seeds: repeat_seeds(base),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        output_dir: out_dir.clone(),
        metrics_files,
        rounds_files,
        probe_files: Vec::new(),
        checkpoint_files: Vec::new(),
        summary_file: Some(summary_path),
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(SweepOutput { manifest, summary })
}

/// `run_experiment` on an already-resolved output path; skips the env
/// override so sweep sub-runs stay inside the sweep directory.
fn run_without_env_root(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_at(cfg, &cfg.output_dir.clone())
}
