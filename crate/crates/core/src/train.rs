//! Training drivers: inference-network pre-training, the actor-critic main
//! loop with epsilon-style exploration of random edge weights, and paired
//! evaluation sweeps over random network realizations.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actor_critic::{
    actor_loss_grad, actor_weights, critic_loss_grad, infer_sensing, AcModel,
};
use crate::baselines::{fixed_rule_weights, rand_group, unif_group, BaselineKind};
use crate::maxcut::{do_graph_cut, CutOptions};
use crate::net::{generate_realization, observe_states, sensing_matrix, ScenarioConfig, StateMatrix};
use crate::nn::{Optimizer, OptimizerKind, ParamStore};
use crate::sim::{run_sim, GroupAssignment, MacConfig};
use crate::Result;

/// Counter-based seed splitting so every consumer of randomness gets an
/// independent reproducible stream.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut x = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Training steps N per phase.
    pub steps: usize,
    /// Learning rate.
    pub lr: f64,
    /// Probability of executing random edge weights instead of the actor's.
    pub explore: f64,
    /// Realizations per evaluation sweep.
    pub eval_realizations: usize,
    /// Simulated RAW slots per training step / evaluation run.
    pub sim_slots: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Whether the actor also updates on exploration steps.
    pub actor_update_on_explore: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            lr: 1e-4,
            explore: 0.1,
            eval_realizations: 50,
            sim_slots: 2000,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            actor_update_on_explore: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.explore) {
            return Err(crate::Error::InvalidArgument(format!(
                "explore must be in [0,1], got {}",
                self.explore
            )));
        }
        if self.lr <= 0.0 {
            return Err(crate::Error::InvalidArgument("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: f64,
    /// Accuracy on pairs that truly sense each other.
    pub acc_sensed: f64,
    /// Accuracy on pairs that do not.
    pub acc_hidden: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub worst_throughput: f64,
    pub mean_throughput: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub explored: bool,
}

pub fn pretrain_csv(log: &[PretrainRecord]) -> String {
    let mut out = String::from("step,loss,acc_sensed,acc_hidden\n");
    for r in log {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.acc_sensed, r.acc_hidden));
    }
    out
}

pub fn train_csv(log: &[TrainRecord]) -> String {
    let mut out = String::from("step,worst_throughput,mean_throughput,critic_loss,actor_loss,explored\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.worst_throughput, r.mean_throughput, r.critic_loss, r.actor_loss, r.explored as u8
        ));
    }
    out
}

fn maybe_checkpoint(store: &ParamStore, dir: Option<&Path>, step: usize, total: usize) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    if step % 100 == 0 || step == total {
        store.save(&dir.join(format!("checkpoint_step{step}.json")))?;
    }
    Ok(())
}

/// Per-class accuracy of the thresholded sensing inference on fresh held-out
/// realizations: (accuracy on non-sensing pairs, accuracy on sensing pairs).
pub fn sensing_accuracy(
    model: &AcModel,
    store: &ParamStore,
    cfg: &ScenarioConfig,
    n_realizations: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut hits = [0u64; 2];
    let mut totals = [0u64; 2];
    for i in 0..n_realizations {
        let real = generate_realization(cfg, derive_seed(seed, 10, i as u64))?;
        let s = observe_states(&real, cfg);
        let truth = sensing_matrix(&real, cfg);
        let o = infer_sensing(model, store, &s)?;
        let k = real.num_users();
        for a in 0..k {
            for b in 0..k {
                if a == b {
                    continue;
                }
                let class = truth.0[[a, b]] as usize;
                totals[class] += 1;
                if (o[[a, b]] >= 0.5) == (class == 1) {
                    hits[class] += 1;
                }
            }
        }
    }
    let acc = |c: usize| if totals[c] == 0 { 1.0 } else { hits[c] as f64 / totals[c] as f64 };
    Ok((acc(0), acc(1)))
}

/// Phase 1: train the sensing-inference network on fresh realizations, one
/// gradient step each.
pub fn pretrain_inference(
    model: &AcModel,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    scenario: &ScenarioConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<PretrainRecord>> {
    cfg.validate()?;
    scenario.validate()?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let real = generate_realization(scenario, derive_seed(cfg.seed, 1, step as u64))?;
        let s = observe_states(&real, scenario);
        let truth = sensing_matrix(&real, scenario);
        let (loss, grads) = crate::actor_critic::inference_loss_grad(model, store, &s, &truth)?;
        // Per-class accuracy on the training instance, before the update.
        let o = infer_sensing(model, store, &s)?;
        let k = real.num_users();
        let mut hits = [0u64; 2];
        let mut totals = [0u64; 2];
        for a in 0..k {
            for b in 0..k {
                if a == b {
                    continue;
                }
                let class = truth.0[[a, b]] as usize;
                totals[class] += 1;
                if (o[[a, b]] >= 0.5) == (class == 1) {
                    hits[class] += 1;
                }
            }
        }
        opt.step(store, &grads, cfg.lr);
        let acc = |c: usize| if totals[c] == 0 { 1.0 } else { hits[c] as f64 / totals[c] as f64 };
        log.push(PretrainRecord { step, loss, acc_sensed: acc(1), acc_hidden: acc(0) });
        maybe_checkpoint(store, checkpoint_dir, step, cfg.steps)?;
    }
    Ok(log)
}

/// Phase 2: the actor-critic loop. Each step draws a fresh realization,
/// executes either the actor's weights or (with probability `explore`)
/// random ones, simulates to measure throughput, then updates critic and
/// actor. The inference network is frozen throughout.
pub fn train_actor_critic(
    model: &AcModel,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    scenario: &ScenarioConfig,
    mac: &MacConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    scenario.validate()?;
    let mut critic_opt = Optimizer::new(cfg.optimizer);
    let mut actor_opt = Optimizer::new(cfg.optimizer);
    let mut explore_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, 0));
    let mut cut_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3, 0));
    let cut_opts = CutOptions::default();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let real = generate_realization(scenario, derive_seed(cfg.seed, 4, step as u64))?;
        let s = observe_states(&real, scenario);
        let mut w_exec = actor_weights(model, store, &s)?;
        let explored = explore_rng.gen_bool(cfg.explore);
        if explored {
            let k = real.num_users();
            for i in 0..k {
                for j in 0..k {
                    if i != j {
                        w_exec.0[[i, j]] = explore_rng.gen_range(0.0..1.0);
                    }
                }
            }
        }
        let z = do_graph_cut(scenario.num_groups, &w_exec, &mut cut_rng, &cut_opts)?;
        debug_assert!(z.validate(scenario.num_groups).is_ok());
        let report = run_sim(
            &real,
            &z,
            cfg.sim_slots,
            scenario,
            mac,
            derive_seed(cfg.seed, 5, step as u64),
        )?;
        let r = report.rates;
        let worst = r.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean = r.iter().sum::<f64>() / r.len() as f64;

        let (critic_loss, critic_grads, _) = critic_loss_grad(model, store, &s, &w_exec, &r)?;
        critic_opt.step(store, &critic_grads, cfg.lr);

        let (actor_loss, actor_grads, _) = actor_loss_grad(model, store, &s)?;
        if cfg.actor_update_on_explore || !explored {
            actor_opt.step(store, &actor_grads, cfg.lr);
        }

        log.push(TrainRecord {
            step,
            worst_throughput: worst,
            mean_throughput: mean,
            critic_loss,
            actor_loss,
            explored,
        });
        maybe_checkpoint(store, checkpoint_dir, step, cfg.steps)?;
    }
    Ok(log)
}

/// Grouping policies an evaluation sweep can exercise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupPolicy {
    /// Actor-generated edge weights plus max-cut.
    Proposed,
    Rand,
    Unif,
    Mcon,
    Mhid,
    Mint,
}

impl std::str::FromStr for GroupPolicy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "proposed" => Ok(GroupPolicy::Proposed),
            other => Ok(match other.parse::<BaselineKind>()? {
                BaselineKind::Rand => GroupPolicy::Rand,
                BaselineKind::Unif => GroupPolicy::Unif,
                BaselineKind::Mcon => GroupPolicy::Mcon,
                BaselineKind::Mhid => GroupPolicy::Mhid,
                BaselineKind::Mint => GroupPolicy::Mint,
            }),
        }
    }
}

impl std::fmt::Display for GroupPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            GroupPolicy::Proposed => "proposed",
            GroupPolicy::Rand => "rand",
            GroupPolicy::Unif => "unif",
            GroupPolicy::Mcon => "mcon",
            GroupPolicy::Mhid => "mhid",
            GroupPolicy::Mint => "mint",
        };
        f.write_str(name)
    }
}

/// Produce a grouping for one realization's observed states under a policy.
pub fn assign_groups(
    policy: GroupPolicy,
    model: &AcModel,
    store: &ParamStore,
    s: &StateMatrix,
    scenario: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
    cut_opts: &CutOptions,
) -> Result<GroupAssignment> {
    let z = scenario.num_groups;
    match policy {
        GroupPolicy::Rand => Ok(rand_group(s.num_users(), z, rng)),
        GroupPolicy::Unif => Ok(unif_group(s, z)),
        GroupPolicy::Proposed => {
            let w = actor_weights(model, store, s)?;
            do_graph_cut(z, &w, rng, cut_opts)
        }
        GroupPolicy::Mcon | GroupPolicy::Mhid | GroupPolicy::Mint => {
            let kind = match policy {
                GroupPolicy::Mcon => BaselineKind::Mcon,
                GroupPolicy::Mhid => BaselineKind::Mhid,
                _ => BaselineKind::Mint,
            };
            let w = fixed_rule_weights(kind, s, model, store, scenario)?;
            do_graph_cut(z, &w, rng, cut_opts)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Per-realization worst-case user throughput.
    pub worst_case: Vec<f64>,
    /// All per-user throughputs, flattened across realizations.
    pub per_user: Vec<f64>,
    pub mean_worst: f64,
    /// Mean over realizations of the summed user throughputs.
    pub mean_total: f64,
}

fn cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted.iter().enumerate().map(|(i, &v)| (v, (i + 1) as f64 / n)).collect()
}

impl EvalSummary {
    pub fn worst_case_cdf(&self) -> Vec<(f64, f64)> {
        cdf(&self.worst_case)
    }

    pub fn per_user_cdf(&self) -> Vec<(f64, f64)> {
        cdf(&self.per_user)
    }

    pub fn cdf_csv(&self) -> String {
        let mut out = String::from("value,cumulative_prob,metric\n");
        for (v, p) in self.worst_case_cdf() {
            out.push_str(&format!("{v},{p},worst_case\n"));
        }
        for (v, p) in self.per_user_cdf() {
            out.push_str(&format!("{v},{p},per_user\n"));
        }
        out
    }
}

/// Evaluate a policy on `n_realizations` random networks. Realization, cut,
/// and simulation seeds are derived per index from the master seed, so sweeps
/// with different policies under the same seed are paired.
pub fn evaluate(
    policy: GroupPolicy,
    model: &AcModel,
    store: &ParamStore,
    scenario: &ScenarioConfig,
    mac: &MacConfig,
    n_realizations: usize,
    sim_slots: usize,
    seed: u64,
) -> Result<EvalSummary> {
    let cut_opts = CutOptions::default();
    let mut worst_case = Vec::with_capacity(n_realizations);
    let mut per_user = Vec::new();
    let mut total_sum = 0.0;
    for i in 0..n_realizations {
        let real = generate_realization(scenario, derive_seed(seed, 20, i as u64))?;
        let s = observe_states(&real, scenario);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 21, i as u64));
        let z = assign_groups(policy, model, store, &s, scenario, &mut rng, &cut_opts)?;
        let report =
            run_sim(&real, &z, sim_slots, scenario, mac, derive_seed(seed, 22, i as u64))?;
        worst_case.push(report.rates.iter().cloned().fold(f64::INFINITY, f64::min));
        total_sum += report.rates.iter().sum::<f64>();
        per_user.extend_from_slice(&report.rates);
    }
    let mean_worst = worst_case.iter().sum::<f64>() / worst_case.len().max(1) as f64;
    let mean_total = total_sum / n_realizations.max(1) as f64;
    Ok(EvalSummary { worst_case, per_user, mean_worst, mean_total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actor_critic::critic_forward;
    use crate::maxcut::random_edge_graph;

    fn small_scenario(k: usize, z: usize) -> ScenarioConfig {
        ScenarioConfig { num_users: k, num_groups: z, ..ScenarioConfig::default() }
    }

    fn init_model(scenario: &ScenarioConfig, seed: u64) -> (AcModel, ParamStore) {
        let model = AcModel::new(scenario.num_aps());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.init_all(&mut store, &mut rng);
        (model, store)
    }

    #[test]
    fn derive_seed_streams_are_distinct() {
        let a = derive_seed(1, 1, 0);
        let b = derive_seed(1, 2, 0);
        let c = derive_seed(1, 1, 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(1, 1, 0));
    }

    #[test]
    fn pretrain_zero_steps_leaves_params_unchanged() {
        let scenario = small_scenario(5, 2);
        let (model, mut store) = init_model(&scenario, 1);
        let before = store.clone();
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        let log = pretrain_inference(&model, &mut store, &cfg, &scenario, None).unwrap();
        assert!(log.is_empty());
        assert_eq!(before, store);
    }

    #[test]
    fn pretrain_reduces_loss() {
        let scenario = small_scenario(8, 2);
        let (model, mut store) = init_model(&scenario, 2);
        let cfg = TrainConfig { steps: 120, lr: 1e-3, seed: 2, ..TrainConfig::default() };
        let log = pretrain_inference(&model, &mut store, &cfg, &scenario, None).unwrap();
        let head: f64 = log[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        let tail: f64 = log[log.len() - 10..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
        assert!(log.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn pretrain_is_deterministic() {
        let scenario = small_scenario(5, 2);
        let cfg = TrainConfig { steps: 15, seed: 3, ..TrainConfig::default() };
        let (model, mut s1) = init_model(&scenario, 3);
        let log1 = pretrain_inference(&model, &mut s1, &cfg, &scenario, None).unwrap();
        let (model2, mut s2) = init_model(&scenario, 3);
        let log2 = pretrain_inference(&model2, &mut s2, &cfg, &scenario, None).unwrap();
        assert_eq!(log1, log2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn train_smoke_and_exploration_rate() {
        let scenario = small_scenario(5, 2);
        let (model, mut store) = init_model(&scenario, 4);
        let cfg = TrainConfig {
            steps: 60,
            sim_slots: 20,
            explore: 0.5,
            seed: 4,
            ..TrainConfig::default()
        };
        let mac = MacConfig::default();
        let log = train_actor_critic(&model, &mut store, &cfg, &scenario, &mac, None).unwrap();
        assert_eq!(log.len(), 60);
        assert!(log.iter().all(|r| {
            r.critic_loss.is_finite() && r.actor_loss.is_finite() && r.worst_throughput >= 0.0
        }));
        let explored = log.iter().filter(|r| r.explored).count() as f64;
        let n = log.len() as f64;
        let sigma = (n * 0.5 * 0.5).sqrt();
        assert!((explored - n * 0.5).abs() < 3.0 * sigma, "explored {explored} of {n}");
    }

    #[test]
    fn train_is_deterministic() {
        let scenario = small_scenario(4, 2);
        let cfg =
            TrainConfig { steps: 8, sim_slots: 10, seed: 5, ..TrainConfig::default() };
        let mac = MacConfig::default();
        let (model, mut s1) = init_model(&scenario, 5);
        let log1 = train_actor_critic(&model, &mut s1, &cfg, &scenario, &mac, None).unwrap();
        let (model2, mut s2) = init_model(&scenario, 5);
        let log2 = train_actor_critic(&model2, &mut s2, &cfg, &scenario, &mac, None).unwrap();
        assert_eq!(log1, log2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn critic_loss_decreases_on_frozen_instance() {
        let scenario = small_scenario(5, 2);
        let (model, mut store) = init_model(&scenario, 6);
        let real = generate_realization(&scenario, 6).unwrap();
        let s = observe_states(&real, &scenario);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random_edge_graph(5, &mut rng);
        let r = vec![0.1, 0.2, 0.3, 0.2, 0.1];
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        let (first, _, _) = critic_loss_grad(&model, &store, &s, &w, &r).unwrap();
        for _ in 0..50 {
            let (_, grads, _) = critic_loss_grad(&model, &store, &s, &w, &r).unwrap();
            opt.step(&mut store, &grads, 1e-3);
        }
        let (last, _, q) = critic_loss_grad(&model, &store, &s, &w, &r).unwrap();
        assert!(last < first, "critic loss {first} -> {last}");
        let (q2, _) = critic_forward(&model, &store, &s, &w).unwrap();
        assert_eq!(q, q2);
    }

    #[test]
    fn evaluate_single_realization_cdf_is_step() {
        let scenario = small_scenario(4, 2);
        let (model, store) = init_model(&scenario, 7);
        let mac = MacConfig::default();
        let sum = evaluate(GroupPolicy::Rand, &model, &store, &scenario, &mac, 1, 20, 7).unwrap();
        let cdf = sum.worst_case_cdf();
        assert_eq!(cdf.len(), 1);
        assert_eq!(cdf[0].1, 1.0);
        assert_eq!(sum.per_user.len(), 4);
    }

    #[test]
    fn evaluate_is_deterministic_and_paired() {
        let scenario = small_scenario(4, 2);
        let (model, store) = init_model(&scenario, 8);
        let mac = MacConfig::default();
        let a = evaluate(GroupPolicy::Unif, &model, &store, &scenario, &mac, 3, 15, 8).unwrap();
        let b = evaluate(GroupPolicy::Unif, &model, &store, &scenario, &mac, 3, 15, 8).unwrap();
        assert_eq!(a, b);
        // A different policy under the same seed sees the same realizations:
        // total arrivals depend only on realization + sim seeds, so per-user
        // counts can differ but the sweep structure matches.
        let c = evaluate(GroupPolicy::Rand, &model, &store, &scenario, &mac, 3, 15, 8).unwrap();
        assert_eq!(c.worst_case.len(), a.worst_case.len());
    }

    #[test]
    fn all_policies_produce_valid_groupings() {
        let scenario = small_scenario(6, 2);
        let (model, store) = init_model(&scenario, 9);
        let real = generate_realization(&scenario, 9).unwrap();
        let s = observe_states(&real, &scenario);
        let opts = CutOptions::default();
        for policy in [
            GroupPolicy::Proposed,
            GroupPolicy::Rand,
            GroupPolicy::Unif,
            GroupPolicy::Mcon,
            GroupPolicy::Mhid,
            GroupPolicy::Mint,
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let z = assign_groups(policy, &model, &store, &s, &scenario, &mut rng, &opts).unwrap();
            z.validate(scenario.num_groups).unwrap();
        }
    }

    #[test]
    fn policy_names_round_trip() {
        for p in ["proposed", "rand", "unif", "mcon", "mhid", "mint"] {
            let parsed: GroupPolicy = p.parse().unwrap();
            assert_eq!(parsed.to_string(), p);
        }
        assert!("nope".parse::<GroupPolicy>().is_err());
    }

    #[test]
    fn csv_schemas() {
        let p = vec![PretrainRecord { step: 1, loss: 2.0, acc_sensed: 0.5, acc_hidden: 0.75 }];
        assert!(pretrain_csv(&p).starts_with("step,loss,acc_sensed,acc_hidden\n1,2,0.5,0.75"));
        let t = vec![TrainRecord {
            step: 1,
            worst_throughput: 0.25,
            mean_throughput: 0.5,
            critic_loss: 1.0,
            actor_loss: -0.5,
            explored: true,
        }];
        assert!(train_csv(&t).contains("1,0.25,0.5,1,-0.5,1"));
    }

    #[test]
    fn checkpoints_written_on_cadence() {
        let scenario = small_scenario(4, 2);
        let (model, mut store) = init_model(&scenario, 11);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { steps: 101, seed: 11, ..TrainConfig::default() };
        pretrain_inference(&model, &mut store, &cfg, &scenario, Some(dir.path())).unwrap();
        assert!(dir.path().join("checkpoint_step100.json").exists());
        assert!(dir.path().join("checkpoint_step101.json").exists());
    }
}
