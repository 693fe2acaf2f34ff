//! Online operation: every fixed window of RAW slots, measure per-user
//! throughput, nudge the edge-weight logits toward a better critic estimate
//! for the worst-off user, blend in freshly generated actor weights, and
//! re-partition the users. Network parameters stay frozen throughout.

use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actor_critic::{actor_weights, argmin, critic_weight_grad, AcModel};
use crate::maxcut::{cut_value, do_graph_cut, CutOptions, EdgeGraph};
use crate::net::{NetworkRealization, ScenarioConfig, StateMatrix};
use crate::nn::{sigmoid, sigmoid_inverse, ParamStore};
use crate::sim::{GroupAssignment, MacConfig, Simulator};
use crate::train::derive_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    /// Slots between weight updates.
    pub window: usize,
    /// Logit-space learning rate.
    pub lr: f64,
    /// Weight regeneration blend factor.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig { window: 200, lr: 1e-3, lambda: 0.1, seed: 0 }
    }
}

/// Mutable state of one online run.
#[derive(Debug, Clone)]
pub struct OnlineState {
    /// Edge-weight logits; diagonal unused.
    pub v: Array2<f64>,
    pub w: EdgeGraph,
    pub s: StateMatrix,
    pub z: GroupAssignment,
}

impl OnlineState {
    /// Start from actor-produced weights on the initial states.
    pub fn init(
        model: &AcModel,
        store: &ParamStore,
        s: &StateMatrix,
        num_groups: usize,
        rng: &mut ChaCha8Rng,
        cut_opts: &CutOptions,
    ) -> Result<Self> {
        let w = actor_weights(model, store, s)?;
        let v = logits_of(&w);
        let z = do_graph_cut(num_groups, &w, rng, cut_opts)?;
        Ok(OnlineState { v, w, s: s.clone(), z })
    }
}

fn logits_of(w: &EdgeGraph) -> Array2<f64> {
    let k = w.num_users();
    Array2::from_shape_fn((k, k), |(i, j)| if i == j { 0.0 } else { sigmoid_inverse(w.0[[i, j]]) })
}

/// Windowed throughput means and the worst-off user (lowest index on ties).
pub fn measure_worst_case(window: &Array2<u32>) -> (Vec<f64>, usize) {
    let t = window.ncols() as f64;
    let rates: Vec<f64> =
        (0..window.nrows()).map(|k| window.row(k).iter().map(|&u| u as f64).sum::<f64>() / t).collect();
    let k_star = argmin(&rates);
    (rates, k_star)
}

/// One logit-space ascent step on the critic's estimate for user `k_star`:
/// `V <- V + lr * dQ/dW * sigmoid'(V)`, then `W <- Sigmoid(V)`.
pub fn update_weights_online(
    state: &mut OnlineState,
    model: &AcModel,
    store: &ParamStore,
    k_star: usize,
    lr: f64,
) -> Result<()> {
    let d_w = critic_weight_grad(model, store, &state.s, &state.w, k_star)?;
    let k = state.w.num_users();
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let wv = state.w.0[[i, j]];
            state.v[[i, j]] += lr * d_w[[i, j]] * wv * (1.0 - wv);
            state.w.0[[i, j]] = sigmoid(state.v[[i, j]]);
        }
    }
    Ok(())
}

/// Blend freshly generated actor weights into the current ones and refresh
/// the logits accordingly.
pub fn regenerate_weights(
    state: &mut OnlineState,
    model: &AcModel,
    store: &ParamStore,
    lambda: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must be in [0,1], got {lambda}")));
    }
    let fresh = actor_weights(model, store, &state.s)?;
    let k = state.w.num_users();
    for i in 0..k {
        for j in 0..k {
            if i != j {
                state.w.0[[i, j]] = (1.0 - lambda) * state.w.0[[i, j]] + lambda * fresh.0[[i, j]];
            }
        }
    }
    state.v = logits_of(&state.w);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineRecord {
    pub update: usize,
    pub k_star: usize,
    pub worst: f64,
    pub mean: f64,
    pub cut_value: f64,
}

pub fn online_csv(log: &[OnlineRecord]) -> String {
    let mut out = String::from("update_index,k_star,min_throughput,mean_throughput,cut_value\n");
    for r in log {
        out.push_str(&format!("{},{},{},{},{}\n", r.update, r.k_star, r.worst, r.mean, r.cut_value));
    }
    out
}

/// Drive one online run for `total_slots` slots. With `fine_tune` false the
/// weights stay frozen at their initial values but re-cuts still happen at
/// the same cadence with the same rounding seeds, so paired runs isolate the
/// weight-update effect.
#[allow(clippy::too_many_arguments)]
pub fn run_online(
    real0: &NetworkRealization,
    model: &AcModel,
    store: &ParamStore,
    cfg: &OnlineConfig,
    scenario: &ScenarioConfig,
    mac: &MacConfig,
    total_slots: usize,
    fine_tune: bool,
) -> Result<Vec<OnlineRecord>> {
    if cfg.window <= scenario.num_groups {
        return Err(Error::InvalidArgument(format!(
            "window {} must exceed the number of groups {}",
            cfg.window, scenario.num_groups
        )));
    }
    if total_slots < cfg.window {
        return Err(Error::InvalidArgument(format!(
            "total_slots {} shorter than one window {}",
            total_slots, cfg.window
        )));
    }
    let cut_opts = CutOptions::default();
    let mut sim = Simulator::new(real0, scenario, mac, derive_seed(cfg.seed, 30, 0))?;
    let mut cut_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 31, 0));
    let mut state =
        OnlineState::init(model, store, &sim.observe(), scenario.num_groups, &mut cut_rng, &cut_opts)?;
    let n_updates = total_slots / cfg.window;
    let mut log = Vec::with_capacity(n_updates);
    for update in 1..=n_updates {
        let window = sim.advance(cfg.window, &state.z)?;
        let (rates, k_star) = measure_worst_case(&window);
        if fine_tune {
            update_weights_online(&mut state, model, store, k_star, cfg.lr)?;
            state.s = sim.observe();
            regenerate_weights(&mut state, model, store, cfg.lambda)?;
        } else {
            state.s = sim.observe();
        }
        let mut recut_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 32, update as u64));
        state.z = do_graph_cut(scenario.num_groups, &state.w, &mut recut_rng, &cut_opts)?;
        let worst = rates.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        log.push(OnlineRecord {
            update,
            k_star,
            worst,
            mean,
            cut_value: cut_value(&state.w, &state.z),
        });
    }
    Ok(log)
}

/// Fine-tuned and fixed-weights control runs sharing every seed.
#[allow(clippy::too_many_arguments)]
pub fn run_online_paired(
    real0: &NetworkRealization,
    model: &AcModel,
    store: &ParamStore,
    cfg: &OnlineConfig,
    scenario: &ScenarioConfig,
    mac: &MacConfig,
    total_slots: usize,
) -> Result<(Vec<OnlineRecord>, Vec<OnlineRecord>)> {
    let tuned = run_online(real0, model, store, cfg, scenario, mac, total_slots, true)?;
    let fixed = run_online(real0, model, store, cfg, scenario, mac, total_slots, false)?;
    Ok((tuned, fixed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{generate_realization, observe_states};
    use approx::assert_relative_eq;

    fn setup(k: usize, z: usize, seed: u64) -> (AcModel, ParamStore, ScenarioConfig) {
        let cfg = ScenarioConfig { num_users: k, num_groups: z, ..ScenarioConfig::default() };
        let model = AcModel::new(cfg.num_aps());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.init_all(&mut store, &mut rng);
        (model, store, cfg)
    }

    #[test]
    fn worst_case_measurement() {
        let all_zero = Array2::zeros((3, 4));
        let (r, k) = measure_worst_case(&all_zero);
        assert_eq!(k, 0);
        assert!(r.iter().all(|&v| v == 0.0));

        let mut w = Array2::from_elem((3, 4), 1u32);
        for t in 0..4 {
            w[[1, t]] = 0;
        }
        let (_, k) = measure_worst_case(&w);
        assert_eq!(k, 1);

        let mut counts = Array2::zeros((1, 200));
        for t in 0..50 {
            counts[[0, t]] = 1;
        }
        let (r, _) = measure_worst_case(&counts);
        assert_relative_eq!(r[0], 0.25);
    }

    #[test]
    fn constant_critic_leaves_weights_unchanged() {
        let (model, mut store, cfg) = setup(4, 2, 1);
        for l in 0..3 {
            let name = format!("rof.w{l}");
            store.get_mut(&name).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        }
        let real = generate_realization(&cfg, 1).unwrap();
        let s = observe_states(&real, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut state =
            OnlineState::init(&model, &store, &s, 2, &mut rng, &CutOptions::default()).unwrap();
        let before = state.w.clone();
        update_weights_online(&mut state, &model, &store, 0, 1e-3).unwrap();
        // Up to sigmoid/logit round-trip noise.
        for (a, b) in before.0.iter().zip(state.w.0.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn update_keeps_weights_in_unit_interval() {
        let (model, store, cfg) = setup(5, 2, 3);
        let real = generate_realization(&cfg, 3).unwrap();
        let s = observe_states(&real, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state =
            OnlineState::init(&model, &store, &s, 2, &mut rng, &CutOptions::default()).unwrap();
        for _ in 0..5 {
            update_weights_online(&mut state, &model, &store, 1, 0.5).unwrap();
        }
        state.w.validate().unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert!(state.w.0[[i, j]] > 0.0 && state.w.0[[i, j]] < 1.0);
                }
            }
        }
    }

    #[test]
    fn update_increases_target_estimate_to_first_order() {
        let (model, store, cfg) = setup(4, 2, 5);
        let real = generate_realization(&cfg, 5).unwrap();
        let s = observe_states(&real, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut state =
            OnlineState::init(&model, &store, &s, 2, &mut rng, &CutOptions::default()).unwrap();
        let k_star = 2;
        let before = crate::actor_critic::critic_forward(&model, &store, &s, &state.w)
            .unwrap()
            .0[k_star];
        update_weights_online(&mut state, &model, &store, k_star, 1e-4).unwrap();
        let after = crate::actor_critic::critic_forward(&model, &store, &s, &state.w)
            .unwrap()
            .0[k_star];
        assert!(after >= before, "Q[k*] {before} -> {after}");
    }

    #[test]
    fn regeneration_blend_arithmetic() {
        let (model, store, cfg) = setup(3, 2, 7);
        let real = generate_realization(&cfg, 7).unwrap();
        let s = observe_states(&real, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let state0 =
            OnlineState::init(&model, &store, &s, 2, &mut rng, &CutOptions::default()).unwrap();

        let mut untouched = state0.clone();
        regenerate_weights(&mut untouched, &model, &store, 0.0).unwrap();
        assert_eq!(untouched.w, state0.w);

        let mut full = state0.clone();
        full.w.0.mapv_inplace(|_| 0.0);
        full.w.0[[0, 1]] = 0.3; // arbitrary stale weights
        regenerate_weights(&mut full, &model, &store, 1.0).unwrap();
        let fresh = actor_weights(&model, &store, &s).unwrap();
        assert_eq!(full.w, fresh);

        let mut blend = state0.clone();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    blend.w.0[[i, j]] = 0.5;
                }
            }
        }
        regenerate_weights(&mut blend, &model, &store, 0.1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_relative_eq!(
                        blend.w.0[[i, j]],
                        0.9 * 0.5 + 0.1 * fresh.0[[i, j]],
                        epsilon = 1e-12
                    );
                }
            }
        }
        assert!(regenerate_weights(&mut blend, &model, &store, 1.5).is_err());
    }

    #[test]
    fn schedule_produces_one_record_per_window() {
        let (model, store, cfg) = setup(4, 2, 9);
        let real = generate_realization(&cfg, 9).unwrap();
        let mac = MacConfig::default();
        let ocfg = OnlineConfig { window: 10, seed: 9, ..OnlineConfig::default() };
        let log = run_online(&real, &model, &store, &ocfg, &cfg, &mac, 30, true).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.iter().map(|r| r.update).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(run_online(&real, &model, &store, &ocfg, &cfg, &mac, 5, true).is_err());
        let bad = OnlineConfig { window: 2, ..ocfg };
        assert!(run_online(&real, &model, &store, &bad, &cfg, &mac, 30, true).is_err());
    }

    #[test]
    fn no_op_updates_match_control_arm() {
        let (model, store, cfg) = setup(4, 2, 10);
        let real = generate_realization(&cfg, 10).unwrap();
        let mac = MacConfig::default();
        let ocfg = OnlineConfig { window: 10, lr: 0.0, lambda: 0.0, seed: 10 };
        let (tuned, fixed) =
            run_online_paired(&real, &model, &store, &ocfg, &cfg, &mac, 40).unwrap();
        assert_eq!(tuned, fixed);
    }

    #[test]
    fn online_runs_are_deterministic() {
        let (model, store, cfg) = setup(4, 2, 11);
        let real = generate_realization(&cfg, 11).unwrap();
        let mac = MacConfig::default();
        let ocfg = OnlineConfig { window: 10, seed: 11, ..OnlineConfig::default() };
        let a = run_online(&real, &model, &store, &ocfg, &cfg, &mac, 30, true).unwrap();
        let b = run_online(&real, &model, &store, &ocfg, &cfg, &mac, 30, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_schema() {
        let log =
            vec![OnlineRecord { update: 1, k_star: 2, worst: 0.1, mean: 0.2, cut_value: 3.5 }];
        let csv = online_csv(&log);
        assert!(csv.starts_with("update_index,k_star,min_throughput,mean_throughput,cut_value\n"));
        assert!(csv.contains("1,2,0.1,0.2,3.5"));
    }
}
