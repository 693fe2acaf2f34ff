//! Comparison grouping policies: random and round-robin heuristics, plus
//! fixed-rule edge weights (contention, hidden-pair, and interference based)
//! fed into the same max-cut machinery.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actor_critic::{infer_sensing, AcModel};
use crate::maxcut::EdgeGraph;
use crate::net::{ScenarioConfig, StateMatrix};
use crate::nn::ParamStore;
use crate::sim::GroupAssignment;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Rand,
    Unif,
    Mcon,
    Mhid,
    Mint,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rand" => Ok(BaselineKind::Rand),
            "unif" => Ok(BaselineKind::Unif),
            "mcon" => Ok(BaselineKind::Mcon),
            "mhid" => Ok(BaselineKind::Mhid),
            "mint" => Ok(BaselineKind::Mint),
            other => Err(Error::InvalidArgument(format!("unknown baseline {other:?}"))),
        }
    }
}

/// Uniform i.i.d. group labels in `1..=num_groups`.
pub fn rand_group(num_users: usize, num_groups: usize, rng: &mut impl Rng) -> GroupAssignment {
    GroupAssignment((0..num_users).map(|_| rng.gen_range(1..=num_groups)).collect())
}

/// Round-robin labels over users stably sorted by associated-AP index.
pub fn unif_group(s: &StateMatrix, num_groups: usize) -> GroupAssignment {
    let assoc = s.associations();
    let mut order: Vec<usize> = (0..assoc.len()).collect();
    order.sort_by_key(|&k| assoc[k]);
    let mut z = vec![0usize; assoc.len()];
    for (i, &k) in order.iter().enumerate() {
        z[k] = ((i + 1) % num_groups) + 1;
    }
    GroupAssignment(z)
}

/// Fixed-rule edge weights. Contention (MCON) uses the inferred sensing
/// probabilities directly, hidden (MHID) their complements, and interference
/// (MINT) a pairwise SINR estimate from the censored unnormalized losses,
/// rescaled to `[0,1]` by the instance maximum.
pub fn fixed_rule_weights(
    kind: BaselineKind,
    s: &StateMatrix,
    model: &AcModel,
    store: &ParamStore,
    cfg: &ScenarioConfig,
) -> Result<EdgeGraph> {
    let k = s.num_users();
    let graph = match kind {
        BaselineKind::Rand | BaselineKind::Unif => {
            return Err(Error::InvalidArgument(format!("{kind:?} is not a weight-based scheme")))
        }
        BaselineKind::Mcon => EdgeGraph(infer_sensing(model, store, s)?),
        BaselineKind::Mhid => {
            let o = infer_sensing(model, store, s)?;
            let mut w = Array2::zeros((k, k));
            for i in 0..k {
                for j in 0..k {
                    if i != j {
                        w[[i, j]] = 1.0 - o[[i, j]];
                    }
                }
            }
            EdgeGraph(w)
        }
        BaselineKind::Mint => {
            let assoc = s.associations();
            let smax = cfg.sense_threshold_db;
            // Undo the state normalization back to censored dB, then to
            // linear attenuation.
            let loss_db = |user: usize, ap: usize| (s.0[[ap, user]] + 1.0) * smax;
            let p0 = 10f64.powf(cfg.tx_power_dbm / 10.0);
            let noise = 10f64.powf(cfg.noise_power_dbm / 10.0);
            let mut w = Array2::zeros((k, k));
            let mut max_w = 0.0f64;
            for i in 0..k {
                for j in 0..k {
                    if i == j {
                        continue;
                    }
                    let sig = p0 / 10f64.powf(loss_db(j, assoc[j]) / 10.0);
                    let interf = p0 / 10f64.powf(loss_db(i, assoc[j]) / 10.0);
                    w[[i, j]] = sig / (noise + interf);
                    max_w = max_w.max(w[[i, j]]);
                }
            }
            if max_w > 0.0 {
                w.mapv_inplace(|v| v / max_w);
            }
            EdgeGraph(w)
        }
    };
    graph.validate()?;
    Ok(graph)
}
