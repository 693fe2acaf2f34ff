//! The learning stack: a sensing-inference network, an edge-weight actor, and
//! a graph-neural critic estimating per-user throughput, with the exact loss
//! gradients used in training and online fine-tuning.

use ndarray::Array2;
use rand::Rng;

use crate::maxcut::EdgeGraph;
use crate::net::{SensingMatrix, StateMatrix};
use crate::nn::{Activation, Gcn, GcnCache, Grads, Mlp, MlpCache, ParamStore};
use crate::{Error, Result};

/// Edge feature channels produced per user pair.
pub const NUM_EDGE_FEATURES: usize = 5;
/// Hidden node feature width.
pub const NUM_NODE_FEATURES: usize = 5;
/// Graph-convolution depth.
pub const NUM_GCN_LAYERS: usize = 3;

/// All network shapes, fixed once the number of APs is known.
#[derive(Debug, Clone)]
pub struct AcModel {
    pub num_aps: usize,
    pub omega: Mlp,
    pub mu_dot: Mlp,
    pub efe: Mlp,
    pub nfe: Mlp,
    /// Indexed `[layer][edge_feature]`.
    pub gcn: Vec<Vec<Gcn>>,
    pub hnfe: Vec<Mlp>,
    pub rof: Mlp,
}

impl AcModel {
    pub fn new(num_aps: usize) -> Self {
        let a = num_aps;
        let (m, e) = (NUM_NODE_FEATURES, NUM_EDGE_FEATURES);
        let em = e * m;
        let gcn = (1..=NUM_GCN_LAYERS)
            .map(|l| {
                (1..=e)
                    .map(|ef| Gcn::new(&format!("gcn_l{l}_e{ef}"), m, m, Activation::Relu))
                    .collect()
            })
            .collect();
        let hnfe = (1..=NUM_GCN_LAYERS)
            .map(|l| {
                Mlp::new(&format!("hnfe_l{l}"), &[em, 10 * em, 10 * em, m], Activation::Relu)
            })
            .collect();
        AcModel {
            num_aps,
            omega: Mlp::new("omega", &[2 * a, 20 * a, 20 * a, 1], Activation::Sigmoid),
            mu_dot: Mlp::new("mu_dot", &[4, 40, 40, 1], Activation::Sigmoid),
            efe: Mlp::new("efe", &[3, 30, 30, e], Activation::Relu),
            nfe: Mlp::new("nfe", &[1, 10, 10, m], Activation::Relu),
            gcn,
            hnfe,
            rof: Mlp::new("rof", &[m + 1, 10 * (m + 1), 10 * (m + 1), 1], Activation::None),
        }
    }

    /// Initialize the inference network only.
    pub fn init_omega(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.omega.init(store, rng);
    }

    /// Initialize actor and critic networks (everything except omega).
    pub fn init_actor_critic(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.mu_dot.init(store, rng);
        self.efe.init(store, rng);
        self.nfe.init(store, rng);
        for layer in &self.gcn {
            for g in layer {
                g.init(store, rng);
            }
        }
        for h in &self.hnfe {
            h.init(store, rng);
        }
        self.rof.init(store, rng);
    }

    pub fn init_all(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.init_omega(store, rng);
        self.init_actor_critic(store, rng);
    }
}

/// Ordered off-diagonal pairs (i, j), row-major.
fn pairs(k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(k * (k - 1));
    for i in 0..k {
        for j in 0..k {
            if i != j {
                out.push((i, j));
            }
        }
    }
    out
}

/// State-derived inputs shared by actor and critic.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub assoc: Vec<usize>,
    /// Per-user normalized loss to its own AP.
    pub s_hat: Vec<f64>,
    /// `i_mat[i][j]` = normalized loss from user i to user j's AP, zero diag.
    pub i_mat: Array2<f64>,
    /// Inferred sensing probabilities, zero diag.
    pub o_mat: Array2<f64>,
}

/// Run the inference network on every ordered pair of state columns.
/// `O[i][j]` estimates the probability that user j senses user i.
pub fn infer_sensing(model: &AcModel, store: &ParamStore, s: &StateMatrix) -> Result<Array2<f64>> {
    let (o, _) = infer_sensing_cached(model, store, s)?;
    Ok(o)
}

fn infer_sensing_cached(
    model: &AcModel,
    store: &ParamStore,
    s: &StateMatrix,
) -> Result<(Array2<f64>, MlpCache)> {
    let a = s.num_aps();
    if a != model.num_aps {
        return Err(Error::ShapeMismatch(format!(
            "state matrix has {a} APs, model built for {}",
            model.num_aps
        )));
    }
    let k = s.num_users();
    let ps = pairs(k);
    let mut x = Array2::zeros((ps.len(), 2 * a));
    for (row, &(i, j)) in ps.iter().enumerate() {
        for ap in 0..a {
            x[[row, ap]] = s.0[[ap, i]];
            x[[row, a + ap]] = s.0[[ap, j]];
        }
    }
    let (y, cache) = model.omega.forward(store, &x)?;
    let mut o = Array2::zeros((k, k));
    for (row, &(i, j)) in ps.iter().enumerate() {
        o[[i, j]] = y[[row, 0]];
    }
    Ok((o, cache))
}

pub fn preprocess(model: &AcModel, store: &ParamStore, s: &StateMatrix) -> Result<Preprocessed> {
    let k = s.num_users();
    let assoc = s.associations();
    let s_hat: Vec<f64> = (0..k).map(|u| s.0[[assoc[u], u]]).collect();
    let mut i_mat = Array2::zeros((k, k));
    for (i, j) in pairs(k) {
        i_mat[[i, j]] = s.0[[assoc[j], i]];
    }
    let o_mat = infer_sensing(model, store, s)?;
    Ok(Preprocessed { assoc, s_hat, i_mat, o_mat })
}

/// Actor: per ordered pair, edge weight from the pair's path-loss summary and
/// inferred sensing probability.
pub fn actor_weights(model: &AcModel, store: &ParamStore, s: &StateMatrix) -> Result<EdgeGraph> {
    let (w, _, _) = actor_weights_cached(model, store, s)?;
    Ok(w)
}

fn actor_weights_cached(
    model: &AcModel,
    store: &ParamStore,
    s: &StateMatrix,
) -> Result<(EdgeGraph, Preprocessed, MlpCache)> {
    let pre = preprocess(model, store, s)?;
    let k = s.num_users();
    let ps = pairs(k);
    let mut x = Array2::zeros((ps.len(), 4));
    for (row, &(i, j)) in ps.iter().enumerate() {
        x[[row, 0]] = pre.s_hat[j];
        x[[row, 1]] = pre.i_mat[[i, j]];
        x[[row, 2]] = pre.s_hat[i];
        x[[row, 3]] = pre.o_mat[[i, j]];
    }
    let (y, cache) = model.mu_dot.forward(store, &x)?;
    let mut w = Array2::zeros((k, k));
    for (row, &(i, j)) in ps.iter().enumerate() {
        w[[i, j]] = y[[row, 0]];
    }
    Ok((EdgeGraph(w), pre, cache))
}

/// Everything the critic backward pass needs.
pub struct CriticCache {
    efe_cache: MlpCache,
    nfe_cache: MlpCache,
    gcn_caches: Vec<Vec<GcnCache>>,
    hnfe_caches: Vec<MlpCache>,
    rof_cache: MlpCache,
    pub q: Vec<f64>,
}

/// Critic: per-user throughput estimates from states and an edge-weight graph.
pub fn critic_forward(
    model: &AcModel,
    store: &ParamStore,
    s: &StateMatrix,
    w: &EdgeGraph,
) -> Result<(Vec<f64>, CriticCache)> {
    let k = s.num_users();
    if w.num_users() != k {
        return Err(Error::ShapeMismatch(format!(
            "edge graph for {} users, states for {k}",
            w.num_users()
        )));
    }
    let pre = preprocess(model, store, s)?;
    let ps = pairs(k);
    let e_feats = NUM_EDGE_FEATURES;

    // Edge feature extraction over all ordered pairs; diagonals stay zero.
    let mut efe_in = Array2::zeros((ps.len(), 3));
    for (row, &(i, j)) in ps.iter().enumerate() {
        efe_in[[row, 0]] = pre.i_mat[[i, j]];
        efe_in[[row, 1]] = pre.o_mat[[i, j]];
        efe_in[[row, 2]] = w.0[[i, j]];
    }
    let (efe_out, efe_cache) = model.efe.forward(store, &efe_in)?;
    let mut g: Vec<Array2<f64>> = (0..e_feats).map(|_| Array2::zeros((k, k))).collect();
    for (row, &(i, j)) in ps.iter().enumerate() {
        for (e, ge) in g.iter_mut().enumerate() {
            ge[[i, j]] = efe_out[[row, e]];
        }
    }

    // Node feature extraction from each user's own-AP loss.
    let nfe_in = Array2::from_shape_fn((k, 1), |(u, _)| pre.s_hat[u]);
    let (mut h, nfe_cache) = model.nfe.forward(store, &nfe_in)?;

    let mut gcn_caches = Vec::with_capacity(NUM_GCN_LAYERS);
    let mut hnfe_caches = Vec::with_capacity(NUM_GCN_LAYERS);
    for l in 0..NUM_GCN_LAYERS {
        let mut layer_caches = Vec::with_capacity(e_feats);
        let mut concat = Array2::zeros((k, e_feats * NUM_NODE_FEATURES));
        for (e, ge) in g.iter().enumerate() {
            let (out, cache) = model.gcn[l][e].forward(store, ge, &h)?;
            for u in 0..k {
                for m in 0..NUM_NODE_FEATURES {
                    concat[[u, e * NUM_NODE_FEATURES + m]] = out[[u, m]];
                }
            }
            layer_caches.push(cache);
        }
        let (next_h, hc) = model.hnfe[l].forward(store, &concat)?;
        h = next_h;
        gcn_caches.push(layer_caches);
        hnfe_caches.push(hc);
    }

    let mut rof_in = Array2::zeros((k, NUM_NODE_FEATURES + 1));
    for u in 0..k {
        for m in 0..NUM_NODE_FEATURES {
            rof_in[[u, m]] = h[[u, m]];
        }
        rof_in[[u, NUM_NODE_FEATURES]] = pre.s_hat[u];
    }
    let (q_out, rof_cache) = model.rof.forward(store, &rof_in)?;
    let q: Vec<f64> = (0..k).map(|u| q_out[[u, 0]]).collect();
    Ok((
        q.clone(),
        CriticCache { efe_cache, nfe_cache, gcn_caches, hnfe_caches, rof_cache, q },
    ))
}

/// Backprop an upstream gradient in the critic outputs. Critic parameter
/// gradients are accumulated into `grads`; the return value is the gradient
/// in the edge-weight graph. Nothing flows into the inference network.
pub fn critic_backward(
    model: &AcModel,
    store: &ParamStore,
    cache: &CriticCache,
    d_q: &[f64],
    grads: &mut Grads,
) -> Result<Array2<f64>> {
    let k = cache.q.len();
    if d_q.len() != k {
        return Err(Error::ShapeMismatch("upstream gradient length".into()));
    }
    let e_feats = NUM_EDGE_FEATURES;
    let m_feats = NUM_NODE_FEATURES;

    let d_q_mat = Array2::from_shape_fn((k, 1), |(u, _)| d_q[u]);
    let d_rof_in = model.rof.backward(store, &cache.rof_cache, &d_q_mat, grads)?;
    // Last column is the raw per-user state input; it carries no learnable
    // upstream, so only the node-feature block propagates.
    let mut d_h = Array2::zeros((k, m_feats));
    for u in 0..k {
        for m in 0..m_feats {
            d_h[[u, m]] = d_rof_in[[u, m]];
        }
    }

    let mut d_g: Vec<Array2<f64>> = (0..e_feats).map(|_| Array2::zeros((k, k))).collect();
    for l in (0..NUM_GCN_LAYERS).rev() {
        let d_concat = model.hnfe[l].backward(store, &cache.hnfe_caches[l], &d_h, grads)?;
        let mut d_h_prev = Array2::zeros((k, m_feats));
        for e in 0..e_feats {
            let mut d_tilde = Array2::zeros((k, m_feats));
            for u in 0..k {
                for m in 0..m_feats {
                    d_tilde[[u, m]] = d_concat[[u, e * m_feats + m]];
                }
            }
            let (dg_e, dh_e) =
                model.gcn[l][e].backward(store, &cache.gcn_caches[l][e], &d_tilde, grads)?;
            d_g[e] += &dg_e;
            d_h_prev += &dh_e;
        }
        d_h = d_h_prev;
    }
    model.nfe.backward(store, &cache.nfe_cache, &d_h, grads)?;

    // Diagonals of the edge-feature graphs were pinned to zero, so their
    // gradients do not reach the extractor.
    let ps = pairs(k);
    let mut d_efe_out = Array2::zeros((ps.len(), e_feats));
    for (row, &(i, j)) in ps.iter().enumerate() {
        for (e, dge) in d_g.iter().enumerate() {
            d_efe_out[[row, e]] = dge[[i, j]];
        }
    }
    let d_efe_in = model.efe.backward(store, &cache.efe_cache, &d_efe_out, grads)?;
    let mut d_w = Array2::zeros((k, k));
    for (row, &(i, j)) in ps.iter().enumerate() {
        d_w[[i, j]] = d_efe_in[[row, 2]];
    }
    Ok(d_w)
}

/// Gradient of a single critic output `Q[k_star]` in the edge weights,
/// leaving all parameters untouched.
pub fn critic_weight_grad(
    model: &AcModel,
    store: &ParamStore,
    s: &StateMatrix,
    w: &EdgeGraph,
    k_star: usize,
) -> Result<Array2<f64>> {
    let (q, cache) = critic_forward(model, store, s, w)?;
    if k_star >= q.len() {
        return Err(Error::InvalidArgument(format!("user index {k_star} out of range")));
    }
    let mut d_q = vec![0.0; q.len()];
    d_q[k_star] = 1.0;
    let mut scratch = Grads::new();
    critic_backward(model, store, &cache, &d_q, &mut scratch)
}

/// Binary cross-entropy between the measured sensing relation and the
/// inference network's output, with gradients for the inference network.
pub fn inference_loss_grad(
    model: &AcModel,
    store: &ParamStore,
    s: &StateMatrix,
    o_hat: &SensingMatrix,
) -> Result<(f64, Grads)> {
    let k = s.num_users();
    if o_hat.0.nrows() != k {
        return Err(Error::ShapeMismatch("sensing matrix size".into()));
    }
    let (o, cache) = infer_sensing_cached(model, store, s)?;
    let ps = pairs(k);
    let mut loss = 0.0;
    let mut d_out = Array2::zeros((ps.len(), 1));
    let clamp = 1e-12;
    for (row, &(i, j)) in ps.iter().enumerate() {
        let target = o_hat.0[[i, j]];
        let p = o[[i, j]].clamp(clamp, 1.0 - clamp);
        loss += -target * p.ln() - (1.0 - target) * (1.0 - p).ln();
        d_out[[row, 0]] = -target / p + (1.0 - target) / (1.0 - p);
    }
    let mut grads = Grads::new();
    model.omega.backward(store, &cache, &d_out, &mut grads)?;
    Ok((loss, grads))
}

/// Index of the smallest value, lowest index on ties.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Squared-error critic loss against measured throughputs; gradients touch
/// only critic parameters. Returns the loss, gradients, and the estimates.
pub fn critic_loss_grad(
    model: &AcModel,
    store: &ParamStore,
    s: &StateMatrix,
    w: &EdgeGraph,
    r: &[f64],
) -> Result<(f64, Grads, Vec<f64>)> {
    let (q, cache) = critic_forward(model, store, s, w)?;
    if r.len() != q.len() {
        return Err(Error::ShapeMismatch("throughput vector length".into()));
    }
    let loss: f64 = r.iter().zip(&q).map(|(rv, qv)| (rv - qv).powi(2)).sum();
    let d_q: Vec<f64> = r.iter().zip(&q).map(|(rv, qv)| -2.0 * (rv - qv)).collect();
    let mut grads = Grads::new();
    critic_backward(model, store, &cache, &d_q, &mut grads)?;
    Ok((loss, grads, q))
}

/// Actor loss `-min_k Q_k` on the actor's own edge weights; gradients flow
/// through the critic into the actor network only (critic and inference
/// parameters frozen). Returns the loss, actor gradients, and the weights.
pub fn actor_loss_grad(
    model: &AcModel,
    store: &ParamStore,
    s: &StateMatrix,
) -> Result<(f64, Grads, EdgeGraph)> {
    let (w, _, mu_cache) = actor_weights_cached(model, store, s)?;
    let (q, cache) = critic_forward(model, store, s, &w)?;
    let k_star = argmin(&q);
    let loss = -q[k_star];
    let mut d_q = vec![0.0; q.len()];
    d_q[k_star] = -1.0;
    let mut scratch = Grads::new();
    let d_w = critic_backward(model, store, &cache, &d_q, &mut scratch)?;
    let ps = pairs(s.num_users());
    let mut d_mu_out = Array2::zeros((ps.len(), 1));
    for (row, &(i, j)) in ps.iter().enumerate() {
        d_mu_out[[row, 0]] = d_w[[i, j]];
    }
    let mut grads = Grads::new();
    model.mu_dot.backward(store, &mu_cache, &d_mu_out, &mut grads)?;
    Ok((loss, grads, w))
}
