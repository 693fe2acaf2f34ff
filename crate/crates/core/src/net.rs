//! Network model: geometry, Friis path losses, associations, finite-blocklength
//! packet durations, observable (censored, normalized) states, ground-truth
//! sensing relations, and user mobility.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Scenario parameters. Defaults reproduce the reference HaLow setup:
/// a 2 km x 2 km area, 4 APs on a grid, 1 MHz channel at 1 GHz.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Half width of the square area in meters (area is `[-w, w]^2`).
    pub area_half_width: f64,
    /// AP coordinates in meters.
    pub ap_positions: Vec<[f64; 2]>,
    /// Number of users K.
    pub num_users: usize,
    /// Carrier frequency in Hz.
    pub carrier_freq: f64,
    /// Channel bandwidth B in Hz.
    pub bandwidth: f64,
    /// User transmit power P0 in dBm.
    pub tx_power_dbm: f64,
    /// Total noise power N0*B in dBm.
    pub noise_power_dbm: f64,
    /// Sensing/measurability path-loss threshold in dB.
    pub sense_threshold_db: f64,
    /// Packet size L in bits.
    pub packet_bits: f64,
    /// Maximum decoding error probability without interference.
    pub max_error: f64,
    /// Queue capacity in packets.
    pub queue_capacity: usize,
    /// Mean Poisson packet inter-arrival time in seconds.
    pub arrival_interval_mean: f64,
    /// RAW slot duration in seconds.
    pub raw_slot_duration: f64,
    /// Number of RAW groups Z (power of two).
    pub num_groups: usize,
    /// User speed in m/s (0 = static).
    pub mobility_speed: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            area_half_width: 1000.0,
            ap_positions: vec![
                [500.0, 500.0],
                [-500.0, 500.0],
                [500.0, -500.0],
                [-500.0, -500.0],
            ],
            num_users: 20,
            carrier_freq: 1e9,
            bandwidth: 1e6,
            tx_power_dbm: 0.0,
            noise_power_dbm: -94.0,
            sense_threshold_db: 95.0,
            packet_bits: 800.0,
            max_error: 1e-5,
            queue_capacity: 5,
            arrival_interval_mean: 20e-3,
            raw_slot_duration: 10e-3,
            num_groups: 4,
            mobility_speed: 0.0,
        }
    }
}

impl ScenarioConfig {
    pub fn num_aps(&self) -> usize {
        self.ap_positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users < 1 {
            return Err(Error::InvalidArgument("num_users must be >= 1".into()));
        }
        if self.ap_positions.is_empty() {
            return Err(Error::InvalidArgument("at least one AP required".into()));
        }
        if self.num_groups == 0 || !self.num_groups.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "num_groups must be a power of 2, got {}",
                self.num_groups
            )));
        }
        if self.queue_capacity < 1 {
            return Err(Error::InvalidArgument("queue_capacity must be >= 1".into()));
        }
        let finite = [
            self.area_half_width,
            self.carrier_freq,
            self.bandwidth,
            self.tx_power_dbm,
            self.noise_power_dbm,
            self.sense_threshold_db,
            self.packet_bits,
            self.max_error,
            self.arrival_interval_mean,
            self.raw_slot_duration,
            self.mobility_speed,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite scenario parameter".into()));
        }
        if self.area_half_width <= 0.0
            || self.carrier_freq <= 0.0
            || self.bandwidth <= 0.0
            || self.packet_bits <= 0.0
            || self.arrival_interval_mean <= 0.0
            || self.raw_slot_duration <= 0.0
        {
            return Err(Error::InvalidArgument("scenario durations/sizes must be positive".into()));
        }
        if self.mobility_speed < 0.0 {
            return Err(Error::InvalidArgument("mobility_speed must be >= 0".into()));
        }
        Ok(())
    }
}

/// Ground-truth network geometry and derived per-user quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkRealization {
    /// K x 2 user positions in meters.
    pub user_positions: Array2<f64>,
    /// A x 2 AP positions in meters.
    pub ap_positions: Array2<f64>,
    /// K x A positive path-loss attenuation in dB.
    pub user_ap_loss: Array2<f64>,
    /// K x K symmetric user-to-user path loss in dB (diagonal unused, 0).
    pub user_user_loss: Array2<f64>,
    /// Associated AP index per user (argmin path loss, lowest index on ties).
    pub assoc: Vec<usize>,
    /// Packet duration per user in seconds.
    pub packet_duration: Vec<f64>,
    /// Interference-free SNR per user (linear).
    pub snr: Vec<f64>,
    /// Mobility heading per user in radians.
    pub headings: Vec<f64>,
}

impl NetworkRealization {
    pub fn num_users(&self) -> usize {
        self.assoc.len()
    }

    pub fn num_aps(&self) -> usize {
        self.ap_positions.nrows()
    }
}

/// Observable A x K state matrix, censored at the sensing threshold and
/// normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMatrix(pub Array2<f64>);

impl StateMatrix {
    pub fn num_aps(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_users(&self) -> usize {
        self.0.ncols()
    }

    /// Association of each user derived from the observed states alone
    /// (argmin per column, lowest index on ties).
    pub fn associations(&self) -> Vec<usize> {
        (0..self.num_users())
            .map(|k| {
                let col: Vec<f64> = self.0.column(k).to_vec();
                associate(&col).expect("state matrix has at least one AP row")
            })
            .collect()
    }
}

/// K x K binary ground-truth sensing relation, zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingMatrix(pub Array2<f64>);

/// Free-space attenuation `20*log10(4*pi*d*f/c)` in dB.
pub fn friis_path_loss(distance_m: f64, freq_hz: f64) -> Result<f64> {
    if distance_m <= 0.0 || freq_hz <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "friis_path_loss requires d > 0 and f > 0, got d={distance_m}, f={freq_hz}"
        )));
    }
    Ok(20.0 * (4.0 * std::f64::consts::PI * distance_m * freq_hz / SPEED_OF_LIGHT).log10())
}

/// Standard-normal tail probability `Q(x) = 0.5*erfc(x/sqrt(2))`.
pub fn q_function(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2)
}

/// Linear SNR from dBm/dB budget terms.
pub fn snr_linear(tx_power_dbm: f64, loss_db: f64, noise_power_dbm: f64) -> f64 {
    10f64.powf((tx_power_dbm - loss_db - noise_power_dbm) / 10.0)
}

/// Finite-blocklength decoding error probability without interference.
pub fn decode_error_prob(snr: f64, duration_s: f64, packet_bits: f64, bandwidth_hz: f64) -> f64 {
    debug_assert!(snr > 0.0 && duration_s > 0.0);
    let dispersion = 1.0 - 1.0 / (1.0 + snr).powi(2);
    let num = -packet_bits * std::f64::consts::LN_2 + duration_s * bandwidth_hz * (1.0 + snr).ln();
    q_function(num / (duration_s * bandwidth_hz * dispersion).sqrt())
}

/// Discrete MCS ladder: 16 packet durations, geometric from 100 us to 8 ms.
pub fn mcs_ladder() -> Vec<f64> {
    let lo: f64 = 100e-6;
    let hi: f64 = 8e-3;
    let n = 16usize;
    let ratio = (hi / lo).powf(1.0 / (n as f64 - 1.0));
    (0..n).map(|i| lo * ratio.powi(i as i32)).collect()
}

/// Smallest ladder duration meeting the error target for the given path loss
/// to the associated AP.
pub fn select_packet_duration(loss_to_assoc_db: f64, cfg: &ScenarioConfig) -> Result<f64> {
    let snr = snr_linear(cfg.tx_power_dbm, loss_to_assoc_db, cfg.noise_power_dbm);
    for d in mcs_ladder() {
        if decode_error_prob(snr, d, cfg.packet_bits, cfg.bandwidth) <= cfg.max_error {
            return Ok(d);
        }
    }
    Err(Error::Unservable { user: usize::MAX, loss_db: loss_to_assoc_db })
}

/// Index of the minimum path loss; ties break to the lowest index.
pub fn associate(loss_row: &[f64]) -> Result<usize> {
    if loss_row.is_empty() {
        return Err(Error::InvalidArgument("associate: empty loss row".into()));
    }
    let mut best = 0;
    for (a, &v) in loss_row.iter().enumerate() {
        if v < loss_row[best] {
            best = a;
        }
    }
    Ok(best)
}

fn dist(p: [f64; 2], q: [f64; 2]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

fn derive_losses(
    positions: &Array2<f64>,
    headings: Vec<f64>,
    cfg: &ScenarioConfig,
) -> Result<NetworkRealization> {
    let k_users = positions.nrows();
    let a_aps = cfg.num_aps();
    let ap_positions =
        Array2::from_shape_fn((a_aps, 2), |(a, c)| cfg.ap_positions[a][c]);

    let mut user_ap_loss = Array2::zeros((k_users, a_aps));
    for k in 0..k_users {
        for a in 0..a_aps {
            let d = dist([positions[[k, 0]], positions[[k, 1]]], cfg.ap_positions[a]);
            user_ap_loss[[k, a]] = friis_path_loss(d, cfg.carrier_freq)?;
        }
    }
    let mut user_user_loss = Array2::zeros((k_users, k_users));
    for i in 0..k_users {
        for j in (i + 1)..k_users {
            let d = dist(
                [positions[[i, 0]], positions[[i, 1]]],
                [positions[[j, 0]], positions[[j, 1]]],
            );
            // Coincident users: treat as zero-loss (always mutually sensed).
            let loss = if d > 0.0 { friis_path_loss(d, cfg.carrier_freq)?.max(0.0) } else { 0.0 };
            user_user_loss[[i, j]] = loss;
            user_user_loss[[j, i]] = loss;
        }
    }

    let mut assoc = Vec::with_capacity(k_users);
    let mut packet_duration = Vec::with_capacity(k_users);
    let mut snr = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let row: Vec<f64> = user_ap_loss.row(k).to_vec();
        let a = associate(&row)?;
        assoc.push(a);
        let loss = user_ap_loss[[k, a]];
        let d = select_packet_duration(loss, cfg).map_err(|e| match e {
            Error::Unservable { loss_db, .. } => Error::Unservable { user: k, loss_db },
            other => other,
        })?;
        packet_duration.push(d);
        snr.push(snr_linear(cfg.tx_power_dbm, loss, cfg.noise_power_dbm));
    }

    Ok(NetworkRealization {
        user_positions: positions.clone(),
        ap_positions,
        user_ap_loss,
        user_user_loss,
        assoc,
        packet_duration,
        snr,
        headings,
    })
}

/// Draw a uniform realization of user positions and derive all losses,
/// associations, and packet durations. Deterministic for a fixed seed.
pub fn generate_realization(cfg: &ScenarioConfig, seed: u64) -> Result<NetworkRealization> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_realization_with(cfg, &mut rng)
}

/// Same as [`generate_realization`] but draws from a caller-owned RNG.
pub fn generate_realization_with(
    cfg: &ScenarioConfig,
    rng: &mut impl Rng,
) -> Result<NetworkRealization> {
    let k_users = cfg.num_users;
    let w = cfg.area_half_width;
    let mut positions = Array2::zeros((k_users, 2));
    for k in 0..k_users {
        loop {
            let x = rng.gen_range(-w..=w);
            let y = rng.gen_range(-w..=w);
            if cfg.ap_positions.iter().any(|p| p[0] == x && p[1] == y) {
                continue;
            }
            positions[[k, 0]] = x;
            positions[[k, 1]] = y;
            break;
        }
    }
    let headings: Vec<f64> =
        (0..k_users).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    derive_losses(&positions, headings, cfg)
}

/// Censor immeasurable losses at `2*s_max` and normalize to `[-1, 1]`.
pub fn observe_states(real: &NetworkRealization, cfg: &ScenarioConfig) -> StateMatrix {
    let smax = cfg.sense_threshold_db;
    let k_users = real.num_users();
    let a_aps = real.num_aps();
    let mut s = Array2::zeros((a_aps, k_users));
    for k in 0..k_users {
        for a in 0..a_aps {
            let raw = real.user_ap_loss[[k, a]];
            let censored = if raw <= smax { raw } else { 2.0 * smax };
            s[[a, k]] = (censored / smax - 1.0).max(-1.0);
        }
    }
    StateMatrix(s)
}

/// Binary sensing relation: `O[i][j] = 1` iff user j can sense user i.
pub fn sensing_matrix(real: &NetworkRealization, cfg: &ScenarioConfig) -> SensingMatrix {
    let k_users = real.num_users();
    let mut o = Array2::zeros((k_users, k_users));
    for i in 0..k_users {
        for j in 0..k_users {
            if i != j && real.user_user_loss[[i, j]] <= cfg.sense_threshold_db {
                o[[i, j]] = 1.0;
            }
        }
    }
    SensingMatrix(o)
}

/// Advance each user `speed*dt` meters along its heading, resampling headings
/// toward the interior on boundary contact, and recompute all derived fields.
pub fn step_mobility(
    real: &NetworkRealization,
    dt: f64,
    speed: f64,
    cfg: &ScenarioConfig,
    rng: &mut impl Rng,
) -> Result<NetworkRealization> {
    if speed < 0.0 || dt < 0.0 {
        return Err(Error::InvalidArgument("step_mobility: speed and dt must be >= 0".into()));
    }
    if speed == 0.0 || dt == 0.0 {
        return Ok(real.clone());
    }
    let w = cfg.area_half_width;
    let step = speed * dt;
    let mut positions = real.user_positions.clone();
    let mut headings = real.headings.clone();
    for k in 0..real.num_users() {
        let (x, y) = (positions[[k, 0]], positions[[k, 1]]);
        let mut theta = headings[k];
        let mut nx = x + step * theta.cos();
        let mut ny = y + step * theta.sin();
        if nx.abs() > w || ny.abs() > w {
            // Boundary contact: pick a new heading whose full step lands
            // strictly inside; a few rejection draws always suffice because
            // at least a half-plane of headings points inward.
            let mut tries = 0;
            loop {
                theta = rng.gen_range(0.0..std::f64::consts::TAU);
                nx = x + step * theta.cos();
                ny = y + step * theta.sin();
                if nx.abs() < w && ny.abs() < w {
                    break;
                }
                tries += 1;
                if tries > 256 {
                    // Degenerate geometry (step larger than the area); head
                    // straight at the center.
                    theta = (-y).atan2(-x);
                    nx = x + step * theta.cos();
                    ny = y + step * theta.sin();
                    break;
                }
            }
        }
        positions[[k, 0]] = nx;
        positions[[k, 1]] = ny;
        headings[k] = theta;
    }
    derive_losses(&positions, headings, cfg)
}
