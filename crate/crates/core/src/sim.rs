//! Slotted CSMA/CA simulator for RAW-scheduled uplink traffic.
//!
//! Time inside each RAW slot is stepped at MAC-slot granularity, which gives
//! exact backoff-freeze semantics without an event calendar. Carrier sensing
//! is a binary threshold on pairwise path loss, so users beyond the threshold
//! are hidden from each other and their overlapping transmissions interfere
//! at the receiving AP. Reception success is a Bernoulli draw with error
//! probability from the finite-blocklength model evaluated at the worst-case
//! SINR over the packet's airtime.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::net::{
    decode_error_prob, observe_states, step_mobility, NetworkRealization, ScenarioConfig,
    StateMatrix,
};
use crate::{Error, Result};

/// Per-user RAW group labels in `{1..Z}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment(pub Vec<usize>);

impl GroupAssignment {
    pub fn validate(&self, num_groups: usize) -> Result<()> {
        for (k, &z) in self.0.iter().enumerate() {
            if z < 1 || z > num_groups {
                return Err(Error::InvalidArgument(format!(
                    "group label {z} of user {k} outside 1..={num_groups}"
                )));
            }
        }
        Ok(())
    }
}

/// DCF timing constants. Defaults are 802.11ah 1-MHz-class values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MacConfig {
    pub cw_min: u32,
    pub cw_max: u32,
    /// MAC slot (tick) duration in seconds.
    pub mac_slot: f64,
    pub difs: f64,
    pub sifs: f64,
    pub ack_duration: f64,
    pub max_retries: u32,
}

impl Default for MacConfig {
    fn default() -> Self {
        Self {
            cw_min: 15,
            cw_max: 1023,
            mac_slot: 52e-6,
            difs: 264e-6,
            sifs: 160e-6,
            ack_duration: 240e-6,
            max_retries: 7,
        }
    }
}

impl MacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cw_min > self.cw_max {
            return Err(Error::InvalidArgument("cw_min must be <= cw_max".into()));
        }
        if self.mac_slot <= 0.0 || self.difs <= 0.0 || self.sifs <= 0.0 || self.ack_duration <= 0.0
        {
            return Err(Error::InvalidArgument("MAC durations must be positive".into()));
        }
        Ok(())
    }
}

/// Per-user counters accumulated over a simulation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserCounters {
    pub arrived: u64,
    pub delivered: u64,
    /// Packets discarded because the queue was full on arrival.
    pub overflow_drops: u64,
    /// Packets discarded after exhausting retries.
    pub retry_drops: u64,
    pub attempts: u64,
    /// Failed attempts where some overlapping interferer was sensable
    /// (equal-backoff collision).
    pub collision_failures: u64,
    /// Failed attempts where all overlapping interferers were hidden.
    pub interference_failures: u64,
    /// Failed attempts with no overlap at all (pure noise).
    pub noise_failures: u64,
}

/// Simulation output: per-slot success counts and derived rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    /// K x T success counts per RAW slot.
    pub successes: Array2<u32>,
    /// Per-slot average delivery rate per user (packets/slot).
    pub rates: Vec<f64>,
    pub counters: Vec<UserCounters>,
    /// Packets still queued when the run ended.
    pub residual_queue: Vec<usize>,
}

impl ThroughputReport {
    /// CSV with columns `user,slot,successes`.
    pub fn successes_csv(&self) -> String {
        let mut out = String::from("user,slot,successes\n");
        for k in 0..self.successes.nrows() {
            for t in 0..self.successes.ncols() {
                out.push_str(&format!("{},{},{}\n", k + 1, t + 1, self.successes[[k, t]]));
            }
        }
        out
    }

    /// JSON summary with the rate vector and counters.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rates": self.rates,
            "counters": self.counters,
            "residual_queue": self.residual_queue,
        })
    }
}

struct ActiveTx {
    /// First tick after the data portion.
    data_end: usize,
    /// First tick after data + SIFS + ACK.
    busy_end: usize,
    /// Worst (largest) interference power in mW seen over any data tick.
    max_interference_mw: f64,
    saw_sensable_interferer: bool,
    saw_hidden_interferer: bool,
}

/// Stateful simulator; queues, backoff state, and arrival processes persist
/// across [`Simulator::advance`] calls so runs can be driven window by window.
pub struct Simulator {
    real: NetworkRealization,
    cfg: ScenarioConfig,
    mac: MacConfig,
    rng: ChaCha8Rng,
    mobility_rng: ChaCha8Rng,
    arrival_rngs: Vec<ChaCha8Rng>,
    next_arrival: Vec<f64>,
    queue_len: Vec<usize>,
    cw: Vec<u32>,
    retry: Vec<u32>,
    backoff: Vec<Option<u32>>,
    difs_progress: Vec<u32>,
    tx: Vec<Option<ActiveTx>>,
    pub counters: Vec<UserCounters>,
    /// Global 0-based RAW slot index of the next slot to simulate.
    slot_index: usize,
    // Caches derived from the realization; rebuilt after mobility steps.
    power_at_ap_mw: Array2<f64>,
    sensable: Array2<bool>,
    noise_mw: f64,
    ticks_per_slot: usize,
    difs_ticks: u32,
}

impl Simulator {
    pub fn new(
        real: &NetworkRealization,
        cfg: &ScenarioConfig,
        mac: &MacConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        mac.validate()?;
        let k_users = real.num_users();
        let ticks_per_slot = (cfg.raw_slot_duration / mac.mac_slot).floor() as usize;
        if ticks_per_slot == 0 {
            return Err(Error::InvalidArgument("raw_slot_duration shorter than a MAC slot".into()));
        }
        let arrival_rngs: Vec<ChaCha8Rng> = (0..k_users)
            .map(|k| ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(k as u64 + 1))))
            .collect();
        let mut sim = Self {
            real: real.clone(),
            cfg: cfg.clone(),
            mac: mac.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            mobility_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5DEE_CE66)),
            arrival_rngs,
            next_arrival: vec![0.0; k_users],
            queue_len: vec![0; k_users],
            cw: vec![mac.cw_min; k_users],
            retry: vec![0; k_users],
            backoff: vec![None; k_users],
            difs_progress: vec![0; k_users],
            tx: (0..k_users).map(|_| None).collect(),
            counters: vec![UserCounters::default(); k_users],
            slot_index: 0,
            power_at_ap_mw: Array2::zeros((0, 0)),
            sensable: Array2::from_elem((0, 0), false),
            noise_mw: 10f64.powf(cfg.noise_power_dbm / 10.0),
            ticks_per_slot,
            difs_ticks: (mac.difs / mac.mac_slot).round() as u32,
        };
        for k in 0..k_users {
            let draw = sim.draw_interarrival(k);
            sim.next_arrival[k] = draw;
        }
        sim.rebuild_caches();
        Ok(sim)
    }

    pub fn realization(&self) -> &NetworkRealization {
        &self.real
    }

    /// Current observable states of the (possibly moved) realization.
    pub fn observe(&self) -> StateMatrix {
        observe_states(&self.real, &self.cfg)
    }

    fn draw_interarrival(&mut self, k: usize) -> f64 {
        let u: f64 = self.arrival_rngs[k].gen_range(f64::EPSILON..1.0);
        -self.cfg.arrival_interval_mean * u.ln()
    }

    fn rebuild_caches(&mut self) {
        let k_users = self.real.num_users();
        let a_aps = self.real.num_aps();
        self.power_at_ap_mw = Array2::from_shape_fn((k_users, a_aps), |(k, a)| {
            10f64.powf((self.cfg.tx_power_dbm - self.real.user_ap_loss[[k, a]]) / 10.0)
        });
        self.sensable = Array2::from_shape_fn((k_users, k_users), |(i, j)| {
            i != j && self.real.user_user_loss[[i, j]] <= self.cfg.sense_threshold_db
        });
    }

    fn process_arrivals(&mut self, abs_time: f64) {
        for k in 0..self.real.num_users() {
            while self.next_arrival[k] <= abs_time {
                self.counters[k].arrived += 1;
                if self.queue_len[k] >= self.cfg.queue_capacity {
                    // Oldest packet is discarded; length stays at capacity.
                    self.counters[k].overflow_drops += 1;
                } else {
                    self.queue_len[k] += 1;
                }
                let draw = self.draw_interarrival(k);
                self.next_arrival[k] += draw;
            }
        }
    }

    /// Simulate `n_slots` RAW slots under grouping `z`; returns K x n_slots
    /// success counts.
    pub fn advance(&mut self, n_slots: usize, z: &GroupAssignment) -> Result<Array2<u32>> {
        let k_users = self.real.num_users();
        if z.0.len() != k_users {
            return Err(Error::ShapeMismatch(format!(
                "grouping has {} labels for {} users",
                z.0.len(),
                k_users
            )));
        }
        z.validate(self.cfg.num_groups)?;
        let mut successes = Array2::zeros((k_users, n_slots));

        for local_t in 0..n_slots {
            let t = self.slot_index + 1; // 1-based global slot index
            if self.cfg.mobility_speed > 0.0 {
                self.real = step_mobility(
                    &self.real,
                    self.cfg.raw_slot_duration,
                    self.cfg.mobility_speed,
                    &self.cfg,
                    &mut self.mobility_rng,
                )?;
                self.rebuild_caches();
            }
            let group = ((t - 1) % self.cfg.num_groups) + 1;
            let slot_start = (t - 1) as f64 * self.cfg.raw_slot_duration;

            // Slot boundaries reset DIFS progress; backoff counters persist.
            for k in 0..k_users {
                self.difs_progress[k] = 0;
            }

            for tick in 0..self.ticks_per_slot {
                let abs_time = slot_start + tick as f64 * self.mac.mac_slot;
                self.process_arrivals(abs_time);

                // Channel state from transmissions already in flight.
                let in_flight: Vec<usize> =
                    (0..k_users).filter(|&k| self.tx[k].is_some()).collect();
                let sensed_busy: Vec<bool> = (0..k_users)
                    .map(|k| in_flight.iter().any(|&j| j != k && self.sensable[[k, j]]))
                    .collect();

                // Contention decisions; simultaneous expiries all start.
                let mut starts: Vec<usize> = Vec::new();
                for k in 0..k_users {
                    if z.0[k] != group || self.tx[k].is_some() || self.queue_len[k] == 0 {
                        continue;
                    }
                    if sensed_busy[k] {
                        self.difs_progress[k] = 0;
                        continue;
                    }
                    if self.difs_progress[k] < self.difs_ticks {
                        self.difs_progress[k] += 1;
                        continue;
                    }
                    let b = match self.backoff[k] {
                        Some(b) => b,
                        None => {
                            let b = self.rng.gen_range(0..=self.cw[k]);
                            self.backoff[k] = Some(b);
                            b
                        }
                    };
                    if b > 0 {
                        self.backoff[k] = Some(b - 1);
                        continue;
                    }
                    // Backoff expired: transmit only if the exchange fits in
                    // the remaining slot time, otherwise defer to the next
                    // owned slot.
                    let airtime = self.real.packet_duration[k]
                        + self.mac.sifs
                        + self.mac.ack_duration;
                    let needed = (airtime / self.mac.mac_slot).ceil() as usize;
                    if tick + needed > self.ticks_per_slot {
                        continue;
                    }
                    starts.push(k);
                }
                for &k in &starts {
                    let data_ticks =
                        (self.real.packet_duration[k] / self.mac.mac_slot).ceil() as usize;
                    let airtime = self.real.packet_duration[k]
                        + self.mac.sifs
                        + self.mac.ack_duration;
                    let needed = (airtime / self.mac.mac_slot).ceil() as usize;
                    self.counters[k].attempts += 1;
                    self.backoff[k] = None;
                    self.difs_progress[k] = 0;
                    self.tx[k] = Some(ActiveTx {
                        data_end: tick + data_ticks,
                        busy_end: tick + needed,
                        max_interference_mw: 0.0,
                        saw_sensable_interferer: false,
                        saw_hidden_interferer: false,
                    });
                }

                // Interference among concurrent data portions.
                let data_active: Vec<usize> = (0..k_users)
                    .filter(|&k| self.tx[k].as_ref().is_some_and(|tx| tick < tx.data_end))
                    .collect();
                for &k in &data_active {
                    let ap = self.real.assoc[k];
                    let mut interf = 0.0;
                    let mut sensable_hit = false;
                    let mut hidden_hit = false;
                    for &j in &data_active {
                        if j == k {
                            continue;
                        }
                        interf += self.power_at_ap_mw[[j, ap]];
                        if self.sensable[[k, j]] {
                            sensable_hit = true;
                        } else {
                            hidden_hit = true;
                        }
                    }
                    let tx = self.tx[k].as_mut().unwrap();
                    if interf > tx.max_interference_mw {
                        tx.max_interference_mw = interf;
                    }
                    tx.saw_sensable_interferer |= sensable_hit;
                    tx.saw_hidden_interferer |= hidden_hit;
                }

                // Completions at the end of this tick.
                for k in 0..k_users {
                    let done = self.tx[k].as_ref().is_some_and(|tx| tick + 1 == tx.busy_end);
                    if !done {
                        continue;
                    }
                    let tx = self.tx[k].take().unwrap();
                    let ap = self.real.assoc[k];
                    let sinr = self.power_at_ap_mw[[k, ap]]
                        / (self.noise_mw + tx.max_interference_mw);
                    let err = decode_error_prob(
                        sinr,
                        self.real.packet_duration[k],
                        self.cfg.packet_bits,
                        self.cfg.bandwidth,
                    );
                    let success = self.rng.gen_range(0.0..1.0) >= err;
                    if success {
                        self.counters[k].delivered += 1;
                        self.queue_len[k] -= 1;
                        successes[[k, local_t]] += 1;
                        self.cw[k] = self.mac.cw_min;
                        self.retry[k] = 0;
                    } else {
                        if tx.saw_sensable_interferer {
                            self.counters[k].collision_failures += 1;
                        } else if tx.saw_hidden_interferer {
                            self.counters[k].interference_failures += 1;
                        } else {
                            self.counters[k].noise_failures += 1;
                        }
                        self.retry[k] += 1;
                        if self.retry[k] > self.mac.max_retries {
                            self.queue_len[k] -= 1;
                            self.counters[k].retry_drops += 1;
                            self.retry[k] = 0;
                            self.cw[k] = self.mac.cw_min;
                        } else {
                            self.cw[k] = (2 * self.cw[k] + 1).min(self.mac.cw_max);
                        }
                    }
                }
            }

            // No transmission straddles a slot boundary.
            debug_assert!(self.tx.iter().all(|t| t.is_none()));
            // Conservation at every slot boundary.
            #[cfg(debug_assertions)]
            for k in 0..k_users {
                let c = &self.counters[k];
                debug_assert_eq!(
                    c.arrived,
                    c.delivered + c.overflow_drops + c.retry_drops + self.queue_len[k] as u64
                );
            }
            self.slot_index += 1;
        }
        Ok(successes)
    }

    pub fn queue_lengths(&self) -> &[usize] {
        &self.queue_len
    }
}

/// One-shot simulation of `T` RAW slots.
pub fn run_sim(
    real: &NetworkRealization,
    z: &GroupAssignment,
    num_slots: usize,
    cfg: &ScenarioConfig,
    mac: &MacConfig,
    seed: u64,
) -> Result<ThroughputReport> {
    if num_slots < cfg.num_groups {
        return Err(Error::InvalidArgument(format!(
            "num_slots {} must be >= num_groups {}",
            num_slots, cfg.num_groups
        )));
    }
    let mut sim = Simulator::new(real, cfg, mac, seed)?;
    let successes = sim.advance(num_slots, z)?;
    let rates = (0..real.num_users())
        .map(|k| successes.row(k).iter().map(|&u| u as f64).sum::<f64>() / num_slots as f64)
        .collect();
    Ok(ThroughputReport {
        successes,
        rates,
        counters: sim.counters.clone(),
        residual_queue: sim.queue_len.clone(),
    })
}

/// SINR in linear units for a transmission to `ap` with the given concurrent
/// transmitters.
pub fn sinr_at_ap(
    real: &NetworkRealization,
    cfg: &ScenarioConfig,
    tx_user: usize,
    concurrent: &[usize],
    ap: usize,
) -> f64 {
    let noise = 10f64.powf(cfg.noise_power_dbm / 10.0);
    let sig = 10f64.powf((cfg.tx_power_dbm - real.user_ap_loss[[tx_user, ap]]) / 10.0);
    let interf: f64 = concurrent
        .iter()
        .filter(|&&j| j != tx_user)
        .map(|&j| 10f64.powf((cfg.tx_power_dbm - real.user_ap_loss[[j, ap]]) / 10.0))
        .sum();
    sig / (noise + interf)
}
