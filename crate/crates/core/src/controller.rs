//! Online prefetch controller.
//!
//! A logistic scorer estimates the probability that a candidate prefetch
//! window is profitable. An epsilon-greedy bandit picks the decision
//! threshold and window size per decision from a 5 x 3 arm grid; rewards
//! arrive after a fixed horizon once every issued prefetch of the decision
//! has resolved. Weights take one small gradient step per update period.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Cycle, LineAddr};

pub const FEATURES: usize = 17;
pub const THREAD_BUCKETS: usize = 8;
pub const THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
/// Window sizes in tie-break preference order.
pub const WINDOWS: [u8; 3] = [8, 4, 12];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURES]);

/// Inputs gathered by the simulator for one trigger.
#[derive(Debug, Clone, Copy, Default)]
pub struct FeatureInputs {
    /// Window base minus source line.
    pub base_delta: i64,
    pub marked_offsets: usize,
    pub recent_hit_rate: f64,
    pub pollution_rate: f64,
    pub short_loop: bool,
    pub thread_tag: u8,
}

impl FeatureVector {
    /// Layout: `[sign, popcount/20, low8/255, log2(|d|+1)/20, density,
    /// hit_rate, pollution_rate, short_loop, thread one-hot x8, bias]`.
    pub fn build(inputs: &FeatureInputs) -> Self {
        let d = inputs.base_delta;
        let mag = d.unsigned_abs() & 0xF_FFFF;
        let mut f = [0.0; FEATURES];
        f[0] = d.signum() as f64;
        f[1] = f64::from(mag.count_ones()) / 20.0;
        f[2] = (mag & 0xFF) as f64 / 255.0;
        f[3] = ((mag as f64 + 1.0).log2() / 20.0).min(1.0);
        f[4] = inputs.marked_offsets as f64 / 8.0;
        f[5] = inputs.recent_hit_rate.clamp(0.0, 1.0);
        f[6] = inputs.pollution_rate.clamp(0.0, 1.0);
        f[7] = if inputs.short_loop { 1.0 } else { 0.0 };
        f[8 + usize::from(inputs.thread_tag) % THREAD_BUCKETS] = 1.0;
        f[FEATURES - 1] = 1.0;
        Self(f)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn score(features: &FeatureVector, weights: &[f64; FEATURES]) -> f64 {
    sigmoid(features.0.iter().zip(weights).map(|(x, w)| x * w).sum())
}

/// Cross-entropy loss of one labelled sample.
pub fn logistic_loss(features: &FeatureVector, weights: &[f64; FEATURES], label: f64) -> f64 {
    let z: f64 = features.0.iter().zip(weights).map(|(x, w)| x * w).sum();
    // log(1 + e^z) - label * z, computed without overflow
    let softplus = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - label * z
}

/// Gradient of [`logistic_loss`] with respect to the weights.
pub fn logistic_gradient(features: &FeatureVector, weights: &[f64; FEATURES], label: f64) -> [f64; FEATURES] {
    let err = score(features, weights) - label;
    features.0.map(|x| err * x)
}

/// One gradient step over the batch mean. An empty batch is a no-op.
pub fn update_weights(weights: &mut [f64; FEATURES], learning_rate: f64, batch: &[(FeatureVector, f64)]) {
    if batch.is_empty() {
        return;
    }
    let mut grad = [0.0; FEATURES];
    for (x, y) in batch {
        for (g, gi) in grad.iter_mut().zip(logistic_gradient(x, weights, *y)) {
            *g += gi;
        }
    }
    let n = batch.len() as f64;
    for (w, g) in weights.iter_mut().zip(grad) {
        *w -= learning_rate * g / n;
    }
}

// ---------------------------------------------------------------------------
// Bandit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub pulls: u64,
    pub mean_reward: f64,
}

/// Epsilon-greedy over running-mean arms. Greedy ties go to the lowest
/// arm index.
#[derive(Debug, Clone)]
pub struct EpsilonGreedy {
    arms: Vec<ArmStats>,
    epsilon: f64,
    rng: ChaCha8Rng,
}

impl EpsilonGreedy {
    pub fn new(arms: usize, epsilon: f64, seed: u64) -> Self {
        assert!(arms > 0 && (0.0..=1.0).contains(&epsilon));
        Self {
            arms: vec![ArmStats::default(); arms],
            epsilon,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn arms(&self) -> &[ArmStats] {
        &self.arms
    }

    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for (i, a) in self.arms.iter().enumerate() {
            if a.mean_reward > self.arms[best].mean_reward {
                best = i;
            }
        }
        best
    }

    pub fn select(&mut self) -> usize {
        if self.epsilon > 0.0 && self.rng.gen_bool(self.epsilon) {
            self.rng.gen_range(0..self.arms.len())
        } else {
            self.greedy()
        }
    }

    pub fn record(&mut self, arm: usize, reward: f64) {
        let a = &mut self.arms[arm];
        a.pulls += 1;
        a.mean_reward += (reward - a.mean_reward) / a.pulls as f64;
    }
}

/// (threshold, window) for an arm index of the controller grid.
pub fn arm_params(arm: usize) -> (f64, u8) {
    (THRESHOLDS[arm / WINDOWS.len()], WINDOWS[arm % WINDOWS.len()])
}

pub fn arm_label(arm: usize) -> String {
    let (t, w) = arm_params(arm);
    format!("t{t:.1}/w{w}")
}

// ---------------------------------------------------------------------------
// Controller
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub learning_rate: f64,
    pub update_period_cycles: Cycle,
    pub epsilon: f64,
    pub horizon_cycles: Cycle,
    pub shadow: bool,
    pub lambda_useless: f64,
    pub lambda_evict: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            update_period_cycles: 100_000,
            epsilon: 0.05,
            horizon_cycles: 10_000,
            shadow: false,
            lambda_useless: 0.5,
            lambda_evict: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Issue { window: u8 },
    Skip,
}

/// Resolved outcome counts of one issued decision.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecisionOutcome {
    pub hits: u32,
    pub useless: u32,
    pub polluting: u32,
}

impl DecisionOutcome {
    pub fn reward(&self, lambda_useless: f64, lambda_evict: f64) -> f64 {
        f64::from(self.hits) - lambda_useless * f64::from(self.useless) - lambda_evict * f64::from(self.polluting)
    }
}

#[derive(Debug, Clone, Copy)]
struct PendingDecision {
    id: u64,
    issue_time: Cycle,
    arm: usize,
    features: FeatureVector,
    outstanding: u32,
    outcome: DecisionOutcome,
}

/// Shadow-mode calibration row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub cycle: Cycle,
    pub source_line: LineAddr,
    pub predicted_p: f64,
    pub chosen_arm: String,
    pub hypothetical_targets: Vec<LineAddr>,
    pub hypothetical_bandwidth: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerCounts {
    pub decisions: u64,
    pub issued_decisions: u64,
    pub skipped: u64,
    pub resolved: u64,
    pub weight_updates: u64,
}

pub struct ControllerState {
    pub config: ControllerConfig,
    pub weights: [f64; FEATURES],
    bandit: EpsilonGreedy,
    pending: Vec<PendingDecision>,
    batch: Vec<(FeatureVector, f64)>,
    next_update: Cycle,
    next_id: u64,
    calibration: Vec<CalibrationRecord>,
    counts: LedgerCounts,
}

impl ControllerState {
    pub fn new(config: ControllerConfig, seed: u64) -> Self {
        let bandit = EpsilonGreedy::new(THRESHOLDS.len() * WINDOWS.len(), config.epsilon, seed);
        let next_update = config.update_period_cycles;
        Self {
            config,
            weights: [0.0; FEATURES],
            bandit,
            pending: Vec::new(),
            batch: Vec::new(),
            next_update,
            next_id: 0,
            calibration: Vec::new(),
            counts: LedgerCounts::default(),
        }
    }

    pub fn arms(&self) -> &[ArmStats] {
        self.bandit.arms()
    }

    pub fn counts(&self) -> LedgerCounts {
        self.counts
    }

    pub fn calibration_log(&self) -> &[CalibrationRecord] {
        &self.calibration
    }

    pub fn take_calibration_log(&mut self) -> Vec<CalibrationRecord> {
        std::mem::take(&mut self.calibration)
    }

    pub fn pending_decisions(&self) -> usize {
        self.pending.len()
    }

    pub fn select_arm(&mut self) -> usize {
        self.bandit.select()
    }

    /// Scores a trigger and picks an action.
    ///
    /// In shadow mode the decision is logged with its hypothetical targets
    /// and `Skip` is returned. Otherwise an `Issue` registers a pending
    /// decision whose id must be attached to the prefetches it issues via
    /// [`ControllerState::attach`]; a `Skip` credits the arm a zero reward.
    pub fn decide(
        &mut self,
        features: FeatureVector,
        now: Cycle,
        source: LineAddr,
        hypothetical: impl FnOnce(u8) -> (Vec<LineAddr>, u32),
    ) -> (Decision, Option<u64>) {
        self.counts.decisions += 1;
        let p = score(&features, &self.weights);
        let arm = self.select_arm();
        let (threshold, window) = arm_params(arm);
        let issue = p >= threshold;

        if self.config.shadow {
            if issue {
                let (targets, bandwidth) = hypothetical(window);
                self.calibration.push(CalibrationRecord {
                    cycle: now,
                    source_line: source,
                    predicted_p: p,
                    chosen_arm: arm_label(arm),
                    hypothetical_targets: targets,
                    hypothetical_bandwidth: bandwidth,
                });
            }
            self.counts.skipped += 1;
            return (Decision::Skip, None);
        }
        if !issue {
            self.counts.skipped += 1;
            self.bandit.record(arm, 0.0);
            return (Decision::Skip, None);
        }
        self.counts.issued_decisions += 1;
        let id = self.next_id;
        self.next_id += 1;
        self.pending.push(PendingDecision {
            id,
            issue_time: now,
            arm,
            features,
            outstanding: 0,
            outcome: DecisionOutcome::default(),
        });
        (Decision::Issue { window }, Some(id))
    }

    // ids are handed out in increasing order and pending keeps that order
    fn pending_mut(&mut self, id: u64) -> Option<&mut PendingDecision> {
        let i = self.pending.binary_search_by_key(&id, |d| d.id).ok()?;
        Some(&mut self.pending[i])
    }

    /// Registers one issued prefetch against decision `id`.
    pub fn attach(&mut self, id: u64) {
        if let Some(d) = self.pending_mut(id) {
            d.outstanding += 1;
        }
    }

    /// Reports the outcome of one prefetch issued by decision `id`.
    pub fn report(&mut self, id: u64, hit: bool, useless: bool, polluting: bool) {
        if let Some(d) = self.pending_mut(id) {
            d.outstanding = d.outstanding.saturating_sub(1);
            if polluting {
                d.outcome.polluting += 1;
            } else if hit {
                d.outcome.hits += 1;
            } else if useless {
                d.outcome.useless += 1;
            }
        }
    }

    /// Resolves decisions whose prefetches have all resolved and whose
    /// horizon has passed, then takes a weight step if a period elapsed.
    /// Returns the rewards produced.
    pub fn tick(&mut self, now: Cycle) -> Vec<f64> {
        let horizon = self.config.horizon_cycles;
        let (lu, le) = (self.config.lambda_useless, self.config.lambda_evict);
        let mut rewards = Vec::new();
        let mut i = 0;
        while i < self.pending.len() {
            let d = self.pending[i];
            // pending is in issue order, so nothing later has matured either
            if d.issue_time + horizon > now {
                break;
            }
            if d.outstanding == 0 {
                self.pending.remove(i);
                let r = d.outcome.reward(lu, le);
                self.bandit.record(d.arm, r);
                let issued = d.outcome.hits + d.outcome.useless + d.outcome.polluting;
                if issued > 0 {
                    self.batch.push((d.features, if r > 0.0 { 1.0 } else { 0.0 }));
                }
                self.counts.resolved += 1;
                rewards.push(r);
            } else {
                i += 1;
            }
        }
        while now >= self.next_update {
            update_weights(&mut self.weights, self.config.learning_rate, &self.batch);
            if !self.batch.is_empty() {
                self.counts.weight_updates += 1;
            }
            self.batch.clear();
            self.next_update += self.config.update_period_cycles.max(1);
        }
        rewards
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(seed: u64) -> FeatureVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureVector(std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn feature_layout() {
        let f = FeatureVector::build(&FeatureInputs {
            base_delta: -3,
            marked_offsets: 4,
            recent_hit_rate: 0.5,
            pollution_rate: 2.0,
            short_loop: true,
            thread_tag: 10,
        });
        assert_eq!(f.0[0], -1.0);
        assert_eq!(f.0[1], 2.0 / 20.0);
        assert_eq!(f.0[2], 3.0 / 255.0);
        assert_eq!(f.0[3], 2.0 / 20.0);
        assert_eq!(f.0[4], 0.5);
        assert_eq!(f.0[6], 1.0);
        assert_eq!(f.0[7], 1.0);
        assert_eq!(f.0[8 + 2], 1.0);
        assert_eq!(f.0[16], 1.0);
        assert_eq!(f.0[8..16].iter().sum::<f64>(), 1.0);
        assert!(f.0[1..].iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn score_examples() {
        let f = features(1);
        assert_eq!(score(&f, &[0.0; FEATURES]), 0.5);
        let mut w = [0.0; FEATURES];
        let x = FeatureVector::build(&FeatureInputs::default());
        w[FEATURES - 1] = 3f64.ln();
        assert!((score(&x, &w) - 0.75).abs() < 1e-12);
        let before = score(&x, &w);
        w[FEATURES - 1] += 0.1;
        assert!(score(&x, &w) > before);
    }

    #[test]
    fn single_sample_step() {
        let x = features(3);
        let mut w = [0.0; FEATURES];
        update_weights(&mut w, 0.01, &[(x, 1.0)]);
        for (wi, xi) in w.iter().zip(x.0) {
            assert!((wi - 0.5 * 0.01 * xi).abs() < 1e-15);
        }
        let before = w;
        update_weights(&mut w, 0.01, &[]);
        assert_eq!(w, before);
    }

    #[test]
    fn step_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in 0..50 {
            let mut w: [f64; FEATURES] = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
            let batch: Vec<_> = (0..10)
                .map(|j| (features(k * 100 + j), f64::from(rng.gen_bool(0.5) as u8)))
                .collect();
            let before = w;
            update_weights(&mut w, 0.01, &batch);
            let max_x = batch.iter().flat_map(|(x, _)| x.0).fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in w.iter().zip(before) {
                assert!((a - b).abs() <= 0.01 * max_x + 1e-15);
            }
        }
    }

    #[test]
    fn greedy_selection_and_ties() {
        let mut b = EpsilonGreedy::new(15, 0.0, 0);
        assert_eq!(b.select(), 0);
        b.record(7, 1.0);
        for _ in 0..20 {
            assert_eq!(b.select(), 7);
        }
        assert_eq!(arm_params(0), (0.3, 8));
        assert_eq!(arm_params(7), (0.5, 4));
    }

    #[test]
    fn decide_examples() {
        let config = ControllerConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        let mut c = ControllerState::new(config.clone(), 1);
        // bias 0.9 probability against the default arm's 0.3 threshold
        c.weights[FEATURES - 1] = (0.9f64 / 0.1).ln();
        let x = FeatureVector::build(&FeatureInputs::default());
        let (d, id) = c.decide(x, 10, 100, |_| unreachable!());
        assert_eq!(d, Decision::Issue { window: 8 });
        assert!(id.is_some());

        let mut shadow = ControllerState::new(
            ControllerConfig {
                shadow: true,
                ..config.clone()
            },
            1,
        );
        shadow.weights = c.weights;
        let (d, id) = shadow.decide(x, 10, 100, |w| (vec![1, 2, u64::from(w)], 2));
        assert_eq!((d, id), (Decision::Skip, None));
        assert_eq!(shadow.calibration_log().len(), 1);
        assert_eq!(shadow.calibration_log()[0].chosen_arm, "t0.3/w8");
        assert!(shadow.tick(1_000_000).is_empty());

        // zero weights score exactly 0.5; the t0.5/w8 arm is made greedy
        let mut c = ControllerState::new(config, 1);
        c.bandit.record(6, 1.0);
        assert_eq!(arm_params(6), (0.5, 8));
        assert_eq!(c.decide(x, 0, 1, |_| (vec![], 0)).0, Decision::Issue { window: 8 });
    }

    #[test]
    fn reward_definition() {
        let o = DecisionOutcome {
            hits: 3,
            useless: 0,
            polluting: 0,
        };
        assert_eq!(o.reward(0.5, 1.0), 3.0);
        let o = DecisionOutcome {
            hits: 0,
            useless: 2,
            polluting: 1,
        };
        assert_eq!(o.reward(0.5, 1.0), -2.0);
    }

    #[test]
    fn decisions_resolve_after_horizon() {
        let mut c = ControllerState::new(
            ControllerConfig {
                epsilon: 0.0,
                ..Default::default()
            },
            1,
        );
        c.weights[FEATURES - 1] = 5.0;
        let x = FeatureVector::build(&FeatureInputs::default());
        let (_, id) = c.decide(x, 0, 1, |_| (vec![], 0));
        let id = id.unwrap();
        for _ in 0..3 {
            c.attach(id);
        }
        for _ in 0..3 {
            c.report(id, true, false, false);
        }
        assert!(c.tick(9_999).is_empty());
        assert_eq!(c.tick(10_000), vec![3.0]);
        assert_eq!(c.arms()[0].pulls, 1);
        assert_eq!(c.pending_decisions(), 0);
    }

    #[test]
    fn weight_updates_follow_period() {
        let config = ControllerConfig {
            epsilon: 0.0,
            update_period_cycles: 1000,
            horizon_cycles: 10,
            ..Default::default()
        };
        let mut c = ControllerState::new(config, 1);
        c.weights[FEATURES - 1] = 2.0;
        let x = FeatureVector::build(&FeatureInputs::default());
        let (_, id) = c.decide(x, 0, 1, |_| (vec![], 0));
        c.attach(id.unwrap());
        c.report(id.unwrap(), false, true, false);
        c.tick(500);
        assert_eq!(c.weights[FEATURES - 1], 2.0);
        c.tick(1000);
        assert!(c.weights[FEATURES - 1] < 2.0);
        assert_eq!(c.counts().weight_updates, 1);
    }

    #[test]
    fn deterministic_bandit() {
        let run = || {
            let mut b = EpsilonGreedy::new(15, 0.3, 42);
            (0..500)
                .map(|i| {
                    let a = b.select();
                    b.record(a, (i % 7) as f64);
                    a
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
