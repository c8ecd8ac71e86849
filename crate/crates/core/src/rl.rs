//! Tabular Q-learning of the exit policy over (exit index, confidence bin) states.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    ExitNow = 0,
    Continue = 1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlHyper {
    pub eta: f64,
    pub gamma: f64,
    /// Weight of the computational-savings bonus in the reward.
    pub alpha: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the episode budget over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub episodes: usize,
    /// Early stopping is never triggered before this many episodes.
    pub min_episodes: usize,
    pub window: usize,
    pub patience: usize,
    pub min_improvement: f64,
    pub early_stopping: bool,
    pub bins: usize,
    pub seed: u64,
}

impl Default for RlHyper {
    fn default() -> Self {
        RlHyper {
            eta: 0.1,
            gamma: 0.9,
            alpha: 0.3,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            episodes: 10_000,
            min_episodes: 5_000,
            window: 500,
            patience: 1_500,
            min_improvement: 1e-3,
            early_stopping: true,
            bins: 10,
            seed: 0,
        }
    }
}

impl RlHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Config(format!("{what} out of range: {v}")));
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta", self.eta);
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma", self.gamma);
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", self.alpha);
        }
        for (what, e) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return bad(what, e);
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return bad("epsilon_decay_fraction", self.epsilon_decay_fraction);
        }
        if self.bins == 0 || self.window == 0 {
            return Err(Error::Config("bins and window must be at least 1".into()));
        }
        Ok(())
    }

    /// Linear decay over the first `epsilon_decay_fraction` of episodes, then constant.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let span = self.epsilon_decay_fraction * self.episodes as f64;
        if span <= 0.0 || episode as f64 >= span {
            return self.epsilon_end;
        }
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * episode as f64 / span
    }

    /// Largest |Q| reachable from zero initialisation: `(1 + alpha)/(1 - gamma)`.
    pub fn q_bound(&self) -> f64 {
        (1.0 + self.alpha) / (1.0 - self.gamma)
    }
}

/// `1 + alpha·savings` when correct, `-1` otherwise.
pub fn reward(correct: bool, savings: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&savings) {
        return Err(Error::Usage(format!("savings must lie in [0, 1], got {savings}")));
    }
    Ok(if correct { 1.0 + alpha * savings } else { -1.0 })
}

/// Uniform bin of a confidence in `[0, 1]`: `min(floor(c·B), B-1)`.
pub fn discretize_confidence(c: f64, bins: usize) -> usize {
    ((c.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins.saturating_sub(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub exits: usize,
    pub bins: usize,
    /// `values[exit·bins + bin] = [q_exit, q_continue]`.
    pub values: Vec<[f64; 2]>,
    pub visits: Vec<[u64; 2]>,
}

impl QTable {
    pub fn new(exits: usize, bins: usize) -> Self {
        QTable {
            exits,
            bins,
            values: vec![[0.0; 2]; exits * bins],
            visits: vec![[0; 2]; exits * bins],
        }
    }

    fn index(&self, exit: usize, bin: usize) -> usize {
        assert!(exit < self.exits && bin < self.bins, "state ({exit}, {bin}) outside the table");
        exit * self.bins + bin
    }

    pub fn q(&self, exit: usize, bin: usize, action: Action) -> f64 {
        self.values[self.index(exit, bin)][action as usize]
    }

    pub fn set(&mut self, exit: usize, bin: usize, action: Action, v: f64) {
        let i = self.index(exit, bin);
        self.values[i][action as usize] = v;
    }

    pub fn visits(&self, exit: usize, bin: usize) -> [u64; 2] {
        self.visits[self.index(exit, bin)]
    }

    pub fn is_final(&self, exit: usize) -> bool {
        exit + 1 == self.exits
    }

    /// Best value over the actions available in a state (only exiting at the final exit).
    pub fn state_value(&self, exit: usize, bin: usize) -> f64 {
        let [qe, qc] = self.values[self.index(exit, bin)];
        if self.is_final(exit) {
            qe
        } else {
            qe.max(qc)
        }
    }

    /// Greedy action; equal values resolve to `Continue`, the final exit always exits.
    pub fn greedy(&self, exit: usize, bin: usize) -> Action {
        let [qe, qc] = self.values[self.index(exit, bin)];
        if self.is_final(exit) || qe > qc {
            Action::ExitNow
        } else {
            Action::Continue
        }
    }

    /// A table whose greedy policy exits at exit `e` exactly when the bin
    /// reaches `thresholds[e]·B`; thresholds should be multiples of `1/B`.
    pub fn from_thresholds(thresholds: &[f64], bins: usize) -> Self {
        let mut t = QTable::new(thresholds.len() + 1, bins);
        for (e, &th) in thresholds.iter().enumerate() {
            let first = (th * bins as f64).round() as usize;
            for b in 0..bins {
                let exit = b >= first;
                t.set(e, b, Action::ExitNow, if exit { 1.0 } else { 0.0 });
                t.set(e, b, Action::Continue, if exit { 0.0 } else { 1.0 });
            }
        }
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Writes `(exit, bin, q_exit, q_continue, visits)` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["exit", "bin", "q_exit", "q_continue", "visits"])?;
        for e in 0..self.exits {
            for b in 0..self.bins {
                let [qe, qc] = self.values[self.index(e, b)];
                let [ve, vc] = self.visits(e, b);
                w.write_record([e.to_string(), b.to_string(), qe.to_string(), qc.to_string(), (ve + vc).to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// `Q(s,a) += eta·[r + gamma·max_a' Q(s',a')·(1 - terminal) - Q(s,a)]`.
pub fn q_update(
    qt: &mut QTable,
    state: (usize, usize),
    action: Action,
    r: f64,
    next: Option<(usize, usize)>,
    eta: f64,
    gamma: f64,
) {
    let bootstrap = next.map_or(0.0, |(e, b)| qt.state_value(e, b));
    let i = qt.index(state.0, state.1);
    let q = &mut qt.values[i][action as usize];
    *q += eta * (r + gamma * bootstrap - *q);
    qt.visits[i][action as usize] += 1;
}

/// Per-sample exit outcomes the agent learns from.
pub trait ExitEnvironment {
    fn exits(&self) -> usize;
    fn samples(&self) -> usize;
    /// Confidence of `sample` at `exit`, in `[0, 1]`.
    fn confidence(&self, sample: usize, exit: usize) -> f64;
    fn correct(&self, sample: usize, exit: usize) -> bool;
}

/// Precomputed confidences and correctness at every exit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExitTable {
    pub confidence: Vec<Vec<f64>>,
    pub correct: Vec<Vec<bool>>,
}

impl ExitEnvironment for ExitTable {
    fn exits(&self) -> usize {
        self.confidence.first().map_or(0, Vec::len)
    }

    fn samples(&self) -> usize {
        self.confidence.len()
    }

    fn confidence(&self, sample: usize, exit: usize) -> f64 {
        self.confidence[sample][exit]
    }

    fn correct(&self, sample: usize, exit: usize) -> bool {
        self.correct[sample][exit]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub sample: usize,
    pub exit: usize,
    pub reward: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTraining {
    pub qtable: QTable,
    pub history: Vec<EpisodeRecord>,
    pub stopped_early: bool,
}

impl PolicyTraining {
    /// Writes `(episode, reward, moving_average, epsilon, exit)` rows.
    pub fn write_reward_csv(&self, path: &Path, window: usize) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["episode", "reward", "moving_average", "epsilon", "exit"])?;
        let mut sum = 0.0;
        for (i, rec) in self.history.iter().enumerate() {
            sum += rec.reward;
            if i >= window {
                sum -= self.history[i - window].reward;
            }
            let ma = sum / (i + 1).min(window) as f64;
            w.write_record([
                rec.episode.to_string(),
                rec.reward.to_string(),
                ma.to_string(),
                rec.epsilon.to_string(),
                rec.exit.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// One episode per sampled training example: walk the exits acting
/// epsilon-greedily until the agent exits (forced at the final classifier).
pub fn train_policy(env: &impl ExitEnvironment, savings: &[f64], hyper: &RlHyper) -> Result<PolicyTraining> {
    hyper.validate()?;
    let exits = env.exits();
    if exits == 0 || env.samples() == 0 {
        return Err(Error::Usage("policy training needs at least one sample and one exit".into()));
    }
    if savings.len() != exits {
        return Err(Error::Usage(format!("{} savings values for {exits} exits", savings.len())));
    }
    let mut qt = QTable::new(exits, hyper.bins);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut history = Vec::with_capacity(hyper.episodes);
    let (mut best, mut last_gain, mut window_sum) = (f64::NEG_INFINITY, 0usize, 0.0);
    let mut stopped_early = false;

    for episode in 0..hyper.episodes {
        let eps = hyper.epsilon(episode);
        let sample = rng.random_range(0..env.samples());
        let mut exit = 0;
        let (reward_now, exit_taken) = loop {
            let bin = discretize_confidence(env.confidence(sample, exit), hyper.bins);
            let action = if qt.is_final(exit) {
                Action::ExitNow
            } else if rng.random::<f64>() < eps {
                if rng.random_bool(0.5) {
                    Action::ExitNow
                } else {
                    Action::Continue
                }
            } else {
                qt.greedy(exit, bin)
            };
            match action {
                Action::ExitNow => {
                    let r = reward(env.correct(sample, exit), savings[exit], hyper.alpha)?;
                    q_update(&mut qt, (exit, bin), action, r, None, hyper.eta, hyper.gamma);
                    break (r, exit);
                }
                Action::Continue => {
                    let next_bin = discretize_confidence(env.confidence(sample, exit + 1), hyper.bins);
                    q_update(&mut qt, (exit, bin), action, 0.0, Some((exit + 1, next_bin)), hyper.eta, hyper.gamma);
                    exit += 1;
                }
            }
        };
        history.push(EpisodeRecord {
            episode,
            sample,
            exit: exit_taken,
            reward: reward_now,
            epsilon: eps,
        });

        window_sum += reward_now;
        if history.len() > hyper.window {
            window_sum -= history[history.len() - 1 - hyper.window].reward;
        }
        if hyper.early_stopping && (episode + 1) % hyper.window == 0 {
            let ma = window_sum / hyper.window as f64;
            if ma > best + hyper.min_improvement {
                best = ma;
                last_gain = episode;
            } else if episode + 1 >= hyper.min_episodes && episode - last_gain >= hyper.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let bound = hyper.q_bound();
    if qt.max_abs() > bound + 1e-9 {
        return Err(Error::Domain(format!("Q-value {} exceeds the bound {bound}", qt.max_abs())));
    }
    Ok(PolicyTraining {
        qtable: qt,
        history,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_cases() {
        assert!((reward(true, 0.5, 0.3).unwrap() - 1.15).abs() < 1e-15);
        assert_eq!(reward(false, 0.7, 0.3).unwrap(), -1.0);
        assert_eq!(reward(true, 0.0, 0.3).unwrap(), 1.0);
        assert!(reward(true, 1.5, 0.3).is_err());
        assert!(reward(true, -0.1, 0.3).is_err());
    }

    #[test]
    fn q_update_cases() {
        let mut qt = QTable::new(2, 2);
        q_update(&mut qt, (0, 0), Action::ExitNow, 1.0, None, 0.1, 0.9);
        assert!((qt.q(0, 0, Action::ExitNow) - 0.1).abs() < 1e-15);

        let mut qt = QTable::new(3, 2);
        qt.set(1, 1, Action::Continue, 2.0);
        q_update(&mut qt, (0, 0), Action::Continue, 0.0, Some((1, 1)), 0.1, 0.9);
        assert!((qt.q(0, 0, Action::Continue) - 0.18).abs() < 1e-15);

        let before = qt.clone();
        q_update(&mut qt, (0, 1), Action::ExitNow, 5.0, None, 0.0, 0.9);
        assert_eq!(qt.values, before.values);
    }

    #[test]
    fn final_state_value_ignores_continue() {
        let mut qt = QTable::new(2, 1);
        qt.set(1, 0, Action::Continue, 9.0);
        qt.set(1, 0, Action::ExitNow, 0.5);
        assert_eq!(qt.state_value(1, 0), 0.5);
        assert_eq!(qt.greedy(1, 0), Action::ExitNow);
    }

    #[test]
    fn bins() {
        assert_eq!(discretize_confidence(0.0, 10), 0);
        assert_eq!(discretize_confidence(1.0, 10), 9);
        assert_eq!(discretize_confidence(0.65, 10), 6);
    }

    #[test]
    fn greedy_tie_continues() {
        let qt = QTable::new(3, 4);
        assert_eq!(qt.greedy(0, 2), Action::Continue);
        assert_eq!(qt.greedy(2, 2), Action::ExitNow);
    }

    #[test]
    fn epsilon_schedule() {
        let h = RlHyper::default();
        assert_eq!(h.epsilon(0), 1.0);
        assert!((h.epsilon(2_500) - 0.525).abs() < 1e-12);
        assert_eq!(h.epsilon(5_000), 0.05);
        assert_eq!(h.epsilon(9_999), 0.05);
        assert!((h.q_bound() - 13.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_table() {
        let qt = QTable::from_thresholds(&[0.6, 0.7], 10);
        assert_eq!(qt.greedy(0, 5), Action::Continue);
        assert_eq!(qt.greedy(0, 6), Action::ExitNow);
        assert_eq!(qt.greedy(1, 6), Action::Continue);
        assert_eq!(qt.greedy(1, 7), Action::ExitNow);
    }
}
