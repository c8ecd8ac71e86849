//! Rigged two-exit environments and a brute-force value-iteration oracle.

use qdsnn::rl::{train_policy, Action, ExitEnvironment, RlHyper};

/// Samples given as per-exit (confidence, correct) pairs. Correctness depends only
/// on the (exit, bin) state so that the environment is a proper MDP.
pub struct Rigged {
    pub samples: Vec<[(f64, bool); 2]>,
}

impl ExitEnvironment for Rigged {
    fn exits(&self) -> usize {
        2
    }
    fn samples(&self) -> usize {
        self.samples.len()
    }
    fn confidence(&self, s: usize, e: usize) -> f64 {
        self.samples[s][e].0
    }
    fn correct(&self, s: usize, e: usize) -> bool {
        self.samples[s][e].1
    }
}

fn bin(c: f64, bins: usize) -> usize {
    ((c * bins as f64) as usize).min(bins - 1)
}

/// Optimal action per exit-0 bin by value iteration on the empirical MDP.
pub fn value_iteration(env: &Rigged, savings: &[f64], h: &RlHyper) -> Vec<Option<Action>> {
    let b = h.bins;
    let r = |ok: bool, s: f64| if ok { 1.0 + h.alpha * s } else { -1.0 };
    // V at the final exit: forced exit, expected reward per bin
    let mut v1 = vec![0.0; b];
    let mut n1 = vec![0usize; b];
    for s in &env.samples {
        let k = bin(s[1].0, b);
        v1[k] += r(s[1].1, savings[1]);
        n1[k] += 1;
    }
    for k in 0..b {
        if n1[k] > 0 {
            v1[k] /= n1[k] as f64;
        }
    }
    let mut q = vec![[0.0f64; 2]; b];
    let mut n0 = vec![0usize; b];
    // sweep until the fixed point (two sweeps suffice for a depth-2 chain)
    for _ in 0..10 {
        let mut next = vec![[0.0f64; 2]; b];
        n0.iter_mut().for_each(|n| *n = 0);
        for s in &env.samples {
            let k = bin(s[0].0, b);
            next[k][0] += r(s[0].1, savings[0]);
            next[k][1] += h.gamma * v1[bin(s[1].0, b)];
            n0[k] += 1;
        }
        for k in 0..b {
            if n0[k] > 0 {
                next[k][0] /= n0[k] as f64;
                next[k][1] /= n0[k] as f64;
            }
        }
        q = next;
    }
    (0..b)
        .map(|k| (n0[k] > 0).then(|| if q[k][0] > q[k][1] { Action::ExitNow } else { Action::Continue }))
        .collect()
}

pub fn hyper(seed: u64) -> RlHyper {
    RlHyper {
        bins: 2,
        early_stopping: false,
        seed,
        ..RlHyper::default()
    }
}

/// Trains with several seeds and compares every visited greedy action with the oracle.
pub fn check(env: &Rigged, savings: &[f64]) -> Result<(), String> {
    for seed in 0..3 {
        let h = hyper(seed);
        let out = train_policy(env, savings, &h).map_err(|e| e.to_string())?;
        if out.history.len() != h.episodes {
            return Err(format!("seed {seed}: ran {} of {} episodes", out.history.len(), h.episodes));
        }
        if out.qtable.max_abs() > h.q_bound() {
            return Err(format!("seed {seed}: |Q| {} exceeds {}", out.qtable.max_abs(), h.q_bound()));
        }
        for (k, want) in value_iteration(env, savings, &h).iter().enumerate() {
            if let Some(want) = want {
                let got = out.qtable.greedy(0, k);
                if got != *want {
                    return Err(format!("seed {seed}, bin {k}: {got:?} vs oracle {want:?}, q {:?}", out.qtable.values));
                }
            }
        }
    }
    Ok(())
}

pub fn always_correct() -> Rigged {
    Rigged {
        samples: vec![[(0.2, true), (0.3, true)], [(0.8, true), (0.9, true)], [(0.7, true), (0.1, false)]],
    }
}

pub fn always_wrong() -> Rigged {
    Rigged {
        samples: vec![[(0.2, false), (0.3, true)], [(0.8, false), (0.9, true)]],
    }
}

/// Low-confidence samples are wrong at exit 1 and right at the final exit,
/// confident ones are right at exit 1.
pub fn confidence_separates() -> Rigged {
    let mut samples = Vec::new();
    for i in 0..20 {
        let c = 0.05 + 0.02 * i as f64;
        samples.push([(c, false), (0.9, true)]);
        samples.push([(1.0 - c, true), (0.9, true)]);
    }
    Rigged { samples }
}

/// Named scenarios with their savings vectors.
pub fn scenarios() -> Vec<(&'static str, Rigged, Vec<f64>)> {
    vec![
        ("exit-one-always-correct", always_correct(), vec![0.8, 0.0]),
        ("exit-one-always-wrong", always_wrong(), vec![0.8, 0.0]),
        ("confidence-separates", confidence_separates(), vec![0.6, 0.0]),
    ]
}
