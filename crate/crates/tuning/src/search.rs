//! Sequential model-based search: random and tree-structured Parzen
//! estimator (TPE) proposers.

use std::fmt::Display;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use units_core::data::gaussian;
use units_core::error::{param_err, Result};

use crate::space::{Config, Dimension, SearchSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub trial_id: usize,
    pub config: Config,
    /// `None` when the trial failed.
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_time_secs: f64,
}

impl TuningRecord {
    pub fn failed(&self) -> bool {
        self.objective.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningOutcome {
    pub best_config: Config,
    pub best_value: f64,
    pub best_trial: usize,
    pub records: Vec<TuningRecord>,
}

/// Proposes the next configuration from the trial history.
pub trait Proposer {
    fn propose(&mut self, space: &SearchSpace, history: &[TuningRecord], rng: &mut ChaCha8Rng) -> Config;
}

pub struct RandomProposer;

impl Proposer for RandomProposer {
    fn propose(&mut self, space: &SearchSpace, _history: &[TuningRecord], rng: &mut ChaCha8Rng) -> Config {
        space.sample(rng)
    }
}

/// Density-ratio proposer: trials are split into the best `gamma` fraction
/// ("good") and the rest; candidates drawn from the good density `l` are
/// ranked by `l/g`.
pub struct TpeProposer {
    pub n_startup: usize,
    pub gamma: f64,
    pub n_candidates: usize,
}

impl TpeProposer {
    pub fn for_budget(budget: usize) -> Self {
        Self {
            n_startup: (budget / 4).max(1),
            gamma: 0.25,
            n_candidates: 24,
        }
    }
}

/// Parzen estimator over one dimension in unit coordinates. Each point's
/// bandwidth is the larger gap to its sorted neighbours, clipped to
/// `[1 / min(100, n + 1), 1]`.
struct Parzen {
    points: Vec<f64>,
    bandwidths: Vec<f64>,
}

impl Parzen {
    fn new(mut points: Vec<f64>) -> Self {
        points.sort_by(f64::total_cmp);
        let n = points.len();
        let floor = 1.0 / (n as f64 + 1.0).min(100.0);
        let bandwidths = (0..n)
            .map(|i| {
                let left = if i == 0 { points[i] } else { points[i] - points[i - 1] };
                let right = if i + 1 == n { 1.0 - points[i] } else { points[i + 1] - points[i] };
                left.max(right).clamp(floor, 1.0)
            })
            .collect();
        Self { points, bandwidths }
    }

    /// Mixture of the uniform prior and one Gaussian per point, equal weights.
    fn density(&self, u: f64) -> f64 {
        let kernels: f64 = self
            .points
            .iter()
            .zip(&self.bandwidths)
            .map(|(p, h)| (-0.5 * ((u - p) / h).powi(2)).exp() / (h * (2.0 * std::f64::consts::PI).sqrt()))
            .sum();
        (1.0 + kernels) / (1.0 + self.points.len() as f64)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let k = rng.random_range(0..=self.points.len());
        if k == self.points.len() {
            return rng.random::<f64>();
        }
        for _ in 0..16 {
            let u = self.points[k] + gaussian(rng, self.bandwidths[k]);
            if (0.0..=1.0).contains(&u) {
                return u;
            }
        }
        self.points[k]
    }
}

fn categorical_density(counts: &[f64], total: f64, i: usize) -> f64 {
    (counts[i] + 1.0) / (total + counts.len() as f64)
}

impl Proposer for TpeProposer {
    fn propose(&mut self, space: &SearchSpace, history: &[TuningRecord], rng: &mut ChaCha8Rng) -> Config {
        let mut done: Vec<(&Config, f64)> = history.iter().filter_map(|r| r.objective.map(|v| (&r.config, v))).collect();
        if history.len() < self.n_startup || done.len() < 2 {
            return space.sample(rng);
        }
        done.sort_by(|a, b| a.1.total_cmp(&b.1));
        let n_good = ((self.gamma * done.len() as f64).ceil() as usize).clamp(1, done.len() - 1);
        let (good, bad) = done.split_at(n_good);

        let mut best: Option<(f64, Config)> = None;
        let mut candidates: Vec<(Config, f64)> = vec![(Config::new(), 0.0); self.n_candidates.max(1)];
        for (name, dim) in &space.dims {
            let units = |set: &[(&Config, f64)]| -> Vec<f64> { set.iter().filter_map(|(c, _)| c.get(name).and_then(|v| dim.to_unit(v))).collect() };
            match dim {
                Dimension::Categorical { choices } => {
                    let count = |set: &[(&Config, f64)]| {
                        let mut c = vec![0.0; choices.len()];
                        for u in units(set) {
                            c[u as usize] += 1.0;
                        }
                        c
                    };
                    let (cg, cb) = (count(good), count(bad));
                    let (tg, tb) = (cg.iter().sum::<f64>(), cb.iter().sum::<f64>());
                    for (cfg, score) in &mut candidates {
                        // Sample from the good distribution by inversion.
                        let mut r = rng.random::<f64>() * (tg + choices.len() as f64);
                        let mut pick = choices.len() - 1;
                        for (i, &c) in cg.iter().enumerate() {
                            if r < c + 1.0 {
                                pick = i;
                                break;
                            }
                            r -= c + 1.0;
                        }
                        *score += categorical_density(&cg, tg, pick).ln() - categorical_density(&cb, tb, pick).ln();
                        cfg.insert(name.clone(), dim.from_unit((pick as f64 + 0.5) / choices.len() as f64));
                    }
                }
                _ => {
                    let l = Parzen::new(units(good));
                    let g = Parzen::new(units(bad));
                    for (cfg, score) in &mut candidates {
                        let u = l.sample(rng);
                        *score += l.density(u).ln() - g.density(u).ln();
                        cfg.insert(name.clone(), dim.from_unit(u));
                    }
                }
            }
        }
        for (cfg, score) in candidates {
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, cfg));
            }
        }
        best.map(|(_, c)| c).unwrap_or_else(|| space.sample(rng))
    }
}

/// Runs `budget` trials proposed by `proposer`. A trial whose objective
/// errors or is non-finite is recorded as failed and skipped.
pub fn optimize<F, E>(
    mut objective: F,
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    proposer: &mut dyn Proposer,
) -> Result<TuningOutcome>
where
    F: FnMut(&Config) -> std::result::Result<f64, E>,
    E: Display,
{
    space.validate()?;
    if budget == 0 {
        return Err(param_err("budget must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records: Vec<TuningRecord> = Vec::with_capacity(budget);
    for trial_id in 0..budget {
        let config = proposer.propose(space, &records, &mut rng);
        let start = Instant::now();
        let (value, error) = match objective(&config) {
            Ok(v) if v.is_finite() => (Some(v), None),
            Ok(v) => (None, Some(format!("objective returned {v}"))),
            Err(e) => (None, Some(e.to_string())),
        };
        records.push(TuningRecord {
            trial_id,
            config,
            objective: value,
            error,
            wall_time_secs: start.elapsed().as_secs_f64(),
        });
    }
    let best = records
        .iter()
        .filter_map(|r| r.objective.map(|v| (r, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.trial_id.cmp(&b.0.trial_id)))
        .map(|(r, v)| (r.config.clone(), v, r.trial_id));
    let Some((best_config, best_value, best_trial)) = best else {
        return Err(param_err(format!("all {budget} trials failed")));
    };
    Ok(TuningOutcome {
        best_config,
        best_value,
        best_trial,
        records,
    })
}

/// TPE search: the first `max(1, budget/4)` trials are random.
pub fn bayes_optimize<F, E>(objective: F, space: &SearchSpace, budget: usize, seed: u64) -> Result<TuningOutcome>
where
    F: FnMut(&Config) -> std::result::Result<f64, E>,
    E: Display,
{
    optimize(objective, space, budget, seed, &mut TpeProposer::for_budget(budget))
}

pub fn random_search<F, E>(objective: F, space: &SearchSpace, budget: usize, seed: u64) -> Result<TuningOutcome>
where
    F: FnMut(&Config) -> std::result::Result<f64, E>,
    E: Display,
{
    optimize(objective, space, budget, seed, &mut RandomProposer)
}

/// Writes one JSON object per line.
pub fn write_records_jsonl(records: &[TuningRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records_jsonl(text: &str) -> Result<Vec<TuningRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
