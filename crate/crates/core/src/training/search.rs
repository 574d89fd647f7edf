use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpec {
    pub n_trials: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Epoch budgets at which surviving trials are compared.
    pub rungs: Vec<usize>,
    /// Reduction factor: the best `1/eta` of survivors advance.
    pub eta: usize,
}

impl Default for SearchSpec {
    fn default() -> Self {
        Self {
            n_trials: 20,
            lr_min: 1e-5,
            lr_max: 1e-3,
            rungs: vec![5, 15, 45],
            eta: 3,
        }
    }
}

impl SearchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, constraint: &str| {
            Err(Error::Config {
                key: format!("search.{key}"),
                constraint: constraint.into(),
            })
        };
        if self.n_trials == 0 {
            return bad("n_trials", "must be positive");
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad("lr_min", "need 0 < lr_min <= lr_max");
        }
        if self.rungs.is_empty() || self.rungs.windows(2).any(|w| w[0] >= w[1]) || self.rungs[0] == 0 {
            return bad("rungs", "must be non-empty, positive and strictly increasing");
        }
        if self.eta < 2 {
            return bad("eta", "must be at least 2");
        }
        Ok(())
    }

    /// Log-uniform learning rates, one per trial.
    pub fn sample(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(derive_seed(seed, "lr-search", 0));
        let (lo, hi) = (self.lr_min.ln(), self.lr_max.ln());
        (0..self.n_trials)
            .map(|_| (lo + (hi - lo) * rng.random::<f64>()).exp().clamp(self.lr_min, self.lr_max))
            .collect()
    }
}

/// A resumable training run scored by validation loss.
pub trait Trial {
    /// Trains up to `epoch` total epochs and returns the validation loss there.
    fn advance_to(&mut self, epoch: usize) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub lr: f64,
    /// Validation loss at each rung the trial reached.
    pub rung_losses: Vec<f64>,
    /// Index of the rung after which the trial was stopped.
    pub pruned_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best_lr: f64,
    pub best_trial: usize,
    pub trials: Vec<TrialRecord>,
}

fn by_loss(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    // NaN sorts last; ties go to the earlier trial
    match (a.1.is_nan(), b.1.is_nan()) {
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        _ => a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal),
    }
    .then(a.0.cmp(&b.0))
}

/// Successive halving over log-uniform learning rates. After every rung but
/// the last, `max(1, floor(n / eta))` survivors advance; the best trial at
/// the final rung wins.
pub fn lr_search<T: Trial>(
    spec: &SearchSpec,
    seed: u64,
    mut make_trial: impl FnMut(usize, f64) -> Result<T>,
) -> Result<SearchOutcome> {
    spec.validate()?;
    let lrs = spec.sample(seed);
    let mut records: Vec<TrialRecord> = lrs
        .iter()
        .enumerate()
        .map(|(trial, &lr)| TrialRecord {
            trial,
            lr,
            rung_losses: Vec::new(),
            pruned_at: None,
        })
        .collect();
    let mut alive: Vec<(usize, T)> = Vec::with_capacity(lrs.len());
    for (i, &lr) in lrs.iter().enumerate() {
        alive.push((i, make_trial(i, lr)?));
    }
    let last = spec.rungs.len() - 1;
    let mut ranked = Vec::new();
    for (r, &budget) in spec.rungs.iter().enumerate() {
        ranked.clear();
        for (i, trial) in alive.iter_mut() {
            let loss = trial.advance_to(budget)?;
            records[*i].rung_losses.push(loss);
            ranked.push((*i, loss));
        }
        ranked.sort_by(by_loss);
        if r == last {
            break;
        }
        let keep = (ranked.len() / spec.eta).max(1);
        let survivors: Vec<usize> = ranked[..keep].iter().map(|x| x.0).collect();
        for &(i, _) in &ranked[keep..] {
            records[i].pruned_at = Some(r);
        }
        alive.retain(|(i, _)| survivors.contains(i));
    }
    let best_trial = ranked[0].0;
    Ok(SearchOutcome {
        best_lr: lrs[best_trial],
        best_trial,
        trials: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Loss is the distance of log10(lr) from -4, falling with epochs.
    struct Bowl {
        lr: f64,
        log: std::rc::Rc<std::cell::RefCell<Vec<(usize, usize)>>>,
        id: usize,
    }

    impl Trial for Bowl {
        fn advance_to(&mut self, epoch: usize) -> Result<f64> {
            self.log.borrow_mut().push((self.id, epoch));
            Ok((self.lr.log10() + 4.0).abs() + 1.0 / epoch as f64)
        }
    }

    fn run(spec: &SearchSpec) -> (SearchOutcome, Vec<(usize, usize)>) {
        let log = std::rc::Rc::new(std::cell::RefCell::new(Vec::new()));
        let out = lr_search(spec, 7, |id, lr| {
            Ok(Bowl {
                lr,
                log: log.clone(),
                id,
            })
        })
        .unwrap();
        let calls = log.borrow().clone();
        (out, calls)
    }

    #[test]
    fn nine_three_one() {
        let spec = SearchSpec {
            n_trials: 9,
            ..Default::default()
        };
        let (out, calls) = run(&spec);
        let at = |e: usize| calls.iter().filter(|c| c.1 == e).count();
        assert_eq!((at(5), at(15), at(45)), (9, 3, 1));
        let best = out
            .trials
            .iter()
            .min_by(|a, b| a.rung_losses[0].partial_cmp(&b.rung_losses[0]).unwrap())
            .unwrap();
        assert_eq!(out.best_trial, best.trial);
    }

    #[test]
    fn single_trial_wins() {
        let spec = SearchSpec {
            n_trials: 1,
            ..Default::default()
        };
        let (out, _) = run(&spec);
        assert_eq!(out.best_trial, 0);
        assert_eq!(out.trials[0].pruned_at, None);
        assert_eq!(out.trials[0].rung_losses.len(), 3);
    }

    #[test]
    fn samples_in_range() {
        let spec = SearchSpec {
            n_trials: 500,
            ..Default::default()
        };
        for lr in spec.sample(3) {
            assert!((1e-5..=1e-3).contains(&lr));
        }
    }
}
