use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EventRecord;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Array};
use crate::rng::{derive_seed, rng_from};

/// Latent factors shared by all features.
const LATENT: usize = 3;
/// AR(1) coefficient of the latent trajectories.
const PHI: f64 = 0.9;
/// Slope of the label logistic in units of the functional's standard deviation.
const LABEL_SHARPNESS: f64 = 12.0;
/// Extra hours of readings generated past the retained window.
const TAIL_HOURS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_records: usize,
    pub steps: usize,
    pub n_features: usize,
    pub missing_rate: f64,
    pub seed: u64,
}

/// Generation parameters and clean data, kept for oracle checks.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthInfo {
    pub features: Vec<String>,
    /// `[N, T, D]` values before any reading is dropped.
    pub clean: Array,
    /// Per-feature probability that an hourly reading is dropped.
    pub feature_missing_rates: Vec<f64>,
    /// `[D, LATENT]` loadings.
    pub loadings: Vec<f64>,
    pub offsets: Vec<f64>,
    pub scales: Vec<f64>,
    /// Weights of the linear functional over time-averaged standardized features.
    pub label_weights: Vec<f64>,
    /// Functional value per record and the probability its label is 1.
    pub functional: Vec<f64>,
    pub label_prob: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub events: Vec<EventRecord>,
    pub labels: Vec<(String, u8)>,
    pub info: SynthInfo,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Desk-scale stand-in for ICU extracts.
///
/// Each record has a static latent level plus an AR(1) latent trajectory;
/// features are noisy linear read-outs of the latent state with their own
/// offset and scale. The label is Bernoulli with probability given by a
/// logistic of a fixed linear functional of the clean trajectory. Hourly
/// readings are dropped independently with per-feature rates spread linearly
/// over `[0.5, 1.5] * missing_rate` (mean `missing_rate` when no rate is
/// clipped at 0.95).
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.n_features < 2 {
        return Err(Error::invalid("synthetic data needs at least 2 features"));
    }
    if !(0.0..1.0).contains(&cfg.missing_rate) {
        return Err(Error::invalid(format!(
            "missing_rate must be in [0, 1), got {}",
            cfg.missing_rate
        )));
    }
    if cfg.n_records == 0 || cfg.steps == 0 {
        return Err(Error::invalid("n_records and steps must be positive"));
    }
    let (n, t, d) = (cfg.n_records, cfg.steps, cfg.n_features);
    let mut prng = rng_from(derive_seed(cfg.seed, "synth-params", 0));
    let features: Vec<String> = (0..d).map(|j| format!("f{j:02}")).collect();
    let loadings: Vec<f64> = (0..d * LATENT).map(|_| normal(&mut prng)).collect();
    let offsets: Vec<f64> = (0..d).map(|j| 10.0 * j as f64 + normal(&mut prng)).collect();
    let scales: Vec<f64> = (0..d).map(|j| 1.0 + 0.5 * (j % 4) as f64).collect();
    let mut label_weights: Vec<f64> = (0..d).map(|_| normal(&mut prng)).collect();
    let norm = label_weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    label_weights.iter_mut().for_each(|w| *w /= norm);
    let feature_missing_rates: Vec<f64> = (0..d)
        .map(|j| {
            let spread = 0.5 + j as f64 / (d - 1) as f64;
            (cfg.missing_rate * spread).min(0.95)
        })
        .collect();

    let total_hours = t + TAIL_HOURS;
    let innov = (1.0 - PHI * PHI).sqrt();
    let mut clean = Array::zeros(&[n, t, d]);
    let mut events = Vec::new();
    let mut functional = vec![0.0; n];
    let mut rrng = rng_from(derive_seed(cfg.seed, "synth-records", 0));
    let mut hour_vals = vec![0.0f64; total_hours * d];
    for r in 0..n {
        let id = format!("r{r:05}");
        let level: Vec<f64> = (0..LATENT).map(|_| normal(&mut rrng)).collect();
        let mut state: Vec<f64> = (0..LATENT).map(|_| normal(&mut rrng)).collect();
        let mut acc = 0.0;
        for h in 0..total_hours {
            if h > 0 {
                for s in state.iter_mut() {
                    *s = PHI * *s + innov * normal(&mut rrng);
                }
            }
            for j in 0..d {
                let latent: f64 = (0..LATENT)
                    .map(|k| loadings[j * LATENT + k] * (level[k] + 0.7 * state[k]))
                    .sum();
                let standardized = latent + 0.1 * normal(&mut rrng);
                hour_vals[h * d + j] = offsets[j] + scales[j] * standardized;
                if h < t {
                    acc += label_weights[j] * latent;
                }
            }
        }
        functional[r] = acc / t as f64;
        for h in 0..total_hours {
            for j in 0..d {
                let v = hour_vals[h * d + j];
                if h < t {
                    clean[(r * t + h) * d + j] = v as f32;
                }
                let keep = rrng.random::<f64>() >= feature_missing_rates[j];
                let offset: f64 = rrng.random::<f64>();
                if keep {
                    // millisecond-hour timestamps; values carry the f32 the grid stores
                    events.push(EventRecord {
                        record_id: id.clone(),
                        t_hours: ((h as f64 + offset) * 1000.0).floor() / 1000.0,
                        feature: features[j].clone(),
                        value: v as f32 as f64,
                    });
                }
            }
        }
    }
    let mean = functional.iter().sum::<f64>() / n as f64;
    let sd = (functional.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n as f64)
        .sqrt()
        .max(1e-12);
    let mut lrng = rng_from(derive_seed(cfg.seed, "synth-labels", 0));
    let mut label_prob = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (r, f) in functional.iter().enumerate() {
        let p = sigmoid(LABEL_SHARPNESS * (f - mean) / sd);
        label_prob.push(p);
        let y = u8::from(lrng.random::<f64>() < p);
        labels.push((format!("r{r:05}"), y));
    }
    Ok(SynthData {
        events,
        labels,
        info: SynthInfo {
            features,
            clean,
            feature_missing_rates,
            loadings,
            offsets,
            scales,
            label_weights,
            functional,
            label_prob,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::bin_hourly;

    fn cfg(rate: f64) -> SynthConfig {
        SynthConfig {
            n_records: 20,
            steps: 48,
            n_features: 4,
            missing_rate: rate,
            seed: 11,
        }
    }

    #[test]
    fn no_missingness_gives_full_mask() {
        let s = synth_generate(&cfg(0.0)).unwrap();
        let g = bin_hourly(&s.events, &s.labels, None, 48).unwrap();
        assert!(g.mask.data().iter().all(|&m| m == 1.0));
        assert_eq!(g.values, s.info.clean);
    }

    #[test]
    fn deterministic() {
        assert_eq!(synth_generate(&cfg(0.3)).unwrap(), synth_generate(&cfg(0.3)).unwrap());
    }

    #[test]
    fn rejects_bad_params() {
        assert!(synth_generate(&cfg(1.0)).is_err());
        assert!(synth_generate(&cfg(-0.1)).is_err());
        let mut c = cfg(0.1);
        c.n_features = 1;
        assert!(synth_generate(&c).is_err());
    }

    #[test]
    fn rates_average_to_target() {
        let s = synth_generate(&cfg(0.4)).unwrap();
        let mean: f64 = s.info.feature_missing_rates.iter().sum::<f64>() / 4.0;
        assert!((mean - 0.4).abs() < 1e-12);
    }
}
