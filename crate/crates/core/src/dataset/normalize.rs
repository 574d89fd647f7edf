use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Array;

/// Per-feature mean and population standard deviation over observed cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Array,
    pub std: Array,
}

/// Fits per-feature statistics on the observed cells of a `[N, T, D]` grid.
/// A feature with no observations gets mean 0 and std 0.
pub fn normalize_fit(values: &Array, mask: &Array) -> Result<NormStats> {
    if values.shape() != mask.shape() || values.shape().len() != 3 {
        return Err(Error::invalid(format!(
            "normalize_fit: values {:?} vs mask {:?}",
            values.shape(),
            mask.shape()
        )));
    }
    let d = values.shape()[2];
    let mut count = vec![0u64; d];
    let mut sum = vec![0.0f64; d];
    for (i, (&v, &m)) in values.data().iter().zip(mask.data()).enumerate() {
        if m > 0.0 {
            count[i % d] += 1;
            sum[i % d] += v as f64;
        }
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| if count[j] > 0 { sum[j] / count[j] as f64 } else { 0.0 })
        .collect();
    let mut sq = vec![0.0f64; d];
    for (i, (&v, &m)) in values.data().iter().zip(mask.data()).enumerate() {
        if m > 0.0 {
            let e = v as f64 - mean[i % d];
            sq[i % d] += e * e;
        }
    }
    let std: Vec<f64> = (0..d)
        .map(|j| if count[j] > 0 { (sq[j] / count[j] as f64).sqrt() } else { 0.0 })
        .collect();
    Ok(NormStats {
        mean: Array::from_fn(&[d], |j| mean[j] as f32),
        std: Array::from_fn(&[d], |j| std[j] as f32),
    })
}

/// Z-scores observed cells; a zero-std feature is only mean-centred.
/// Unobserved cells become 0.
pub fn normalize_apply(values: &Array, mask: &Array, stats: &NormStats) -> Result<Array> {
    let d = stats.mean.len();
    if values.shape() != mask.shape()
        || values.shape().last() != Some(&d)
        || stats.std.len() != d
    {
        return Err(Error::invalid(format!(
            "normalize_apply: values {:?}, mask {:?}, stats over {} features",
            values.shape(),
            mask.shape(),
            d
        )));
    }
    let mut out = values.clone();
    for (i, (v, &m)) in out.data_mut().iter_mut().zip(mask.data()).enumerate() {
        let j = i % d;
        *v = if m > 0.0 {
            let centred = *v as f64 - stats.mean[j] as f64;
            let s = stats.std[j] as f64;
            (if s > 0.0 { centred / s } else { centred }) as f32
        } else {
            0.0
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(vals: &[f32], obs: &[f32]) -> (Array, Array) {
        let n = vals.len();
        (
            Array::new(vec![1, n, 1], vals.to_vec()).unwrap(),
            Array::new(vec![1, n, 1], obs.to_vec()).unwrap(),
        )
    }

    #[test]
    fn population_std() {
        let (v, m) = column(&[1.0, 2.0, 3.0, 99.0], &[1.0, 1.0, 1.0, 0.0]);
        let s = normalize_fit(&v, &m).unwrap();
        assert!((s.mean[0] - 2.0).abs() < 1e-7);
        assert!((s.std[0] as f64 - (2.0f64 / 3.0).sqrt()).abs() < 1e-6);
        let z = normalize_apply(&v, &m, &s).unwrap();
        let expect = [-1.2247449, 0.0, 1.2247449, 0.0];
        for (a, b) in z.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_feature_is_only_centred() {
        let (v, m) = column(&[5.0, 5.0], &[1.0, 1.0]);
        let s = normalize_fit(&v, &m).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (5.0, 0.0));
        assert_eq!(normalize_apply(&v, &m, &s).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn never_observed_feature() {
        let (v, m) = column(&[3.0, 4.0], &[0.0, 0.0]);
        let s = normalize_fit(&v, &m).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (0.0, 0.0));
    }

    #[test]
    fn standardized_data_is_unchanged() {
        let (v, m) = column(&[-1.0, 1.0, -1.0, 1.0], &[1.0; 4]);
        let s = normalize_fit(&v, &m).unwrap();
        let z = normalize_apply(&v, &m, &s).unwrap();
        for (a, b) in z.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn stats_shape_mismatch() {
        let (v, m) = column(&[1.0], &[1.0]);
        let s = NormStats {
            mean: Array::zeros(&[2]),
            std: Array::zeros(&[2]),
        };
        assert!(normalize_apply(&v, &m, &s).is_err());
    }
}
