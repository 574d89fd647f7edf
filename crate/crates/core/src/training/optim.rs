use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Array, ParamStore};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First and second moment estimates, keyed like the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: BTreeMap<String, Array>,
    v: BTreeMap<String, Array>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every parameter named in `grads`.
/// Parameters without a gradient entry are left alone.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Array>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient of `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape()));
        for i in 0..g.len() {
            let gi = g[i] as f64;
            let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * gi;
            let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + EPS);
            p[i] = (p[i] as f64 - update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f32) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Array::scalar(v));
        p
    }

    fn grad(v: f32) -> BTreeMap<String, Array> {
        BTreeMap::from([("x".to_string(), Array::scalar(v))])
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = single(1.5);
        let mut s = AdamState::new();
        adam_step(&mut p, &grad(0.0), &mut s, 0.1).unwrap();
        assert_eq!(p, single(1.5));
    }

    #[test]
    fn first_step_is_unit_update() {
        let mut p = single(1.0);
        let mut s = AdamState::new();
        adam_step(&mut p, &grad(1.0), &mut s, 0.1).unwrap();
        let x = p.get("x").unwrap()[0] as f64;
        assert!((x - 0.9).abs() < 1e-6, "{x}");
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = single(0.3);
            let mut s = AdamState::new();
            for k in 0..20 {
                adam_step(&mut p, &grad((k as f32 * 0.37).sin()), &mut s, 0.01).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = single(0.0);
        let mut s = AdamState::new();
        assert!(adam_step(&mut p, &grad(f32::NAN), &mut s, 0.1).is_err());
        assert_eq!(s.steps(), 0);
    }
}
