use super::{Array, Graph, NumericsError, ParamStore, Real, Var};

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn scalar_of<T: Real>(g: &Graph<T>, v: Var) -> Result<f64, NumericsError> {
    let value = g.value(v);
    if value.len() != 1 {
        return Err(NumericsError::NonScalarLoss(value.shape().to_vec()));
    }
    Ok(value.item().as_f64())
}

/// Largest relative disagreement between the tape gradient of a scalar
/// function and its central finite difference, over all coordinates of `x`.
pub fn grad_check<T, E, F>(f: F, x: &Array<T>, eps: f64) -> Result<f64, E>
where
    T: Real,
    E: From<NumericsError>,
    F: Fn(&mut Graph<T>, Var) -> Result<Var, E>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(NumericsError::InvalidStep(eps).into());
    }
    let mut g = Graph::new();
    let xv = g.param("x", x.clone());
    let loss = f(&mut g, xv)?;
    scalar_of(&g, loss)?;
    g.backward(loss)?;
    let analytic = g
        .gradients()
        .remove("x")
        .unwrap_or_else(|| Array::zeros(x.shape()));

    let eval = |probe: Array<T>| -> Result<f64, E> {
        let mut g = Graph::new();
        let xv = g.constant(probe);
        let loss = f(&mut g, xv)?;
        Ok(scalar_of(&g, loss)?)
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus[i] = plus[i] + T::from_f64(eps);
        let mut minus = x.clone();
        minus[i] = minus[i] - T::from_f64(eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_error(analytic[i].as_f64(), numeric));
    }
    Ok(worst)
}

/// [`grad_check`] over every array of a parameter store. The closure builds
/// the loss with parameters as trainable leaves when its flag is true and as
/// constants otherwise. Returns the worst error per parameter name.
pub fn grad_check_params<T, E, F>(
    f: F,
    params: &ParamStore<T>,
    eps: f64,
) -> Result<Vec<(String, f64)>, E>
where
    T: Real,
    E: From<NumericsError>,
    F: Fn(&mut Graph<T>, &ParamStore<T>, bool) -> Result<Var, E>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(NumericsError::InvalidStep(eps).into());
    }
    let mut g = Graph::new();
    let loss = f(&mut g, params, true)?;
    scalar_of(&g, loss)?;
    g.backward(loss)?;
    let analytic = g.gradients();

    let eval = |p: &ParamStore<T>| -> Result<f64, E> {
        let mut g = Graph::new();
        let loss = f(&mut g, p, false)?;
        Ok(scalar_of(&g, loss)?)
    };
    let mut report = Vec::new();
    for (name, value) in params.iter() {
        let zeros = Array::zeros(value.shape());
        let grad = analytic.get(name).unwrap_or(&zeros);
        let mut worst = 0.0f64;
        for i in 0..value.len() {
            let mut probe = params.clone();
            let slot = probe.get_mut(name).expect("name from iteration");
            slot[i] = slot[i] + T::from_f64(eps);
            let up = eval(&probe)?;
            let slot = probe.get_mut(name).expect("name from iteration");
            slot[i] = slot[i] - T::from_f64(2.0 * eps);
            let down = eval(&probe)?;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_error(grad[i].as_f64(), numeric));
        }
        report.push((name.clone(), worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nonpositive_step() {
        let x = Array::<f64>::zeros(&[2]);
        let r: Result<f64, NumericsError> = grad_check(|g, x| Ok(g.sum(x)), &x, 0.0);
        assert_eq!(r, Err(NumericsError::InvalidStep(0.0)));
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Array::<f32>::from_fn(&[4], |i| i as f32);
        let err = grad_check::<_, NumericsError, _>(
            |g, _x| Ok(g.constant(Array::scalar(3.0))),
            &x,
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Array::<f32>::from_fn(&[6], |i| 0.5 + i as f32 * 0.25);
        let err = grad_check::<_, NumericsError, _>(
            |g, x| {
                let s = g.square(x);
                Ok(g.sum(s))
            },
            &x,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
