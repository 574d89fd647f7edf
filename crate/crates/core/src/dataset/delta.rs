use crate::numerics::Array;

/// Hours since the previous observation of each feature, on a unit-step grid.
///
/// `delta[:, 0, :] = 0`; afterwards the gap resets to 1 after an observed
/// step and grows by 1 after a missing one.
pub fn compute_delta(mask: &Array) -> Array {
    let s = mask.shape();
    assert_eq!(s.len(), 3, "mask must be [N, T, D]");
    let (n, t, d) = (s[0], s[1], s[2]);
    let mut delta = Array::zeros(s);
    for r in 0..n {
        for step in 1..t {
            for f in 0..d {
                let prev = (r * t + step - 1) * d + f;
                let cur = prev + d;
                delta[cur] = if mask[prev] > 0.0 { 1.0 } else { 1.0 + delta[prev] };
            }
        }
    }
    delta
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(m: &[f32]) -> Vec<f32> {
        let mask = Array::new(vec![1, m.len(), 1], m.to_vec()).unwrap();
        compute_delta(&mask).into_data()
    }

    #[test]
    fn recursion_examples() {
        assert_eq!(col(&[1.0, 0.0, 0.0, 1.0]), vec![0.0, 1.0, 2.0, 3.0]);
        let full = col(&[1.0; 48]);
        assert_eq!(full[0], 0.0);
        assert!(full[1..].iter().all(|&x| x == 1.0));
        let empty = col(&[0.0; 48]);
        assert_eq!(empty, (0..48).map(|i| i as f32).collect::<Vec<_>>());
    }
}
