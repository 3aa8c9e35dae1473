use super::model::Gradients;
use crate::error::{shape, Error, Result};
use crate::scalar::Real;

/// Adam moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    /// Zero moments for tensors of the given lengths; beta1 0.9, beta2 0.999,
    /// eps 1e-8.
    pub fn new(lengths: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<T>> = lengths.into_iter().map(|l| vec![T::zero(); l]).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            eps: T::from_f64_lossy(1e-8),
        }
    }

    pub fn for_params(params: &[&[T]]) -> Self {
        Self::new(params.iter().map(|p| p.len()))
    }
}

/// One bias-corrected Adam update. Nothing is modified when a gradient is
/// non-finite.
pub fn adam_step<T: Real>(params: &mut [&mut [T]], grads: &Gradients<T>, state: &mut AdamState<T>, lr: T) -> Result<()> {
    if params.len() != grads.values.len() || params.len() != state.m.len() {
        return Err(shape(format!(
            "{} parameter tensors, {} gradients, {} moment slots",
            params.len(),
            grads.values.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(&grads.values).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(shape(format!("parameter tensor {i}: length mismatch")));
        }
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(&grads.values)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((x, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(p: &mut Vec<f64>, g: f64, s: &mut AdamState<f64>, lr: f64) -> Result<()> {
        adam_step(&mut [&mut p[..]], &Gradients { values: vec![vec![g]] }, s, lr)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.5];
        let mut s = AdamState::new([1]);
        step(&mut p, 0.0, &mut s, 1e-4).unwrap();
        assert_eq!(p, vec![1.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut s = AdamState::new([1]);
        step(&mut p, 1.0, &mut s, 1e-4).unwrap();
        assert!((p[0] + 1e-4 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn three_step_trace() {
        // reference recursion written out independently
        let grads = [0.3, -1.2, 0.05];
        let (lr, b1, b2, eps) = (1e-3f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 2.0f64);
        let mut want = Vec::new();
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
            want.push(x);
        }
        let mut p = vec![2.0];
        let mut s = AdamState::new([1]);
        for (g, w) in grads.iter().zip(want) {
            step(&mut p, *g, &mut s, lr).unwrap();
            assert!((p[0] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![1.0];
        let mut s = AdamState::new([1]);
        assert!(matches!(step(&mut p, f64::NAN, &mut s, 1e-4), Err(Error::Numeric(_))));
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.step, 0);
    }
}
