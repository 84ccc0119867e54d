//! Named parameter collections and the Adam optimizer.

use crate::dense::DenseArray;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;

/// Flat, ordered collection of named learnable arrays.
#[derive(Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub entries: Vec<(String, DenseArray<T>)>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn new() -> Self {
        NetworkParams {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: DenseArray<T>) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Register every parameter as a gradient-bearing leaf of `g`, in order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|(_, v)| g.param(v.clone()))
            .collect()
    }

    /// Register every parameter as a constant leaf (frozen inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|(_, v)| g.leaf(v.clone()))
            .collect()
    }
}

impl<T: Scalar> Default for NetworkParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam state: one pair of moment arrays per parameter, plus shared constants.
#[derive(Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<DenseArray<T>>,
    pub v: Vec<DenseArray<T>>,
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &NetworkParams<T>, lr: f64) -> Self {
        AdamState {
            m: params
                .entries
                .iter()
                .map(|(_, p)| DenseArray::zeros(p.shape()))
                .collect(),
            v: params
                .entries
                .iter()
                .map(|(_, p)| DenseArray::zeros(p.shape()))
                .collect(),
            step: 0,
            lr: T::of_f64(lr),
            beta1: T::of_f64(0.9),
            beta2: T::of_f64(0.999),
            eps: T::of_f64(1e-8),
        }
    }
}

/// One bias-corrected Adam update over all parameters.
pub fn adam_step<T: Scalar>(
    params: &mut NetworkParams<T>,
    grads: &[DenseArray<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::config(format!(
            "adam_step arity mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.entries.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::config(format!(
                "gradient shape {} does not match parameter '{name}' {}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::one() - state.beta1.powi(t);
    let bc2 = T::one() - state.beta2.powi(t);
    let one = T::one();
    for (((_, p), g), (m, v)) in params
        .entries
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = state.beta1 * md[i] + (one - state.beta1) * gi;
            vd[i] = state.beta2 * vd[i] + (one - state.beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] = pd[i] - state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::Shape;

    fn single(v: f64) -> NetworkParams<f64> {
        let mut p = NetworkParams::new();
        p.push("w", DenseArray::full(Shape::d1(1), v));
        p
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = single(0.7);
        let mut st = AdamState::new(&p, 1e-3);
        for _ in 0..5 {
            adam_step(&mut p, &[DenseArray::zeros(Shape::d1(1))], &mut st).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn single_step_closed_form() {
        // constant gradient 1: mhat = 1, vhat = 1, so the step is lr / (1 + eps)
        let mut p = single(0.0);
        let mut st = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &[DenseArray::full(Shape::d1(1), 1.0)], &mut st).unwrap();
        let got = p.get("w").unwrap().data()[0];
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn batched_update_matches_independent_updates() {
        let mut joint = NetworkParams::new();
        joint.push("a", DenseArray::full(Shape::d1(1), 0.3f64));
        joint.push("b", DenseArray::full(Shape::d1(1), -0.9f64));
        let mut st = AdamState::new(&joint, 1e-2);
        adam_step(
            &mut joint,
            &[
                DenseArray::full(Shape::d1(1), 0.5),
                DenseArray::full(Shape::d1(1), -2.0),
            ],
            &mut st,
        )
        .unwrap();

        let mut a = single(0.3);
        let mut sa = AdamState::new(&a, 1e-2);
        adam_step(&mut a, &[DenseArray::full(Shape::d1(1), 0.5)], &mut sa).unwrap();
        let mut b = single(-0.9);
        let mut sb = AdamState::new(&b, 1e-2);
        adam_step(&mut b, &[DenseArray::full(Shape::d1(1), -2.0)], &mut sb).unwrap();

        assert_eq!(joint.entries[0].1.data()[0], a.get("w").unwrap().data()[0]);
        assert_eq!(joint.entries[1].1.data()[0], b.get("w").unwrap().data()[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single(0.0);
        let mut st = AdamState::new(&p, 1e-3);
        let bad = DenseArray::zeros(Shape::d2(2, 2));
        assert!(adam_step(&mut p, &[bad], &mut st).is_err());
    }
}
