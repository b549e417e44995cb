use super::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    let g = grads.raw();
    if g.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::shape("adam_step", &[store.len()], &[g.len(), state.m.len()]));
    }
    for ((id, gi), mi) in store.ids().zip(g).zip(&state.m) {
        let n = store.get(id).numel();
        if gi.len() != n || mi.len() != n {
            return Err(Error::shape("adam_step", store.get(id).shape(), &[gi.len()]));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let theta = store.get_mut(id).data_mut();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for j in 0..theta.len() {
            let gj = g[k][j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            theta[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![v])).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = scalar_store(0.7);
        let grads = Gradients::zeros_like(&store);
        let mut st = AdamState::new(&store, AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut store, &grads, &mut st).unwrap();
        }
        assert_eq!(store.by_name("w").unwrap().data(), &[0.7]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_closed_form() {
        let mut store = scalar_store(0.0);
        let mut grads = Gradients::zeros_like(&store);
        let mut g = crate::tensor::Graph::new();
        let b = store.bind(&mut g);
        let id = store.id("w").unwrap();
        let s = g.sum(b.var(id)).unwrap();
        g.backward(s).unwrap();
        grads.accumulate(&g, &b);
        let mut st = AdamState::new(&store, AdamConfig::default());
        adam_step(&mut store, &grads, &mut st).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let expect = -0.001 / (1.0 + 1e-8);
        assert!((store.get(id).item() - expect).abs() < 1e-18);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = scalar_store(0.0);
        let other = {
            let mut s = ParamStore::new();
            s.add("w", Tensor::vector(vec![0.0, 0.0])).unwrap();
            s
        };
        let grads = Gradients::zeros_like(&other);
        let mut st = AdamState::new(&store, AdamConfig::default());
        assert!(adam_step(&mut store, &grads, &mut st).is_err());
    }
}
