use super::{Gradients, ParamStore};
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates for every parameter tensor of a [`ParamStore`].
///
/// Tensors that received no gradient in a step (not reachable from the
/// loss) are left untouched, moments included, and keep their own step
/// count for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub tensor_steps: Vec<u64>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let lens: Vec<usize> = params.iter().map(|(_, _, t)| t.len()).collect();
        AdamState {
            config,
            step_count: 0,
            tensor_steps: vec![0; lens.len()],
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn total_len(&self) -> usize {
        self.m.iter().map(Vec::len).sum()
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the update
/// before anything is modified.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() || grads.len() != params.len() {
        bail!(Contract, "optimizer state covers {} tensors, store has {}", state.m.len(), params.len());
    }
    for id in params.ids() {
        let n = params.get(id).len();
        if state.m[id.0].len() != n || state.v[id.0].len() != n {
            bail!(Contract, "moment length mismatch for {}", params.name(id));
        }
        if let Some(g) = grads.get(id) {
            if g.len() != n {
                bail!(Contract, "gradient length mismatch for {}", params.name(id));
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                bail!(Numeric, "non-finite gradient in {} at {}", params.name(id), pos);
            }
        }
    }
    let AdamConfig { lr, beta1, beta2, epsilon } = state.config;
    for id in params.ids() {
        let Some(g) = grads.get(id) else { continue };
        state.tensor_steps[id.0] += 1;
        let t = state.tensor_steps[id.0] as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    state.step_count += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamId, Tape, Tensor};

    fn store(vals: Vec<f64>) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::vector(vals));
        ps
    }

    fn grads_for(ps: &ParamStore, g: Vec<f64>) -> Gradients {
        // route a known gradient through the tape: d/dw mean((w - t)^2) = 2(w - t)/n
        let w = ps.get(ParamId(0)).data().to_vec();
        let n = w.len() as f64;
        let target: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - gi * n / 2.0).collect();
        let mut tape = Tape::new(ps);
        let v = tape.param(ParamId(0));
        let l = tape.mse_loss(v, &Tensor::vector(target)).unwrap();
        tape.backward(l).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut ps = store(vec![0.5, -1.0, 2.0]);
        let mut st = AdamState::new(&ps, AdamConfig::default());
        let g = grads_for(&ps, vec![0.0; 3]);
        adam_step(&mut ps, &g, &mut st).unwrap();
        assert_eq!(ps.get(ParamId(0)).data(), &[0.5, -1.0, 2.0]);
        assert_eq!(st.step_count, 1);
        assert!(st.m[0].iter().all(|&m| m == 0.0));
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut ps = store(vec![0.5, -1.0]);
        let mut st = AdamState::new(&ps, AdamConfig::default());
        let g = grads_for(&ps, vec![0.2, -0.4]);
        adam_step(&mut ps, &g, &mut st).unwrap();
        let (m0, v0) = (st.m[0].clone(), st.v[0].clone());
        let g = grads_for(&ps, vec![0.0, 0.0]);
        adam_step(&mut ps, &g, &mut st).unwrap();
        for i in 0..2 {
            assert_eq!(st.m[0][i], 0.9 * m0[i]);
            assert_eq!(st.v[0][i], 0.999 * v0[i]);
        }
    }

    #[test]
    fn nan_gradient_aborts_without_change() {
        let mut ps = store(vec![1.0]);
        let mut st = AdamState::new(&ps, AdamConfig::default());
        let mut tape = Tape::new(&ps);
        let v = tape.param(ParamId(0));
        let l = tape.mse_loss(v, &Tensor::scalar(f64::NAN)).unwrap();
        let g = tape.backward(l).unwrap();
        let before = ps.clone();
        let err = adam_step(&mut ps, &g, &mut st).unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Numeric);
        assert_eq!(ps, before);
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn unreached_tensor_is_skipped() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Tensor::scalar(1.0));
        let b = ps.add("b", Tensor::scalar(1.0));
        let mut st = AdamState::new(&ps, AdamConfig { lr: 0.1, ..AdamConfig::default() });
        let mut tape = Tape::new(&ps);
        let v = tape.param(a);
        let l = tape.mse_loss(v, &Tensor::scalar(0.0)).unwrap();
        let g = tape.backward(l).unwrap();
        adam_step(&mut ps, &g, &mut st).unwrap();
        assert!(ps.get(a).data()[0] < 1.0);
        assert_eq!(ps.get(b).data()[0], 1.0);
        assert_eq!(st.tensor_steps, vec![1, 0]);
    }
}
