//! AdamW with decoupled weight decay, global-norm gradient clipping and
//! gradient accumulation across micro-batches.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Weighted sum of gradients over several backward passes. Parameters that
/// never received a gradient stay `None`.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    sums: Vec<Option<Tensor>>,
}

impl GradAccumulator {
    pub fn new(n_params: usize) -> Self {
        Self {
            sums: vec![None; n_params],
        }
    }

    /// Adds `weight · grad` for every parameter present in `grads`.
    pub fn add(&mut self, params: &ParamStore, grads: &GradStore, weight: f64) -> Result<()> {
        for (slot, p) in self.sums.iter_mut().zip(params.params()) {
            if let Some(g) = grads.get(p.var.as_tensor()) {
                let g = (g.detach() * weight)?;
                *slot = Some(match slot.take() {
                    Some(acc) => (acc + g)?,
                    None => g,
                });
            }
        }
        Ok(())
    }

    pub fn grads(&self) -> &[Option<Tensor>] {
        &self.sums
    }

    /// L2 norm over all present gradients.
    pub fn global_norm(&self) -> Result<f64> {
        let mut sq = 0.0;
        for g in self.sums.iter().flatten() {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
        Ok(sq.sqrt())
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> Result<f64> {
        let norm = self.global_norm()?;
        if norm > max_norm {
            let scale = max_norm / (norm + 1e-6);
            for g in self.sums.iter_mut().flatten() {
                *g = (&*g * scale)?;
            }
        }
        Ok(norm)
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone)]
pub struct MomentState {
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
}

#[derive(Debug)]
pub struct AdamW {
    config: AdamWConfig,
    vars: Vec<Var>,
    state: Vec<MomentState>,
}

impl AdamW {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Result<Self> {
        let vars: Vec<Var> = params.params().iter().map(|p| p.var.clone()).collect();
        let state = vars
            .iter()
            .map(|v| {
                let z = v.as_tensor().zeros_like()?;
                Ok(MomentState {
                    m: z.clone(),
                    v: z,
                    steps: 0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, vars, state })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn state(&self) -> &[MomentState] {
        &self.state
    }

    /// Replaces the moment estimates, e.g. when resuming from a checkpoint.
    pub fn set_state(&mut self, state: Vec<MomentState>) -> Result<()> {
        if state.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state for {} parameters, model has {}",
                state.len(),
                self.vars.len()
            )));
        }
        for (s, v) in state.iter().zip(&self.vars) {
            if s.m.dims() != v.dims() || s.v.dims() != v.dims() {
                return Err(shape_mismatch(v.dims(), s.m.dims()));
            }
        }
        self.state = state;
        Ok(())
    }

    /// One update with learning rate `lr`. Parameters without a gradient are
    /// left untouched, moments included.
    pub fn step(&mut self, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != self.vars.len() {
            return Err(shape_mismatch(self.vars.len(), grads.len()));
        }
        let (b1, b2) = self.config.betas;
        for ((var, st), g) in self.vars.iter().zip(self.state.iter_mut()).zip(grads) {
            let Some(g) = g else { continue };
            st.steps += 1;
            let t = st.steps as i32;
            st.m = ((&st.m * b1)? + (g * (1.0 - b1))?)?;
            st.v = ((&st.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let m_hat = (&st.m / (1.0 - b1.powi(t)))?;
            let v_hat = (&st.v / (1.0 - b2.powi(t)))?;
            let p = var.as_tensor().detach();
            let decayed = (&p * (1.0 - lr * self.config.weight_decay))?;
            let update = (m_hat / (v_hat.sqrt()? + self.config.eps)?)?;
            var.set(&(decayed - (update * lr)?)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut store = ParamStore::new(DType::F64, 0);
        {
            let mut root = store.root();
            root.constant("a", &[values.len()], 0.0).unwrap();
            root.constant("b", &[1], 5.0).unwrap();
        }
        store.get("a").unwrap().set(&Tensor::new(values, &Device::Cpu).unwrap()).unwrap();
        store
    }

    #[test]
    fn matches_reference_update() {
        let store = store_with(&[1.0, -2.0]);
        let mut opt = AdamW::new(&store, AdamWConfig::default()).unwrap();
        let g = Tensor::new(&[0.5f64, -0.25], &Device::Cpu).unwrap();
        opt.step(&[Some(g), None], 0.1).unwrap();
        let a: Vec<f64> = store.get("a").unwrap().as_tensor().to_vec1().unwrap();
        // First step: m̂ = g, v̂ = g², so the update is lr·sign(g) up to eps.
        let expect = |p: f64, g: f64| p * (1.0 - 0.1 * 0.01) - 0.1 * g / (g.abs() + 1e-8);
        assert!((a[0] - expect(1.0, 0.5)).abs() < 1e-12);
        assert!((a[1] - expect(-2.0, -0.25)).abs() < 1e-12);
        let b: Vec<f64> = store.get("b").unwrap().as_tensor().to_vec1().unwrap();
        assert_eq!(b, vec![5.0]);
        assert_eq!(opt.state()[1].steps, 0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let store = store_with(&[3.0, -4.0]);
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() }).unwrap();
        for _ in 0..500 {
            let a = store.get("a").unwrap().as_tensor();
            let loss = a.sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            let mut acc = GradAccumulator::new(2);
            acc.add(&store, &grads, 1.0).unwrap();
            opt.step(acc.grads(), 0.05).unwrap();
        }
        let a: Vec<f64> = store.get("a").unwrap().as_tensor().to_vec1().unwrap();
        assert!(a.iter().all(|v| v.abs() < 1e-2), "{a:?}");
    }

    #[test]
    fn accumulation_and_clipping() {
        let store = store_with(&[1.0, 1.0]);
        let a = store.get("a").unwrap().as_tensor();
        let mut acc = GradAccumulator::new(2);
        for w in [0.25, 0.75] {
            let grads = (a * 4.0).unwrap().sum_all().unwrap().backward().unwrap();
            acc.add(&store, &grads, w).unwrap();
        }
        let g: Vec<f64> = acc.grads()[0].as_ref().unwrap().to_vec1().unwrap();
        assert_eq!(g, vec![4.0, 4.0]);
        assert!(acc.grads()[1].is_none());
        let before = acc.clip_global_norm(1.0).unwrap();
        assert!((before - 32f64.sqrt()).abs() < 1e-12);
        assert!((acc.global_norm().unwrap() - 1.0).abs() < 1e-6);
    }
}
