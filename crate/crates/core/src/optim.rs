//! Adam with explicit, serialisable moment buffers.

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One moment pair per parameter, in store order. Parameters that receive no
/// gradient in a step are left untouched, moments included.
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        let zeros = || -> Result<Vec<Tensor>> {
            store
                .params()
                .iter()
                .map(|p| Ok(p.var.zeros_like()?))
                .collect()
        };
        Ok(Self {
            config,
            step: 0,
            first: zeros()?,
            second: zeros()?,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.params().iter().enumerate() {
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            // Detached so the moments do not keep the step's graph alive.
            let g = g.detach();
            let g = if p.padding_row {
                zero_first_row(&g)?
            } else {
                g
            };
            let m = ((&self.first[i] * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&self.second[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + eps)?)?;
            p.var.set(&(p.var.as_tensor().detach() - (update * lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    /// Moment buffers named `adam.m.<param>` / `adam.v.<param>`.
    pub fn state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.first.len());
        for (i, p) in store.params().iter().enumerate() {
            out.push((format!("adam.m.{}", p.name), self.first[i].clone()));
            out.push((format!("adam.v.{}", p.name), self.second[i].clone()));
        }
        out
    }

    pub fn load_state(
        &mut self,
        store: &ParamStore,
        step: u64,
        tensors: &[(String, Tensor)],
    ) -> Result<()> {
        let find = |name: String, like: &Tensor| -> Result<Tensor> {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{name}`")))?;
            if t.dims() != like.dims() {
                return Err(Error::Checkpoint(format!(
                    "optimizer tensor `{name}` has the wrong shape"
                )));
            }
            Ok(t.to_dtype(like.dtype())?)
        };
        for (i, p) in store.params().iter().enumerate() {
            self.first[i] = find(format!("adam.m.{}", p.name), &self.first[i])?;
            self.second[i] = find(format!("adam.v.{}", p.name), &self.second[i])?;
        }
        self.step = step;
        Ok(())
    }
}

fn zero_first_row(g: &Tensor) -> Result<Tensor> {
    let rows = g.dim(0)?;
    let zero = g.narrow(0, 0, 1)?.zeros_like()?;
    Ok(Tensor::cat(&[&zero, &g.narrow(0, 1, rows - 1)?], 0)?)
}
