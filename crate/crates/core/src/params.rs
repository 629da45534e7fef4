//! Named, ordered parameter storage with seeded initialisation.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// A trainable tensor. Embedding tables flag row 0 as padding: it is kept at
/// zero, excluded from the L2 penalty and never updated.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub padding_row: bool,
}

/// Parameters in creation order. Initialisation draws from one seeded stream,
/// so building the same model twice with the same seed yields identical values.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.var)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    fn push(
        &mut self,
        name: &str,
        values: Vec<f64>,
        shape: &[usize],
        padding_row: bool,
    ) -> Result<Var> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.push(Param {
            name: name.to_string(),
            var: var.clone(),
            padding_row,
        });
        Ok(var)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.push(name, values, shape, false)
    }

    /// Gaussian table whose row 0 is the zero padding vector.
    pub fn embedding(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<Var> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut values: Vec<f64> = (0..rows * cols)
            .map(|_| dist.sample(&mut self.rng))
            .collect();
        values[..cols].iter_mut().for_each(|v| *v = 0.0);
        self.push(name, values, &[rows, cols], true)
    }

    /// Glorot-uniform `fan_in x fan_out` matrix.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Var> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist =
            Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
        let values = (0..fan_in * fan_out)
            .map(|_| dist.sample(&mut self.rng))
            .collect();
        self.push(name, values, &[fan_in, fan_out], false)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let n = shape.iter().product();
        self.push(name, vec![0.0; n], shape, false)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let n = shape.iter().product();
        self.push(name, vec![1.0; n], shape, false)
    }

    /// Sum of squared entries over every parameter, padding rows excluded.
    pub fn l2(&self) -> Result<Tensor> {
        let mut total = Tensor::zeros((), self.dtype, &self.device)?;
        for p in &self.params {
            let t = p.var.as_tensor();
            let t = if p.padding_row {
                let rows = t.dim(0)?;
                t.narrow(0, 1, rows - 1)?
            } else {
                t.clone()
            };
            total = (total + t.sqr()?.sum_all()?)?;
        }
        Ok(total)
    }

    /// Copies values from `other`, matching by name and shape.
    pub fn load_from(&self, values: &[(String, Tensor)]) -> Result<()> {
        for p in &self.params {
            let (_, t) = values
                .iter()
                .find(|(n, _)| n == &p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if t.dims() != p.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}
