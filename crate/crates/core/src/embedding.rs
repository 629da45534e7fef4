//! Item and position embedding tables.

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Standard deviation of the Gaussian used for both tables.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    /// `|V| x d`; row 0 is padding and stays zero.
    pub items: Var,
    /// `n x d`; slot `j` of the padded window uses row `j`.
    pub positions: Var,
    catalog_size: usize,
}

impl EmbeddingTable {
    pub fn init(store: &mut ParamStore, catalog_size: usize, d: usize, n: usize) -> Result<Self> {
        if d == 0 || n == 0 || catalog_size < 2 {
            return Err(Error::Config(format!(
                "invalid embedding shape: catalog {catalog_size}, d {d}, n {n}"
            )));
        }
        Ok(Self {
            items: store.embedding("embedding.items", catalog_size, d, INIT_STD)?,
            positions: store.normal("embedding.positions", &[n, d], INIT_STD)?,
            catalog_size,
        })
    }

    pub fn catalog_size(&self) -> usize {
        self.catalog_size
    }

    pub fn dim(&self) -> usize {
        self.items.dims()[1]
    }

    /// Row-wise lookup of `[..]` u32 indices into `[.., d]`.
    pub fn vectors(&self, indices: &Tensor) -> Result<Tensor> {
        let max = indices.flatten_all()?.max(0)?.to_scalar::<u32>()? as usize;
        if max >= self.catalog_size {
            return Err(Error::Config(format!(
                "item index {max} outside catalog of size {}",
                self.catalog_size
            )));
        }
        let mut dims = indices.dims().to_vec();
        let flat = self
            .items
            .as_tensor()
            .index_select(&indices.flatten_all()?, 0)?;
        dims.push(self.dim());
        Ok(flat.reshape(dims)?)
    }

    /// Sequence lookup `[B, n] -> [B, n, d]`, zeroed at masked slots so no
    /// gradient reaches the padding row.
    pub fn lookup(&self, items: &Tensor, mask: &Tensor) -> Result<Tensor> {
        Ok(self.vectors(items)?.broadcast_mul(&mask.unsqueeze(2)?)?)
    }

    /// The real-item rows `1..|V|`.
    pub fn catalog(&self) -> Result<Tensor> {
        Ok(self.items.as_tensor().narrow(0, 1, self.catalog_size - 1)?)
    }
}
