//! Target-aware user interest: a transformer over the whole history for the
//! long-term view, horizontal and vertical convolutions over the last `m`
//! items (plus the target item while training) for the short-term view, and
//! a small feed-forward fusion of the two.

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{last_slot, matmul_last, ForwardCtx, Linear, TransformerEncoder};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct InterestConfig {
    pub d: usize,
    /// Number of most recent items in the short-term window.
    pub m: usize,
    /// Horizontal kernels per height.
    pub z: usize,
    /// Vertical kernels.
    pub z_vertical: usize,
    pub heads: usize,
    pub layers: usize,
    /// Share one `W1` between both interests; otherwise the long-term view
    /// gets its own matrix.
    pub shared_w1: bool,
}

/// The three interest vectors, each `[B, d]`.
#[derive(Clone, Debug)]
pub struct UserInterest {
    pub e_long: Tensor,
    pub e_short: Tensor,
    pub e_fused: Tensor,
}

/// Horizontal kernels of one height.
#[derive(Clone, Debug)]
pub struct HorizontalBank {
    pub height: usize,
    /// `[height * d, z]`, row-major over (row, column) of the kernel.
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct ConvInterest {
    pub m: usize,
    pub horizontal: Vec<HorizontalBank>,
    /// `[m + 1, z']`.
    pub vertical: Var,
    pub vertical_bias: Var,
    pub mlp: Linear,
}

impl ConvInterest {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        m: usize,
        z: usize,
        z_vertical: usize,
    ) -> Result<Self> {
        if m == 0 || z == 0 || z_vertical == 0 {
            return Err(Error::Config("m, z and z' must be positive".into()));
        }
        let rows = m + 1;
        let horizontal = (1..=rows)
            .map(|height| {
                Ok(HorizontalBank {
                    height,
                    weight: store.xavier(&format!("{name}.h{height}.weight"), height * d, z)?,
                    bias: store.zeros(&format!("{name}.h{height}.bias"), &[z])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let vertical = store.xavier(&format!("{name}.vertical.weight"), rows, z_vertical)?;
        let vertical_bias = store.zeros(&format!("{name}.vertical.bias"), &[z_vertical])?;
        let mlp = Linear::new(
            store,
            &format!("{name}.mlp"),
            z * rows + z_vertical * d,
            d,
            true,
        )?;
        Ok(Self {
            m,
            horizontal,
            vertical,
            vertical_bias,
            mlp,
        })
    }

    /// Builds the `[B, m + 1, d]` window: the last `m` slots of `h` (zero
    /// rows where the user has fewer items) followed by the target row, or a
    /// zero row when no target is given.
    pub fn window(&self, h: &Tensor, target: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, d) = h.dims3()?;
        let take = self.m.min(n);
        let mut parts = Vec::with_capacity(3);
        if take < self.m {
            parts.push(Tensor::zeros((b, self.m - take, d), h.dtype(), h.device())?);
        }
        parts.push(h.narrow(1, n - take, take)?);
        parts.push(match target {
            Some(t) => t.unsqueeze(1)?,
            None => Tensor::zeros((b, 1, d), h.dtype(), h.device())?,
        });
        Ok(Tensor::cat(&parts, 1)?)
    }

    /// Max-pooled horizontal features `[B, z(m+1)]` and concatenated vertical
    /// features `[B, z' d]` of a window.
    pub fn features(&self, window: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, rows, d) = window.dims3()?;
        let mut pooled = Vec::with_capacity(self.horizontal.len());
        for bank in &self.horizontal {
            let slides = rows + 1 - bank.height;
            let patches = (0..slides)
                .map(|p| {
                    window
                        .narrow(1, p, bank.height)?
                        .reshape((b, 1, bank.height * d))
                })
                .collect::<candle_core::Result<Vec<_>>>()?;
            let patches = Tensor::cat(&patches, 1)?;
            let conv = matmul_last(&patches, bank.weight.as_tensor())?
                .broadcast_add(bank.bias.as_tensor())?
                .relu()?;
            pooled.push(conv.max(1)?);
        }
        let c_h = Tensor::cat(&pooled, 1)?;
        let c_v = matmul_last(
            &window.transpose(1, 2)?.contiguous()?,
            self.vertical.as_tensor(),
        )?
        .broadcast_add(self.vertical_bias.as_tensor())?
        .transpose(1, 2)?
        .reshape((b, ()))?;
        Ok((c_h, c_v))
    }

    pub fn forward(&self, h: &Tensor, target: Option<&Tensor>) -> Result<Tensor> {
        let (c_h, c_v) = self.features(&self.window(h, target)?)?;
        Ok(self.mlp.forward(&Tensor::cat(&[c_h, c_v], 1)?)?.relu()?)
    }
}

/// `ReLU(e_s W1 + e_l W1') W2 + b1`, with `W1' = W1` when shared.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub w1: Var,
    pub w1_long: Option<Var>,
    pub w2: Var,
    pub b1: Var,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, shared_w1: bool) -> Result<Self> {
        Ok(Self {
            w1: store.xavier(&format!("{name}.w1"), d, d)?,
            w1_long: if shared_w1 {
                None
            } else {
                Some(store.xavier(&format!("{name}.w1_long"), d, d)?)
            },
            w2: store.xavier(&format!("{name}.w2"), d, d)?,
            b1: store.zeros(&format!("{name}.b1"), &[d])?,
        })
    }

    pub fn forward(&self, e_long: &Tensor, e_short: &Tensor) -> Result<Tensor> {
        let w1_long = self.w1_long.as_ref().unwrap_or(&self.w1);
        fuse(
            e_long,
            e_short,
            self.w1.as_tensor(),
            w1_long.as_tensor(),
            self.w2.as_tensor(),
            self.b1.as_tensor(),
        )
    }
}

pub fn fuse(
    e_long: &Tensor,
    e_short: &Tensor,
    w1: &Tensor,
    w1_long: &Tensor,
    w2: &Tensor,
    b1: &Tensor,
) -> Result<Tensor> {
    let hidden = (e_short.matmul(w1)? + e_long.matmul(w1_long)?)?.relu()?;
    Ok(hidden.matmul(w2)?.broadcast_add(b1)?)
}

#[derive(Clone, Debug)]
pub struct InterestExtractor {
    pub long_term: TransformerEncoder,
    pub short_term: ConvInterest,
    pub fusion: Fusion,
}

impl InterestExtractor {
    pub fn new(store: &mut ParamStore, cfg: &InterestConfig) -> Result<Self> {
        Ok(Self {
            long_term: TransformerEncoder::new(
                store,
                "interest.long",
                cfg.d,
                cfg.heads,
                cfg.layers,
                false,
            )?,
            short_term: ConvInterest::new(
                store,
                "interest.short",
                cfg.d,
                cfg.m,
                cfg.z,
                cfg.z_vertical,
            )?,
            fusion: Fusion::new(store, "interest.fusion", cfg.d, cfg.shared_w1)?,
        })
    }

    /// Transformer over `H + P` with padding masked out of attention; reads
    /// the final slot. `h` must already be zero at masked slots.
    pub fn long_term(
        &self,
        h: &Tensor,
        positions: &Tensor,
        mask: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        let x = h
            .broadcast_add(positions)?
            .broadcast_mul(&mask.unsqueeze(2)?)?;
        let x = ctx.dropout(&x)?;
        last_slot(&self.long_term.forward(&x, mask, ctx)?)
    }

    pub fn short_term(&self, h: &Tensor, target: Option<&Tensor>) -> Result<Tensor> {
        self.short_term.forward(h, target)
    }

    pub fn forward(
        &self,
        h: &Tensor,
        positions: &Tensor,
        mask: &Tensor,
        target: Option<&Tensor>,
        ctx: &mut ForwardCtx,
    ) -> Result<UserInterest> {
        let e_long = self.long_term(h, positions, mask, ctx)?;
        let e_short = self.short_term(h, target)?;
        let e_fused = self.fusion.forward(&e_long, &e_short)?;
        Ok(UserInterest {
            e_long,
            e_short,
            e_fused,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn vals(x: &Tensor) -> Vec<f64> {
        x.flatten_all().unwrap().to_vec1().unwrap()
    }

    fn conv(m: usize, d: usize, z: usize, zv: usize) -> ConvInterest {
        let mut store = ParamStore::new(DType::F64, 5);
        ConvInterest::new(&mut store, "c", d, m, z, zv).unwrap()
    }

    /// Direct nested-loop convolution used as the oracle.
    fn brute_horizontal(window: &[Vec<f64>], kernel: &[Vec<f64>], bias: f64) -> f64 {
        let height = kernel.len();
        (0..=window.len() - height)
            .map(|p| {
                let mut acc = bias;
                for r in 0..height {
                    for c in 0..window[0].len() {
                        acc += kernel[r][c] * window[p + r][c];
                    }
                }
                acc.max(0.0)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn ones_window_and_ones_kernels() {
        let c = conv(2, 2, 1, 1);
        for bank in &c.horizontal {
            let w = if bank.height == 1 { 1.0 } else { 0.0 };
            bank.weight
                .set(&Tensor::full(w, bank.weight.dims(), &Device::Cpu).unwrap())
                .unwrap();
        }
        c.vertical.set(&t(&[1.0, 1.0, 1.0], &[3, 1])).unwrap();
        let window = Tensor::ones((1, 3, 2), DType::F64, &Device::Cpu).unwrap();
        let (c_h, c_v) = c.features(&window).unwrap();
        let ones = vec![vec![1.0; 2]; 3];
        assert_eq!(
            vals(&c_h)[0],
            brute_horizontal(&ones, &[vec![1.0, 1.0]], 0.0)
        );
        assert_eq!(vals(&c_h)[0], 2.0);
        assert_eq!(vals(&c_v), vec![3.0, 3.0]);
    }

    #[test]
    fn random_kernels_match_nested_loops() {
        let (m, d, z, zv) = (3, 4, 2, 2);
        let c = conv(m, d, z, zv);
        for bank in &c.horizontal {
            bank.bias.set(&t(&[0.05, -0.1], &[2])).unwrap();
        }
        let rows: Vec<Vec<f64>> = (0..m + 1)
            .map(|r| {
                (0..d)
                    .map(|k| ((r * 7 + k * 3) as f64 * 0.61).sin())
                    .collect()
            })
            .collect();
        let window = t(&rows.concat(), &[1, m + 1, d]);
        let (c_h, c_v) = c.features(&window).unwrap();
        let c_h = vals(&c_h);
        let mut idx = 0;
        for bank in &c.horizontal {
            let w: Vec<Vec<f64>> = bank.weight.as_tensor().to_vec2().unwrap();
            let b: Vec<f64> = bank.bias.as_tensor().to_vec1().unwrap();
            for k in 0..z {
                let kernel: Vec<Vec<f64>> = (0..bank.height)
                    .map(|r| (0..d).map(|c| w[r * d + c][k]).collect())
                    .collect();
                let expect = brute_horizontal(&rows, &kernel, b[k]);
                assert!((c_h[idx] - expect).abs() < 1e-14);
                idx += 1;
            }
        }
        let fv: Vec<Vec<f64>> = c.vertical.as_tensor().to_vec2().unwrap();
        let c_v = vals(&c_v);
        for k in 0..zv {
            for col in 0..d {
                let expect: f64 = (0..=m).map(|r| fv[r][k] * rows[r][col]).sum();
                assert!((c_v[k * d + col] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_kernels_give_mlp_at_zero_input() {
        let c = conv(2, 3, 2, 2);
        for bank in &c.horizontal {
            bank.weight.set(&bank.weight.zeros_like().unwrap()).unwrap();
        }
        c.vertical.set(&c.vertical.zeros_like().unwrap()).unwrap();
        let b = t(&[0.3, -0.2, 0.1], &[3]);
        c.mlp.bias.as_ref().unwrap().set(&b).unwrap();
        let h = t(&(0..18).map(|i| i as f64).collect::<Vec<_>>(), &[1, 6, 3]);
        let out = vals(&c.forward(&h, None).unwrap());
        assert_eq!(out, vec![0.3, 0.0, 0.1]);
    }

    #[test]
    fn short_users_get_zero_rows_at_the_oldest_end() {
        let c = conv(3, 2, 1, 1);
        let h = t(&[0.0, 0.0, 1.0, 2.0], &[1, 2, 2]);
        let target = t(&[5.0, 6.0], &[1, 2]);
        let w = vals(&c.window(&h, Some(&target)).unwrap());
        assert_eq!(w, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn fusion_closed_forms() {
        let eye = Tensor::eye(3, DType::F64, &Device::Cpu).unwrap();
        let zero = t(&[0.0; 3], &[3]);
        let e_s = t(&[1.0, -2.0, 0.5], &[1, 3]);
        let e_l = e_s.neg().unwrap();
        assert_eq!(
            vals(&fuse(&e_l, &e_s, &eye, &eye, &eye, &zero).unwrap()),
            vec![0.0; 3]
        );
        let e_l = t(&[0.5, 1.0, 0.0], &[1, 3]);
        let e_s = t(&[1.0, 0.0, 2.0], &[1, 3]);
        assert_eq!(
            vals(&fuse(&e_l, &e_s, &eye, &eye, &eye, &zero).unwrap()),
            vec![1.5, 1.0, 2.0]
        );
    }

    #[test]
    fn fusion_matches_scalar_loops() {
        let d = 4;
        let mut store = ParamStore::new(DType::F64, 8);
        let f = Fusion::new(&mut store, "f", d, true).unwrap();
        f.b1.set(&t(&[0.1, -0.2, 0.3, 0.0], &[4])).unwrap();
        let e_l: Vec<f64> = (0..2 * d).map(|i| (i as f64 * 1.3).sin()).collect();
        let e_s: Vec<f64> = (0..2 * d).map(|i| (i as f64 * 0.7).cos()).collect();
        let got = vals(&f.forward(&t(&e_l, &[2, d]), &t(&e_s, &[2, d])).unwrap());
        let w1: Vec<Vec<f64>> = f.w1.as_tensor().to_vec2().unwrap();
        let w2: Vec<Vec<f64>> = f.w2.as_tensor().to_vec2().unwrap();
        let b1: Vec<f64> = f.b1.as_tensor().to_vec1().unwrap();
        for b in 0..2 {
            let hidden: Vec<f64> = (0..d)
                .map(|j| {
                    let s: f64 = (0..d)
                        .map(|i| e_s[b * d + i] * w1[i][j] + e_l[b * d + i] * w1[i][j])
                        .sum();
                    s.max(0.0)
                })
                .collect();
            for k in 0..d {
                let expect: f64 = (0..d).map(|j| hidden[j] * w2[j][k]).sum::<f64>() + b1[k];
                assert!((got[b * d + k] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn long_term_with_no_layers_reads_the_last_slot() {
        let mut store = ParamStore::new(DType::F64, 1);
        let cfg = InterestConfig {
            d: 2,
            m: 1,
            z: 1,
            z_vertical: 1,
            heads: 1,
            layers: 0,
            shared_w1: true,
        };
        let ex = InterestExtractor::new(&mut store, &cfg).unwrap();
        let h = t(&[0.0, 0.0, 1.0, 2.0], &[1, 2, 2]);
        let p = t(&[9.0, 9.0, 0.5, 0.25], &[2, 2]);
        let mask = t(&[0.0, 1.0], &[1, 2]);
        let out = vals(
            &ex.long_term(&h, &p, &mask, &mut ForwardCtx::eval())
                .unwrap(),
        );
        assert_eq!(out, vec![1.5, 2.25]);
    }

    #[test]
    fn one_token_layer_reduces_to_layer_norm_of_value_path() {
        let d = 4;
        let mut store = ParamStore::new(DType::F64, 3);
        let cfg = InterestConfig {
            d,
            m: 1,
            z: 1,
            z_vertical: 1,
            heads: 2,
            layers: 1,
            shared_w1: true,
        };
        let ex = InterestExtractor::new(&mut store, &cfg).unwrap();
        let layer = &ex.long_term.layers[0];
        for lin in [&layer.ffn_in, &layer.ffn_out] {
            lin.weight.set(&lin.weight.zeros_like().unwrap()).unwrap();
        }
        let x = [0.3, -0.1, 0.8, 0.2];
        let h = t(&x, &[1, 1, d]);
        let p = t(&[0.0; 4], &[1, d]);
        let mask = t(&[1.0], &[1, 1]);
        let got = vals(
            &ex.long_term(&h, &p, &mask, &mut ForwardCtx::eval())
                .unwrap(),
        );

        // One token attends only to itself, so attention returns its value
        // projection: out = LN_f(x + O(V(LN_1(x)))).
        let ln = |v: &[f64]| -> Vec<f64> {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - mean) / (var + 1e-6).sqrt()).collect()
        };
        let affine = |lin: &Linear, v: &[f64]| -> Vec<f64> {
            let w: Vec<Vec<f64>> = lin.weight.as_tensor().to_vec2().unwrap();
            let b: Vec<f64> = lin.bias.as_ref().unwrap().as_tensor().to_vec1().unwrap();
            (0..d)
                .map(|j| (0..d).map(|i| v[i] * w[i][j]).sum::<f64>() + b[j])
                .collect()
        };
        let attn = affine(
            &layer.attention.output,
            &affine(&layer.attention.value, &ln(&x)),
        );
        let resid: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let expect = ln(&resid);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }

        // With the output projection zeroed the layer is just LN(h + p).
        let o = &layer.attention.output;
        o.weight.set(&o.weight.zeros_like().unwrap()).unwrap();
        let got = vals(
            &ex.long_term(&h, &p, &mask, &mut ForwardCtx::eval())
                .unwrap(),
        );
        for (g, e) in got.iter().zip(&ln(&x)) {
            assert!((g - e).abs() < 1e-12);
        }
    }
}
