//! Parameterized building blocks shared by the backbone, the condition
//! encoder, the adapters and the mask predictor.

use diffcore::{Float, Graph, Init, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), &[din, dout], init)?;
        let b = if bias { Some(store.add(&format!("{name}.b"), &[dout], Init::Zeros)?) } else { None };
        Ok(Self { w, b })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = self.b.map(|b| g.param(s, b));
        Ok(g.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), &[d], Init::Ones)?,
            beta: store.add(&format!("{name}.beta"), &[d], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let gm = g.param(s, self.gamma);
        let bt = g.param(s, self.beta);
        Ok(g.layer_norm(x, Some(gm), Some(bt), self.eps)?)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
        zero_out: bool,
    ) -> Result<Self> {
        let out_init = if zero_out { Init::Zeros } else { Init::NormalScaled };
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), din, hidden, true, Init::NormalScaled)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dout, true, out_init)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, s, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, s, h)
    }
}

/// Multi-head attention with Q/K/V projections and an optional output projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Option<Linear>,
    pub heads: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        dq: usize,
        dkv: usize,
        d: usize,
        heads: usize,
        out: Option<Init>,
    ) -> Result<Self> {
        let wq = Linear::new(store, &format!("{name}.wq"), dq, d, false, Init::NormalScaled)?;
        let wk = Linear::new(store, &format!("{name}.wk"), dkv, d, false, Init::NormalScaled)?;
        let wv = Linear::new(store, &format!("{name}.wv"), dkv, d, false, Init::NormalScaled)?;
        let wo = match out {
            Some(init) => Some(Linear::new(store, &format!("{name}.wo"), d, d, true, init)?),
            None => None,
        };
        Ok(Self { wq, wk, wv, wo, heads })
    }

    /// Returns the attention output node; its probabilities are available via
    /// [`Graph::attention_probs`] on the returned `raw` var.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        xq: Var,
        xkv: Var,
    ) -> Result<AttnOut> {
        let q = self.wq.forward(g, s, xq)?;
        let k = self.wk.forward(g, s, xkv)?;
        let v = self.wv.forward(g, s, xkv)?;
        let raw = g.attention(q, k, v, self.heads)?;
        let out = match &self.wo {
            Some(wo) => wo.forward(g, s, raw)?,
            None => raw,
        };
        Ok(AttnOut { raw, out })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnOut {
    pub raw: Var,
    pub out: Var,
}

/// Pre-LN transformer layer: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    /// With `zero_residual` the attention output projection and the MLP output
    /// layer start at zero, so the layer is the identity at initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        eps: f64,
        zero_residual: bool,
    ) -> Result<Self> {
        let out_init = if zero_residual { Init::Zeros } else { Init::NormalScaled };
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, eps)?,
            attn: Attention::new(store, &format!("{name}.attn"), d, d, d, heads, Some(out_init))?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, eps)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, d * mlp_ratio, d, zero_residual)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, s, x)?;
        let a = self.attn.forward(g, s, h, h)?.out;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, s, x)?;
        let m = self.mlp.forward(g, s, h)?;
        Ok(g.add(x, m)?)
    }
}

fn freq_ladder(n: usize, extent: usize) -> Vec<f64> {
    // Geometric ladder from pi/2 down to pi/(2*extent): the fastest channel
    // separates neighbours, the slowest stays monotone over the whole extent.
    let lo = std::f64::consts::FRAC_PI_2 / extent.max(1) as f64;
    let hi = std::f64::consts::FRAC_PI_2;
    if n <= 1 {
        return vec![hi];
    }
    (0..n).map(|k| hi * (lo / hi).powf(k as f64 / (n - 1) as f64)).collect()
}

/// Sinusoidal encoding of positions `0..n`, width `d` (even), as `[n, d]`.
pub fn pe_1d(n: usize, d: usize) -> Vec<f64> {
    let freqs = freq_ladder(d / 2, n);
    let mut out = vec![0.0; n * d];
    for p in 0..n {
        for (k, f) in freqs.iter().enumerate() {
            out[p * d + 2 * k] = (f * p as f64).sin();
            out[p * d + 2 * k + 1] = (f * p as f64).cos();
        }
    }
    out
}

/// 2D sinusoidal encoding of an `h x w` grid in row-major cell order, `[h*w, d]`.
/// The first half of the channels encodes the row, the second the column.
pub fn pe_2d(h: usize, w: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let fr = freq_ladder(half / 2, h.max(w));
    let mut out = vec![0.0; h * w * d];
    for r in 0..h {
        for c in 0..w {
            let row = &mut out[(r * w + c) * d..(r * w + c + 1) * d];
            for (k, f) in fr.iter().enumerate() {
                row[2 * k] = (f * r as f64).sin();
                row[2 * k + 1] = (f * r as f64).cos();
                row[half + 2 * k] = (f * c as f64).sin();
                row[half + 2 * k + 1] = (f * c as f64).cos();
            }
        }
    }
    out
}

/// Timestep features for `t` in [0, 1]: sinusoids of `1000 t` over log-spaced
/// frequencies, `[B, d]`.
pub fn timestep_features(ts: &[f64], d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; ts.len() * d];
    for (b, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let f = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            let a = 1000.0 * t * f;
            out[b * d + k] = a.sin();
            out[b * d + half + k] = a.cos();
        }
    }
    out
}

pub fn const_tensor<T: Float>(shape: &[usize], data: &[f64]) -> Result<Tensor<T>> {
    Ok(Tensor::from_f64(shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pe_rows_are_distinct() {
        let pe = pe_2d(4, 4, 8);
        for a in 0..16 {
            for b in a + 1..16 {
                let d: f64 = (0..8).map(|k| (pe[a * 8 + k] - pe[b * 8 + k]).abs()).sum();
                assert!(d > 1e-6, "cells {a} and {b} share an encoding");
            }
        }
    }

    #[test]
    fn pe_1d_first_row() {
        let pe = pe_1d(3, 4);
        assert_eq!(&pe[..4], &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_residual_layer_is_identity() {
        let mut s = ParamStore::<f64>::new(3);
        let layer = TransformerLayer::new(&mut s, "t", 8, 2, 2, 1e-6, true).unwrap();
        let mut g = Graph::new();
        let x = g.input(diffcore::seeded_init(&[2, 3, 8], 1, Init::Normal { std: 1.0 }));
        let y = layer.forward(&mut g, &s, x).unwrap();
        assert!(g.value(y).bit_eq(g.value(x)));
    }
}
