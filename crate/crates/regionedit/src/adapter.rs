//! Block adapters, the spatial gate, and source-token protection.

use diffcore::{Float, Graph, Init, ParamId, ParamStore, Tensor, Var};

use crate::backbone::TARGET;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, Mlp};

/// `h = h0 + g * FFN(LN(CA(h0 Wq, c Wk, c Wv)))`.
pub struct BlockAdapter {
    pub attn: Attention,
    pub ln: LayerNorm,
    pub ffn: Mlp,
}

impl BlockAdapter {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            attn: Attention::new(store, &format!("{name}.attn"), d, d, d, cfg.heads, None)?,
            ln: LayerNorm::new(store, &format!("{name}.ln"), d, cfg.ln_eps)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), d, cfg.mlp_ratio * d, d, true)?,
        })
    }

    /// The residual branch `FFN(u)` before gating.
    pub fn residual<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, h0: Var, c: Var) -> Result<Var> {
        let a = self.attn.forward(g, s, h0, c)?.out;
        let u = self.ln.forward(g, s, a)?;
        self.ffn.forward(g, s, u)
    }

    /// `h0: [B, N, D]`, `c: [B, N_c, D]`, `gate: [B, N, 1]`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        h0: Var,
        c: Var,
        gate: Var,
    ) -> Result<Var> {
        let f = self.residual(g, s, h0, c)?;
        let gf = g.mul(gate, f)?;
        Ok(g.add(h0, gf)?)
    }
}

/// `g_i = sigmoid(MLP(M_i e_edit + (1 - M_i) e_keep))`.
pub struct SpatialGate {
    pub e_edit: ParamId,
    pub e_keep: ParamId,
    pub mlp: Mlp,
}

impl SpatialGate {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            e_edit: store.add("adp.gate.e_edit", &[d], Init::Normal { std: 1.0 })?,
            e_keep: store.add("adp.gate.e_keep", &[d], Init::Normal { std: 1.0 })?,
            mlp: Mlp::new(store, "adp.gate.mlp", d, d, 1, true)?,
        })
    }

    /// `m_bin: [B, L, 1]` binary; returns gates `[B, L, 1]` in (0, 1).
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, m_bin: &Tensor<T>) -> Result<Var> {
        if m_bin.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Mask("spatial gate expects a binary mask".into()));
        }
        let inv = Tensor::new(m_bin.shape().to_vec(), m_bin.data().iter().map(|&v| T::one() - v).collect())?;
        let m = g.input(m_bin.clone());
        let iv = g.input(inv);
        let ee = g.param(s, self.e_edit);
        let ek = g.param(s, self.e_keep);
        let a = g.mul(m, ee)?;
        let b = g.mul(iv, ek)?;
        let e = g.add(a, b)?;
        let logits = self.mlp.forward(g, s, e)?;
        Ok(g.sigmoid(logits))
    }
}

/// Zeroes the gate of every token that is not on the target branch.
/// `gate: [B, N, 1]`, `branch.len() == N`.
pub fn protect_source_tokens<T: Float>(g: &mut Graph<T>, gate: Var, branch: &[u8]) -> Result<Var> {
    let shape = g.shape(gate).to_vec();
    if shape.len() != 3 || shape[1] != branch.len() || shape[2] != 1 {
        return Err(Error::Length(format!("gate {shape:?} vs {} branch indicators", branch.len())));
    }
    let ind: Vec<T> = branch.iter().map(|&s| if s == TARGET { T::one() } else { T::zero() }).collect();
    let ind = g.input(Tensor::new(vec![branch.len(), 1], ind)?);
    Ok(g.mul(gate, ind)?)
}

/// One adapter per backbone block plus a single shared gate.
pub struct AdapterStack {
    pub blocks: Vec<BlockAdapter>,
    pub gate: SpatialGate,
}

impl AdapterStack {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            blocks: (0..cfg.n_blocks)
                .map(|i| BlockAdapter::new(store, &format!("adp.block{i}"), cfg))
                .collect::<Result<_>>()?,
            gate: SpatialGate::new(store, cfg)?,
        })
    }
}
