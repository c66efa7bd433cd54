//! Condition stream: mask tokens for "where", perceiver-compressed
//! instruction tokens for "what", fused by a small transformer.

use diffcore::{Float, Graph, Init, ParamId, ParamStore, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::latent::Grid;
use crate::nn::{pe_1d, pe_2d, Attention, Linear, TransformerLayer};

/// A generation-resolution mask and its latent-grid reductions.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    pub m_hi: Grid,
    pub m_soft: Grid,
    pub m_bin: Grid,
}

/// Area-average downsample to `lh x lw`, then threshold at 0.5 (ties count as edit).
pub fn downsample_mask(m_hi: &Grid, lh: usize, lw: usize) -> Result<MaskPyramid> {
    if lh == 0 || lw == 0 || !m_hi.h.is_multiple_of(lh) || !m_hi.w.is_multiple_of(lw) {
        return Err(Error::Mask(format!("{}x{} is not a multiple of {lh}x{lw}", m_hi.h, m_hi.w)));
    }
    if !m_hi.is_binary() {
        return Err(Error::Mask("generation-resolution mask must be binary".into()));
    }
    let (fy, fx) = (m_hi.h / lh, m_hi.w / lw);
    let m_soft = Grid::from_fn(lh, lw, |cy, cx| {
        let mut n = 0usize;
        for y in cy * fy..(cy + 1) * fy {
            for x in cx * fx..(cx + 1) * fx {
                if m_hi.at(y, x) == 1.0 {
                    n += 1;
                }
            }
        }
        n as f32 / (fy * fx) as f32
    });
    let m_bin = Grid::new(lh, lw, m_soft.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect())?;
    Ok(MaskPyramid { m_hi: m_hi.clone(), m_soft, m_bin })
}

pub struct ConditionEncoder {
    pub e_edit: ParamId,
    pub e_keep: ParamId,
    pub proj: Linear,
    pub queries: ParamId,
    pub xattn: Attention,
    /// Row 0: mask type, row 1: instruction type.
    pub type_emb: ParamId,
    pub fusion: Vec<TransformerLayer>,
    n_mask: usize,
    n_queries: usize,
    dim: usize,
    pe: Vec<f64>,
}

/// Intermediate outputs kept for inspection and for the mask predictor.
pub struct ConditionOut {
    pub m_s: Var,
    pub c_inst: Var,
    /// Raw cross-attention node; its probabilities are the perceiver's weights.
    pub perceiver_attn: Var,
    pub c: Var,
}

impl ConditionEncoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        let n_mask = cfg.tokens();
        let mut pe = pe_2d(cfg.latent_h, cfg.latent_w, d);
        pe.extend(pe_1d(cfg.n_queries, d));
        Ok(Self {
            e_edit: store.add("cond.e_edit", &[d], Init::Normal { std: 1.0 })?,
            e_keep: store.add("cond.e_keep", &[d], Init::Normal { std: 1.0 })?,
            proj: Linear::new(store, "cond.proj", cfg.hidden_layers * cfg.enc_dim, d, true, Init::NormalScaled)?,
            queries: store.add("cond.queries", &[cfg.n_queries, d], Init::Normal { std: 1.0 })?,
            xattn: Attention::new(store, "cond.xattn", d, d, d, cfg.heads, Some(Init::NormalScaled))?,
            type_emb: store.add("cond.type", &[2, d], Init::Normal { std: 1.0 })?,
            fusion: (0..cfg.fusion_layers)
                .map(|i| {
                    TransformerLayer::new(store, &format!("cond.fusion{i}"), d, cfg.heads, cfg.mlp_ratio, cfg.ln_eps, true)
                })
                .collect::<Result<_>>()?,
            n_mask,
            n_queries: cfg.n_queries,
            dim: d,
            pe,
        })
    }

    /// `m_s = M * e_edit + (1 - M) * e_keep` per cell; `m: [B, N_m, 1]` constant.
    pub fn mask_spatial_encode<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        m: &Tensor<T>,
    ) -> Result<Var> {
        let inv = Tensor::new(m.shape().to_vec(), m.data().iter().map(|&v| T::one() - v).collect())?;
        let mv = g.input(m.clone());
        let iv = g.input(inv);
        let ee = g.param(s, self.e_edit);
        let ek = g.param(s, self.e_keep);
        let a = g.mul(mv, ee)?;
        let b = g.mul(iv, ek)?;
        Ok(g.add(a, b)?)
    }

    /// Compresses `hidden: [B, T, L_h * E]` to exactly `N_q` tokens.
    pub fn instruction_perceiver<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        hidden: Var,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(hidden).to_vec();
        if shape.len() != 3 {
            return Err(Error::Length(format!("perceiver input must be [B, T, C], got {shape:?}")));
        }
        if shape[1] == 0 {
            return Err(Error::EmptyInstruction);
        }
        let b = shape[0];
        let h = self.proj.forward(g, s, hidden)?;
        let q = g.param(s, self.queries);
        let q = g.reshape(q, &[1, self.n_queries, self.dim])?;
        let q = if b == 1 {
            q
        } else {
            let reps = vec![q; b];
            g.concat(&reps, 0)?
        };
        let a = self.xattn.forward(g, s, q, h)?;
        Ok((a.out, a.raw))
    }

    /// `Fusion([m_s + tau_mask ; c_inst + tau_inst] + PE)`.
    pub fn fuse<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, m_s: Var, c_inst: Var) -> Result<Var> {
        let d = self.dim;
        let tau = g.param(s, self.type_emb);
        let t_mask = g.slice(tau, 0, 0, 1)?;
        let t_inst = g.slice(tau, 0, 1, 1)?;
        let a = g.add(m_s, t_mask)?;
        let b = g.add(c_inst, t_inst)?;
        let x = g.concat(&[a, b], 1)?;
        let pe = g.input(Tensor::from_f64(&[self.n_mask + self.n_queries, d], &self.pe)?);
        let mut x = g.add(x, pe)?;
        for layer in &self.fusion {
            x = layer.forward(g, s, x)?;
        }
        Ok(x)
    }

    /// Full stream from a mask batch `[B, N_m, 1]` and stacked hidden states `[B, T, L_h * E]`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        mask: &Tensor<T>,
        hidden: Var,
    ) -> Result<ConditionOut> {
        let (c_inst, perceiver_attn) = self.instruction_perceiver(g, s, hidden)?;
        let m_s = self.mask_spatial_encode(g, s, mask)?;
        let c = self.fuse(g, s, m_s, c_inst)?;
        Ok(ConditionOut { m_s, c_inst, perceiver_attn, c })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParamStore<f64>, ConditionEncoder, ModelConfig) {
        let cfg = ModelConfig::micro();
        let mut s = ParamStore::new(11);
        let enc = ConditionEncoder::new(&mut s, &cfg).unwrap();
        (s, enc, cfg)
    }

    #[test]
    fn half_covered_block_rounds_up() {
        let mut hi = Grid::zeros(4, 4);
        for i in 0..8 {
            hi.data[i] = 1.0;
        }
        let p = downsample_mask(&hi, 1, 1).unwrap();
        assert_eq!(p.m_soft.data, vec![0.5]);
        assert_eq!(p.m_bin.data, vec![1.0]);
    }

    #[test]
    fn checkerboard_is_uniform_half() {
        let hi = Grid::from_fn(8, 8, |y, x| ((x + y) % 2) as f32);
        let p = downsample_mask(&hi, 2, 2).unwrap();
        assert!(p.m_soft.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn non_binary_rejected() {
        let hi = Grid::new(2, 2, vec![0.0, 0.3, 1.0, 1.0]).unwrap();
        assert!(downsample_mask(&hi, 1, 1).is_err());
    }

    #[test]
    fn mask_token_interpolation_example() {
        let cfg = ModelConfig { dim: 4, ..ModelConfig::micro() };
        let mut s = ParamStore::<f64>::new(0);
        let enc = ConditionEncoder::new(&mut s, &cfg).unwrap();
        *s.get_mut(enc.e_edit) = Tensor::from_f64(&[4], &[4.0, 0.0, 0.0, 0.0]).unwrap();
        *s.get_mut(enc.e_keep) = Tensor::from_f64(&[4], &[0.0, 4.0, 0.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let m = Tensor::from_f64(&[1, 1, 1], &[0.25]).unwrap();
        let out = enc.mask_spatial_encode(&mut g, &s, &m).unwrap();
        assert_eq!(&g.value(out).data()[..2], &[1.0, 3.0]);
    }

    #[test]
    fn perceiver_output_length_is_fixed() {
        let (s, enc, cfg) = setup();
        for t in [5, 50] {
            let mut g = Graph::new();
            let h = g.input(diffcore::seeded_init(&[1, t, 2 * cfg.enc_dim], 3, Init::Normal { std: 1.0 }));
            let (c, raw) = enc.instruction_perceiver(&mut g, &s, h).unwrap();
            assert_eq!(g.shape(c), &[1, cfg.n_queries, cfg.dim]);
            let probs = g.attention_probs(raw).unwrap();
            for row in probs.chunks(t) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_instruction_rejected() {
        let (s, enc, cfg) = setup();
        let mut g = Graph::new();
        let h = g.input(Tensor::zeros(&[1, 0, 2 * cfg.enc_dim]));
        assert!(matches!(enc.instruction_perceiver(&mut g, &s, h), Err(Error::EmptyInstruction)));
    }

    #[test]
    fn zero_init_fusion_is_identity_on_its_input() {
        let (s, enc, cfg) = setup();
        let mut g = Graph::new();
        let m = Tensor::full(&[1, cfg.tokens(), 1], 0.5);
        let h = g.input(diffcore::seeded_init(&[1, 6, 2 * cfg.enc_dim], 3, Init::Normal { std: 1.0 }));
        let out = enc.forward(&mut g, &s, &m, h).unwrap();
        // Recompute the fusion input by hand and compare with the output.
        let tau = s.get(enc.type_emb).data().to_vec();
        let d = cfg.dim;
        let ms = g.value(out.m_s).data().to_vec();
        let ci = g.value(out.c_inst).data().to_vec();
        let c = g.value(out.c).data();
        for p in 0..cfg.tokens() + cfg.n_queries {
            for k in 0..d {
                let (v, t) = if p < cfg.tokens() {
                    (ms[p * d + k], tau[k])
                } else {
                    (ci[(p - cfg.tokens()) * d + k], tau[d + k])
                };
                assert_eq!(c[p * d + k], v + t + enc.pe[p * d + k]);
            }
        }
    }

    #[test]
    fn swapping_type_embeddings_changes_output() {
        let (mut s, enc, cfg) = setup();
        for id in s.ids().collect::<Vec<_>>() {
            if s.entry(id).name.contains("fusion") && s.get(id).data().iter().all(|&v| v == 0.0) {
                *s.get_mut(id) = diffcore::seeded_init(s.get(id).shape(), id.0 as u64, Init::Normal { std: 0.3 });
            }
        }
        let run = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let m = Tensor::full(&[1, cfg.tokens(), 1], 1.0);
            let h = g.input(diffcore::seeded_init(&[1, 6, 2 * cfg.enc_dim], 3, Init::Normal { std: 1.0 }));
            let out = enc.forward(&mut g, s, &m, h).unwrap();
            g.value(out.c).clone()
        };
        let a = run(&s);
        let tau = s.get(enc.type_emb).data().to_vec();
        let d = cfg.dim;
        let swapped: Vec<f64> = tau[d..].iter().chain(&tau[..d]).copied().collect();
        *s.get_mut(enc.type_emb) = Tensor::new(vec![2, d], swapped).unwrap();
        assert_ne!(a, run(&s));
    }
}
