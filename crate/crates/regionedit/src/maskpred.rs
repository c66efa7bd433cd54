//! FiLM-conditioned cross-attention mask decoder and its inference-time
//! post-processing.

use diffcore::{Float, Graph, Init, ParamId, ParamStore, Tensor, Var};

use crate::config::{MaskPostConfig, ModelConfig};
use crate::error::Result;
use crate::latent::Grid;
use crate::morph::dilate;
use crate::nn::{Attention, Linear};

pub struct MaskPredictor {
    pub queries: ParamId,
    pub film_gamma: Linear,
    pub film_beta: Linear,
    pub phi: Linear,
    pub attn: Attention,
    pub conv1: ParamId,
    pub conv1_b: ParamId,
    pub conv2: ParamId,
    pub conv2_b: ParamId,
    grid: usize,
    lh: usize,
    lw: usize,
    dim: usize,
}

/// Sinusoidal features of fractional positions, same ladder as the image tokens.
fn query_init(cfg: &ModelConfig) -> Vec<f64> {
    let (g, d) = (cfg.mask_grid, cfg.dim);
    let half = d / 2;
    let extent = cfg.latent_h.max(cfg.latent_w) as f64;
    let n = half / 2;
    let hi = std::f64::consts::FRAC_PI_2;
    let lo = hi / extent;
    let freqs: Vec<f64> =
        (0..n).map(|k| if n <= 1 { hi } else { hi * (lo / hi).powf(k as f64 / (n - 1) as f64) }).collect();
    let mut out = vec![0.0; g * g * d];
    for i in 0..g {
        for j in 0..g {
            let r = (i as f64 + 0.5) * cfg.latent_h as f64 / g as f64 - 0.5;
            let c = (j as f64 + 0.5) * cfg.latent_w as f64 / g as f64 - 0.5;
            let row = &mut out[(i * g + j) * d..(i * g + j + 1) * d];
            for (k, f) in freqs.iter().enumerate() {
                row[2 * k] = (f * r).sin();
                row[2 * k + 1] = (f * r).cos();
                row[half + 2 * k] = (f * c).sin();
                row[half + 2 * k + 1] = (f * c).cos();
            }
        }
    }
    out
}

pub struct MaskPredOut {
    /// `[B, L]` probabilities in (0, 1), row-major latent cells.
    pub probs: Var,
    pub q_tilde: Var,
}

/// Mean over the instruction tokens with the gradient stopped, `[B, D]`.
pub fn pooled_instruction<T: Float>(g: &mut Graph<T>, c_inst: Var) -> Result<Var> {
    let c = g.detach(c_inst);
    Ok(g.mean_axis(c, 1, false)?)
}

impl MaskPredictor {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        let hd = (d / 2).max(1);
        let np = cfg.mask_grid * cfg.mask_grid;
        let queries = store.add("mp.queries", &[np, d], Init::Zeros)?;
        *store.get_mut(queries) = Tensor::from_f64(&[np, d], &query_init(cfg))?;
        Ok(Self {
            queries,
            film_gamma: Linear::new(store, "mp.film_gamma", d, d, true, Init::Zeros)?,
            film_beta: Linear::new(store, "mp.film_beta", d, d, true, Init::Zeros)?,
            phi: Linear::new(store, "mp.phi", d, d, true, Init::NormalScaled)?,
            attn: Attention::new(store, "mp.attn", d, d, d, cfg.heads, Some(Init::NormalScaled))?,
            conv1: store.add("mp.conv1.w", &[9 * d, hd], Init::NormalScaled)?,
            conv1_b: store.add("mp.conv1.b", &[hd], Init::Zeros)?,
            conv2: store.add("mp.conv2.w", &[9 * hd, 1], Init::NormalScaled)?,
            conv2_b: store.add("mp.conv2.b", &[1], Init::Zeros)?,
            grid: cfg.mask_grid,
            lh: cfg.latent_h,
            lw: cfg.latent_w,
            dim: d,
        })
    }

    /// `gamma * Q + beta` with `gamma = 1 + Linear(pooled)`, `beta = Linear(pooled)`.
    pub fn film_modulate<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, pooled: Var) -> Result<Var> {
        let b = g.shape(pooled)[0];
        let gm = self.film_gamma.forward(g, s, pooled)?;
        let gm = g.add_scalar(gm, T::one());
        let gm = g.reshape(gm, &[b, 1, self.dim])?;
        let bt = self.film_beta.forward(g, s, pooled)?;
        let bt = g.reshape(bt, &[b, 1, self.dim])?;
        let q = g.param(s, self.queries);
        let gq = g.mul(gm, q)?;
        Ok(g.add(gq, bt)?)
    }

    /// `sigmoid(Upsample(ConvHead(q + CA(q, phi(tokens)))))` over `image_tokens: [B, 2L, D]`.
    pub fn predict_mask<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        q_tilde: Var,
        image_tokens: Var,
    ) -> Result<Var> {
        let b = g.shape(q_tilde)[0];
        let kv = g.detach(image_tokens);
        let kv = self.phi.forward(g, s, kv)?;
        let a = self.attn.forward(g, s, q_tilde, kv)?.out;
        let x = g.add(q_tilde, a)?;
        let x = g.reshape(x, &[b, self.grid, self.grid, self.dim])?;
        let w1 = g.param(s, self.conv1);
        let b1 = g.param(s, self.conv1_b);
        let h = g.conv3x3(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.gelu(h);
        let w2 = g.param(s, self.conv2);
        let b2 = g.param(s, self.conv2_b);
        let o = g.conv3x3(h, w2)?;
        let o = g.add(o, b2)?;
        let o = if self.grid == self.lh && self.grid == self.lw {
            o
        } else {
            g.upsample_bilinear(o, self.lh, self.lw)?
        };
        let p = g.sigmoid(o);
        Ok(g.reshape(p, &[b, self.lh * self.lw])?)
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        c_inst: Var,
        image_tokens: Var,
    ) -> Result<MaskPredOut> {
        let pooled = pooled_instruction(g, c_inst)?;
        let q_tilde = self.film_modulate(g, s, pooled)?;
        let probs = self.predict_mask(g, s, q_tilde, image_tokens)?;
        Ok(MaskPredOut { probs, q_tilde })
    }
}

/// Thresholded and dilated binary mask from probabilities on the latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedMask {
    pub probs: Grid,
    /// `probs >= threshold` before dilation; mask metrics use this.
    pub thresholded: Grid,
    pub binary: Grid,
}

pub fn postprocess_mask(probs: &Grid, post: &MaskPostConfig) -> PredictedMask {
    let thr = post.threshold as f32;
    let thresholded = Grid::new(probs.h, probs.w, probs.data.iter().map(|&p| (p >= thr) as u8 as f32).collect())
        .expect("same size");
    let binary = dilate(&thresholded, post.dilate_radius);
    PredictedMask { probs: probs.clone(), thresholded, binary }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParamStore<f64>, MaskPredictor, ModelConfig) {
        let cfg = ModelConfig { mask_grid: 2, ..ModelConfig::micro() };
        let mut s = ParamStore::new(8);
        let mp = MaskPredictor::new(&mut s, &cfg).unwrap();
        (s, mp, cfg)
    }

    #[test]
    fn zero_film_heads_leave_queries() {
        let (s, mp, cfg) = setup();
        let mut g = Graph::new();
        let pooled = g.input(diffcore::seeded_init(&[2, cfg.dim], 1, Init::Normal { std: 1.0 }));
        let q = mp.film_modulate(&mut g, &s, pooled).unwrap();
        let base = s.get(mp.queries).data();
        let out = g.value(q).data();
        for b in 0..2 {
            assert_eq!(&out[b * base.len()..(b + 1) * base.len()], base);
        }
    }

    #[test]
    fn beta_shifts_every_query_equally() {
        let (mut s, mp, cfg) = setup();
        let bb = mp.film_beta.b.unwrap();
        *s.get_mut(bb) = diffcore::seeded_init(&[cfg.dim], 4, Init::Normal { std: 1.0 });
        let mut g = Graph::new();
        let pooled = g.input(Tensor::zeros(&[1, cfg.dim]));
        let q = mp.film_modulate(&mut g, &s, pooled).unwrap();
        let base = s.get(mp.queries).data();
        let shift = s.get(bb).data();
        let out = g.value(q).data();
        for (i, (o, b)) in out.iter().zip(base).enumerate() {
            assert_eq!(*o, b + shift[i % cfg.dim]);
        }
    }

    #[test]
    fn probabilities_have_latent_shape() {
        let (s, mp, cfg) = setup();
        let mut g = Graph::new();
        let c = g.input(diffcore::seeded_init(&[1, cfg.n_queries, cfg.dim], 1, Init::Normal { std: 1.0 }));
        let toks = g.input(diffcore::seeded_init(&[1, 2 * cfg.tokens(), cfg.dim], 2, Init::Normal { std: 1.0 }));
        let out = mp.forward(&mut g, &s, c, toks).unwrap();
        assert_eq!(g.shape(out.probs), &[1, cfg.tokens()]);
        assert!(g.value(out.probs).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn pooled_mean_of_equal_tokens() {
        let mut g = Graph::<f64>::new();
        let c = g.input(Tensor::from_f64(&[1, 3, 2], &[1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap());
        let p = pooled_instruction(&mut g, c).unwrap();
        assert_eq!(g.value(p).data(), &[1.5, -2.0]);
    }

    #[test]
    fn postprocess_examples() {
        let post = MaskPostConfig { threshold: 0.5, dilate_radius: 1 };
        let zero = Grid::zeros(4, 4);
        assert!(postprocess_mask(&zero, &post).binary.is_empty_mask());
        let mut one = Grid::zeros(5, 5);
        one.set(2, 2, 0.8);
        assert_eq!(postprocess_mask(&one, &post).binary.count(), 5);
        let r0 = MaskPostConfig { dilate_radius: 0, ..post };
        let p = postprocess_mask(&one, &r0);
        assert_eq!(p.binary, p.thresholded);
    }
}
