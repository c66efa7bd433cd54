//! Toy joint-attention diffusion transformer over `[target; source; text]`
//! tokens, predicting the flow-matching velocity of the target branch.

use diffcore::{Float, Graph, Init, ParamId, ParamStore, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::nn::{pe_1d, pe_2d, timestep_features, Attention, Linear, Mlp};

pub const TARGET: u8 = 0;
pub const SOURCE: u8 = 1;
pub const TEXT: u8 = 2;

/// Interpolant and velocity target for one latent.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub z0: LatentGrid,
    pub z1: LatentGrid,
    pub t: f32,
    pub z_t: LatentGrid,
    pub v_star: LatentGrid,
}

pub fn flow_interpolate(z0: &LatentGrid, z1: &LatentGrid, t: f32) -> Result<FlowState> {
    if !z0.same_shape(z1) {
        return Err(Error::Length("flow_interpolate: z0 and z1 differ in shape".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("flow time {t} outside [0, 1]")));
    }
    let z_t: Vec<f32> = z0.data.iter().zip(&z1.data).map(|(&a, &b)| interp(a, b, t)).collect();
    let v: Vec<f32> = z0.data.iter().zip(&z1.data).map(|(&a, &b)| b - a).collect();
    Ok(FlowState {
        z0: z0.clone(),
        z1: z1.clone(),
        t,
        z_t: LatentGrid::new(z0.channels, z0.h, z0.w, z_t)?,
        v_star: LatentGrid::new(z0.channels, z0.h, z0.w, v)?,
    })
}

/// `(1 - t) z0 + t z1`, with the endpoints returned exactly.
pub fn interp(z0: f32, z1: f32, t: f32) -> f32 {
    if t == 0.0 {
        z0
    } else if t == 1.0 {
        z1
    } else {
        (1.0 - t) * z0 + t * z1
    }
}

pub struct TokenSequence {
    /// `[B, 2L + T, D]`
    pub tokens: Var,
    pub branch: Vec<u8>,
}

pub fn branch_layout(l: usize, t: usize) -> Vec<u8> {
    let mut s = vec![TARGET; l];
    s.extend(std::iter::repeat_n(SOURCE, l));
    s.extend(std::iter::repeat_n(TEXT, t));
    s
}

pub struct BackboneBlock {
    pub ada: Linear,
    pub attn: Attention,
    pub mlp: Mlp,
}

pub struct Backbone {
    pub patch_tgt: ParamId,
    pub patch_src: ParamId,
    pub text_proj: Linear,
    pub branch_emb: ParamId,
    pub t_mlp: Mlp,
    pub blocks: Vec<BackboneBlock>,
    pub final_ada: Linear,
    pub head: Linear,
    cfg: ModelConfig,
    pe_img: Vec<f64>,
    pe_txt: Vec<f64>,
}

pub struct BackboneOut {
    /// `[B, L, C]` in token layout.
    pub v_pred: Var,
    /// Per block, the post-joint-attention image tokens `[B, 2L, D]` before the hook.
    pub block_states: Vec<Var>,
}

/// Per-block callback `(graph, block_index, h0) -> h`.
pub type AdapterHook<'a, T> = dyn FnMut(&mut Graph<T>, usize, Var) -> Result<Var> + 'a;

impl Backbone {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let (d, c) = (cfg.dim, cfg.channels);
        let blocks = (0..cfg.n_blocks)
            .map(|i| {
                let p = format!("bb.block{i}");
                Ok(BackboneBlock {
                    ada: Linear::new(store, &format!("{p}.ada"), d, 4 * d, true, Init::Zeros)?,
                    attn: Attention::new(store, &format!("{p}.attn"), d, d, d, cfg.heads, Some(Init::NormalScaled))?,
                    mlp: Mlp::new(store, &format!("{p}.mlp"), d, cfg.mlp_ratio * d, d, false)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_tgt: store.add("bb.patch_tgt", &[c, d], Init::NormalScaled)?,
            patch_src: store.add("bb.patch_src", &[c, d], Init::NormalScaled)?,
            text_proj: Linear::new(store, "bb.text_proj", cfg.enc_dim, d, true, Init::NormalScaled)?,
            branch_emb: store.add("bb.branch", &[3, d], Init::Normal { std: 0.5 })?,
            t_mlp: Mlp::new(store, "bb.t_mlp", d, d, d, false)?,
            blocks,
            final_ada: Linear::new(store, "bb.final_ada", d, 2 * d, true, Init::Zeros)?,
            head: Linear::new(store, "bb.head", d, c, true, Init::NormalScaled)?,
            pe_img: pe_2d(cfg.latent_h, cfg.latent_w, d),
            pe_txt: pe_1d(cfg.instr_len, d),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn branch_row<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, k: usize) -> Result<Var> {
        let e = g.param(s, self.branch_emb);
        Ok(g.slice(e, 0, k, 1)?)
    }

    /// Embeds `source, z_t: [B, L, C]` and `instr: [B, T, E]` into one sequence.
    pub fn assemble_sequence<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        source: Var,
        z_t: Var,
        instr: Var,
    ) -> Result<TokenSequence> {
        let (ss, zs, is) = (g.shape(source).to_vec(), g.shape(z_t).to_vec(), g.shape(instr).to_vec());
        let l = self.cfg.tokens();
        if ss != zs || ss.len() != 3 || ss[1] != l || ss[2] != self.cfg.channels {
            return Err(Error::Length(format!("assemble_sequence: source {ss:?} vs z_t {zs:?}")));
        }
        if is.len() != 3 || is[0] != ss[0] || is[1] != self.cfg.instr_len || is[2] != self.cfg.enc_dim {
            return Err(Error::Length(format!("assemble_sequence: instruction states {is:?}")));
        }
        let d = self.cfg.dim;
        let pe_img = g.input(Tensor::from_f64(&[l, d], &self.pe_img)?);
        let pe_txt = g.input(Tensor::from_f64(&[self.cfg.instr_len, d], &self.pe_txt)?);

        let wt = g.param(s, self.patch_tgt);
        let tgt = g.matmul(z_t, wt)?;
        let tgt = g.add(tgt, pe_img)?;
        let bt = self.branch_row(g, s, TARGET as usize)?;
        let tgt = g.add(tgt, bt)?;

        let ws = g.param(s, self.patch_src);
        let src = g.matmul(source, ws)?;
        let src = g.add(src, pe_img)?;
        let bs = self.branch_row(g, s, SOURCE as usize)?;
        let src = g.add(src, bs)?;

        let txt = self.text_proj.forward(g, s, instr)?;
        let txt = g.add(txt, pe_txt)?;
        let bx = self.branch_row(g, s, TEXT as usize)?;
        let txt = g.add(txt, bx)?;

        let tokens = g.concat(&[tgt, src, txt], 1)?;
        Ok(TokenSequence { tokens, branch: branch_layout(l, self.cfg.instr_len) })
    }

    fn modulate<T: Float>(&self, g: &mut Graph<T>, x: Var, m: Var, k: usize) -> Result<Var> {
        // x * (1 + scale) + shift, with (shift, scale) = chunks k, k+1 of m.
        let d = self.cfg.dim;
        let shift = g.slice(m, 2, k * d, d)?;
        let scale = g.slice(m, 2, (k + 1) * d, d)?;
        let one_plus = g.add_scalar(scale, T::one());
        let y = g.mul(x, one_plus)?;
        Ok(g.add(y, shift)?)
    }

    /// Runs every block. `hook`, when present, replaces each block's
    /// post-attention state before the MLP.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        seq: &TokenSequence,
        t: &[f64],
        mut hook: Option<&mut AdapterHook<'_, T>>,
        collect_states: bool,
    ) -> Result<BackboneOut> {
        let shape = g.shape(seq.tokens).to_vec();
        let (b, d, l) = (shape[0], self.cfg.dim, self.cfg.tokens());
        if t.len() != b {
            return Err(Error::Length(format!("{} flow times for batch {b}", t.len())));
        }
        let tf = g.input(Tensor::from_f64(&[b, d], &timestep_features(t, d))?);
        let temb = self.t_mlp.forward(g, s, tf)?;
        let temb = g.gelu(temb);
        let temb = g.reshape(temb, &[b, 1, d])?;
        let eps = self.cfg.ln_eps;

        let mut x = seq.tokens;
        let mut states = Vec::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            let m = blk.ada.forward(g, s, temb)?;
            let xn = g.layer_norm(x, None, None, eps)?;
            let a_in = self.modulate(g, xn, m, 0)?;
            let a = blk.attn.forward(g, s, a_in, a_in)?.out;
            let h0 = g.add(x, a)?;
            if collect_states {
                states.push(g.slice(h0, 1, 0, 2 * l)?);
            }
            let h = match hook.as_mut() {
                Some(f) => {
                    let h = f(g, i, h0)?;
                    if g.shape(h) != g.shape(h0) {
                        return Err(Error::HookShape {
                            block: i,
                            got: g.shape(h).to_vec(),
                            want: g.shape(h0).to_vec(),
                        });
                    }
                    h
                }
                None => h0,
            };
            let hn = g.layer_norm(h, None, None, eps)?;
            let m_in = self.modulate(g, hn, m, 2)?;
            let f = blk.mlp.forward(g, s, m_in)?;
            x = g.add(h, f)?;
        }
        let xt = g.slice(x, 1, 0, l)?;
        let fm = self.final_ada.forward(g, s, temb)?;
        let xn = g.layer_norm(xt, None, None, eps)?;
        let xm = self.modulate(g, xn, fm, 0)?;
        let v_pred = self.head.forward(g, s, xm)?;
        Ok(BackboneOut { v_pred, block_states: states })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat(c: usize, h: usize, w: usize, v: f32) -> LatentGrid {
        LatentGrid::new(c, h, w, vec![v; c * h * w]).unwrap()
    }

    #[test]
    fn flow_example_and_endpoints() {
        let f = flow_interpolate(&lat(1, 1, 1, 0.0), &lat(1, 1, 1, 2.0), 0.25).unwrap();
        assert_eq!((f.z_t.data[0], f.v_star.data[0]), (0.5, 2.0));
        let z0 = lat(1, 1, 2, 0.3);
        let z1 = lat(1, 1, 2, -1.7);
        assert_eq!(flow_interpolate(&z0, &z1, 0.0).unwrap().z_t, z0);
        assert_eq!(flow_interpolate(&z0, &z1, 1.0).unwrap().z_t, z1);
        assert!(flow_interpolate(&z0, &lat(1, 2, 1, 0.0), 0.5).is_err());
    }

    #[test]
    fn layout_example() {
        assert_eq!(branch_layout(4, 2), vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2]);
    }

    fn setup() -> (ParamStore<f64>, Backbone, ModelConfig) {
        let cfg = ModelConfig::micro();
        let mut s = ParamStore::new(2);
        let bb = Backbone::new(&mut s, &cfg).unwrap();
        (s, bb, cfg)
    }

    fn inputs(g: &mut Graph<f64>, cfg: &ModelConfig, zero: bool) -> (Var, Var, Var) {
        let l = cfg.tokens();
        let init = if zero { Init::Zeros } else { Init::Normal { std: 1.0 } };
        let src = g.input(diffcore::seeded_init(&[1, l, cfg.channels], 1, init));
        let zt = g.input(diffcore::seeded_init(&[1, l, cfg.channels], 2, init));
        let ins = g.input(diffcore::seeded_init(&[1, cfg.instr_len, cfg.enc_dim], 3, init));
        (src, zt, ins)
    }

    #[test]
    fn zero_latents_leave_position_and_branch_terms() {
        let (s, bb, cfg) = setup();
        let mut g = Graph::new();
        let (src, zt, ins) = inputs(&mut g, &cfg, true);
        let seq = bb.assemble_sequence(&mut g, &s, src, zt, ins).unwrap();
        let d = cfg.dim;
        let br = s.get(bb.branch_emb).data();
        let tok = g.value(seq.tokens).data();
        for i in 0..cfg.tokens() {
            for k in 0..d {
                assert_eq!(tok[i * d + k], 0.0 + bb.pe_img[i * d + k] + br[k]);
                assert_eq!(tok[(cfg.tokens() + i) * d + k], 0.0 + bb.pe_img[i * d + k] + br[d + k]);
            }
        }
    }

    #[test]
    fn identity_hook_is_bitwise_neutral() {
        let (s, bb, cfg) = setup();
        let run = |with_hook: bool| {
            let mut g = Graph::new();
            let (src, zt, ins) = inputs(&mut g, &cfg, false);
            let seq = bb.assemble_sequence(&mut g, &s, src, zt, ins).unwrap();
            let mut id = |_: &mut Graph<f64>, _: usize, h: Var| -> Result<Var> { Ok(h) };
            let hook: Option<&mut AdapterHook<f64>> = if with_hook { Some(&mut id) } else { None };
            let out = bb.forward(&mut g, &s, &seq, &[0.3], hook, true).unwrap();
            assert_eq!(out.block_states.len(), cfg.n_blocks);
            g.value(out.v_pred).clone()
        };
        assert!(run(false).bit_eq(&run(true)));
    }

    #[test]
    fn wrong_hook_shape_names_block() {
        let (s, bb, cfg) = setup();
        let mut g = Graph::new();
        let (src, zt, ins) = inputs(&mut g, &cfg, false);
        let seq = bb.assemble_sequence(&mut g, &s, src, zt, ins).unwrap();
        let mut bad = |g: &mut Graph<f64>, i: usize, h: Var| -> Result<Var> {
            if i == 1 {
                Ok(g.slice(h, 1, 0, 3)?)
            } else {
                Ok(h)
            }
        };
        let err = bb.forward(&mut g, &s, &seq, &[0.3], Some(&mut bad), false).err().unwrap();
        assert!(matches!(err, Error::HookShape { block: 1, .. }));
    }

    #[test]
    fn toy_velocity_shape() {
        let cfg = ModelConfig::toy();
        let mut s = ParamStore::<f32>::new(2);
        let bb = Backbone::new(&mut s, &cfg).unwrap();
        let mut g = Graph::new();
        let l = cfg.tokens();
        let src = g.input(Tensor::zeros(&[2, l, 4]));
        let zt = g.input(Tensor::zeros(&[2, l, 4]));
        let ins = g.input(Tensor::zeros(&[2, cfg.instr_len, cfg.enc_dim]));
        let seq = bb.assemble_sequence(&mut g, &s, src, zt, ins).unwrap();
        let out = bb.forward(&mut g, &s, &seq, &[0.1, 0.9], None, false).unwrap();
        assert_eq!(g.shape(out.v_pred), &[2, 256, 4]);
        let v = LatentGrid::from_tokens(&g.value(out.v_pred).data()[..256 * 4], 4, 16, 16).unwrap();
        assert_eq!((v.channels, v.h, v.w), (4, 16, 16));
    }
}
