//! Procedural latent-edit corpus: smooth random sources, rectangle edits
//! described by a symbolic instruction, and a frozen toy instruction encoder.

use std::fs;
use std::path::Path;

use diffcore::{fnv1a, seeded_init, Graph, Init, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::latent::{Grid, LatentGrid};
use crate::nn::{pe_1d, TransformerLayer};

pub const PAD: usize = 0;
pub const KIND_BASE: usize = 1;
pub const PAYLOAD_BASE: usize = 4;
pub const N_PAYLOADS: usize = 8;
pub const COORD_BASE: usize = PAYLOAD_BASE + N_PAYLOADS;

/// Rect coordinates are quantized to half a latent cell.
pub fn coord_unit(cfg: &ModelConfig) -> usize {
    cfg.gen_scale / 2
}

fn n_coords(cfg: &ModelConfig) -> usize {
    cfg.gen_h().max(cfg.gen_w()) / coord_unit(cfg) + 1
}

pub fn vocab_needed(cfg: &ModelConfig) -> usize {
    COORD_BASE + 2 * n_coords(cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    RecolorRect,
    EraseRect,
    PatternSwapRect,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::RecolorRect, TaskKind::EraseRect, TaskKind::PatternSwapRect];

    fn index(self) -> usize {
        match self {
            TaskKind::RecolorRect => 0,
            TaskKind::EraseRect => 1,
            TaskKind::PatternSwapRect => 2,
        }
    }
}

/// One edit: a kind, a rectangle on the generation grid and a payload id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub payload: usize,
}

impl TaskSpec {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (gh, gw) = (cfg.gen_h(), cfg.gen_w());
        let unit = coord_unit(cfg);
        let bad = |m: String| Err(Error::InvalidTask(m));
        if self.w == 0 || self.h == 0 || self.x0 + self.w > gw || self.y0 + self.h > gh {
            return bad(format!("rect {self:?} not inside the {gh}x{gw} grid"));
        }
        if [self.x0, self.y0, self.w, self.h].iter().any(|v| v % unit != 0) {
            return bad(format!("rect {self:?} not aligned to {unit}-pixel steps"));
        }
        let area = (self.w * self.h) as f64 / (gh * gw) as f64;
        if !(0.04..=0.40).contains(&area) {
            return bad(format!("rect area fraction {area:.3} outside [0.04, 0.40]"));
        }
        if self.payload >= N_PAYLOADS {
            return bad(format!("payload {} >= {N_PAYLOADS}", self.payload));
        }
        Ok(())
    }

    /// `[kind, payload, x0, y0, x1, y1]` padded to the instruction length.
    pub fn tokens(&self, cfg: &ModelConfig) -> Vec<usize> {
        let u = coord_unit(cfg);
        let mut t = vec![
            KIND_BASE + self.kind.index(),
            PAYLOAD_BASE + self.payload,
            COORD_BASE + self.x0 / u,
            COORD_BASE + n_coords(cfg) + self.y0 / u,
            COORD_BASE + (self.x0 + self.w) / u,
            COORD_BASE + n_coords(cfg) + (self.y0 + self.h) / u,
        ];
        t.resize(cfg.instr_len, PAD);
        t
    }

    /// Latent cell containing the rectangle's top-left corner.
    pub fn anchor_cell(&self, cfg: &ModelConfig) -> (usize, usize) {
        (self.x0 / cfg.gen_scale, self.y0 / cfg.gen_scale)
    }

    /// Anchor cells reserved for validation and test.
    pub fn is_held_out(&self, cfg: &ModelConfig) -> bool {
        let (cx, cy) = self.anchor_cell(cfg);
        (cx + 2 * cy) % 5 == 2
    }

    pub fn mask_hi(&self, cfg: &ModelConfig) -> Grid {
        Grid::from_fn(cfg.gen_h(), cfg.gen_w(), |y, x| {
            let inside = x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h;
            if inside {
                1.0
            } else {
                0.0
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split {other:?}"))),
        }
    }
}

/// Per-split sample seeds, taken from consecutive disjoint ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl CorpusSplit {
    pub fn seeds(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn make_splits(master_seed: u64, n_train: usize, n_val: usize, n_test: usize) -> Result<CorpusSplit> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }
    let base = ChaCha8Rng::seed_from_u64(master_seed).random::<u64>() >> 2;
    let range = |start: u64, n: usize| (start..start + n as u64).collect::<Vec<_>>();
    let train = range(base, n_train);
    let val = range(base + n_train as u64, n_val);
    let test = range(base + (n_train + n_val) as u64, n_test);
    Ok(CorpusSplit { train, val, test })
}

/// Draws a valid rectangle task whose anchor cell belongs to the split's region.
pub fn draw_spec(rng: &mut impl Rng, cfg: &ModelConfig, split: Split) -> TaskSpec {
    let unit = coord_unit(cfg);
    let (gh, gw) = (cfg.gen_h(), cfg.gen_w());
    let k_min = cfg.gen_scale / unit;
    loop {
        let kind = TaskKind::ALL[rng.random_range(0..3)];
        let w = unit * rng.random_range(k_min..=(3 * gw / 4) / unit);
        let h = unit * rng.random_range(k_min..=(3 * gh / 4) / unit);
        let x0 = unit * rng.random_range(0..=(gw - w) / unit);
        let y0 = unit * rng.random_range(0..=(gh - h) / unit);
        let payload = rng.random_range(0..N_PAYLOADS);
        let spec = TaskSpec { kind, x0, y0, w, h, payload };
        if spec.validate(cfg).is_ok() && spec.is_held_out(cfg) == (split != Split::Train) {
            return spec;
        }
    }
}

/// Channel signature carried by a payload id: +-1 per channel.
pub fn payload_signature(payload: usize, channels: usize) -> Vec<f32> {
    (0..channels)
        .map(|c| {
            let bit = (payload >> (c % 3)) & 1;
            let s = if bit == 1 { 1.0 } else { -1.0 };
            if c >= 3 {
                0.5 * s * if (payload + c).is_multiple_of(2) { 1.0 } else { -1.0 }
            } else {
                s
            }
        })
        .collect()
}

fn smooth_field(seed: u64, cfg: &ModelConfig) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1e1d);
    let (c, h, w) = (cfg.channels, cfg.latent_h, cfg.latent_w);
    let mut g = LatentGrid::zeros(c, h, w);
    for ch in 0..c {
        let bias: f64 = rng.random_range(-0.3..0.3);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.3..0.7),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = ((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64);
                let mut v = bias;
                for &(a, kx, ky, ph) in &waves {
                    v += a * (std::f64::consts::TAU * (kx * fx + ky * fy) + ph).sin();
                }
                g.data[(ch * h + y) * w + x] = v as f32;
            }
        }
    }
    g
}

/// Fraction of each latent cell covered by the spec's rectangle.
pub fn coverage(spec: &TaskSpec, cfg: &ModelConfig) -> Grid {
    let s = cfg.gen_scale;
    let overlap = |c0: usize, r0: usize, r1: usize| {
        let (a, b) = (c0 * s, c0 * s + s);
        r1.min(b).saturating_sub(r0.max(a))
    };
    Grid::from_fn(cfg.latent_h, cfg.latent_w, |cy, cx| {
        let ox = overlap(cx, spec.x0, spec.x0 + spec.w);
        let oy = overlap(cy, spec.y0, spec.y0 + spec.h);
        (ox * oy) as f32 / (s * s) as f32
    })
}

fn apply_edit(spec: &TaskSpec, source: &LatentGrid, cfg: &ModelConfig) -> LatentGrid {
    let cov = coverage(spec, cfg);
    let sig = payload_signature(spec.payload, cfg.channels);
    let mut target = source.clone();
    for ch in 0..cfg.channels {
        for y in 0..cfg.latent_h {
            for x in 0..cfg.latent_w {
                let a = cov.at(y, x);
                if a == 0.0 {
                    continue;
                }
                let src = source.at(ch, y, x);
                let edited = match spec.kind {
                    TaskKind::RecolorRect => src + sig[ch],
                    TaskKind::EraseRect => 0.0,
                    TaskKind::PatternSwapRect => {
                        // One half-period of a cosine across the grid, along x or y.
                        let (p, n) = if spec.payload.is_multiple_of(2) { (x, cfg.latent_w) } else { (y, cfg.latent_h) };
                        let wave = (std::f32::consts::PI * (p as f32 + 0.5) / n as f32).cos();
                        0.8 * sig[ch] * wave
                    }
                };
                target.data[(ch * cfg.latent_h + y) * cfg.latent_w + x] =
                    if a == 1.0 { edited } else { src + a * (edited - src) };
            }
        }
    }
    target
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditSample {
    pub seed: u64,
    pub spec: TaskSpec,
    pub source: LatentGrid,
    pub target: LatentGrid,
    pub mask_hi: Grid,
    pub instr_tokens: Vec<usize>,
    /// The last `hidden_layers` encoder layers, each `[T, enc_dim]`.
    pub instr_hidden: Vec<Tensor<f32>>,
}

/// Gain of the ordinal coordinate code.
const COORD_SCALE: f32 = 5.0;
/// Steepness of each step of the code, per latent cell.
const COORD_SHARPNESS: f32 = 2.0;

/// Replaces the coordinate rows of the embedding table with an ordinal code:
/// a coordinate at position `p` (in latent cells) embeds as
/// `sum_c tanh(sharpness * (p - c - 1/2)) * b[axis][c]` over one random
/// direction per cell boundary. Nearby coordinates get nearby embeddings and
/// the two axes use independent directions.
fn ordinal_coordinate_rows(embed: &mut Tensor<f32>, cfg: &ModelConfig, seed: u64) {
    let n = n_coords(cfg);
    let k = cfg.latent_w.max(cfg.latent_h);
    let d = cfg.enc_dim;
    let basis: Tensor<f32> = seeded_init(&[2, k, d], seed ^ fnv1a(b"coord-basis"), Init::Normal { std: 1.0 / (k as f64).sqrt() });
    let b = basis.data();
    let t = embed.data_mut();
    for axis in 0..2 {
        for v in 0..n {
            let row = COORD_BASE + axis * n + v;
            let pos = v as f32 * k as f32 / (n - 1) as f32;
            for j in 0..d {
                let acc: f32 = (0..k).map(|c| ((pos - c as f32 - 0.5) * COORD_SHARPNESS).tanh() * b[(axis * k + c) * d + j]).sum();
                t[row * d + j] = COORD_SCALE * acc;
            }
        }
    }
}

/// Frozen random transformer over the instruction vocabulary.
pub struct ToyEncoder {
    store: ParamStore<f32>,
    embed: ParamId,
    layers: Vec<TransformerLayer>,
    vocab: usize,
    dim: usize,
    keep: usize,
}

impl ToyEncoder {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed ^ fnv1a(b"toy-encoder"));
        let embed = store.add("enc.embed", &[cfg.vocab, cfg.enc_dim], Init::Normal { std: 1.0 })?;
        ordinal_coordinate_rows(store.get_mut(embed), cfg, seed);
        let layers = (0..cfg.enc_layers)
            .map(|i| {
                TransformerLayer::new(
                    &mut store,
                    &format!("enc.layer{i}"),
                    cfg.enc_dim,
                    cfg.heads,
                    cfg.mlp_ratio,
                    cfg.ln_eps,
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        store.set_frozen_prefix("enc.", true);
        Ok(Self { store, embed, layers, vocab: cfg.vocab, dim: cfg.enc_dim, keep: cfg.hidden_layers })
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// Hidden states of the last `hidden_layers` layers, each `[T, enc_dim]`.
    pub fn encode(&self, tokens: &[usize]) -> Result<Vec<Tensor<f32>>> {
        if tokens.is_empty() {
            return Err(Error::EmptyInstruction);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::UnknownSymbol(bad));
        }
        let n = tokens.len();
        let mut g = Graph::<f32>::new();
        let table = g.param(&self.store, self.embed);
        let e = g.embedding(table, tokens)?;
        let pe = g.input(Tensor::from_f64(&[n, self.dim], &pe_1d(n, self.dim))?);
        let x0 = g.add(e, pe)?;
        let mut x = g.reshape(x0, &[1, n, self.dim])?;
        let mut outs = Vec::new();
        for layer in &self.layers {
            x = layer.forward(&mut g, &self.store, x)?;
            outs.push(g.value(x).clone().reshaped(&[n, self.dim])?);
        }
        Ok(outs.split_off(outs.len() - self.keep))
    }
}

pub fn gen_sample(spec: TaskSpec, seed: u64, cfg: &ModelConfig, encoder: &ToyEncoder) -> Result<EditSample> {
    spec.validate(cfg)?;
    let source = smooth_field(seed, cfg);
    let target = apply_edit(&spec, &source, cfg);
    let instr_tokens = spec.tokens(cfg);
    let instr_hidden = encoder.encode(&instr_tokens)?;
    Ok(EditSample { seed, spec, source, target, mask_hi: spec.mask_hi(cfg), instr_tokens, instr_hidden })
}

/// The sample owned by `seed` in `split`: its task and its source both derive from the seed.
pub fn sample_for_seed(seed: u64, split: Split, cfg: &ModelConfig, encoder: &ToyEncoder) -> Result<EditSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = draw_spec(&mut rng, cfg, split);
    gen_sample(spec, seed, cfg, encoder)
}

pub struct Corpus {
    pub split: CorpusSplit,
    pub train: Vec<EditSample>,
    pub val: Vec<EditSample>,
    pub test: Vec<EditSample>,
}

impl Corpus {
    pub fn generate(cfg: &ModelConfig, data: &DataConfig) -> Result<Self> {
        let split = make_splits(data.master_seed, data.n_train, data.n_val, data.n_test)?;
        let encoder = ToyEncoder::new(cfg, data.master_seed)?;
        let build = |s: Split| -> Result<Vec<EditSample>> {
            split.seeds(s).iter().map(|&seed| sample_for_seed(seed, s, cfg, &encoder)).collect()
        };
        Ok(Self { train: build(Split::Train)?, val: build(Split::Val)?, test: build(Split::Test)?, split })
    }

    pub fn get(&self, split: Split) -> &[EditSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Writes one `<split>.bin` of little-endian f32 records plus a JSON sidecar per split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for s in [Split::Train, Split::Val, Split::Test] {
            let mut bin = Vec::new();
            let mut records = Vec::new();
            for sample in self.get(s) {
                let offset = bin.len();
                let mut push = |vals: &[f32]| {
                    for v in vals {
                        bin.extend_from_slice(&v.to_le_bytes());
                    }
                };
                push(&sample.source.data);
                push(&sample.target.data);
                push(&sample.mask_hi.data);
                for h in &sample.instr_hidden {
                    push(h.data());
                }
                records.push(RecordHeader {
                    seed: sample.seed,
                    spec: sample.spec,
                    instr_tokens: sample.instr_tokens.clone(),
                    hidden_shapes: sample.instr_hidden.iter().map(|h| h.shape().to_vec()).collect(),
                    offset,
                    bytes: bin.len() - offset,
                });
            }
            fs::write(dir.join(format!("{}.bin", s.name())), &bin)?;
            let side = ShardSidecar { split: s, records };
            fs::write(dir.join(format!("{}.json", s.name())), serde_json::to_vec_pretty(&side)?)?;
        }
        fs::write(dir.join("splits.json"), serde_json::to_vec_pretty(&self.split)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, cfg: &ModelConfig) -> Result<Self> {
        let split: CorpusSplit = serde_json::from_slice(&fs::read(dir.join("splits.json"))?)?;
        let read = |s: Split| -> Result<Vec<EditSample>> {
            let bin = fs::read(dir.join(format!("{}.bin", s.name())))?;
            let side: ShardSidecar = serde_json::from_slice(&fs::read(dir.join(format!("{}.json", s.name())))?)?;
            side.records.iter().map(|r| r.decode(&bin, cfg)).collect()
        };
        Ok(Self { train: read(Split::Train)?, val: read(Split::Val)?, test: read(Split::Test)?, split })
    }
}

#[derive(Serialize, Deserialize)]
struct ShardSidecar {
    split: Split,
    records: Vec<RecordHeader>,
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    seed: u64,
    spec: TaskSpec,
    instr_tokens: Vec<usize>,
    hidden_shapes: Vec<Vec<usize>>,
    offset: usize,
    bytes: usize,
}

impl RecordHeader {
    fn decode(&self, bin: &[u8], cfg: &ModelConfig) -> Result<EditSample> {
        let end = self.offset + self.bytes;
        if end > bin.len() || !self.bytes.is_multiple_of(4) {
            return Err(Error::Length(format!("record for seed {} out of range", self.seed)));
        }
        let vals: Vec<f32> = bin[self.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let nl = cfg.channels * cfg.tokens();
        let nm = cfg.gen_h() * cfg.gen_w();
        let mut at = 0;
        let mut take = |n: usize| -> Result<Vec<f32>> {
            let out = vals.get(at..at + n).ok_or_else(|| Error::Length("short record".into()))?.to_vec();
            at += n;
            Ok(out)
        };
        let source = LatentGrid::new(cfg.channels, cfg.latent_h, cfg.latent_w, take(nl)?)?;
        let target = LatentGrid::new(cfg.channels, cfg.latent_h, cfg.latent_w, take(nl)?)?;
        let mask_hi = Grid::new(cfg.gen_h(), cfg.gen_w(), take(nm)?)?;
        let instr_hidden = self
            .hidden_shapes
            .iter()
            .map(|s| Ok(Tensor::new(s.clone(), take(s.iter().product())?)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(EditSample {
            seed: self.seed,
            spec: self.spec,
            source,
            target,
            mask_hi,
            instr_tokens: self.instr_tokens.clone(),
            instr_hidden,
        })
    }
}
