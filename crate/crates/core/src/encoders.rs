//! Toy image and text encoders with projection heads into the joint space.
//!
//! The image encoder cuts the image into non-overlapping `p×p` patches and
//! runs each through a shared two-layer map, then adds a learned per-patch
//! position embedding. The text encoder embeds tokens, adds learned position
//! offsets, and applies one mixing layer that feeds every token the mean of
//! the non-padding tokens. Row 0 is the `[CLS]` token.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caa::{CaaParams, ResidualMode};
use crate::corpus::{CLS, PAD};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::{Graph, NodeId};

/// Standard deviation of positional embeddings at initialization.
pub const POS_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square input image, in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub image_hidden: usize,
    /// Patch feature width `c`.
    pub image_channels: usize,
    /// Token feature width `c_t`.
    pub text_channels: usize,
    /// Joint embedding width `d`.
    pub joint_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub heads: usize,
    /// Number of stacked alignment blocks `M`.
    pub blocks: usize,
    pub residual_mode: ResidualMode,
}

impl ModelConfig {
    /// Desk-scale defaults for a 64×64 corpus.
    pub fn desk(vocab_size: usize, max_len: usize) -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            image_hidden: 32,
            image_channels: 32,
            text_channels: 32,
            joint_dim: 32,
            vocab_size,
            max_len,
            heads: 4,
            blocks: 3,
            residual_mode: ResidualMode::Paper,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.text_channels % self.heads != 0 {
            return fail(format!("{} heads do not divide c_t = {}", self.heads, self.text_channels));
        }
        if self.blocks == 0 {
            return fail("at least one alignment block is required".into());
        }
        if self.vocab_size < 2 || self.max_len < 2 {
            return fail("vocabulary and max_len must be at least 2".into());
        }
        if [self.image_hidden, self.image_channels, self.text_channels, self.joint_dim].contains(&0) {
            return fail("feature widths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub pos: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderIds {
    pub embed: ParamId,
    pub pos: ParamId,
    pub mix_self: ParamId,
    pub mix_ctx: ParamId,
    pub mix_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionIds {
    pub image: ParamId,
    pub text: ParamId,
}

/// All trainable tensors plus the typed handles into them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub image: ImageEncoderIds,
    pub text: TextEncoderIds,
    pub proj: ProjectionIds,
    pub caa: CaaParams,
}

impl ModelParams {
    /// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases,
    /// and small normal positional embeddings.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let patch_dim = c.patch_size * c.patch_size;
        let enc = ParamGroup::Encoder;
        let image = ImageEncoderIds {
            w1: store.push_uniform("image.w1", enc, (patch_dim, c.image_hidden), patch_dim, &mut rng),
            b1: store.push("image.b1", enc, Array2::zeros((1, c.image_hidden))),
            w2: store.push_uniform("image.w2", enc, (c.image_hidden, c.image_channels), c.image_hidden, &mut rng),
            b2: store.push("image.b2", enc, Array2::zeros((1, c.image_channels))),
            pos: store.push_normal("image.pos", enc, (c.num_patches(), c.image_channels), POS_STD, &mut rng),
        };
        let text = TextEncoderIds {
            embed: store.push_uniform("text.embed", enc, (c.vocab_size, c.text_channels), 1, &mut rng),
            pos: store.push_normal("text.pos", enc, (c.max_len, c.text_channels), POS_STD, &mut rng),
            mix_self: store.push_uniform("text.mix_self", enc, (c.text_channels, c.text_channels), c.text_channels, &mut rng),
            mix_ctx: store.push_uniform("text.mix_ctx", enc, (c.text_channels, c.text_channels), c.text_channels, &mut rng),
            mix_bias: store.push("text.mix_bias", enc, Array2::zeros((1, c.text_channels))),
        };
        let proj = ProjectionIds {
            image: store.push_uniform("proj.image", enc, (c.image_channels, c.joint_dim), c.image_channels, &mut rng),
            text: store.push_uniform("proj.text", enc, (c.text_channels, c.joint_dim), c.text_channels, &mut rng),
        };
        let caa = CaaParams::register(&mut store, &config, &mut rng);
        Ok(Self {
            config,
            store,
            image,
            text,
            proj,
            caa,
        })
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        self.store.value(id)
    }

    pub fn p<'p>(&'p self, g: &mut Graph<'p>, id: ParamId) -> NodeId {
        g.param(id, self.store.value(id))
    }
}

/// Patch grid, its joint-space projection, and the pooled global embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    /// Grid side length (`w = h`).
    pub grid: usize,
    /// `(w·h) × c`, patches in row-major grid order.
    pub patches: Array2<f64>,
    /// `(w·h) × d`
    pub projected: Array2<f64>,
    /// Length `d`; the mean of `projected` over patches.
    pub global: Array1<f64>,
}

impl ImageFeatures {
    /// The patch features as a `c × w × h` array indexed `[channel, x, y]`.
    pub fn patch_grid(&self) -> Array3<f64> {
        let c = self.patches.ncols();
        Array3::from_shape_fn((c, self.grid, self.grid), |(ch, x, y)| {
            self.patches[[y * self.grid + x, ch]]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    /// `L × c_t`, row 0 is `[CLS]`.
    pub tokens: Array2<f64>,
    pub projected_cls: Array1<f64>,
}

impl TokenFeatures {
    pub fn cls(&self) -> Array1<f64> {
        self.tokens.row(0).to_owned()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImageNodes {
    /// `(w·h) × c`
    pub patches: NodeId,
    /// `(w·h) × d`
    pub projected: NodeId,
    /// `1 × d`
    pub global: NodeId,
}

#[derive(Debug, Clone)]
pub struct TextNodes {
    /// `L × c_t`
    pub tokens: NodeId,
    /// `1 × d`
    pub projected_cls: NodeId,
    /// `false` at padding positions.
    pub key_mask: Vec<bool>,
}

/// Non-overlapping `p×p` patches as rows of a `(w·h) × p²` matrix.
pub fn extract_patches(image: &Array2<f32>, patch: usize) -> Array2<f64> {
    let side = image.nrows() / patch;
    Array2::from_shape_fn((side * side, patch * patch), |(pi, k)| {
        let (gy, gx) = (pi / side, pi % side);
        let (py, px) = (k / patch, k % patch);
        image[[gy * patch + py, gx * patch + px]] as f64
    })
}

pub fn image_forward<'p>(g: &mut Graph<'p>, params: &'p ModelParams, image: &Array2<f32>) -> Result<ImageNodes> {
    let c = &params.config;
    if image.dim() != (c.image_size, c.image_size) {
        return Err(Error::Shape(format!(
            "image is {:?}, encoder expects {}x{}",
            image.dim(),
            c.image_size,
            c.image_size
        )));
    }
    let x = g.input(extract_patches(image, c.patch_size));
    let ids = &params.image;
    let w1 = params.p(g, ids.w1);
    let b1 = params.p(g, ids.b1);
    let w2 = params.p(g, ids.w2);
    let b2 = params.p(g, ids.b2);
    let pos = params.p(g, ids.pos);
    let h = g.matmul(x, w1);
    let h = g.add_row(h, b1);
    let h = g.tanh(h);
    let f = g.matmul(h, w2);
    let f = g.add_row(f, b2);
    let patches = g.add(f, pos);
    let (projected, global) = project_patches(g, params, patches);
    Ok(ImageNodes {
        patches,
        projected,
        global,
    })
}

/// `f̂^P = f^P · W_img`, `f̂^G = mean(f̂^P)`.
pub fn project_patches<'p>(g: &mut Graph<'p>, params: &'p ModelParams, patches: NodeId) -> (NodeId, NodeId) {
    let w = params.p(g, params.proj.image);
    let projected = g.matmul(patches, w);
    let global = g.mean_rows(projected);
    (projected, global)
}

pub fn project_text<'p>(g: &mut Graph<'p>, params: &'p ModelParams, rows: NodeId) -> NodeId {
    let w = params.p(g, params.proj.text);
    g.matmul(rows, w)
}

pub fn check_tokens(config: &ModelConfig, ids: &[u32]) -> Result<()> {
    if ids.len() < 2 || ids.len() > config.max_len {
        return Err(Error::Shape(format!(
            "token sequence of length {} outside [2, {}]",
            ids.len(),
            config.max_len
        )));
    }
    if let Some(&id) = ids.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::OutOfVocabulary {
            id,
            size: config.vocab_size,
        });
    }
    if ids[0] != CLS {
        return Err(Error::InvalidArgument("token sequence must start with [CLS]".into()));
    }
    if ids[1..].iter().all(|t| *t == PAD) {
        return Err(Error::InvalidArgument("token sequence has no content tokens".into()));
    }
    Ok(())
}

pub fn text_forward<'p>(g: &mut Graph<'p>, params: &'p ModelParams, ids: &[u32]) -> Result<TextNodes> {
    check_tokens(&params.config, ids)?;
    let l = ids.len();
    let t = &params.text;
    let table = params.p(g, t.embed);
    let pos_table = params.p(g, t.pos);
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let emb = g.rows(table, &idx);
    let positions: Vec<usize> = (0..l).collect();
    let pos = g.rows(pos_table, &positions);
    let x = g.add(emb, pos);

    let key_mask: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
    let kept = key_mask.iter().filter(|k| **k).count() as f64;
    let avg = Array2::from_shape_fn((1, l), |(_, j)| if key_mask[j] { 1.0 / kept } else { 0.0 });
    let avg = g.input(avg);
    let ctx = g.matmul(avg, x);

    let a = params.p(g, t.mix_self);
    let b = params.p(g, t.mix_ctx);
    let bias = params.p(g, t.mix_bias);
    let ctx_mix = g.matmul(ctx, b);
    let ctx_mix = g.add(ctx_mix, bias);
    let local = g.matmul(x, a);
    let pre = g.add_row(local, ctx_mix);
    let mixed = g.tanh(pre);
    let tokens = g.add(x, mixed);

    let cls = g.rows(tokens, &[0]);
    let projected_cls = project_text(g, params, cls);
    Ok(TextNodes {
        tokens,
        projected_cls,
        key_mask,
    })
}

pub fn encode_image(params: &ModelParams, image: &Array2<f32>) -> Result<ImageFeatures> {
    let mut g = Graph::new();
    let n = image_forward(&mut g, params, image)?;
    Ok(ImageFeatures {
        grid: params.config.grid_side(),
        patches: g.value(n.patches).clone(),
        projected: g.value(n.projected).clone(),
        global: g.value(n.global).row(0).to_owned(),
    })
}

pub fn encode_text(params: &ModelParams, ids: &[u32]) -> Result<TokenFeatures> {
    let mut g = Graph::new();
    let n = text_forward(&mut g, params, ids)?;
    Ok(TokenFeatures {
        tokens: g.value(n.tokens).clone(),
        projected_cls: g.value(n.projected_cls).row(0).to_owned(),
    })
}

/// Projects `(w·h) × c` patch features; returns `(f̂^P, f̂^G)`.
pub fn project_image_features(params: &ModelParams, patches: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let w = params.value(params.proj.image);
    if patches.ncols() != w.nrows() {
        return Err(Error::Shape(format!(
            "patch width {} does not match projector input {}",
            patches.ncols(),
            w.nrows()
        )));
    }
    let projected = patches.dot(w);
    let global = projected.mean_axis(ndarray::Axis(0)).expect("at least one patch");
    Ok((projected, global))
}

/// Projects token rows `L × c_t` into the joint space.
pub fn project_text_features(params: &ModelParams, rows: &Array2<f64>) -> Result<Array2<f64>> {
    let w = params.value(params.proj.text);
    if rows.ncols() != w.nrows() {
        return Err(Error::Shape(format!(
            "token width {} does not match projector input {}",
            rows.ncols(),
            w.nrows()
        )));
    }
    Ok(rows.dot(w))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LOCRETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint: magic, version, JSON model config, then each tensor as
/// (name, rows, cols, little-endian `f64` data).
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(params, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, out: &mut W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&params.config)?;
    out.write_all(&(cfg.len() as u64).to_le_bytes())?;
    out.write_all(&cfg)?;
    out.write_all(&(params.store.len() as u64).to_le_bytes())?;
    for (_, p) in params.store.iter() {
        out.write_all(&(p.name.len() as u64).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        let (r, c) = p.value.dim();
        out.write_all(&(r as u64).to_le_bytes())?;
        out.write_all(&(c as u64).to_le_bytes())?;
        for v in p.value.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<ModelParams> {
    fn corrupt(e: std::io::Error) -> Error {
        Error::CorruptCheckpoint(format!("truncated or unreadable: {e}"))
    }
    fn u64_at<R: Read>(input: &mut R) -> Result<u64> {
        let mut b = [0u8; 8];
        input.read_exact(&mut b).map_err(corrupt)?;
        Ok(u64::from_le_bytes(b))
    }
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(corrupt)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let mut vb = [0u8; 4];
    input.read_exact(&mut vb).map_err(corrupt)?;
    let version = u32::from_le_bytes(vb);
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let cfg_len = u64_at(input)? as usize;
    if cfg_len > 1 << 20 {
        return Err(Error::CorruptCheckpoint("config block too large".into()));
    }
    let mut cfg = vec![0u8; cfg_len];
    input.read_exact(&mut cfg).map_err(corrupt)?;
    let config: ModelConfig =
        serde_json::from_slice(&cfg).map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
    let mut params = ModelParams::init(config, 0)?;
    let count = u64_at(input)? as usize;
    if count != params.store.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {} tensors, found {count}",
            params.store.len()
        )));
    }
    for (id, p) in params.store.iter_mut() {
        let name_len = u64_at(input)? as usize;
        if name_len > 4096 {
            return Err(Error::CorruptCheckpoint("tensor name too long".into()));
        }
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(corrupt)?;
        if name != p.name.as_bytes() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {} is `{}`, expected `{}`",
                id.0,
                String::from_utf8_lossy(&name),
                p.name
            )));
        }
        let (r, c) = (u64_at(input)? as usize, u64_at(input)? as usize);
        if (r, c) != p.value.dim() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{}` has shape {r}x{c}, expected {:?}",
                p.name,
                p.value.dim()
            )));
        }
        let mut bytes = vec![0u8; r * c * 8];
        input.read_exact(&mut bytes).map_err(corrupt)?;
        for (v, chunk) in p.value.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(params)
}
