//! Context-aware alignment: token self-attention followed by cross-attention
//! from tokens to image patches, with residual wiring, stacked `M` times.
//!
//! Per block, with token input `t` and patch features `f`:
//!
//! ```text
//! t_sa  = MHA_self(t, t)          t_sa'  = t_sa + t
//! t_ca  = MHA_cross(t_sa', f)     t_ca'  = t_ca + t_sa     (ResidualMode::Paper)
//!                                 t_ca'  = t_ca + t_sa'    (ResidualMode::Primed)
//! ```
//!
//! Block `i` consumes block `i-1`'s `t_ca'`. Only the final block's outputs
//! are projected, and `w_cls` is the head-averaged `[CLS]` row of the final
//! self-attention with the `[CLS]` entry dropped and the rest renormalized.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{project_text, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::{Graph, NodeId};

/// Which self-attention output the cross-attention residual adds back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `t_ca' = t_ca + t_sa`
    #[default]
    Paper,
    /// `t_ca' = t_ca + t_sa'`
    Primed,
}

/// Query/key/value/output matrices of one multi-head attention. Heads are
/// column blocks of width `d_k` in the query, key and value maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionIds {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub heads: usize,
}

impl AttentionIds {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        query_dim: usize,
        kv_dim: usize,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Caa;
        Self {
            query: store.push_uniform(format!("{prefix}.wq"), g, (query_dim, width), query_dim, rng),
            key: store.push_uniform(format!("{prefix}.wk"), g, (kv_dim, width), kv_dim, rng),
            value: store.push_uniform(format!("{prefix}.wv"), g, (kv_dim, width), kv_dim, rng),
            output: store.push_uniform(format!("{prefix}.wo"), g, (width, width), width, rng),
            heads,
        }
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        store.value(self.query).ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaaBlockIds {
    pub self_attn: AttentionIds,
    pub cross_attn: AttentionIds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaaParams {
    pub blocks: Vec<CaaBlockIds>,
    pub residual_mode: ResidualMode,
}

impl CaaParams {
    pub fn register<R: Rng>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Self {
        let ct = config.text_channels;
        let blocks = (0..config.blocks)
            .map(|b| CaaBlockIds {
                self_attn: AttentionIds::register(store, &format!("caa.{b}.self"), ct, ct, ct, config.heads, rng),
                cross_attn: AttentionIds::register(
                    store,
                    &format!("caa.{b}.cross"),
                    ct,
                    config.image_channels,
                    ct,
                    config.heads,
                    rng,
                ),
            })
            .collect();
        Self {
            blocks,
            residual_mode: config.residual_mode,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MhaNodes {
    /// `Lq × width`
    pub output: NodeId,
    /// One `Lq × Lk` attention matrix per head.
    pub attn: Vec<NodeId>,
}

/// Multi-head scaled dot-product attention on the tape.
pub fn mha_graph<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    ids: &AttentionIds,
    queries: NodeId,
    keys_values: NodeId,
    key_mask: Option<&[bool]>,
) -> MhaNodes {
    let wq = g.param(ids.query, store.value(ids.query));
    let wk = g.param(ids.key, store.value(ids.key));
    let wv = g.param(ids.value, store.value(ids.value));
    let wo = g.param(ids.output, store.value(ids.output));
    let q = g.matmul(queries, wq);
    let k = g.matmul(keys_values, wk);
    let v = g.matmul(keys_values, wv);
    let width = store.value(ids.query).ncols();
    let dk = width / ids.heads;
    let scale = (1.0 / dk as f64).sqrt();
    let mut heads = Vec::with_capacity(ids.heads);
    let mut attn = Vec::with_capacity(ids.heads);
    for h in 0..ids.heads {
        let qh = g.slice_cols(q, h * dk, dk);
        let kh = g.slice_cols(k, h * dk, dk);
        let vh = g.slice_cols(v, h * dk, dk);
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, scale);
        let a = g.softmax_rows(scores, key_mask);
        heads.push(g.matmul(a, vh));
        attn.push(a);
    }
    let concat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
    let output = g.matmul(concat, wo);
    MhaNodes { output, attn }
}

fn check_finite(name: &str, x: &Array2<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// Value-level multi-head attention; returns the mixed output and the
/// `H × Lq × Lk` attention weights.
pub fn multi_head_attention(
    store: &ParamStore,
    ids: &AttentionIds,
    queries: &Array2<f64>,
    keys_values: &Array2<f64>,
) -> Result<(Array2<f64>, Array3<f64>)> {
    let (qd, kd) = (store.value(ids.query).nrows(), store.value(ids.key).nrows());
    if queries.ncols() != qd || keys_values.ncols() != kd {
        return Err(Error::Shape(format!(
            "attention expects query width {qd} and key width {kd}, got {} and {}",
            queries.ncols(),
            keys_values.ncols()
        )));
    }
    if keys_values.nrows() == 0 || queries.nrows() == 0 {
        return Err(Error::Shape("attention needs at least one query and one key".into()));
    }
    check_finite("attention queries", queries)?;
    check_finite("attention keys", keys_values)?;
    let mut g = Graph::new();
    let q = g.input(queries.clone());
    let kv = g.input(keys_values.clone());
    let n = mha_graph(&mut g, store, ids, q, kv, None);
    let (lq, lk) = (queries.nrows(), keys_values.nrows());
    let attn = Array3::from_shape_fn((ids.heads, lq, lk), |(h, i, j)| g.value(n.attn[h])[[i, j]]);
    Ok((g.value(n.output).clone(), attn))
}

#[derive(Debug, Clone)]
pub struct BlockNodes {
    pub input: NodeId,
    pub sa: NodeId,
    pub sa_prime: NodeId,
    pub ca: NodeId,
    pub ca_prime: NodeId,
    pub self_attn: Vec<NodeId>,
    pub cross_attn: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct CaaNodes {
    pub blocks: Vec<BlockNodes>,
    /// `L × d`
    pub sa_proj: NodeId,
    /// `L × d`
    pub ca_proj: NodeId,
    /// `1 × L`, head-averaged `[CLS]` attention row of the final block.
    pub w_cls_raw: NodeId,
    /// `1 × (L-1)`, non-`[CLS]` entries of `w_cls_raw`, renormalized.
    pub w_cls: NodeId,
}

impl CaaNodes {
    pub fn last(&self) -> &BlockNodes {
        self.blocks.last().expect("at least one block")
    }
}

pub fn block_graph<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    ids: &CaaBlockIds,
    mode: ResidualMode,
    tokens: NodeId,
    key_mask: &[bool],
    patches: NodeId,
) -> BlockNodes {
    let s = mha_graph(g, store, &ids.self_attn, tokens, tokens, Some(key_mask));
    let sa_prime = g.add(s.output, tokens);
    let c = mha_graph(g, store, &ids.cross_attn, sa_prime, patches, None);
    let residual = match mode {
        ResidualMode::Paper => s.output,
        ResidualMode::Primed => sa_prime,
    };
    let ca_prime = g.add(c.output, residual);
    BlockNodes {
        input: tokens,
        sa: s.output,
        sa_prime,
        ca: c.output,
        ca_prime,
        self_attn: s.attn,
        cross_attn: c.attn,
    }
}

/// Runs `m` stacked blocks (`1 ≤ m ≤` configured blocks).
pub fn caa_graph<'p>(
    g: &mut Graph<'p>,
    params: &'p ModelParams,
    tokens: NodeId,
    key_mask: &[bool],
    patches: NodeId,
    m: usize,
) -> Result<CaaNodes> {
    if m < 1 || m > params.caa.blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "block count {m} outside [1, {}]",
            params.caa.blocks.len()
        )));
    }
    let (l, _) = g.shape(tokens);
    if l < 2 || key_mask.len() != l {
        return Err(Error::Shape(format!("alignment needs L >= 2 tokens with a matching mask, got {l}")));
    }
    let mut blocks = Vec::with_capacity(m);
    let mut x = tokens;
    for ids in &params.caa.blocks[..m] {
        let b = block_graph(g, &params.store, ids, params.caa.residual_mode, x, key_mask, patches);
        x = b.ca_prime;
        blocks.push(b);
    }
    let last = blocks.last().expect("m >= 1");
    let sa_proj = project_text(g, params, last.sa_prime);
    let ca_proj = project_text(g, params, last.ca_prime);
    let heads = last.self_attn.len();
    let mut cls_rows = Vec::with_capacity(heads);
    for a in &last.self_attn {
        cls_rows.push(g.rows(*a, &[0]));
    }
    let mut acc = cls_rows[0];
    for r in &cls_rows[1..] {
        acc = g.add(acc, *r);
    }
    let w_cls_raw = g.scale(acc, 1.0 / heads as f64);
    let tail = g.slice_cols(w_cls_raw, 1, l - 1);
    let w_cls = g.normalize_row_sum(tail);
    Ok(CaaNodes {
        blocks,
        sa_proj,
        ca_proj,
        w_cls_raw,
        w_cls,
    })
}

/// Final-block features of the alignment stack.
#[derive(Debug, Clone, PartialEq)]
pub struct CaaFeatures {
    /// Token input of the final block, `L × c_t`.
    pub input: Array2<f64>,
    pub sa: Array2<f64>,
    pub sa_prime: Array2<f64>,
    pub ca: Array2<f64>,
    pub ca_prime: Array2<f64>,
    /// `L × d`
    pub sa_proj: Array2<f64>,
    /// `L × d`
    pub ca_proj: Array2<f64>,
    /// Length `L`.
    pub w_cls_raw: Array1<f64>,
    /// Length `L - 1`, sums to one.
    pub w_cls: Array1<f64>,
}

impl CaaFeatures {
    pub fn from_graph(g: &Graph<'_>, n: &CaaNodes) -> Self {
        let last = n.last();
        Self {
            input: g.value(last.input).clone(),
            sa: g.value(last.sa).clone(),
            sa_prime: g.value(last.sa_prime).clone(),
            ca: g.value(last.ca).clone(),
            ca_prime: g.value(last.ca_prime).clone(),
            sa_proj: g.value(n.sa_proj).clone(),
            ca_proj: g.value(n.ca_proj).clone(),
            w_cls_raw: g.value(n.w_cls_raw).row(0).to_owned(),
            w_cls: g.value(n.w_cls).row(0).to_owned(),
        }
    }
}

/// Value-level forward pass over token features `t` (`L × c_t`) and flattened
/// patch features (`(w·h) × c`).
pub fn caa_forward(
    params: &ModelParams,
    tokens: &Array2<f64>,
    key_mask: &[bool],
    patches: &Array2<f64>,
    m: usize,
) -> Result<CaaFeatures> {
    let c = &params.config;
    if tokens.ncols() != c.text_channels || patches.ncols() != c.image_channels {
        return Err(Error::Shape(format!(
            "tokens {:?} / patches {:?} do not match c_t={} c={}",
            tokens.dim(),
            patches.dim(),
            c.text_channels,
            c.image_channels
        )));
    }
    check_finite("tokens", tokens)?;
    check_finite("patches", patches)?;
    let mut g = Graph::new();
    let t = g.input(tokens.clone());
    let f = g.input(patches.clone());
    let n = caa_graph(&mut g, params, t, key_mask, f, m)?;
    Ok(CaaFeatures::from_graph(&g, &n))
}

/// One block's self-attention step: `(t_sa', w_cls_raw)`.
pub fn self_attend(params: &ModelParams, block: usize, tokens: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    if tokens.nrows() < 2 {
        return Err(Error::Shape("self-attention needs L >= 2".into()));
    }
    let ids = &params.caa.blocks[block].self_attn;
    let (out, attn) = multi_head_attention(&params.store, ids, tokens, tokens)?;
    let l = tokens.nrows();
    let w = Array1::from_shape_fn(l, |j| (0..ids.heads).map(|h| attn[[h, 0, j]]).sum::<f64>() / ids.heads as f64);
    Ok((out + tokens, w))
}

/// One block's cross-attention step given `t_sa` and `t_sa'`.
pub fn cross_attend(
    params: &ModelParams,
    block: usize,
    sa: &Array2<f64>,
    sa_prime: &Array2<f64>,
    patches: &Array2<f64>,
) -> Result<Array2<f64>> {
    let ids = &params.caa.blocks[block].cross_attn;
    let (out, _) = multi_head_attention(&params.store, ids, sa_prime, patches)?;
    Ok(match params.caa.residual_mode {
        ResidualMode::Paper => out + sa,
        ResidualMode::Primed => out + sa_prime,
    })
}
