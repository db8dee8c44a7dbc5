//! Training objectives: symmetric global alignment, `[CLS]`-weighted local
//! alignment between self- and cross-attentive token features, and the
//! triplet margin loss.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::caa::{caa_graph, CaaFeatures};
use crate::corpus::PAD;
use crate::encoders::{image_forward, text_forward, ModelParams};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau_g: f64,
    pub tau_l: f64,
    pub beta: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_g: 0.07,
            tau_l: 0.07,
            beta: 0.1,
            alpha: 0.5,
            eps: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tau_g > 0.0
            && self.tau_l > 0.0
            && self.alpha >= 0.0
            && self.beta >= 0.0
            && self.eps >= 0.0
            && [self.tau_g, self.tau_l, self.alpha, self.beta, self.eps].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "loss config needs tau > 0, alpha >= 0, beta >= 0: {self:?}"
            )))
        }
    }
}

fn check_rows_nonzero(name: &str, x: &Array2<f64>, eps: f64) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name.to_string()));
    }
    for (i, row) in x.rows().into_iter().enumerate() {
        if row.dot(&row).sqrt() <= eps {
            return Err(Error::ZeroNorm(format!("{name} row {i}")));
        }
    }
    Ok(())
}

/// `mean_i( logsumexp_j s[i, j] - s[i, i] )`
pub fn info_nce_rows(g: &mut Graph<'_>, scores: NodeId) -> NodeId {
    let lse = g.log_sum_exp_rows(scores);
    let diag = g.diag(scores);
    let terms = g.sub(lse, diag);
    g.mean(terms)
}

/// Symmetric InfoNCE over cosine similarities of `N × d` image and text
/// embeddings.
pub fn global_alignment_graph(g: &mut Graph<'_>, cfg: &LossConfig, images: NodeId, texts: NodeId) -> Result<NodeId> {
    let (n, d) = g.shape(images);
    if g.shape(texts) != (n, d) || n == 0 {
        return Err(Error::Shape(format!(
            "global alignment needs equal non-empty batches, got {:?} and {:?}",
            g.shape(images),
            g.shape(texts)
        )));
    }
    check_rows_nonzero("global image embeddings", g.value(images), cfg.eps)?;
    check_rows_nonzero("report embeddings", g.value(texts), cfg.eps)?;
    let f = g.normalize_rows(images);
    let t = g.normalize_rows(texts);
    let s = g.matmul_t(f, t);
    let s = g.scale(s, 1.0 / cfg.tau_g);
    let st = g.transpose(s);
    let a = info_nce_rows(g, s);
    let b = info_nce_rows(g, st);
    Ok(g.add(a, b))
}

pub fn global_alignment_loss(cfg: &LossConfig, images: &Array2<f64>, texts: &Array2<f64>) -> Result<f64> {
    cfg.validate()?;
    let mut g = Graph::new();
    let f = g.input(images.clone());
    let t = g.input(texts.clone());
    let loss = global_alignment_graph(&mut g, cfg, f, t)?;
    Ok(g.scalar(loss))
}

/// Final-block outputs of one sample, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LocalItem {
    /// `L × d`
    pub sa_proj: NodeId,
    /// `L × d`
    pub ca_proj: NodeId,
    /// `1 × (L-1)`
    pub w_cls: NodeId,
}

/// Weighted token-cosine score matrices of the local alignment loss.
///
/// `self_to_cross[i, j] = Σ_k w_i[k] cos(sa_i[k], ca_j[k])` and
/// `cross_to_self[i, j] = Σ_k w_i[k] cos(ca_i[k], sa_j[k])`, with `k` running
/// over the non-`[CLS]` tokens.
pub fn local_score_graph(g: &mut Graph<'_>, cfg: &LossConfig, items: &[LocalItem]) -> Result<(NodeId, NodeId)> {
    let Some(first) = items.first() else {
        return Err(Error::Empty("local alignment batch".into()));
    };
    let (l, d) = g.shape(first.sa_proj);
    for (i, it) in items.iter().enumerate() {
        if g.shape(it.sa_proj) != (l, d) || g.shape(it.ca_proj) != (l, d) || g.shape(it.w_cls) != (1, l - 1) {
            return Err(Error::Shape(format!(
                "sample {i} has token features {:?}/{:?}, batch uses {l}x{d}",
                g.shape(it.sa_proj),
                g.shape(it.ca_proj)
            )));
        }
        check_rows_nonzero(&format!("self-attentive tokens of sample {i}"), g.value(it.sa_proj), cfg.eps)?;
        check_rows_nonzero(&format!("cross-attentive tokens of sample {i}"), g.value(it.ca_proj), cfg.eps)?;
    }
    let tail: Vec<usize> = (1..l).collect();
    let width = (l - 1) * d;
    let mut sa_w = Vec::new();
    let mut ca_w = Vec::new();
    let mut sa_flat = Vec::new();
    let mut ca_flat = Vec::new();
    for it in items {
        let w = g.transpose(it.w_cls);
        let sa = g.rows(it.sa_proj, &tail);
        let sa = g.normalize_rows(sa);
        let ca = g.rows(it.ca_proj, &tail);
        let ca = g.normalize_rows(ca);
        let saw = g.mul_col(sa, w);
        let caw = g.mul_col(ca, w);
        sa_w.push(g.reshape(saw, 1, width));
        ca_w.push(g.reshape(caw, 1, width));
        sa_flat.push(g.reshape(sa, 1, width));
        ca_flat.push(g.reshape(ca, 1, width));
    }
    let sa_w = g.concat_rows(&sa_w);
    let ca_w = g.concat_rows(&ca_w);
    let sa_flat = g.concat_rows(&sa_flat);
    let ca_flat = g.concat_rows(&ca_flat);
    Ok((g.matmul_t(sa_w, ca_flat), g.matmul_t(ca_w, sa_flat)))
}

pub fn local_alignment_graph(g: &mut Graph<'_>, cfg: &LossConfig, items: &[LocalItem]) -> Result<NodeId> {
    let (a, b) = local_score_graph(g, cfg, items)?;
    let a = g.scale(a, 1.0 / cfg.tau_l);
    let b = g.scale(b, 1.0 / cfg.tau_l);
    let la = info_nce_rows(g, a);
    let lb = info_nce_rows(g, b);
    Ok(g.add(la, lb))
}

pub fn local_alignment_loss(cfg: &LossConfig, batch: &[CaaFeatures]) -> Result<f64> {
    cfg.validate()?;
    let mut g = Graph::new();
    let items: Vec<LocalItem> = batch
        .iter()
        .map(|f| LocalItem {
            sa_proj: g.input(f.sa_proj.clone()),
            ca_proj: g.input(f.ca_proj.clone()),
            w_cls: g.input(f.w_cls.clone().insert_axis(ndarray::Axis(0))),
        })
        .collect();
    let loss = local_alignment_graph(&mut g, cfg, &items)?;
    Ok(g.scalar(loss))
}

/// `mean_i max(‖a_i - p_i‖ - ‖a_i - n_i‖ + α, 0)`
pub fn triplet_graph(g: &mut Graph<'_>, cfg: &LossConfig, a: NodeId, p: NodeId, n: NodeId) -> Result<NodeId> {
    let shape = g.shape(a);
    if g.shape(p) != shape || g.shape(n) != shape || shape.0 == 0 {
        return Err(Error::Shape(format!(
            "triplet batches differ: {:?}, {:?}, {:?}",
            shape,
            g.shape(p),
            g.shape(n)
        )));
    }
    let dp = g.sub(a, p);
    let dp = g.row_norm(dp);
    let dn = g.sub(a, n);
    let dn = g.row_norm(dn);
    let gap = g.sub(dp, dn);
    let gap = g.add_scalar(gap, cfg.alpha);
    let hinge = g.relu(gap);
    Ok(g.mean(hinge))
}

pub fn triplet_loss(cfg: &LossConfig, a: &Array2<f64>, p: &Array2<f64>, n: &Array2<f64>) -> Result<f64> {
    cfg.validate()?;
    let mut g = Graph::new();
    let (a, p, n) = (g.input(a.clone()), g.input(p.clone()), g.input(n.clone()));
    let loss = triplet_graph(&mut g, cfg, a, p, n)?;
    Ok(g.scalar(loss))
}

/// An image with its tokenized report.
#[derive(Debug, Clone, Copy)]
pub struct PairRef<'a> {
    pub image: &'a Array2<f32>,
    pub tokens: &'a [u32],
}

#[derive(Debug, Clone, Copy)]
pub struct Stage1Nodes {
    pub total: NodeId,
    pub global: NodeId,
    pub local: NodeId,
}

/// Pads every report to the longest one in the batch.
pub fn pad_batch(batch: &[PairRef<'_>]) -> Vec<Vec<u32>> {
    let l = batch.iter().map(|b| b.tokens.len()).max().unwrap_or(0);
    batch
        .iter()
        .map(|b| {
            let mut t = b.tokens.to_vec();
            t.resize(l, PAD);
            t
        })
        .collect()
}

/// Builds `L_G + β·L_l` over a batch of image-report pairs.
pub fn stage1_graph<'p>(
    g: &mut Graph<'p>,
    params: &'p ModelParams,
    cfg: &LossConfig,
    batch: &[PairRef<'_>],
) -> Result<Stage1Nodes> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    let m = params.config.blocks;
    let mut globals = Vec::with_capacity(batch.len());
    let mut reports = Vec::with_capacity(batch.len());
    let mut items = Vec::with_capacity(batch.len());
    for (pair, tokens) in batch.iter().zip(pad_batch(batch)) {
        let img = image_forward(g, params, pair.image)?;
        let txt = text_forward(g, params, &tokens)?;
        let caa = caa_graph(g, params, txt.tokens, &txt.key_mask, img.patches, m)?;
        globals.push(img.global);
        reports.push(txt.projected_cls);
        items.push(LocalItem {
            sa_proj: caa.sa_proj,
            ca_proj: caa.ca_proj,
            w_cls: caa.w_cls,
        });
    }
    let f = g.concat_rows(&globals);
    let t = g.concat_rows(&reports);
    let global = global_alignment_graph(g, cfg, f, t)?;
    let local = local_alignment_graph(g, cfg, &items)?;
    let weighted = g.scale(local, cfg.beta);
    let total = g.add(global, weighted);
    Ok(Stage1Nodes { total, global, local })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Loss {
    pub total: f64,
    pub global: f64,
    pub local: f64,
}

pub fn stage1_loss(params: &ModelParams, cfg: &LossConfig, batch: &[PairRef<'_>]) -> Result<Stage1Loss> {
    let mut g = Graph::new();
    let n = stage1_graph(&mut g, params, cfg, batch)?;
    Ok(Stage1Loss {
        total: g.scalar(n.total),
        global: g.scalar(n.global),
        local: g.scalar(n.local),
    })
}

/// Anything that owns a [`ParamStore`].
pub trait HasParams: Clone {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn store(&self) -> &ParamStore {
        self
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        self
    }
}

impl HasParams for ModelParams {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Entries whose analytic and numeric gradients are both below this are
/// compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Central finite differences over every parameter entry.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<P, F>(params: &P, step: f64, loss: F) -> Result<GradCheckReport>
where
    P: HasParams,
    F: for<'p> Fn(&mut Graph<'p>, &'p P) -> Result<NodeId>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step {step}")));
    }
    let analytic = {
        let mut g = Graph::new();
        let out = loss(&mut g, params)?;
        if !g.scalar(out).is_finite() {
            return Err(Error::NonFiniteLoss { step: 0 });
        }
        g.backward(out).into_params()
    };
    let eval = |p: &P| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, p)?;
        let v = g.scalar(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteLoss { step: 0 })
        }
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        params: Vec::new(),
        entries_checked: 0,
    };
    let ids: Vec<_> = params.store().iter().map(|(id, p)| (id, p.name.clone(), p.value.len())).collect();
    for (id, name, len) in ids {
        let a: Vec<f64> = match analytic.get(&id) {
            Some(a) => a.iter().copied().collect(),
            None => vec![0.0; len],
        };
        let mut check = ParamCheck {
            name,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for k in 0..len {
            let orig = work.store().value(id).as_slice().expect("standard layout")[k];
            work.store_mut().value_mut(id).as_slice_mut().expect("standard layout")[k] = orig + step;
            let up = eval(&work)?;
            work.store_mut().value_mut(id).as_slice_mut().expect("standard layout")[k] = orig - step;
            let down = eval(&work)?;
            work.store_mut().value_mut(id).as_slice_mut().expect("standard layout")[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let ana = a[k];
            let abs = (ana - numeric).abs();
            let rel = abs / ana.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(rel);
        }
        report.entries_checked += len;
        report.params.push(check);
    }
    Ok(report)
}

/// Weighted mean of the non-`[CLS]` rows of `rows` (`L × d`) with weights `w`
/// of length `L - 1`.
pub fn weighted_token_mean(rows: &Array2<f64>, w: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(rows.ncols());
    for (k, wk) in w.iter().enumerate() {
        out.scaled_add(*wk, &rows.row(k + 1));
    }
    out
}
