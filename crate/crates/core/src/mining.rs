//! Label-based triplet construction conditioned on anatomical regions, and
//! region-conditioned multimodal embeddings.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caa::caa_graph;
use crate::corpus::{Corpus, CorpusSample, Finding};
use crate::encoders::{image_forward, text_forward, ModelParams};
use crate::error::{Error, Result};
use crate::losses::{triplet_graph, LossConfig};
use crate::tape::{Graph, NodeId};

/// Role another sample can play for an anchor condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairClass {
    Positive,
    Negative,
    Excluded,
}

/// Which token sequence is pooled into the triplet embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletFeature {
    /// Cross-attentive tokens `t̂^CA'`.
    #[default]
    Cross,
    /// Self-attentive tokens `t̂^SA'`.
    #[serde(rename = "self")]
    SelfAttentive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    /// Treat same-disease-different-region pairs as negatives instead of
    /// excluding them.
    pub hard_region_negatives: bool,
    pub triplet_feature: TripletFeature,
}

/// Classifies `other` against the anchor's conditioning finding.
pub fn pair_validity(anchor: &Finding, other: &[Finding]) -> PairClass {
    pair_validity_with(anchor, other, false)
}

pub fn pair_validity_with(anchor: &Finding, other: &[Finding], hard_region_negatives: bool) -> PairClass {
    let other_normal = other.iter().all(Finding::is_normal);
    match anchor {
        Finding::Normal => {
            if other_normal {
                PairClass::Positive
            } else {
                PairClass::Negative
            }
        }
        Finding::Lesion { disease, .. } => {
            if other.contains(anchor) {
                PairClass::Positive
            } else if other.iter().any(|f| !f.is_normal() && f.disease() == disease) && !hard_region_negatives {
                PairClass::Excluded
            } else {
                PairClass::Negative
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor_id: String,
    pub positive_id: String,
    pub negative_id: String,
    /// Anchor finding the triplet is built on.
    pub condition: Finding,
    /// Region whose description conditions all three embeddings. Equal to
    /// the condition's region for lesions, drawn uniformly for normal anchors.
    pub region: String,
}

/// Per-condition candidate lists, indexed by sample position.
struct Pools {
    positives: BTreeMap<Finding, Vec<usize>>,
    negatives: BTreeMap<Finding, Vec<usize>>,
}

fn sample_conditions(s: &CorpusSample) -> Vec<Finding> {
    if s.is_normal() {
        vec![Finding::Normal]
    } else {
        let mut f: Vec<Finding> = s.lesions().cloned().collect();
        f.sort();
        f.dedup();
        f
    }
}

fn build_pools(corpus: &Corpus, cfg: &MiningConfig) -> Pools {
    let mut conditions: BTreeMap<Finding, ()> = BTreeMap::new();
    for s in &corpus.samples {
        for c in sample_conditions(s) {
            conditions.insert(c, ());
        }
    }
    let mut positives = BTreeMap::new();
    let mut negatives = BTreeMap::new();
    for c in conditions.into_keys() {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, s) in corpus.samples.iter().enumerate() {
            match pair_validity_with(&c, &s.findings, cfg.hard_region_negatives) {
                PairClass::Positive => pos.push(i),
                PairClass::Negative => neg.push(i),
                PairClass::Excluded => {}
            }
        }
        positives.insert(c.clone(), pos);
        negatives.insert(c, neg);
    }
    Pools { positives, negatives }
}

impl Pools {
    /// Conditions of sample `i` that admit a positive other than `i` and a negative.
    fn viable(&self, i: usize, s: &CorpusSample) -> Vec<Finding> {
        sample_conditions(s)
            .into_iter()
            .filter(|c| {
                self.positives[c].iter().any(|&p| p != i) && !self.negatives[c].is_empty()
            })
            .collect()
    }
}

/// Draws `batch_size` valid triplets with replacement; deterministic in `seed`.
pub fn sample_triplets(corpus: &Corpus, batch_size: usize, seed: u64, cfg: &MiningConfig) -> Result<Vec<Triplet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_triplets_with(corpus, batch_size, &mut rng, cfg)
}

pub fn sample_triplets_with<R: Rng>(
    corpus: &Corpus,
    batch_size: usize,
    rng: &mut R,
    cfg: &MiningConfig,
) -> Result<Vec<Triplet>> {
    if corpus.layout.regions.is_empty() {
        return Err(Error::InvalidLayout("no regions to condition on".into()));
    }
    let pools = build_pools(corpus, cfg);
    let anchors: Vec<(usize, Vec<Finding>)> = corpus
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (i, pools.viable(i, s)))
        .filter(|(_, v)| !v.is_empty())
        .collect();
    if anchors.is_empty() {
        let counts: Vec<String> = pools
            .positives
            .iter()
            .map(|(c, p)| format!("{c}: {} positive, {} negative", p.len(), pools.negatives[c].len()))
            .collect();
        return Err(Error::NoTriplets(if counts.is_empty() {
            "corpus is empty".into()
        } else {
            counts.join("; ")
        }));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (a, conds) = anchors.choose(rng).expect("non-empty");
        let cond = conds.choose(rng).expect("non-empty");
        let pos: Vec<usize> = pools.positives[cond].iter().copied().filter(|p| p != a).collect();
        let p = *pos.choose(rng).expect("viable condition");
        let n = *pools.negatives[cond].choose(rng).expect("viable condition");
        let region = match cond.region() {
            Some(r) => r.to_string(),
            None => corpus.layout.regions.choose(rng).expect("non-empty").name.clone(),
        };
        out.push(Triplet {
            anchor_id: corpus.samples[*a].id.clone(),
            positive_id: corpus.samples[p].id.clone(),
            negative_id: corpus.samples[n].id.clone(),
            condition: cond.clone(),
            region,
        });
    }
    Ok(out)
}

/// Region-conditioned embedding of an image as a `1 × d` node.
pub fn region_embedding_graph<'p>(
    g: &mut Graph<'p>,
    params: &'p ModelParams,
    image: &Array2<f32>,
    region_tokens: &[u32],
    feature: TripletFeature,
) -> Result<NodeId> {
    let img = image_forward(g, params, image)?;
    let txt = text_forward(g, params, region_tokens)?;
    let caa = caa_graph(g, params, txt.tokens, &txt.key_mask, img.patches, params.config.blocks)?;
    let rows = match feature {
        TripletFeature::Cross => caa.ca_proj,
        TripletFeature::SelfAttentive => caa.sa_proj,
    };
    let (l, _) = g.shape(rows);
    let tail: Vec<usize> = (1..l).collect();
    let body = g.rows(rows, &tail);
    let pooled = g.matmul(caa.w_cls, body);
    let norm = g.value(pooled).iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("region embedding".into()));
    }
    if norm == 0.0 {
        return Err(Error::ZeroNorm("region embedding".into()));
    }
    Ok(g.normalize_rows(pooled))
}

/// Unit-norm `t̂^CA'` pooled by `w_CLS` for an (image, region description).
pub fn embed_region_query(params: &ModelParams, image: &Array2<f32>, region_tokens: &[u32]) -> Result<Array1<f64>> {
    embed_region_query_with(params, image, region_tokens, TripletFeature::Cross)
}

pub fn embed_region_query_with(
    params: &ModelParams,
    image: &Array2<f32>,
    region_tokens: &[u32],
    feature: TripletFeature,
) -> Result<Array1<f64>> {
    let mut g = Graph::new();
    let v = region_embedding_graph(&mut g, params, image, region_tokens, feature)?;
    Ok(g.value(v).index_axis(Axis(0), 0).to_owned())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionQueryEmbedding {
    pub sample_id: String,
    pub condition: Finding,
    pub vector: Array1<f64>,
}

impl RegionQueryEmbedding {
    /// Embeds `sample` conditioned on `region`; `condition` is the label the
    /// entry carries.
    pub fn compute(
        params: &ModelParams,
        corpus: &Corpus,
        sample: &CorpusSample,
        region: &str,
        condition: Finding,
    ) -> Result<Self> {
        let tokens = corpus.vocab.region_query(region)?;
        Ok(Self {
            sample_id: sample.id.clone(),
            condition,
            vector: embed_region_query(params, &sample.image, &tokens)?,
        })
    }
}

fn lookup<'c>(corpus: &'c Corpus, index: &BTreeMap<&str, usize>, id: &str) -> Result<&'c CorpusSample> {
    index
        .get(id)
        .map(|&i| &corpus.samples[i])
        .ok_or_else(|| Error::InvalidArgument(format!("triplet references unknown sample `{id}`")))
}

#[derive(Debug, Clone, Copy)]
pub struct TripletNodes {
    pub loss: NodeId,
    /// `N × d` each.
    pub anchors: NodeId,
    pub positives: NodeId,
    pub negatives: NodeId,
}

/// Triplet loss over region-conditioned embeddings of a triplet batch.
pub fn triplet_batch_graph<'p>(
    g: &mut Graph<'p>,
    params: &'p ModelParams,
    loss: &LossConfig,
    mining: &MiningConfig,
    corpus: &Corpus,
    triplets: &[Triplet],
) -> Result<TripletNodes> {
    if triplets.is_empty() {
        return Err(Error::Empty("triplet batch".into()));
    }
    let index: BTreeMap<&str, usize> = corpus.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    for t in triplets {
        let tokens = corpus.vocab.region_query(&t.region)?;
        for (slot, id) in [&t.anchor_id, &t.positive_id, &t.negative_id].into_iter().enumerate() {
            let s = lookup(corpus, &index, id)?;
            parts[slot].push(region_embedding_graph(g, params, &s.image, &tokens, mining.triplet_feature)?);
        }
    }
    let anchors = g.concat_rows(&parts[0]);
    let positives = g.concat_rows(&parts[1]);
    let negatives = g.concat_rows(&parts[2]);
    let loss = triplet_graph(g, loss, anchors, positives, negatives)?;
    Ok(TripletNodes {
        loss,
        anchors,
        positives,
        negatives,
    })
}

/// Mean anchor-positive and anchor-negative distances over a triplet set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletDistances {
    pub positive: f64,
    pub negative: f64,
    pub loss: f64,
}

pub fn triplet_distances(
    params: &ModelParams,
    loss: &LossConfig,
    mining: &MiningConfig,
    corpus: &Corpus,
    triplets: &[Triplet],
) -> Result<TripletDistances> {
    let mut g = Graph::new();
    let n = triplet_batch_graph(&mut g, params, loss, mining, corpus, triplets)?;
    let mean_dist = |x: NodeId, y: NodeId| {
        let d = g.value(x) - g.value(y);
        d.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / triplets.len() as f64
    };
    Ok(TripletDistances {
        positive: mean_dist(n.anchors, n.positives),
        negative: mean_dist(n.anchors, n.negatives),
        loss: g.scalar(n.loss),
    })
}
