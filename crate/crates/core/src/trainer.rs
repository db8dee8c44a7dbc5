//! Two-stage optimization: contrastive alignment on image-report pairs, then
//! triplet training on region-conditioned embeddings.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoders::ModelParams;
use crate::error::{Error, Result};
use crate::losses::{stage1_graph, LossConfig, PairRef};
use crate::mining::{sample_triplets_with, triplet_batch_graph, MiningConfig};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    Alignment,
    Triplet,
}

impl TryFrom<u8> for Stage {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::Alignment),
            2 => Ok(Stage::Triplet),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::Alignment => 1,
            Stage::Triplet => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_caa: f64,
    pub lr_encoder: f64,
    /// Decoupled decay on the alignment stack.
    pub weight_decay_caa: f64,
    /// L2 penalty folded into the encoder gradients.
    pub weight_decay_encoder: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub mining: MiningConfig,
    pub seed: u64,
    /// Horizontal image flips. Region names are never flipped, so this breaks
    /// left/right labels on the synthetic corpus.
    #[serde(default)]
    pub flip_augment: bool,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    /// Defaults for training from scratch at desk scale.
    pub fn desk(stage: Stage, seed: u64) -> Self {
        Self {
            stage,
            epochs: 10,
            batch_size: 32,
            lr_caa: 1e-3,
            lr_encoder: 1e-3,
            weight_decay_caa: 0.01,
            weight_decay_encoder: 1e-5,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            loss: LossConfig::default(),
            mining: MiningConfig::default(),
            seed,
            flip_augment: false,
        }
    }

    /// Fine-tuning rates meant for pretrained encoders.
    pub fn paper(stage: Stage, seed: u64) -> Self {
        Self {
            lr_caa: 5e-6,
            lr_encoder: 5e-6,
            ..Self::desk(stage, seed)
        }
    }

    pub fn preset(name: &str, stage: Stage, seed: u64) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(stage, seed)),
            "paper" => Ok(Self::paper(stage, seed)),
            other => Err(Error::InvalidArgument(format!("unknown preset `{other}` (desk, paper)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let fail = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.epochs < 1 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size < 1 || (self.stage == Stage::Alignment && self.batch_size < 2) {
            return fail("batch_size must be at least 2 for stage 1 and 1 for stage 2");
        }
        let lrs = [self.lr_caa, self.lr_encoder, self.weight_decay_caa, self.weight_decay_encoder];
        if lrs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return fail("learning rates and weight decays must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// Adam moments for both parameter groups; the alignment stack uses
/// decoupled weight decay and the encoders use an L2 term in the gradient.
#[derive(Debug, Clone)]
pub struct Optimizer {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &std::collections::HashMap<ParamId, Array2<f64>>,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (id, p) in store.iter_mut() {
            let (lr, wd) = match p.group {
                ParamGroup::Caa => (cfg.lr_caa, cfg.weight_decay_caa),
                ParamGroup::Encoder => (cfg.lr_encoder, cfg.weight_decay_encoder),
            };
            let mut g = match grads.get(&id) {
                Some(g) => g.clone(),
                None => Array2::zeros(p.value.dim()),
            };
            match p.group {
                ParamGroup::Caa => p.value.mapv_inplace(|x| x * (1.0 - lr * wd)),
                ParamGroup::Encoder => g.scaled_add(wd, &p.value),
            }
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(&g)
                .for_each(|x, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *x -= lr * mh / (vh.sqrt() + cfg.adam_eps);
                });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    /// `L_a` in stage 1, `L_tr` in stage 2.
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub local: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub seed: u64,
    pub config: TrainConfig,
    pub steps_per_epoch: usize,
    pub steps: Vec<StepRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// Mean loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        (0..self.config.epochs)
            .map(|e| {
                let xs: Vec<f64> = self.steps.iter().filter(|s| s.epoch == e).map(|s| s.loss).collect();
                xs.iter().sum::<f64>() / xs.len().max(1) as f64
            })
            .collect()
    }

    /// Line-delimited JSON records, one per step.
    pub fn write_log<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut *out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_log(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_log(&mut f)?;
        Ok(())
    }
}

/// Shuffled batches of indices; a trailing batch smaller than 2 joins the
/// previous one.
pub fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

fn flip(image: &Array2<f32>) -> Array2<f32> {
    let mut out = image.clone();
    out.invert_axis(Axis(1));
    out.as_standard_layout().into_owned()
}

fn check_stage(cfg: &TrainConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(Error::InvalidArgument(format!(
            "config is for stage {}, not {}",
            u8::from(cfg.stage),
            u8::from(stage)
        )));
    }
    Ok(())
}

pub fn train_stage1(cfg: &TrainConfig, corpus: &Corpus, params: ModelParams) -> Result<(ModelParams, TrainReport)> {
    train_stage1_with(cfg, corpus, params, |_| {})
}

/// Stage 1 with a callback invoked after every step.
pub fn train_stage1_with(
    cfg: &TrainConfig,
    corpus: &Corpus,
    mut params: ModelParams,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(ModelParams, TrainReport)> {
    check_stage(cfg, Stage::Alignment)?;
    if corpus.len() < 2 {
        return Err(Error::Empty("stage 1 needs at least 2 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(&params.store);
    let mut steps = Vec::new();
    let mut steps_per_epoch = 0;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(corpus.len(), cfg.batch_size, &mut rng);
        steps_per_epoch = batches.len();
        for batch in batches {
            let images: Vec<Array2<f32>> = batch
                .iter()
                .map(|&i| {
                    let img = &corpus.samples[i].image;
                    if cfg.flip_augment && rng.random_bool(0.5) {
                        flip(img)
                    } else {
                        img.clone()
                    }
                })
                .collect();
            let pairs: Vec<PairRef<'_>> = batch
                .iter()
                .zip(&images)
                .map(|(&i, image)| PairRef {
                    image,
                    tokens: &corpus.samples[i].report,
                })
                .collect();
            let (record, grads) = {
                let mut g = Graph::new();
                let n = stage1_graph(&mut g, &params, &cfg.loss, &pairs)?;
                let record = StepRecord {
                    stage: Stage::Alignment,
                    epoch,
                    step,
                    loss: g.scalar(n.total),
                    global: Some(g.scalar(n.global)),
                    local: Some(g.scalar(n.local)),
                };
                if !record.loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                (record, g.backward(n.total).into_params())
            };
            opt.step(&mut params.store, &grads, cfg);
            on_step(&record);
            steps.push(record);
            step += 1;
        }
    }
    Ok((
        params,
        TrainReport {
            stage: Stage::Alignment,
            seed: cfg.seed,
            config: cfg.clone(),
            steps_per_epoch,
            steps,
            checkpoint: None,
        },
    ))
}

pub fn train_stage2(cfg: &TrainConfig, corpus: &Corpus, params: ModelParams) -> Result<(ModelParams, TrainReport)> {
    train_stage2_with(cfg, corpus, params, |_| {})
}

/// Stage 2: `ceil(n / N)` steps per epoch, each on `N` freshly mined triplets.
pub fn train_stage2_with(
    cfg: &TrainConfig,
    corpus: &Corpus,
    mut params: ModelParams,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(ModelParams, TrainReport)> {
    check_stage(cfg, Stage::Triplet)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(&params.store);
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size).max(1);
    let mut steps = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let triplets = sample_triplets_with(corpus, cfg.batch_size, &mut rng, &cfg.mining)?;
            let (record, grads) = {
                let mut g = Graph::new();
                let n = triplet_batch_graph(&mut g, &params, &cfg.loss, &cfg.mining, corpus, &triplets)?;
                let record = StepRecord {
                    stage: Stage::Triplet,
                    epoch,
                    step,
                    loss: g.scalar(n.loss),
                    global: None,
                    local: None,
                };
                if !record.loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                (record, g.backward(n.loss).into_params())
            };
            opt.step(&mut params.store, &grads, cfg);
            on_step(&record);
            steps.push(record);
            step += 1;
        }
    }
    Ok((
        params,
        TrainReport {
            stage: Stage::Triplet,
            seed: cfg.seed,
            config: cfg.clone(),
            steps_per_epoch,
            steps,
            checkpoint: None,
        },
    ))
}

/// Runs whichever stage the config names.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, params: ModelParams) -> Result<(ModelParams, TrainReport)> {
    match cfg.stage {
        Stage::Alignment => train_stage1(cfg, corpus, params),
        Stage::Triplet => train_stage2(cfg, corpus, params),
    }
}
