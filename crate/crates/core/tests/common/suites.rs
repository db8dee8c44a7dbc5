//! Measured checks shared by the core tests and the acceptance report.

use std::time::{Duration, Instant};

use locret_core::caa::{caa_forward, caa_graph, multi_head_attention, self_attend, CaaFeatures, ResidualMode};
use locret_core::corpus::Rect;
use locret_core::encoders::{image_forward, text_forward, ModelParams};
use locret_core::grounding::{cnr, miou, CNR_EPS, DEFAULT_THRESHOLDS};
use locret_core::losses::{
    global_alignment_graph, global_alignment_loss, grad_check, local_alignment_graph, local_alignment_loss,
    stage1_graph, triplet_graph, triplet_loss, LocalItem, LossConfig, PairRef,
};
use locret_core::mining::{region_embedding_graph, TripletFeature};
use locret_core::retrieval::{average_precision, mean_ap, query, rank_at_k, EmbeddingIndex, IndexEntry, Modality, RankVariant};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracles::{self as o, to_vecs};
use super::{random_image, random_matrix, random_tokens, rng, tiny_config, tiny_params};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Limit {
    /// Passes only at exactly zero.
    Exact,
    Below(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measure {
    pub name: String,
    pub value: f64,
    pub limit: Limit,
    pub instances: usize,
}

impl Measure {
    fn new(name: &str, value: f64, limit: Limit, instances: usize) -> Self {
        Self {
            name: name.to_string(),
            value,
            limit,
            instances,
        }
    }

    pub fn pass(&self) -> bool {
        match self.limit {
            Limit::Exact => self.value == 0.0,
            Limit::Below(t) => self.value < t,
        }
    }
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let limit = match self.limit {
            Limit::Exact => "== 0".to_string(),
            Limit::Below(t) => format!("< {t:e}"),
        };
        write!(f, "{}: {:.3e} ({limit}, n={})", self.name, self.value, self.instances)
    }
}

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_BUDGET: Duration = Duration::from_secs(60);
pub const ORACLE_TOL: f64 = 1e-9;
pub const ORACLE_INSTANCES: usize = 100;

fn max_abs(a: &Array2<f64>, b: &o::Mat) -> f64 {
    a.indexed_iter().map(|((i, j), v)| (v - b[i][j]).abs()).fold(0.0, f64::max)
}

/// Finite-difference checks of each objective through an `M = 3` stack with
/// `c = c_t = d = 8`, `L ≤ 6`, `N ≤ 4`. Returns the measures and the time.
pub fn gradient_suite() -> (Vec<Measure>, Duration) {
    let start = Instant::now();
    let params = tiny_params(3);
    assert_eq!(params.config.blocks, 3);
    let cfg = LossConfig::default();
    let mut r = rng(4);
    let images: Vec<_> = (0..4).map(|_| random_image(16, &mut r)).collect();
    let tokens = vec![
        random_tokens(6, 0, &mut r),
        random_tokens(4, 2, &mut r),
        random_tokens(5, 1, &mut r),
        random_tokens(3, 3, &mut r),
    ];
    let mut out = Vec::new();
    let mut record = |name: &str, report: locret_core::Result<locret_core::losses::GradCheckReport>| {
        let report = report.expect("gradient check runs");
        out.push(Measure::new(name, report.max_rel_error(), Limit::Below(GRAD_TOL), report.entries_checked));
    };

    record(
        "L_G",
        grad_check(&params, GRAD_STEP, |g, p| {
            let mut fs = Vec::new();
            let mut ts = Vec::new();
            for (image, t) in images.iter().zip(&tokens) {
                fs.push(image_forward(g, p, image)?.global);
                ts.push(text_forward(g, p, t)?.projected_cls);
            }
            let f = g.concat_rows(&fs);
            let t = g.concat_rows(&ts);
            global_alignment_graph(g, &cfg, f, t)
        }),
    );
    record(
        "L_l",
        grad_check(&params, GRAD_STEP, |g, p| {
            let mut items = Vec::new();
            for (image, t) in images.iter().zip(&tokens) {
                let img = image_forward(g, p, image)?;
                let txt = text_forward(g, p, t)?;
                let caa = caa_graph(g, p, txt.tokens, &txt.key_mask, img.patches, p.config.blocks)?;
                items.push(LocalItem {
                    sa_proj: caa.sa_proj,
                    ca_proj: caa.ca_proj,
                    w_cls: caa.w_cls,
                });
            }
            local_alignment_graph(g, &cfg, &items)
        }),
    );
    let region = random_tokens(4, 0, &mut r);
    record(
        "L_tr",
        grad_check(&params, GRAD_STEP, |g, p| {
            let mut embed = |idx: [usize; 3]| -> locret_core::Result<_> {
                let rows = idx
                    .iter()
                    .map(|&i| region_embedding_graph(g, p, &images[i], &region, TripletFeature::Cross))
                    .collect::<locret_core::Result<Vec<_>>>()?;
                Ok(g.concat_rows(&rows))
            };
            let a = embed([0, 1, 2])?;
            let pos = embed([1, 2, 3])?;
            let neg = embed([3, 0, 1])?;
            triplet_graph(g, &cfg, a, pos, neg)
        }),
    );
    record(
        "stage-1 L_a",
        grad_check(&params, GRAD_STEP, |g, p| {
            let batch: Vec<_> = images
                .iter()
                .zip(&tokens)
                .map(|(image, t)| PairRef { image, tokens: t })
                .collect();
            Ok(stage1_graph(g, p, &cfg, &batch)?.total)
        }),
    );
    (out, start.elapsed())
}

fn random_rankings(r: &mut ChaCha8Rng, force_relevant: bool) -> Vec<Vec<bool>> {
    let queries = r.random_range(1..6);
    (0..queries)
        .map(|_| {
            let len = r.random_range(1..30);
            let p = r.random_range(0.05..0.7);
            let mut v: Vec<bool> = (0..len).map(|_| r.random_bool(p)).collect();
            if force_relevant && !v.contains(&true) {
                let at = r.random_range(0..len);
                v[at] = true;
            }
            v
        })
        .collect()
}

fn random_box(r: &mut ChaCha8Rng, h: usize, w: usize) -> Rect {
    loop {
        let x0 = r.random_range(0..w);
        let y0 = r.random_range(0..h);
        let x1 = r.random_range(x0 + 1..=w);
        let y1 = r.random_range(y0 + 1..=h);
        let rect = Rect::new(x0, y0, x1, y1);
        if rect.area() < h * w {
            return rect;
        }
    }
}

fn rect_arr(b: &Rect) -> [usize; 4] {
    [b.x0, b.y0, b.x1, b.y1]
}

fn random_features(r: &mut ChaCha8Rng, l: usize, d: usize) -> CaaFeatures {
    let mut w = Array1::from_shape_simple_fn(l - 1, || r.random_range(0.01..1.0));
    w /= w.sum();
    let z = Array2::zeros((l, d));
    CaaFeatures {
        input: z.clone(),
        sa: z.clone(),
        sa_prime: z.clone(),
        ca: z.clone(),
        ca_prime: z,
        sa_proj: random_matrix(l, d, r),
        ca_proj: random_matrix(l, d, r),
        w_cls_raw: Array1::zeros(l),
        w_cls: w,
    }
}

/// Library formulas against direct definitions on random small instances.
pub fn oracle_suite() -> Vec<Measure> {
    let n = ORACLE_INSTANCES;
    let tol = Limit::Below(ORACLE_TOL);
    let mut r = rng(11);
    let mut out = Vec::new();

    let mut dev: f64 = 0.0;
    for i in 0..n {
        let params = tiny_params(100 + i as u64);
        let ids = if i % 2 == 0 {
            &params.caa.blocks[0].cross_attn
        } else {
            &params.caa.blocks[1].self_attn
        };
        let x = random_matrix(r.random_range(1..7), 8, &mut r);
        let y = random_matrix(r.random_range(1..17), 8, &mut r);
        let (got, attn) = multi_head_attention(&params.store, ids, &x, &y).unwrap();
        let w = |id| to_vecs(params.store.value(id));
        let (want, weights) = o::mha(&to_vecs(&x), &to_vecs(&y), &w(ids.query), &w(ids.key), &w(ids.value), &w(ids.output), ids.heads);
        dev = dev.max(max_abs(&got, &want));
        for (h, wh) in weights.iter().enumerate() {
            dev = dev.max(max_abs(&attn.index_axis(Axis(0), h).to_owned(), wh));
        }
    }
    out.push(Measure::new("multi_head_attention", dev, tol, n));

    let mut dev: f64 = 0.0;
    for _ in 0..n {
        let (rows, d) = (r.random_range(2..6), r.random_range(2..9));
        let tau = r.random_range(0.05..1.0);
        let f = random_matrix(rows, d, &mut r);
        let t = random_matrix(rows, d, &mut r);
        let cfg = LossConfig {
            tau_g: tau,
            ..LossConfig::default()
        };
        let got = global_alignment_loss(&cfg, &f, &t).unwrap();
        dev = dev.max((got - o::global_infonce(&to_vecs(&f), &to_vecs(&t), tau)).abs());
    }
    out.push(Measure::new("global InfoNCE", dev, tol, n));

    let mut dev: f64 = 0.0;
    for _ in 0..n {
        let (rows, l) = (r.random_range(2..5), r.random_range(2..7));
        let tau = r.random_range(0.05..1.0);
        let batch: Vec<CaaFeatures> = (0..rows).map(|_| random_features(&mut r, l, 8)).collect();
        let cfg = LossConfig {
            tau_l: tau,
            ..LossConfig::default()
        };
        let got = local_alignment_loss(&cfg, &batch).unwrap();
        let items: Vec<_> = batch
            .iter()
            .map(|f| (to_vecs(&f.sa_proj), to_vecs(&f.ca_proj), f.w_cls.to_vec()))
            .collect();
        dev = dev.max((got - o::local_infonce(&items, tau)).abs());
    }
    out.push(Measure::new("local InfoNCE", dev, tol, n));

    let mut dev: f64 = 0.0;
    for _ in 0..n {
        let (rows, d) = (r.random_range(1..6), r.random_range(1..9));
        let alpha = r.random_range(0.0..1.0);
        let (a, p, q) = (random_matrix(rows, d, &mut r), random_matrix(rows, d, &mut r), random_matrix(rows, d, &mut r));
        let cfg = LossConfig {
            alpha,
            ..LossConfig::default()
        };
        let got = triplet_loss(&cfg, &a, &p, &q).unwrap();
        dev = dev.max((got - o::triplet(&to_vecs(&a), &to_vecs(&p), &to_vecs(&q), alpha)).abs());
    }
    out.push(Measure::new("triplet loss", dev, tol, n));

    let mut dev: f64 = 0.0;
    for _ in 0..n {
        let rankings = random_rankings(&mut r, true);
        for rk in &rankings {
            dev = dev.max((average_precision(rk).unwrap() - o::average_precision(rk).unwrap()).abs());
        }
        let want = 100.0 * rankings.iter().map(|rk| o::average_precision(rk).unwrap()).sum::<f64>() / rankings.len() as f64;
        dev = dev.max((mean_ap(&rankings).unwrap().map - want).abs());
    }
    out.push(Measure::new("AP / mAP", dev, tol, n));

    let (mut dp, mut dh): (f64, f64) = (0.0, 0.0);
    for _ in 0..n {
        let rankings = random_rankings(&mut r, false);
        let k = r.random_range(1..13);
        dp = dp.max((rank_at_k(&rankings, k, RankVariant::Precision).unwrap() - o::precision_at(&rankings, k)).abs());
        dh = dh.max((rank_at_k(&rankings, k, RankVariant::HitRate).unwrap() - o::hit_rate_at(&rankings, k)).abs());
    }
    out.push(Measure::new("Rank@K precision", dp, tol, n));
    out.push(Measure::new("Rank@K hit-rate", dh, tol, n));

    let mut dev: f64 = 0.0;
    for _ in 0..n {
        let (h, w) = (r.random_range(2..20), r.random_range(2..20));
        let map = random_matrix(h, w, &mut r);
        let b = random_box(&mut r, h, w);
        dev = dev.max((cnr(&map, &b).unwrap() - o::cnr(&to_vecs(&map), rect_arr(&b), CNR_EPS)).abs());
    }
    out.push(Measure::new("CNR", dev, tol, n));

    let mut dev: f64 = 0.0;
    for i in 0..n {
        let (h, w) = (r.random_range(2..20), r.random_range(2..20));
        let map = if i % 10 == 0 {
            Array2::from_elem((h, w), 0.3)
        } else {
            random_matrix(h, w, &mut r)
        };
        let b = random_box(&mut r, h, w);
        let mut thresholds = DEFAULT_THRESHOLDS.to_vec();
        thresholds.push(r.random_range(0.0..1.0));
        let got = miou(&map, &b, &thresholds).unwrap();
        let vecs = to_vecs(&map);
        for (t, v) in thresholds.iter().zip(&got.per_threshold) {
            dev = dev.max((v - o::iou(&vecs, rect_arr(&b), *t)).abs());
        }
    }
    out.push(Measure::new("IoU", dev, tol, n));
    out
}

fn permute_rows(a: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    a.select(Axis(0), perm)
}

/// Structural properties that must hold for any parameters.
pub fn invariant_suite() -> Vec<Measure> {
    let n = ORACLE_INSTANCES;
    let mut r = rng(23);
    let mut out = Vec::new();

    let mut dev: f64 = 0.0;
    for i in 0..n {
        let params = tiny_params(200 + i as u64);
        let x = random_matrix(r.random_range(1..7), 8, &mut r);
        let y = random_matrix(r.random_range(1..17), 8, &mut r) * 10.0;
        let (_, attn) = multi_head_attention(&params.store, &params.caa.blocks[0].cross_attn, &x, &y).unwrap();
        for row in attn.lanes(Axis(2)) {
            dev = dev.max((row.sum() - 1.0).abs());
        }
        let t = random_matrix(r.random_range(2..7), 8, &mut r);
        let (_, w) = self_attend(&params, 0, &t).unwrap();
        dev = dev.max((w.sum() - 1.0).abs());
    }
    out.push(Measure::new("softmax rows sum to one", dev, Limit::Below(1e-6), n));

    let mut mismatches = 0usize;
    for i in 0..n {
        let mode = if i % 2 == 0 { ResidualMode::Paper } else { ResidualMode::Primed };
        let params = ModelParams::init(tiny_config(mode), 300 + i as u64).unwrap();
        let l = r.random_range(2..7);
        let t = random_matrix(l, 8, &mut r);
        let f = random_matrix(16, 8, &mut r);
        let feats = caa_forward(&params, &t, &vec![true; l], &f, params.config.blocks).unwrap();
        let second = match mode {
            ResidualMode::Paper => &feats.sa,
            ResidualMode::Primed => &feats.sa_prime,
        };
        mismatches += (feats.sa_prime != &feats.sa + &feats.input) as usize;
        mismatches += (feats.ca_prime != &feats.ca + second) as usize;
    }
    out.push(Measure::new("residual identities (mismatched instances)", mismatches as f64, Limit::Exact, n));

    let (mut tok, mut pat): (f64, f64) = (0.0, 0.0);
    for i in 0..n {
        let params = tiny_params(400 + i as u64);
        let l = r.random_range(3..7);
        let t = random_matrix(l, 8, &mut r);
        let f = random_matrix(16, 8, &mut r);
        let mask = vec![true; l];
        let m = params.config.blocks;
        let base = caa_forward(&params, &t, &mask, &f, m).unwrap();
        let mut perm: Vec<usize> = (1..l).collect();
        perm.shuffle(&mut r);
        perm.insert(0, 0);
        let moved = caa_forward(&params, &permute_rows(&t, &perm), &mask, &f, m).unwrap();
        for (a, b) in [
            (&base.sa_prime, &moved.sa_prime),
            (&base.ca_prime, &moved.ca_prime),
            (&base.sa_proj, &moved.sa_proj),
            (&base.ca_proj, &moved.ca_proj),
        ] {
            tok = tok.max((&permute_rows(a, &perm) - b).mapv(f64::abs).fold(0.0, |x, y| x.max(*y)));
        }
        let wp: Vec<usize> = perm[1..].iter().map(|k| k - 1).collect();
        let w = base.w_cls.select(Axis(0), &wp);
        tok = tok.max((&w - &moved.w_cls).mapv(f64::abs).fold(0.0, |x, y| x.max(*y)));
        let mut pp: Vec<usize> = (0..16).collect();
        pp.shuffle(&mut r);
        let shuffled = caa_forward(&params, &t, &mask, &permute_rows(&f, &pp), m).unwrap();
        pat = pat.max((&base.ca_proj - &shuffled.ca_proj).mapv(f64::abs).fold(0.0, |x, y| x.max(*y)));
    }
    out.push(Measure::new("CAA token-permutation equivariance", tok, Limit::Below(1e-12), n));
    out.push(Measure::new("CAA patch-permutation invariance", pat, Limit::Below(1e-12), n));

    let mut dev: f64 = 0.0;
    let cfg = LossConfig::default();
    for _ in 0..n {
        let rows = r.random_range(2..6);
        let f = random_matrix(rows, 8, &mut r);
        let t = random_matrix(rows, 8, &mut r);
        let s = Array2::from_shape_simple_fn((rows, 1), || r.random_range(0.1..10.0));
        let base = global_alignment_loss(&cfg, &f, &t).unwrap();
        dev = dev.max((global_alignment_loss(&cfg, &(&f * &s), &t).unwrap() - base).abs());
        let l = r.random_range(2..7);
        let batch: Vec<CaaFeatures> = (0..rows).map(|_| random_features(&mut r, l, 8)).collect();
        let scaled: Vec<CaaFeatures> = batch
            .iter()
            .map(|b| {
                let mut b = b.clone();
                let s = Array2::from_shape_simple_fn((l, 1), || r.random_range(0.1..10.0));
                b.sa_proj = &b.sa_proj * &s;
                b.ca_proj = &b.ca_proj * 3.7;
                b
            })
            .collect();
        dev = dev.max((local_alignment_loss(&cfg, &scaled).unwrap() - local_alignment_loss(&cfg, &batch).unwrap()).abs());
    }
    out.push(Measure::new("cosine-loss scale invariance", dev, Limit::Below(1e-9), n));

    let mut dev: f64 = 0.0;
    for _ in 0..n {
        let (h, w) = (r.random_range(2..20), r.random_range(2..20));
        let map = random_matrix(h, w, &mut r);
        let b = random_box(&mut r, h, w);
        let (a, c) = (r.random_range(0.5..5.0), r.random_range(-3.0..3.0));
        dev = dev.max((cnr(&map.mapv(|v| a * v + c), &b).unwrap() - cnr(&map, &b).unwrap()).abs());
    }
    out.push(Measure::new("CNR affine invariance", dev, Limit::Below(1e-6), n));

    let mut mismatches = 0usize;
    for i in 0..n {
        let size = r.random_range(1..51);
        let d = r.random_range(2..9);
        // Coarse coordinates make exact score ties common.
        let coarse = i % 2 == 0;
        let rows: Vec<Array1<f64>> = (0..size)
            .map(|_| {
                Array1::from_shape_simple_fn(d, || {
                    if coarse {
                        r.random_range(-1i32..=1) as f64
                    } else {
                        r.random_range(-1.0..1.0)
                    }
                })
            })
            .map(|v: Array1<f64>| if v.iter().all(|x| *x == 0.0) { Array1::ones(d) } else { v })
            .collect();
        let mut order: Vec<usize> = (0..size).collect();
        order.shuffle(&mut r);
        let entries: Vec<IndexEntry> = order
            .iter()
            .map(|k| IndexEntry {
                id: format!("e{k:03}"),
                sample_id: format!("e{k:03}"),
                condition: None,
                findings: vec![],
            })
            .collect();
        let index = EmbeddingIndex::from_rows(Modality::GlobalImage, entries, rows).unwrap();
        for _ in 0..10 {
            let q = Array1::from_shape_simple_fn(d, || r.random_range(-1.0..1.0)) * r.random_range(0.1..10.0);
            let k = r.random_range(1..size + 3);
            let got: Vec<String> = query(&index, &q, k).unwrap().items.into_iter().map(|it| it.id).collect();
            let qn = &q / q.dot(&q).sqrt();
            let scores: Vec<f64> = index.vectors.outer_iter().map(|v| v.dot(&qn)).collect();
            let ids: Vec<String> = index.entries.iter().map(|e| e.id.clone()).collect();
            let want: Vec<String> = o::full_sort(&ids, &scores).into_iter().take(k).collect();
            mismatches += (got != want) as usize;
        }
    }
    out.push(Measure::new("query() vs full sort (mismatched queries)", mismatches as f64, Limit::Exact, n * 10));
    out
}
