//! Phrase grounding: patch-to-text similarity maps, bilinear upsampling, and
//! IoU / contrast-to-noise scoring against ground-truth boxes.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::caa::caa_graph;
use crate::corpus::{Corpus, Finding, Rect};
use crate::encoders::{image_forward, text_forward, ModelParams};
use crate::error::{Error, Result};
use crate::tape::Graph;

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const CNR_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    /// Patch scores indexed `[gy, gx]`.
    pub grid: Array2<f64>,
    /// Image-sized map indexed `[y, x]`.
    pub upsampled: Array2<f64>,
    pub sample_id: String,
    pub phrase: String,
}

impl SimilarityMap {
    pub fn normalized(&self) -> Array2<f64> {
        min_max_normalize(&self.upsampled)
    }
}

fn cosine_rows(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let norms = |x: &Array2<f64>| -> Array1<f64> { x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect() };
    let (na, nb) = (norms(a), norms(b));
    let mut s = a.dot(&b.t());
    for ((i, j), v) in s.indexed_iter_mut() {
        let d = na[i] * nb[j];
        *v = if d > 0.0 { *v / d } else { 0.0 };
    }
    s
}

/// `score[p] = Σ_k w[k] · cos(patch[p], token[k + 1])` as a `side × side` grid.
pub fn patch_scores(patches: &Array2<f64>, tokens: &Array2<f64>, w: &Array1<f64>, side: usize) -> Result<Array2<f64>> {
    if patches.nrows() != side * side || tokens.nrows() != w.len() + 1 || patches.ncols() != tokens.ncols() {
        return Err(Error::Shape(format!(
            "patches {:?}, tokens {:?}, weights {} on a {side}x{side} grid",
            patches.dim(),
            tokens.dim(),
            w.len()
        )));
    }
    let cos = cosine_rows(patches, tokens);
    Ok(Array2::from_shape_fn((side, side), |(gy, gx)| {
        let p = gy * side + gx;
        w.iter().enumerate().map(|(k, wk)| wk * cos[[p, k + 1]]).sum()
    }))
}

/// Bilinear resize with corner-aligned sampling: output pixel `(y, x)` reads
/// the grid at `(y·(gh-1)/(H-1), x·(gw-1)/(W-1))`.
pub fn upsample_bilinear(grid: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (gh, gw) = grid.dim();
    let coord = |i: usize, n: usize, g: usize| -> (usize, usize, f64) {
        if g == 1 || n == 1 {
            return (0, 0, 0.0);
        }
        let u = i as f64 * (g - 1) as f64 / (n - 1) as f64;
        let lo = (u.floor() as usize).min(g - 2);
        (lo, lo + 1, u - lo as f64)
    };
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = coord(y, height, gh);
        let (x0, x1, fx) = coord(x, width, gw);
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
        let bottom = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Scales into `[0, 1]`; a constant map becomes all ones.
pub fn min_max_normalize(map: &Array2<f64>) -> Array2<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        map.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array2::ones(map.dim())
    }
}

pub fn similarity_map(params: &ModelParams, image: &Array2<f32>, phrase_tokens: &[u32]) -> Result<SimilarityMap> {
    let mut g = Graph::new();
    let img = image_forward(&mut g, params, image)?;
    let txt = text_forward(&mut g, params, phrase_tokens)?;
    let caa = caa_graph(&mut g, params, txt.tokens, &txt.key_mask, img.patches, params.config.blocks)?;
    let w = g.value(caa.w_cls).row(0).to_owned();
    let grid = patch_scores(g.value(img.projected), g.value(caa.ca_proj), &w, params.config.grid_side())?;
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity map".into()));
    }
    let (h, wd) = image.dim();
    Ok(SimilarityMap {
        upsampled: upsample_bilinear(&grid, h, wd),
        grid,
        sample_id: String::new(),
        phrase: String::new(),
    })
}

fn check_box(rect: &Rect, (h, w): (usize, usize)) -> Result<()> {
    if rect.area() == 0 || rect.x1 > w || rect.y1 > h {
        return Err(Error::InvalidArgument(format!(
            "box {:?} is empty or outside a {w}x{h} map",
            <[usize; 4]>::from(*rect)
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouResult {
    pub per_threshold: Vec<f64>,
    pub mean: f64,
}

/// IoU of `map ≥ t` (after min-max normalization) with the box, per threshold.
pub fn miou(map: &Array2<f64>, rect: &Rect, thresholds: &[f64]) -> Result<IouResult> {
    check_box(rect, map.dim())?;
    if thresholds.is_empty() {
        return Err(Error::Empty("threshold list".into()));
    }
    let norm = min_max_normalize(map);
    let per_threshold: Vec<f64> = thresholds
        .iter()
        .map(|&t| {
            let (mut inter, mut union) = (0usize, 0usize);
            for ((y, x), v) in norm.indexed_iter() {
                let m = *v >= t;
                let b = rect.contains(x, y);
                inter += (m && b) as usize;
                union += (m || b) as usize;
            }
            inter as f64 / union as f64
        })
        .collect();
    let mean = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    Ok(IouResult { per_threshold, mean })
}

/// `|μ_in − μ_out| / sqrt(σ²_in + σ²_out + ε)` with population variances.
pub fn cnr(map: &Array2<f64>, rect: &Rect) -> Result<f64> {
    check_box(rect, map.dim())?;
    if rect.area() >= map.len() {
        return Err(Error::InvalidArgument("box covers the whole map".into()));
    }
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for ((y, x), v) in map.indexed_iter() {
        if rect.contains(x, y) {
            inside.push(*v);
        } else {
            outside.push(*v);
        }
    }
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let mu = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        (mu, var)
    };
    let (mi, vi) = stats(&inside);
    let (mo, vo) = stats(&outside);
    Ok((mi - mo).abs() / (vi + vo + CNR_EPS).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub id: String,
    pub phrase: String,
    pub finding: Finding,
    pub thresholds: Vec<f64>,
    pub iou: Vec<f64>,
    pub miou: f64,
    pub cnr: f64,
    /// `box_area / image_area`, the IoU of a constant map.
    pub baseline_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub records: Vec<GroundingRecord>,
    pub miou: f64,
    pub miou_std: f64,
    pub cnr: f64,
    pub cnr_std: f64,
    pub baseline_miou: f64,
    pub seeds: Vec<u64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// One pass over every (sample, boxed finding) of `corpus`.
pub fn grounding_records(params: &ModelParams, corpus: &Corpus, thresholds: &[f64]) -> Result<Vec<GroundingRecord>> {
    grounding_records_with(params, corpus, thresholds, |_, _| Ok(()))
}

/// As [`grounding_records`], handing every map to `visit` (e.g. for export).
pub fn grounding_records_with(
    params: &ModelParams,
    corpus: &Corpus,
    thresholds: &[f64],
    mut visit: impl FnMut(&SimilarityMap, &GroundingRecord) -> Result<()>,
) -> Result<Vec<GroundingRecord>> {
    let mut out = Vec::new();
    for s in &corpus.samples {
        let Some(boxes) = &s.boxes else {
            return Err(Error::MissingField(format!("boxes (sample {})", s.id)));
        };
        for b in boxes {
            let phrase_tokens = corpus.vocab.finding_phrase(&b.finding)?;
            let mut map = similarity_map(params, &s.image, &phrase_tokens)?;
            map.sample_id = s.id.clone();
            map.phrase = b.finding.describe();
            let iou = miou(&map.upsampled, &b.rect, thresholds)?;
            let rec = GroundingRecord {
                id: s.id.clone(),
                phrase: map.phrase.clone(),
                finding: b.finding.clone(),
                thresholds: thresholds.to_vec(),
                iou: iou.per_threshold,
                miou: iou.mean,
                cnr: cnr(&map.upsampled, &b.rect)?,
                baseline_iou: b.rect.area() as f64 / map.upsampled.len() as f64,
            };
            visit(&map, &rec)?;
            out.push(rec);
        }
    }
    Ok(out)
}

/// Aggregates over the seed list. The pipeline has no stochastic component,
/// so every run yields the same records and the reported deviation is zero.
pub fn evaluate_grounding(
    params: &ModelParams,
    corpus: &Corpus,
    thresholds: &[f64],
    seeds: &[u64],
) -> Result<GroundingResult> {
    let records = grounding_records(params, corpus, thresholds)?;
    aggregate_grounding(records, seeds)
}

pub fn aggregate_grounding(records: Vec<GroundingRecord>, seeds: &[u64]) -> Result<GroundingResult> {
    if records.is_empty() {
        return Err(Error::Empty("no boxed findings to ground".into()));
    }
    let n = records.len() as f64;
    let run_miou = records.iter().map(|r| r.miou).sum::<f64>() / n;
    let run_cnr = records.iter().map(|r| r.cnr).sum::<f64>() / n;
    let runs = seeds.len().max(1);
    let (miou, miou_std) = mean_std(&vec![run_miou; runs]);
    let (cnr, cnr_std) = mean_std(&vec![run_cnr; runs]);
    Ok(GroundingResult {
        baseline_miou: records.iter().map(|r| r.baseline_iou).sum::<f64>() / n,
        records,
        miou,
        miou_std,
        cnr,
        cnr_std,
        seeds: seeds.to_vec(),
    })
}

/// Binary 8-bit PGM of the min-max normalized map.
pub fn write_pgm<W: Write>(map: &Array2<f64>, out: &mut W) -> Result<()> {
    let (h, w) = map.dim();
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = min_max_normalize(map).iter().map(|v| (v * 255.0).round() as u8).collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Whitespace-separated rows of raw map values.
pub fn write_raw<W: Write>(map: &Array2<f64>, out: &mut W) -> Result<()> {
    for row in map.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn export_heatmap(map: &Array2<f64>, pgm: &Path, raw: &Path) -> Result<()> {
    write_pgm(map, &mut std::io::BufWriter::new(std::fs::File::create(pgm)?))?;
    write_raw(map, &mut std::io::BufWriter::new(std::fs::File::create(raw)?))?;
    Ok(())
}
