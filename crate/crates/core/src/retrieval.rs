//! Exact cosine retrieval over embedding indexes, ranking metrics, and the
//! location-conditioned and cross-modal evaluation protocols.

use std::collections::BTreeSet;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusSample, Finding};
use crate::encoders::{encode_image, encode_text, ModelParams};
use crate::error::{Error, Result};
use crate::mining::embed_region_query;

pub const INDEX_MAGIC: &[u8; 8] = b"LOCRETIX";
pub const INDEX_VERSION: u32 = 1;
pub const RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    /// `t̂^CA'` pooled for a (sample, finding region) pair.
    RegionQuery,
    /// `f̂^G` per sample.
    GlobalImage,
    /// `t̂^C` per report.
    Report,
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "region-query" => Ok(Modality::RegionQuery),
            "global-image" => Ok(Modality::GlobalImage),
            "report" => Ok(Modality::Report),
            other => Err(Error::InvalidArgument(format!(
                "unknown modality `{other}` (region-query, global-image, report)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// `sample` for per-sample modalities, `sample/region` for region queries.
    pub id: String,
    pub sample_id: String,
    /// The finding a region-query entry was embedded for; `None` otherwise.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub condition: Option<Finding>,
    pub findings: Vec<Finding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub modality: Modality,
    pub normalized: bool,
    pub entries: Vec<IndexEntry>,
    /// `count × d`
    pub vectors: Array2<f64>,
}

fn unit(v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if !n.is_finite() {
        return Err(Error::NonFinite("embedding".into()));
    }
    if n == 0.0 {
        return Err(Error::ZeroNorm("embedding".into()));
    }
    Ok(v.mapv(|x| x / n))
}

impl EmbeddingIndex {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stacks L2-normalized rows; ids must be unique.
    pub fn from_rows(modality: Modality, entries: Vec<IndexEntry>, rows: Vec<Array1<f64>>) -> Result<Self> {
        if entries.len() != rows.len() {
            return Err(Error::Shape(format!("{} entries for {} vectors", entries.len(), rows.len())));
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        let d = rows.first().map_or(0, Array1::len);
        let mut vectors = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::Shape(format!("vector {i} has length {}, expected {d}", r.len())));
            }
            vectors.row_mut(i).assign(&unit(r.view())?);
        }
        Ok(Self {
            modality,
            normalized: true,
            entries,
            vectors,
        })
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }
}

pub fn region_entry_id(sample: &str, region: &str) -> String {
    format!("{sample}/{region}")
}

/// Region-query entries: one per (sample, distinct lesion finding). Normal
/// samples carry no finding and get no entry.
pub fn build_index(params: &ModelParams, corpus: &Corpus, modality: Modality) -> Result<EmbeddingIndex> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus".into()));
    }
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    for s in &corpus.samples {
        match modality {
            Modality::RegionQuery => {
                let mut seen = BTreeSet::new();
                for f in s.lesions() {
                    if !seen.insert(f.clone()) {
                        continue;
                    }
                    let region = f.region().expect("lesion has a region");
                    let tokens = corpus.vocab.region_query(region)?;
                    rows.push(embed_region_query(params, &s.image, &tokens)?);
                    entries.push(IndexEntry {
                        id: region_entry_id(&s.id, region),
                        sample_id: s.id.clone(),
                        condition: Some(f.clone()),
                        findings: s.findings.clone(),
                    });
                }
            }
            Modality::GlobalImage | Modality::Report => {
                rows.push(if modality == Modality::GlobalImage {
                    encode_image(params, &s.image)?.global
                } else {
                    encode_text(params, &s.report)?.projected_cls
                });
                entries.push(IndexEntry {
                    id: s.id.clone(),
                    sample_id: s.id.clone(),
                    condition: None,
                    findings: s.findings.clone(),
                });
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::Empty(format!("{modality:?} index has no entries")));
    }
    EmbeddingIndex::from_rows(modality, entries, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryItem {
    pub id: String,
    pub sample_id: String,
    pub score: f64,
    #[serde(skip)]
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gallery {
    pub k: usize,
    pub items: Vec<GalleryItem>,
}

/// Exact top-`k` by cosine score; ties go to the smaller id.
pub fn query(index: &EmbeddingIndex, q: &Array1<f64>, k: usize) -> Result<Gallery> {
    query_filtered(index, q, k, |_| true)
}

pub fn query_filtered(
    index: &EmbeddingIndex,
    q: &Array1<f64>,
    k: usize,
    keep: impl Fn(&IndexEntry) -> bool,
) -> Result<Gallery> {
    if index.is_empty() {
        return Err(Error::Empty("index".into()));
    }
    if k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if q.len() != index.dim() {
        return Err(Error::Shape(format!("query has length {}, index uses {}", q.len(), index.dim())));
    }
    let q = unit(q.view())?;
    let mut items: Vec<GalleryItem> = index
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| keep(e))
        .map(|(i, e)| {
            let v = index.vectors.row(i);
            let score = if index.normalized {
                v.dot(&q)
            } else {
                v.dot(&q) / v.dot(&v).sqrt()
            };
            GalleryItem {
                id: e.id.clone(),
                sample_id: e.sample_id.clone(),
                score,
                position: i,
            }
        })
        .collect();
    items.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    items.truncate(k);
    Ok(Gallery { k, items })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankVariant {
    /// Mean fraction of relevant items among the top `k`.
    Precision,
    /// Fraction of queries with a relevant item in the top `k`.
    HitRate,
}

/// Rank@k as a percentage over ranked relevance flags, one list per query.
/// Lists shorter than `k` are scored over their full length.
pub fn rank_at_k(rankings: &[Vec<bool>], k: usize, variant: RankVariant) -> Result<f64> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if rankings.is_empty() {
        return Err(Error::Empty("no queries".into()));
    }
    let per_query = |r: &Vec<bool>| -> f64 {
        let top = &r[..k.min(r.len())];
        let hits = top.iter().filter(|x| **x).count();
        match variant {
            RankVariant::Precision if top.is_empty() => 0.0,
            RankVariant::Precision => hits as f64 / top.len() as f64,
            RankVariant::HitRate => (hits > 0) as u8 as f64,
        }
    };
    Ok(100.0 * rankings.iter().map(per_query).sum::<f64>() / rankings.len() as f64)
}

/// Average precision of one full ranking; `None` without relevant items.
pub fn average_precision(ranking: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (r, rel) in ranking.iter().enumerate() {
        if *rel {
            hits += 1;
            total += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// Percentage.
    pub map: f64,
    pub evaluated: usize,
    /// Queries without any relevant item.
    pub excluded: usize,
}

pub fn mean_ap(rankings: &[Vec<bool>]) -> Result<MapResult> {
    let aps: Vec<f64> = rankings.iter().filter_map(|r| average_precision(r)).collect();
    let excluded = rankings.len() - aps.len();
    if excluded > 0 {
        log::warn!("{excluded} queries have no relevant item and are left out of mAP");
    }
    if aps.is_empty() {
        return Err(Error::Empty("no query has a relevant item".into()));
    }
    Ok(MapResult {
        map: 100.0 * aps.iter().sum::<f64>() / aps.len() as f64,
        evaluated: aps.len(),
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub queries: usize,
    /// `(k, value)` pairs for the precision variant.
    pub precision: Vec<(usize, f64)>,
    pub hit_rate: Vec<(usize, f64)>,
    pub map: MapResult,
}

impl MetricsTable {
    pub fn from_rankings(rankings: &[Vec<bool>]) -> Result<Self> {
        let at = |v| -> Result<Vec<(usize, f64)>> {
            RANKS.iter().map(|&k| Ok((k, rank_at_k(rankings, k, v)?))).collect()
        };
        Ok(Self {
            queries: rankings.len(),
            precision: at(RankVariant::Precision)?,
            hit_rate: at(RankVariant::HitRate)?,
            map: mean_ap(rankings)?,
        })
    }

    pub fn precision_at(&self, k: usize) -> Option<f64> {
        self.precision.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    pub fn hit_rate_at(&self, k: usize) -> Option<f64> {
        self.hit_rate.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// Same region and disease as the query finding.
    Region,
    /// Same disease anywhere.
    Global,
}

/// Relevance of a gallery entry for a query finding.
pub fn is_relevant(level: Level, query: &Finding, entry: &IndexEntry) -> bool {
    let findings: &[Finding] = match &entry.condition {
        Some(c) => std::slice::from_ref(c),
        None => &entry.findings,
    };
    match level {
        Level::Region => findings.contains(query),
        Level::Global => findings.iter().any(|f| !f.is_normal() && f.disease() == query.disease()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcmmrReport {
    pub mode: Modality,
    pub region: MetricsTable,
    pub global: MetricsTable,
}

/// Every sample of `corpus` embedded under the description of `region`.
pub fn conditioned_index(params: &ModelParams, corpus: &Corpus, region: &str) -> Result<EmbeddingIndex> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus".into()));
    }
    let tokens = corpus.vocab.region_query(region)?;
    let mut entries = Vec::with_capacity(corpus.len());
    let mut rows = Vec::with_capacity(corpus.len());
    for s in &corpus.samples {
        rows.push(embed_region_query(params, &s.image, &tokens)?);
        entries.push(IndexEntry {
            id: region_entry_id(&s.id, region),
            sample_id: s.id.clone(),
            condition: None,
            findings: s.findings.clone(),
        });
    }
    EmbeddingIndex::from_rows(Modality::RegionQuery, entries, rows)
}

/// Location-conditioned retrieval within `corpus`: one query per (sample,
/// lesion finding), ranked against every other sample.
///
/// With `RegionQuery`, the query and the whole gallery are embedded under the
/// query finding's region. With `GlobalImage`, samples are ranked by `f̂^G`.
pub fn evaluate_lcmmr(params: &ModelParams, corpus: &Corpus, mode: Modality) -> Result<LcmmrReport> {
    let mut region = Vec::new();
    let mut global = Vec::new();
    let mut run = |index: &EmbeddingIndex, s: &CorpusSample, f: &Finding| -> Result<()> {
        let id = match mode {
            Modality::RegionQuery => region_entry_id(&s.id, f.region().expect("lesion")),
            _ => s.id.clone(),
        };
        let pos = index
            .position(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("index has no entry `{id}`")))?;
        let (r, g) = rank_flags(index, pos, &s.id, f)?;
        region.push(r);
        global.push(g);
        Ok(())
    };
    match mode {
        Modality::RegionQuery => {
            for r in &corpus.layout.regions {
                let queries: Vec<(&CorpusSample, &Finding)> = corpus
                    .samples
                    .iter()
                    .filter_map(|s| s.lesions().find(|f| f.region() == Some(r.name.as_str())).map(|f| (s, f)))
                    .collect();
                if queries.is_empty() {
                    continue;
                }
                let index = conditioned_index(params, corpus, &r.name)?;
                for (s, f) in queries {
                    run(&index, s, f)?;
                }
            }
        }
        Modality::GlobalImage => {
            let index = build_index(params, corpus, Modality::GlobalImage)?;
            for s in &corpus.samples {
                let distinct: BTreeSet<&Finding> = s.lesions().collect();
                for f in distinct {
                    run(&index, s, f)?;
                }
            }
        }
        Modality::Report => {
            return Err(Error::InvalidArgument("location-conditioned retrieval needs image-side embeddings".into()))
        }
    }
    if region.is_empty() {
        return Err(Error::Empty("corpus has no lesion findings to query".into()));
    }
    Ok(LcmmrReport {
        mode,
        region: MetricsTable::from_rankings(&region)?,
        global: MetricsTable::from_rankings(&global)?,
    })
}

/// Region- and global-level relevance flags of the full ranking for the
/// entry at `pos`, excluding every entry of the query sample.
fn rank_flags(index: &EmbeddingIndex, pos: usize, sample_id: &str, f: &Finding) -> Result<(Vec<bool>, Vec<bool>)> {
    let q = index.vectors.row(pos).to_owned();
    let gallery = query_filtered(index, &q, index.len(), |e| e.sample_id != sample_id)?;
    let flags = |level| -> Vec<bool> {
        gallery
            .items
            .iter()
            .map(|it| is_relevant(level, f, &index.entries[it.position]))
            .collect()
    };
    Ok((flags(Level::Region), flags(Level::Global)))
}

/// Same protocol over a prebuilt index. Region-query entries are compared
/// across conditioning regions here, since each carries only its own
/// finding's region.
pub fn lcmmr_from_index(index: &EmbeddingIndex, corpus: &Corpus) -> Result<LcmmrReport> {
    if index.modality == Modality::Report {
        return Err(Error::InvalidArgument("location-conditioned retrieval needs image-side embeddings".into()));
    }
    let mut region = Vec::new();
    let mut global = Vec::new();
    for s in &corpus.samples {
        let distinct: BTreeSet<&Finding> = s.lesions().collect();
        for f in distinct {
            let id = match index.modality {
                Modality::RegionQuery => region_entry_id(&s.id, f.region().expect("lesion")),
                _ => s.id.clone(),
            };
            let pos = index
                .position(&id)
                .ok_or_else(|| Error::InvalidArgument(format!("index has no entry `{id}`")))?;
            let (r, g) = rank_flags(index, pos, &s.id, f)?;
            region.push(r);
            global.push(g);
        }
    }
    if region.is_empty() {
        return Err(Error::Empty("corpus has no lesion findings to query".into()));
    }
    Ok(LcmmrReport {
        mode: index.modality,
        region: MetricsTable::from_rankings(&region)?,
        global: MetricsTable::from_rankings(&global)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Image2Report,
    Report2Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModalReport {
    pub direction: Direction,
    /// Hit-rate Rank@k with the paired item as the only target.
    pub instance: MetricsTable,
    /// Precision Rank@k with shared-label relevance.
    pub class: MetricsTable,
}

fn label_set(s: &[Finding]) -> BTreeSet<&str> {
    s.iter().map(Finding::disease).collect()
}

/// Instance-level retrieval between `f̂^G` and `t̂^C` of paired samples.
pub fn evaluate_cross_modal(params: &ModelParams, corpus: &Corpus, direction: Direction) -> Result<CrossModalReport> {
    let images = build_index(params, corpus, Modality::GlobalImage)?;
    let reports = build_index(params, corpus, Modality::Report)?;
    cross_modal_from_indexes(&images, &reports, &corpus.samples, direction)
}

pub fn cross_modal_from_indexes(
    images: &EmbeddingIndex,
    reports: &EmbeddingIndex,
    samples: &[CorpusSample],
    direction: Direction,
) -> Result<CrossModalReport> {
    let (queries, gallery) = match direction {
        Direction::Image2Report => (images, reports),
        Direction::Report2Image => (reports, images),
    };
    let mut instance = Vec::new();
    let mut class = Vec::new();
    for s in samples {
        let pos = queries
            .position(&s.id)
            .ok_or_else(|| Error::InvalidArgument(format!("index has no entry `{}`", s.id)))?;
        let ranked = query(gallery, &queries.vectors.row(pos).to_owned(), gallery.len())?;
        let labels = label_set(&s.findings);
        instance.push(ranked.items.iter().map(|it| it.sample_id == s.id).collect());
        class.push(
            ranked
                .items
                .iter()
                .map(|it| {
                    let other = label_set(&gallery.entries[it.position].findings);
                    !labels.is_disjoint(&other)
                })
                .collect(),
        );
    }
    Ok(CrossModalReport {
        direction,
        instance: MetricsTable::from_rankings(&instance)?,
        class: MetricsTable::from_rankings(&class)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    format_version: u32,
    modality: Modality,
    normalized: bool,
    dim: usize,
    count: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

/// Binary vectors (`f32` little-endian rows after a JSON header) plus a
/// line-per-entry metadata sidecar.
pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_index_vectors(index, &mut out)?;
    out.flush()?;
    let mut meta = std::io::BufWriter::new(std::fs::File::create(sidecar_path(path))?);
    for e in &index.entries {
        serde_json::to_writer(&mut meta, e)?;
        meta.write_all(b"\n")?;
    }
    meta.flush()?;
    Ok(())
}

pub fn write_index_vectors<W: Write>(index: &EmbeddingIndex, out: &mut W) -> Result<()> {
    let header = serde_json::to_vec(&IndexHeader {
        format_version: INDEX_VERSION,
        modality: index.modality,
        normalized: index.normalized,
        dim: index.dim(),
        count: index.len(),
    })?;
    out.write_all(INDEX_MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for v in index.vectors.iter() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn load_index(path: &Path) -> Result<EmbeddingIndex> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    let (header, vectors) = read_index_vectors(&mut input)?;
    let meta = std::io::BufReader::new(std::fs::File::open(sidecar_path(path))?);
    let mut entries = Vec::with_capacity(header.count);
    for (i, line) in meta.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            field: None,
            message: e.to_string(),
        })?);
    }
    if entries.len() != header.count {
        return Err(Error::Shape(format!(
            "index holds {} vectors but {} metadata rows",
            header.count,
            entries.len()
        )));
    }
    Ok(EmbeddingIndex {
        modality: header.modality,
        normalized: header.normalized,
        entries,
        vectors,
    })
}

fn read_index_vectors<R: Read>(input: &mut R) -> Result<(IndexHeader, Array2<f64>)> {
    let corrupt = |m: &str| Error::InvalidArgument(format!("index file: {m}"));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| corrupt("truncated"))?;
    if &magic != INDEX_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(|_| corrupt("truncated"))?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut header).map_err(|_| corrupt("truncated"))?;
    let header: IndexHeader = serde_json::from_slice(&header)?;
    if header.format_version != INDEX_VERSION {
        return Err(Error::VersionMismatch {
            expected: INDEX_VERSION,
            found: header.format_version,
        });
    }
    let mut data = vec![0u8; header.count * header.dim * 4];
    input.read_exact(&mut data).map_err(|_| corrupt("truncated vectors"))?;
    let vals: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let vectors = Array2::from_shape_vec((header.count, header.dim), vals).map_err(|e| corrupt(&e.to_string()))?;
    Ok((header, vectors))
}
