//! Synthetic planted-lesion corpus: region layouts, disease motifs, templated
//! reports, and the line-delimited corpus file format.
//!
//! Each abnormal sample carries 1–3 findings placed in distinct regions. A
//! finding renders its disease motif inside a square lesion box drawn within
//! the region rectangle, and contributes the phrase
//! `<disease words> at the <region words>` to the report:
//!
//! ```text
//! [CLS] there is pleural effusion at the left lower and edema at the right upper seen
//! [CLS] no findings seen
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const DEFAULT_MAX_LEN: usize = 32;
pub const NORMAL: &str = "NORMAL";

const BACKGROUND: f32 = 0.2;
const NOISE_SIGMA: f64 = 0.05;
const LESION_SIDE: (usize, usize) = (12, 20);
const FILLERS: [&str; 9] = ["there", "is", "at", "the", "and", "seen", "no", "findings", "region"];

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

impl From<[usize; 4]> for Rect {
    fn from(v: [usize; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [usize; 4] {
    fn from(r: Rect) -> Self {
        [r.x0, r.y0, r.x1, r.y1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub regions: Vec<Region>,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl RegionLayout {
    /// 2×2 quadrant grid on a square image.
    pub fn quadrants(side: usize) -> Self {
        let h = side / 2;
        let region = |name: &str, x0, y0| Region {
            name: name.to_string(),
            rect: Rect::new(x0, y0, x0 + h, y0 + h),
        };
        Self {
            regions: vec![
                region("left-upper", 0, 0),
                region("right-upper", h, 0),
                region("left-lower", 0, h),
                region("right-lower", h, h),
            ],
            image_size: (side, side),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image_size;
        if w == 0 || h == 0 {
            return Err(Error::InvalidLayout("image size must be positive".into()));
        }
        let mut names = HashSet::new();
        for r in &self.regions {
            if !names.insert(r.name.as_str()) {
                return Err(Error::InvalidLayout(format!("duplicate region name `{}`", r.name)));
            }
            if r.rect.area() == 0 || r.rect.x1 > w || r.rect.y1 > h {
                return Err(Error::InvalidLayout(format!(
                    "region `{}` is empty or outside the {w}x{h} image",
                    r.name
                )));
            }
        }
        for (i, a) in self.regions.iter().enumerate() {
            for b in &self.regions[i + 1..] {
                if a.rect.intersects(&b.rect) {
                    return Err(Error::InvalidLayout(format!(
                        "regions `{}` and `{}` overlap",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotifPattern {
    Disc,
    CrossHatch,
    GradientBlob,
    Ring,
    Stripes,
}

impl MotifPattern {
    const ALL: [MotifPattern; 5] = [
        MotifPattern::Disc,
        MotifPattern::CrossHatch,
        MotifPattern::GradientBlob,
        MotifPattern::Ring,
        MotifPattern::Stripes,
    ];

    /// Additive intensity at offset `(dx, dy)` inside a lesion box of side `side`.
    fn intensity(self, dx: usize, dy: usize, side: usize) -> f32 {
        let c = (side as f32 - 1.0) / 2.0;
        let (fx, fy) = (dx as f32 - c, dy as f32 - c);
        let r = (fx * fx + fy * fy).sqrt();
        let half = side as f32 / 2.0;
        match self {
            MotifPattern::Disc => {
                if r <= half - 0.5 {
                    0.55
                } else {
                    0.0
                }
            }
            MotifPattern::CrossHatch => {
                if (dx + dy) % 4 == 0 || (dx + side - dy) % 4 == 0 {
                    0.6
                } else {
                    0.0
                }
            }
            MotifPattern::GradientBlob => {
                let sigma = side as f32 / 4.0;
                0.65 * (-(r * r) / (2.0 * sigma * sigma)).exp()
            }
            MotifPattern::Ring => {
                if r >= 0.3 * side as f32 && r <= half - 0.5 {
                    0.55
                } else {
                    0.0
                }
            }
            MotifPattern::Stripes => {
                if dy % 3 == 0 {
                    0.55
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseMotif {
    pub name: String,
    pub pattern: MotifPattern,
}

impl DiseaseMotif {
    pub fn new(name: impl Into<String>, pattern: MotifPattern) -> Self {
        Self {
            name: name.into(),
            pattern,
        }
    }

    /// Default motifs, cycling through the pattern families.
    pub fn defaults(n: usize) -> Vec<DiseaseMotif> {
        const NAMES: [&str; 5] = ["pleural-effusion", "edema", "nodule", "consolidation", "atelectasis"];
        (0..n)
            .map(|i| {
                let name = NAMES
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("disease-{i}"));
                DiseaseMotif::new(name, MotifPattern::ALL[i % MotifPattern::ALL.len()])
            })
            .collect()
    }
}

/// A (region, disease) label, or the distinguished normal label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawFinding", into = "RawFinding")]
pub enum Finding {
    Normal,
    Lesion { region: String, disease: String },
}

impl Finding {
    pub fn lesion(region: impl Into<String>, disease: impl Into<String>) -> Self {
        Finding::Lesion {
            region: region.into(),
            disease: disease.into(),
        }
    }

    pub fn is_normal(&self) -> bool {
        matches!(self, Finding::Normal)
    }

    pub fn region(&self) -> Option<&str> {
        match self {
            Finding::Normal => None,
            Finding::Lesion { region, .. } => Some(region),
        }
    }

    /// Disease name; `NORMAL` for the normal label.
    pub fn disease(&self) -> &str {
        match self {
            Finding::Normal => NORMAL,
            Finding::Lesion { disease, .. } => disease,
        }
    }

    /// Plain-text regional description, e.g. `pleural effusion at the left lower`.
    pub fn describe(&self) -> String {
        match self {
            Finding::Normal => "no findings".to_string(),
            Finding::Lesion { region, disease } => {
                format!("{} at the {}", display_name(disease), display_name(region))
            }
        }
    }
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Finding::Normal => f.write_str(NORMAL),
            Finding::Lesion { region, disease } => write!(f, "{disease}@{region}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawFinding {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region: Option<String>,
    disease: String,
}

impl TryFrom<RawFinding> for Finding {
    type Error = String;

    fn try_from(raw: RawFinding) -> std::result::Result<Self, String> {
        match (raw.region, raw.disease.as_str()) {
            (None, NORMAL) => Ok(Finding::Normal),
            (Some(r), NORMAL) => Err(format!("NORMAL finding must not name a region (got `{r}`)")),
            (Some(region), _) => Ok(Finding::Lesion {
                region,
                disease: raw.disease,
            }),
            (None, d) => Err(format!("finding `{d}` is missing its region")),
        }
    }
}

impl From<Finding> for RawFinding {
    fn from(f: Finding) -> Self {
        match f {
            Finding::Normal => RawFinding {
                region: None,
                disease: NORMAL.to_string(),
            },
            Finding::Lesion { region, disease } => RawFinding {
                region: Some(region),
                disease,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxedFinding {
    pub finding: Finding,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSample {
    pub id: String,
    /// `height × width`, values in `[0, 1]`.
    pub image: Array2<f32>,
    pub report: Vec<u32>,
    pub findings: Vec<Finding>,
    /// Ground-truth lesion boxes; `None` when the corpus carries no boxes.
    pub boxes: Option<Vec<BoxedFinding>>,
}

impl CorpusSample {
    pub fn is_normal(&self) -> bool {
        self.findings.iter().all(Finding::is_normal)
    }

    pub fn lesions(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| !f.is_normal())
    }
}

fn words(name: &str) -> impl Iterator<Item = &str> {
    name.split(['-', ' ', '_']).filter(|w| !w.is_empty())
}

/// `pleural-effusion` → `pleural effusion`.
pub fn display_name(name: &str) -> String {
    words(name).collect::<Vec<_>>().join(" ")
}

/// Token vocabulary. Ids 0 and 1 are `[PAD]` and `[CLS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn build(layout: &RegionLayout, diseases: &[DiseaseMotif]) -> Result<Self> {
        let mut tokens: Vec<String> = vec!["[PAD]".into(), "[CLS]".into()];
        tokens.extend(FILLERS.iter().map(|s| s.to_string()));
        let fillers: HashSet<&str> = FILLERS.into_iter().collect();
        let mut region_words = HashSet::new();
        for r in &layout.regions {
            for w in words(&r.name) {
                if fillers.contains(w) {
                    return Err(Error::InvalidLayout(format!("region word `{w}` is reserved")));
                }
                region_words.insert(w.to_string());
            }
        }
        let mut disease_words = HashSet::new();
        for d in diseases {
            if d.name == NORMAL {
                return Err(Error::InvalidArgument("`NORMAL` is not a disease motif name".into()));
            }
            for w in words(&d.name) {
                if fillers.contains(w) || region_words.contains(w) {
                    return Err(Error::InvalidArgument(format!(
                        "disease word `{w}` collides with a filler or region word"
                    )));
                }
                disease_words.insert(w.to_string());
            }
        }
        let mut extra: Vec<String> = region_words.into_iter().chain(disease_words).collect();
        extra.sort();
        tokens.extend(extra);
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token `{t}`")));
            }
        }
        if tokens.get(PAD as usize).map(String::as_str) != Some("[PAD]")
            || tokens.get(CLS as usize).map(String::as_str) != Some("[CLS]")
        {
            return Err(Error::InvalidArgument("vocabulary must start with [PAD], [CLS]".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("word `{word}` not in vocabulary")))
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn push_words(&self, out: &mut Vec<u32>, name: &str) -> Result<()> {
        for w in words(name) {
            out.push(self.id(w)?);
        }
        Ok(())
    }

    /// Report token sequence for a finding list.
    pub fn encode_report(&self, findings: &[Finding]) -> Result<Vec<u32>> {
        let mut out = vec![CLS];
        let lesions: Vec<_> = findings.iter().filter(|f| !f.is_normal()).collect();
        if lesions.is_empty() {
            for w in ["no", "findings", "seen"] {
                out.push(self.id(w)?);
            }
            return Ok(out);
        }
        out.push(self.id("there")?);
        out.push(self.id("is")?);
        for (i, f) in lesions.iter().enumerate() {
            if i > 0 {
                out.push(self.id("and")?);
            }
            self.push_phrase_body(&mut out, f)?;
        }
        out.push(self.id("seen")?);
        Ok(out)
    }

    fn push_phrase_body(&self, out: &mut Vec<u32>, f: &Finding) -> Result<()> {
        if let Finding::Lesion { region, disease } = f {
            self.push_words(out, disease)?;
            out.push(self.id("at")?);
            out.push(self.id("the")?);
            self.push_words(out, region)?;
        }
        Ok(())
    }

    /// `[CLS] <disease words> at the <region words>`, used for grounding.
    pub fn finding_phrase(&self, finding: &Finding) -> Result<Vec<u32>> {
        match finding {
            Finding::Normal => self.encode_report(&[]),
            f => {
                let mut out = vec![CLS];
                self.push_phrase_body(&mut out, f)?;
                Ok(out)
            }
        }
    }

    /// `[CLS] the <region words> region`, the location-conditioning text.
    pub fn region_query(&self, region: &str) -> Result<Vec<u32>> {
        let mut out = vec![CLS, self.id("the")?];
        self.push_words(&mut out, region)?;
        out.push(self.id("region")?);
        Ok(out)
    }

    /// Inverse of [`Vocab::encode_report`] under the template grammar.
    pub fn decode_report(
        &self,
        tokens: &[u32],
        layout: &RegionLayout,
        diseases: &[DiseaseMotif],
    ) -> Result<Vec<Finding>> {
        let bad = |m: &str| Error::InvalidArgument(format!("report does not follow the template: {m}"));
        let mut ws = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if t == PAD {
                continue;
            }
            ws.push(self.word(t).ok_or(Error::OutOfVocabulary {
                id: t,
                size: self.len(),
            })?);
        }
        if ws.first() != Some(&"[CLS]") {
            return Err(bad("missing leading [CLS]"));
        }
        let body = &ws[1..];
        if body == ["no", "findings", "seen"] {
            return Ok(vec![Finding::Normal]);
        }
        let inner = body
            .strip_prefix(&["there", "is"])
            .and_then(|b| b.strip_suffix(&["seen"]))
            .ok_or_else(|| bad("expected `there is ... seen`"))?;
        let mut findings = Vec::new();
        for seg in inner.split(|w| *w == "and") {
            let at = seg.iter().position(|w| *w == "at").ok_or_else(|| bad("segment without `at`"))?;
            let (dwords, rest) = seg.split_at(at);
            let rwords = rest.strip_prefix(&["at", "the"]).ok_or_else(|| bad("expected `at the`"))?;
            let disease = diseases
                .iter()
                .find(|d| words(&d.name).eq(dwords.iter().copied()))
                .ok_or_else(|| bad("unknown disease words"))?;
            let region = layout
                .regions
                .iter()
                .find(|r| words(&r.name).eq(rwords.iter().copied()))
                .ok_or_else(|| bad("unknown region words"))?;
            findings.push(Finding::lesion(&region.name, &disease.name));
        }
        Ok(findings)
    }
}

/// A generated or loaded corpus together with the metadata needed to read it.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub layout: RegionLayout,
    pub diseases: Vec<DiseaseMotif>,
    pub vocab: Vocab,
    pub max_len: usize,
    pub samples: Vec<CorpusSample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, id: &str) -> Option<&CorpusSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Same metadata, different sample list.
    pub fn with_samples(&self, samples: Vec<CorpusSample>) -> Corpus {
        Corpus {
            layout: self.layout.clone(),
            diseases: self.diseases.clone(),
            vocab: self.vocab.clone(),
            max_len: self.max_len,
            samples,
        }
    }

    pub fn has_boxes(&self) -> bool {
        self.samples.iter().all(|s| s.boxes.is_some())
    }
}

/// Generator arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub layout: RegionLayout,
    pub diseases: Vec<DiseaseMotif>,
    pub n_samples: usize,
    pub normal_fraction: f64,
    pub seed: u64,
    pub max_len: usize,
}

impl GenSpec {
    /// Quadrant layout on 64×64 images with `n_diseases` default motifs.
    pub fn standard(n_samples: usize, n_diseases: usize, normal_fraction: f64, seed: u64) -> Self {
        Self {
            layout: RegionLayout::quadrants(64),
            diseases: DiseaseMotif::defaults(n_diseases),
            n_samples,
            normal_fraction,
            seed,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// Generates a corpus; a pure function of `spec`.
pub fn gen_corpus(spec: &GenSpec) -> Result<Corpus> {
    spec.layout.validate()?;
    if spec.layout.regions.len() < 2 {
        return Err(Error::InvalidLayout("need at least 2 regions".into()));
    }
    if spec.diseases.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 disease motifs".into()));
    }
    if spec.n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.normal_fraction) {
        return Err(Error::InvalidArgument(format!(
            "normal_fraction {} outside [0, 1]",
            spec.normal_fraction
        )));
    }
    let vocab = Vocab::build(&spec.layout, &spec.diseases)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_normal = (spec.normal_fraction * spec.n_samples as f64).round() as usize;
    let mut is_normal: Vec<bool> = (0..spec.n_samples).map(|i| i < n_normal).collect();
    is_normal.shuffle(&mut rng);

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let (w, h) = spec.layout.image_size;
    let max_findings = spec.layout.regions.len().min(3);
    let mut samples = Vec::with_capacity(spec.n_samples);
    for (i, normal) in is_normal.into_iter().enumerate() {
        let mut image = Array2::from_shape_simple_fn((h, w), || {
            (BACKGROUND + noise.sample(&mut rng) as f32).clamp(0.0, 1.0)
        });
        let (findings, boxes) = if normal {
            (vec![Finding::Normal], Vec::new())
        } else {
            let k = rng.random_range(1..=max_findings);
            let regions: Vec<_> = spec.layout.regions.choose_multiple(&mut rng, k).collect();
            let mut findings = Vec::with_capacity(k);
            let mut boxes = Vec::with_capacity(k);
            for region in regions {
                let motif = &spec.diseases[rng.random_range(0..spec.diseases.len())];
                let rect = place_lesion(&region.rect, &mut rng);
                render_motif(&mut image, &rect, motif.pattern);
                let f = Finding::lesion(&region.name, &motif.name);
                boxes.push(BoxedFinding {
                    finding: f.clone(),
                    rect,
                });
                findings.push(f);
            }
            (findings, boxes)
        };
        let report = vocab.encode_report(&findings)?;
        if report.len() > spec.max_len {
            return Err(Error::InvalidArgument(format!(
                "report of length {} exceeds max_len {}",
                report.len(),
                spec.max_len
            )));
        }
        samples.push(CorpusSample {
            id: format!("s{i:05}"),
            image,
            report,
            findings,
            boxes: Some(boxes),
        });
    }
    Ok(Corpus {
        layout: spec.layout.clone(),
        diseases: spec.diseases.clone(),
        vocab,
        max_len: spec.max_len,
        samples,
    })
}

fn place_lesion<R: Rng>(region: &Rect, rng: &mut R) -> Rect {
    let limit = region.width().min(region.height());
    let lo = LESION_SIDE.0.min(limit);
    let hi = LESION_SIDE.1.min(limit);
    let side = rng.random_range(lo..=hi);
    let x0 = region.x0 + rng.random_range(0..=region.width() - side);
    let y0 = region.y0 + rng.random_range(0..=region.height() - side);
    Rect::new(x0, y0, x0 + side, y0 + side)
}

fn render_motif(image: &mut Array2<f32>, rect: &Rect, pattern: MotifPattern) {
    let side = rect.width().min(rect.height());
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let v = &mut image[[y, x]];
            *v = (*v + pattern.intensity(x - rect.x0, y - rect.y0, side)).clamp(0.0, 1.0);
        }
    }
}

/// Splits into disjoint `(train, test)` parts; deterministic given `seed`.
pub fn split_corpus(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * corpus.len() as f64).round() as usize;
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| corpus.samples[i].clone()).collect::<Vec<_>>()
    };
    Ok((
        corpus.with_samples(pick(&order[..n_train])),
        corpus.with_samples(pick(&order[n_train..])),
    ))
}

/// How images are stored in a corpus file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageEncoding {
    /// Base64 of row-major little-endian `f32`.
    Base64F32le,
    /// Nested JSON arrays, one per image row.
    Inline,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    image_encoding: ImageEncoding,
    max_len: usize,
    layout: RegionLayout,
    diseases: Vec<DiseaseMotif>,
    vocab: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ImageField {
    Encoded(String),
    Rows(Vec<Vec<f32>>),
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    image: ImageField,
    report: Vec<u32>,
    findings: Vec<Finding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<BoxedFinding>>,
}

const REQUIRED_FIELDS: [&str; 4] = ["id", "image", "report", "findings"];

/// Writes the corpus with base64 image encoding.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    save_corpus_with(corpus, path, ImageEncoding::Base64F32le)
}

pub fn save_corpus_with(corpus: &Corpus, path: &Path, encoding: ImageEncoding) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_corpus(corpus, &mut out, encoding)?;
    out.flush()?;
    Ok(())
}

pub fn write_corpus<W: Write>(corpus: &Corpus, out: &mut W, encoding: ImageEncoding) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        image_encoding: encoding,
        max_len: corpus.max_len,
        layout: corpus.layout.clone(),
        diseases: corpus.diseases.clone(),
        vocab: corpus.vocab.tokens().to_vec(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for s in &corpus.samples {
        let image = match encoding {
            ImageEncoding::Base64F32le => {
                let bytes: Vec<u8> = s.image.iter().flat_map(|v| v.to_le_bytes()).collect();
                ImageField::Encoded(B64.encode(bytes))
            }
            ImageEncoding::Inline => ImageField::Rows(s.image.rows().into_iter().map(|r| r.to_vec()).collect()),
        };
        let rec = Record {
            id: s.id.clone(),
            image,
            report: s.report.clone(),
            findings: s.findings.clone(),
            boxes: s.boxes.clone(),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    read_corpus(BufReader::new(File::open(path)?))
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        field: None,
        message: "missing header record".into(),
    })??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        field: None,
        message: e.to_string(),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: header.format_version,
        });
    }
    header.layout.validate()?;
    let vocab = Vocab::from_tokens(header.vocab)?;
    let (w, h) = header.layout.image_size;
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |field: Option<&str>, message: String| Error::Parse {
            line: line_no,
            field: field.map(str::to_string),
            message,
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| perr(None, e.to_string()))?;
        for f in REQUIRED_FIELDS {
            if value.get(f).is_none() {
                return Err(perr(Some(f), "required field is missing".into()));
            }
        }
        let rec: Record = serde_json::from_value(value).map_err(|e| perr(None, e.to_string()))?;
        let image = match (header.image_encoding, rec.image) {
            (ImageEncoding::Base64F32le, ImageField::Encoded(text)) => {
                let bytes = B64.decode(text).map_err(|e| perr(Some("image"), e.to_string()))?;
                if bytes.len() != w * h * 4 {
                    return Err(perr(Some("image"), format!("expected {} bytes, got {}", w * h * 4, bytes.len())));
                }
                let vals: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Array2::from_shape_vec((h, w), vals).expect("length checked")
            }
            (ImageEncoding::Inline, ImageField::Rows(rows)) => {
                if rows.len() != h || rows.iter().any(|r| r.len() != w) {
                    return Err(perr(Some("image"), format!("expected {h} rows of {w} values")));
                }
                Array2::from_shape_vec((h, w), rows.concat()).expect("shape checked")
            }
            _ => return Err(perr(Some("image"), "encoding differs from header".into())),
        };
        let sample = CorpusSample {
            id: rec.id,
            image,
            report: rec.report,
            findings: rec.findings,
            boxes: rec.boxes,
        };
        validate_sample(&sample, &header.layout, &vocab, header.max_len).map_err(|(f, m)| perr(Some(f), m))?;
        if !seen.insert(sample.id.clone()) {
            return Err(Error::DuplicateId(sample.id));
        }
        samples.push(sample);
    }
    Ok(Corpus {
        layout: header.layout,
        diseases: header.diseases,
        vocab,
        max_len: header.max_len,
        samples,
    })
}

fn validate_sample(
    s: &CorpusSample,
    layout: &RegionLayout,
    vocab: &Vocab,
    max_len: usize,
) -> std::result::Result<(), (&'static str, String)> {
    if s.image.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(("image", "values must be finite and within [0, 1]".into()));
    }
    if s.report.len() < 2 || s.report.len() > max_len {
        return Err(("report", format!("length {} outside [2, {max_len}]", s.report.len())));
    }
    if let Some(bad) = s.report.iter().find(|t| **t as usize >= vocab.len()) {
        return Err(("report", format!("token id {bad} outside vocabulary")));
    }
    if s.findings.is_empty() {
        return Err(("findings", "at least one finding required".into()));
    }
    let mut distinct = HashSet::new();
    for f in &s.findings {
        if let Some(r) = f.region() {
            if layout.region(r).is_none() {
                return Err(("findings", format!("unknown region `{r}`")));
            }
        }
        if !distinct.insert(f) {
            return Err(("findings", format!("duplicate finding {f}")));
        }
    }
    for b in s.boxes.iter().flatten() {
        if !s.findings.contains(&b.finding) {
            return Err(("boxes", format!("boxed finding {} not among findings", b.finding)));
        }
    }
    Ok(())
}

/// Number of samples per finding label, in label order.
pub fn finding_counts(samples: &[CorpusSample]) -> BTreeMap<Finding, usize> {
    let mut counts = BTreeMap::new();
    for s in samples {
        for f in &s.findings {
            *counts.entry(f.clone()).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(n: usize, normal_fraction: f64, seed: u64) -> GenSpec {
        GenSpec::standard(n, 3, normal_fraction, seed)
    }

    #[test]
    fn quadrant_layout_is_valid() {
        RegionLayout::quadrants(64).validate().unwrap();
    }

    #[test]
    fn overlapping_layout_is_rejected() {
        let mut layout = RegionLayout::quadrants(64);
        layout.regions[1].rect = Rect::new(16, 0, 48, 32);
        assert!(matches!(layout.validate(), Err(Error::InvalidLayout(_))));
        let mut layout = RegionLayout::quadrants(64);
        layout.regions[1].name = "left-upper".into();
        assert!(matches!(layout.validate(), Err(Error::InvalidLayout(_))));
        let mut layout = RegionLayout::quadrants(64);
        layout.regions[3].rect = Rect::new(32, 32, 65, 64);
        assert!(matches!(layout.validate(), Err(Error::InvalidLayout(_))));
    }

    #[test]
    fn generator_rejects_bad_arguments() {
        let mut s = small_spec(10, 0.2, 7);
        s.normal_fraction = 1.5;
        assert!(matches!(gen_corpus(&s), Err(Error::InvalidArgument(_))));
        let mut s = small_spec(10, 0.2, 7);
        s.diseases.truncate(1);
        assert!(matches!(gen_corpus(&s), Err(Error::InvalidArgument(_))));
        let mut s = small_spec(10, 0.2, 7);
        s.diseases.clear();
        assert!(gen_corpus(&s).is_err());
        let mut s = small_spec(10, 0.2, 7);
        s.layout.regions.truncate(1);
        assert!(matches!(gen_corpus(&s), Err(Error::InvalidLayout(_))));
    }

    #[test]
    fn normal_count_follows_fraction() {
        let c = gen_corpus(&small_spec(10, 0.2, 7)).unwrap();
        assert_eq!(c.len(), 10);
        assert_eq!(c.samples.iter().filter(|s| s.is_normal()).count(), 2);
        for s in &c.samples {
            if !s.is_normal() {
                assert!((1..=3).contains(&s.findings.len()));
            }
        }
    }

    #[test]
    fn all_normal_corpus_has_no_boxes() {
        let c = gen_corpus(&small_spec(6, 1.0, 3)).unwrap();
        for s in &c.samples {
            assert_eq!(s.findings, vec![Finding::Normal]);
            assert_eq!(s.boxes.as_deref(), Some(&[][..]));
        }
    }

    #[test]
    fn lesion_boxes_lie_inside_their_regions() {
        let c = gen_corpus(&small_spec(200, 0.1, 11)).unwrap();
        for s in &c.samples {
            for b in s.boxes.iter().flatten() {
                let region = c.layout.region(b.finding.region().unwrap()).unwrap();
                assert!(region.rect.contains_rect(&b.rect), "{} {:?}", s.id, b);
            }
            assert!(s.image.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn reports_decode_to_their_findings() {
        let c = gen_corpus(&small_spec(200, 0.2, 5)).unwrap();
        for s in &c.samples {
            let decoded = c.vocab.decode_report(&s.report, &c.layout, &c.diseases).unwrap();
            assert_eq!(decoded, s.findings);
        }
    }

    #[test]
    fn template_example() {
        let c = gen_corpus(&small_spec(1, 0.0, 1)).unwrap();
        let fs = vec![
            Finding::lesion("left-lower", "pleural-effusion"),
            Finding::lesion("right-upper", "edema"),
        ];
        let toks = c.vocab.encode_report(&fs).unwrap();
        let text: Vec<_> = toks.iter().map(|t| c.vocab.word(*t).unwrap()).collect();
        assert_eq!(
            text.join(" "),
            "[CLS] there is pleural effusion at the left lower and edema at the right upper seen"
        );
        let normal = c.vocab.encode_report(&[Finding::Normal]).unwrap();
        assert_eq!(normal.len(), 4);
    }

    #[test]
    fn split_is_a_partition() {
        let c = gen_corpus(&small_spec(10, 0.2, 7)).unwrap();
        let (tr, te) = split_corpus(&c, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let a: HashSet<_> = tr.samples.iter().map(|s| s.id.clone()).collect();
        let b: HashSet<_> = te.samples.iter().map(|s| s.id.clone()).collect();
        assert!(a.is_disjoint(&b));
        let all: HashSet<_> = c.samples.iter().map(|s| s.id.clone()).collect();
        assert_eq!(a.union(&b).cloned().collect::<HashSet<_>>(), all);
        let (tr2, _) = split_corpus(&c, 0.8, 1).unwrap();
        assert_eq!(tr, tr2);
        assert!(split_corpus(&c, 1.0, 1).is_err());
        assert!(split_corpus(&c, 0.0, 1).is_err());
    }

    #[test]
    fn missing_findings_field_is_named() {
        let c = gen_corpus(&small_spec(2, 0.0, 2)).unwrap();
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf, ImageEncoding::Base64F32le).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let mut v: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
        v.as_object_mut().unwrap().remove("findings");
        lines[2] = v.to_string();
        let err = read_corpus(lines.join("\n").as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, field, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field.as_deref(), Some("findings"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut c = gen_corpus(&small_spec(2, 0.0, 2)).unwrap();
        c.samples[1].id = c.samples[0].id.clone();
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf, ImageEncoding::Base64F32le).unwrap();
        assert!(matches!(read_corpus(&buf[..]), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn empty_corpus_round_trips() {
        let c = gen_corpus(&small_spec(1, 0.0, 2)).unwrap().with_samples(vec![]);
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf, ImageEncoding::Base64F32le).unwrap();
        assert_eq!(buf.iter().filter(|b| **b == b'\n').count(), 1);
        assert_eq!(read_corpus(&buf[..]).unwrap(), c);
    }

    #[test]
    fn inline_encoding_round_trips() {
        let c = gen_corpus(&small_spec(4, 0.25, 9)).unwrap();
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf, ImageEncoding::Inline).unwrap();
        assert_eq!(read_corpus(&buf[..]).unwrap(), c);
    }
}
