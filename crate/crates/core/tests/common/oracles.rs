//! Direct-definition reference implementations on plain vectors.

use ndarray::Array2;

pub type Mat = Vec<Vec<f64>>;

pub fn to_vecs(a: &Array2<f64>) -> Mat {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Per-head attention `softmax(Q_h K_hᵀ / √d_k) V_h`, heads concatenated then
/// mixed by `wo`. Returns the output and the per-head weights.
pub fn mha(x: &Mat, y: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, wo: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let (q, k, v) = (matmul(x, wq), matmul(y, wk), matmul(y, wv));
    let width = wq[0].len();
    let dk = width / heads;
    let mut concat = vec![vec![0.0; width]; x.len()];
    let mut weights = Vec::new();
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let mut a = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| dot(&qi[cols.clone()], &kj[cols.clone()]) / (dk as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for c in cols.clone() {
                concat[i][c] = w.iter().zip(&v).map(|(wj, vj)| wj * vj[c]).sum();
            }
            a.push(w);
        }
        weights.push(a);
    }
    (matmul(&concat, wo), weights)
}

/// `mean_i( ln Σ_j exp s_ij − s_ii )`
pub fn info_nce(s: &Mat) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        let m = s[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + s[i].iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - s[i][i];
    }
    total / n as f64
}

fn transpose(s: &Mat) -> Mat {
    (0..s[0].len()).map(|j| s.iter().map(|r| r[j]).collect()).collect()
}

pub fn global_infonce(f: &Mat, t: &Mat, tau: f64) -> f64 {
    let s: Mat = f.iter().map(|fi| t.iter().map(|tj| cos(fi, tj) / tau).collect()).collect();
    info_nce(&s) + info_nce(&transpose(&s))
}

/// Items are `(sa_proj, ca_proj, w_cls)` with `w_cls` over tokens `1..L`.
pub fn local_infonce(items: &[(Mat, Mat, Vec<f64>)], tau: f64) -> f64 {
    let n = items.len();
    let score = |i: usize, j: usize, swap: bool| -> f64 {
        let (sa_i, ca_i, w_i) = &items[i];
        let (sa_j, ca_j, _) = &items[j];
        let (a, b) = if swap { (ca_i, sa_j) } else { (sa_i, ca_j) };
        (0..w_i.len()).map(|k| w_i[k] * cos(&a[k + 1], &b[k + 1])).sum::<f64>() / tau
    };
    let a: Mat = (0..n).map(|i| (0..n).map(|j| score(i, j, false)).collect()).collect();
    let b: Mat = (0..n).map(|i| (0..n).map(|j| score(i, j, true)).collect()).collect();
    info_nce(&a) + info_nce(&b)
}

pub fn triplet(a: &Mat, p: &Mat, n: &Mat, alpha: f64) -> f64 {
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    let total: f64 = (0..a.len())
        .map(|i| (dist(&a[i], &p[i]) - dist(&a[i], &n[i]) + alpha).max(0.0))
        .sum();
    total / a.len() as f64
}

/// Fraction of the first `r` entries that are relevant.
fn precision_prefix(ranking: &[bool], r: usize) -> f64 {
    ranking[..r].iter().filter(|x| **x).count() as f64 / r as f64
}

/// Mean of precision@r over relevant ranks r, as a fraction.
pub fn average_precision(ranking: &[bool]) -> Option<f64> {
    let ranks: Vec<usize> = (1..=ranking.len()).filter(|&r| ranking[r - 1]).collect();
    if ranks.is_empty() {
        return None;
    }
    Some(ranks.iter().map(|&r| precision_prefix(ranking, r)).sum::<f64>() / ranks.len() as f64)
}

pub fn precision_at(rankings: &[Vec<bool>], k: usize) -> f64 {
    let per: Vec<f64> = rankings
        .iter()
        .map(|r| {
            let cut = k.min(r.len());
            if cut == 0 {
                0.0
            } else {
                precision_prefix(r, cut)
            }
        })
        .collect();
    100.0 * per.iter().sum::<f64>() / per.len() as f64
}

pub fn hit_rate_at(rankings: &[Vec<bool>], k: usize) -> f64 {
    let hits = rankings.iter().filter(|r| r.iter().take(k).any(|x| *x)).count();
    100.0 * hits as f64 / rankings.len() as f64
}

/// Half-open box `[x0, x1) × [y0, y1)` over a `rows × cols` map.
pub fn split_box(map: &Mat, b: [usize; 4]) -> (Vec<f64>, Vec<f64>) {
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for (y, row) in map.iter().enumerate() {
        for (x, v) in row.iter().enumerate() {
            if x >= b[0] && x < b[2] && y >= b[1] && y < b[3] {
                inside.push(*v);
            } else {
                outside.push(*v);
            }
        }
    }
    (inside, outside)
}

pub fn cnr(map: &Mat, b: [usize; 4], eps: f64) -> f64 {
    let (inside, outside) = split_box(map, b);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let var = |xs: &[f64]| {
        let m = mean(xs);
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
    };
    (mean(&inside) - mean(&outside)).abs() / (var(&inside) + var(&outside) + eps).sqrt()
}

/// IoU between `normalized(map) ≥ t` and the box, by pixel enumeration.
pub fn iou(map: &Mat, b: [usize; 4], t: f64) -> f64 {
    let lo = map.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut inter, mut union) = (0, 0);
    for (y, row) in map.iter().enumerate() {
        for (x, v) in row.iter().enumerate() {
            let norm = if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };
            let m = norm >= t;
            let inb = x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
            if m && inb {
                inter += 1;
            }
            if m || inb {
                union += 1;
            }
        }
    }
    inter as f64 / union as f64
}

/// Stable full sort by score descending, then id ascending.
pub fn full_sort(ids: &[String], scores: &[f64]) -> Vec<String> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    order.into_iter().map(|i| ids[i].clone()).collect()
}
