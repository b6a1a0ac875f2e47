//! Overlap, boundary and ranking metrics plus the paired significance test.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datamodel::{MaskGrid, Spacing};
use crate::error::{Error, Result};

/// Probability maps are binarized with `p >= 0.5` before Dice and HD95.
pub const BINARIZE_THRESHOLD: f32 = 0.5;

/// Empty-vs-empty scores 1.
pub fn dice_score(pred: &MaskGrid, target: &MaskGrid) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(target.data().iter()) {
        inter += usize::from(p & g);
        total += usize::from(p) + usize::from(g);
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Foreground pixels with a background 4-neighbour or touching the image edge.
pub fn boundary(mask: &MaskGrid) -> Array2<bool> {
    let m = mask.data();
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        if m[[i, j]] == 0 {
            return false;
        }
        if i == 0 || j == 0 || i + 1 == h || j + 1 == w {
            return true;
        }
        m[[i - 1, j]] == 0 || m[[i + 1, j]] == 0 || m[[i, j - 1]] == 0 || m[[i, j + 1]] == 0
    })
}

/// Exact 1D squared distance transform with sample positions `k·step`
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |k: usize| k as f64 * step;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
                    if s <= *z.last().expect("envelope boundaries track vertices") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared physical distance from every pixel to the nearest `true` site.
pub fn squared_distance_to(sites: &Array2<bool>, spacing_hw: (f64, f64)) -> Array2<f64> {
    let (h, w) = sites.dim();
    let mut g = sites.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut buf_in = vec![0.0; h.max(w)];
    let mut buf_out = vec![0.0; h.max(w)];
    for i in 0..h {
        buf_in[..w].iter_mut().zip(g.row(i)).for_each(|(b, &x)| *b = x);
        edt_1d(&buf_in[..w], spacing_hw.1, &mut buf_out[..w], &mut v, &mut z);
        g.row_mut(i).iter_mut().zip(&buf_out[..w]).for_each(|(x, &b)| *x = b);
    }
    for j in 0..w {
        buf_in[..h].iter_mut().zip(g.column(j)).for_each(|(b, &x)| *b = x);
        edt_1d(&buf_in[..h], spacing_hw.0, &mut buf_out[..h], &mut v, &mut z);
        g.column_mut(j).iter_mut().zip(&buf_out[..h]).for_each(|(x, &b)| *x = b);
    }
    g
}

/// Linear-interpolated percentile `q ∈ [0, 100]` of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

/// 95th percentile of the symmetric boundary-to-boundary distances, in mm.
/// Both empty gives 0; exactly one empty gives the image's physical diagonal.
pub fn hd95(pred: &MaskGrid, target: &MaskGrid, spacing_hw: (f64, f64)) -> f64 {
    let (h, w) = pred.dims();
    let (np, ng) = (pred.count(), target.count());
    if np == 0 && ng == 0 {
        return 0.0;
    }
    if np == 0 || ng == 0 {
        return (((h - 1) as f64 * spacing_hw.0).powi(2) + ((w - 1) as f64 * spacing_hw.1).powi(2)).sqrt();
    }
    let (bp, bg) = (boundary(pred), boundary(target));
    let (dp, dg) = (squared_distance_to(&bp, spacing_hw), squared_distance_to(&bg, spacing_hw));
    let mut dists: Vec<f64> = Vec::new();
    for ((&on_p, &on_g), (&to_p, &to_g)) in bp.iter().zip(bg.iter()).zip(dp.iter().zip(dg.iter())) {
        if on_p {
            dists.push(to_g.sqrt());
        }
        if on_g {
            dists.push(to_p.sqrt());
        }
    }
    percentile(&mut dists, 95.0)
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch { what: "scores vs labels".into(), expected: vec![labels.len()], found: vec![scores.len()] });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    Ok(())
}

/// Indices sorted by score, and the contiguous runs of equal scores.
fn tie_groups(scores: &[f64], descending: bool) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let o = scores[a].total_cmp(&scores[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    let mut groups = Vec::new();
    let mut start = 0;
    for k in 1..=idx.len() {
        if k == idx.len() || scores[idx[k]] != scores[idx[start]] {
            groups.push((start, k));
            start = k;
        }
    }
    (idx, groups)
}

/// Mann-Whitney form: P(pos > neg) + ½P(tie).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both positive and negative labels".into()));
    }
    let (idx, groups) = tie_groups(scores, false);
    let mut rank_sum = 0.0;
    for (a, b) in groups {
        let midrank = (a + b + 1) as f64 / 2.0;
        rank_sum += midrank * idx[a..b].iter().filter(|&&i| labels[i]).count() as f64;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision with tied scores forming a single operating point.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUPR needs at least one positive label".into()));
    }
    let (idx, groups) = tie_groups(scores, true);
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for (a, b) in groups {
        let pos = idx[a..b].iter().filter(|&&i| labels[i]).count();
        tp += pos;
        seen += b - a;
        ap += (tp as f64 / seen as f64) * (pos as f64 / n_pos as f64);
    }
    Ok(ap)
}

/// Per-sample scores of two methods aligned by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedScores {
    ids: Vec<String>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl PairedScores {
    pub fn new(ids: Vec<String>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if ids.len() != a.len() || a.len() != b.len() {
            return Err(Error::ShapeMismatch { what: "paired scores".into(), expected: vec![ids.len(); 2], found: vec![a.len(), b.len()] });
        }
        Ok(Self { ids, a, b })
    }

    /// Pairs two keyed score maps on their common ids, in id order.
    pub fn align(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<Self> {
        if a.keys().ne(b.keys()) {
            return Err(Error::InvalidArgument("paired scores cover different sample ids".into()));
        }
        Ok(Self { ids: a.keys().cloned().collect(), a: a.values().copied().collect(), b: b.values().copied().collect() })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self { ids: self.ids.clone(), a: self.b.clone(), b: self.a.clone() }
    }
}

pub const WILCOXON_EXACT_MAX_N: usize = 20;

fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Two-sided Wilcoxon signed-rank p-value. Zero differences are dropped,
/// ties get midranks; exact null distribution up to 20 non-zero pairs,
/// tie-corrected normal approximation above.
pub fn wilcoxon_signed_rank(pairs: &PairedScores) -> f64 {
    let diffs: Vec<f64> = pairs.a.iter().zip(&pairs.b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return 1.0;
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (idx, groups) = tie_groups(&abs, false);
    // doubled midranks are integers
    let mut rank2 = vec![0usize; n];
    let mut tie_term = 0.0;
    for &(a, b) in &groups {
        let t = (b - a) as f64;
        tie_term += t * t * t - t;
        for &i in &idx[a..b] {
            rank2[i] = a + b + 1;
        }
    }
    let w2: usize = rank2.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    if n <= WILCOXON_EXACT_MAX_N {
        let total: usize = rank2.iter().sum();
        let mut counts = vec![0f64; total + 1];
        counts[0] = 1.0;
        for &r in &rank2 {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
        return (2.0 * lower.min(upper)).min(1.0);
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w2 as f64 / 2.0 - mean) / var.sqrt();
    (2.0 * standard_normal_cdf(-z.abs())).min(1.0)
}

/// How AUROC/AUPR aggregate over a set of samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankPooling {
    /// One curve over every pixel of the set.
    #[default]
    Pooled,
    /// Mean of per-sample curves, skipping samples where the metric is undefined.
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sample_ids: Vec<String>,
    pub dice: Vec<f64>,
    pub hd95: Vec<f64>,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub hd95_mean: f64,
    pub hd95_std: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub n_samples: usize,
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// One evaluated sample: probability map, reference mask and pixel spacing.
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub prob: &'a Array2<f32>,
    pub target: &'a MaskGrid,
    pub spacing: Spacing,
}

impl MetricsReport {
    pub fn evaluate(items: &[EvalItem<'_>], pooling: RankPooling) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("no samples to evaluate".into()));
        }
        let (mut ids, mut dice, mut hd) = (Vec::new(), Vec::new(), Vec::new());
        for it in items {
            if it.prob.dim() != it.target.dims() {
                let (ph, pw) = it.prob.dim();
                let (th, tw) = it.target.dims();
                return Err(Error::ShapeMismatch { what: format!("prediction for {}", it.id), expected: vec![th, tw], found: vec![ph, pw] });
            }
            let bin = MaskGrid::from_probabilities(it.prob, BINARIZE_THRESHOLD);
            ids.push(it.id.to_string());
            dice.push(dice_score(&bin, it.target));
            hd.push(hd95(&bin, it.target, (it.spacing.h, it.spacing.w)));
        }
        let flat = |it: &EvalItem<'_>| -> (Vec<f64>, Vec<bool>) {
            (it.prob.iter().map(|&p| f64::from(p)).collect(), it.target.data().iter().map(|&g| g == 1).collect())
        };
        let (auroc_v, aupr_v) = match pooling {
            RankPooling::Pooled => {
                let (mut s, mut l) = (Vec::new(), Vec::new());
                for it in items {
                    let (a, b) = flat(it);
                    s.extend(a);
                    l.extend(b);
                }
                (auroc(&s, &l)?, aupr(&s, &l)?)
            }
            RankPooling::PerSample => {
                let (mut ra, mut rp) = (Vec::new(), Vec::new());
                for it in items {
                    let (s, l) = flat(it);
                    if let Ok(v) = auroc(&s, &l) {
                        ra.push(v);
                    }
                    if let Ok(v) = aupr(&s, &l) {
                        rp.push(v);
                    }
                }
                if ra.is_empty() || rp.is_empty() {
                    return Err(Error::UndefinedMetric("no sample has both classes".into()));
                }
                (mean_std(&ra).0, mean_std(&rp).0)
            }
        };
        let (dice_mean, dice_std) = mean_std(&dice);
        let (hd95_mean, hd95_std) = mean_std(&hd);
        Ok(Self { sample_ids: ids, n_samples: dice.len(), dice, hd95: hd, dice_mean, dice_std, hd95_mean, hd95_std, auroc: auroc_v, aupr: aupr_v })
    }

    pub fn per_sample_dice(&self) -> BTreeMap<String, f64> {
        self.sample_ids.iter().cloned().zip(self.dice.iter().copied()).collect()
    }

    /// `key=value` lines: n_samples, dice_mean, dice_std, hd95_mean,
    /// hd95_std, auroc, aupr, then `dice.<id>` and `hd95.<id>` per sample.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_samples={}", self.n_samples);
        for (k, v) in [
            ("dice_mean", self.dice_mean),
            ("dice_std", self.dice_std),
            ("hd95_mean", self.hd95_mean),
            ("hd95_std", self.hd95_std),
            ("auroc", self.auroc),
            ("aupr", self.aupr),
        ] {
            let _ = writeln!(s, "{k}={v:?}");
        }
        for (id, d) in self.sample_ids.iter().zip(&self.dice) {
            let _ = writeln!(s, "dice.{id}={d:?}");
        }
        for (id, h) in self.sample_ids.iter().zip(&self.hd95) {
            let _ = writeln!(s, "hd95.{id}={h:?}");
        }
        s
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        let mut dice = Vec::new();
        let mut hd = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("malformed metrics line `{line}`")))?;
            let parsed: f64 = v.trim().parse().map_err(|_| Error::InvalidArgument(format!("non-numeric value in `{line}`")))?;
            if let Some(id) = k.strip_prefix("dice.") {
                dice.push((id.to_string(), parsed));
            } else if let Some(id) = k.strip_prefix("hd95.") {
                hd.insert(id.to_string(), parsed);
            } else {
                kv.insert(k.to_string(), parsed);
            }
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::InvalidArgument(format!("metrics record lacks `{k}`")));
        let sample_ids: Vec<String> = dice.iter().map(|(id, _)| id.clone()).collect();
        let hd95 = sample_ids
            .iter()
            .map(|id| hd.get(id).copied().ok_or_else(|| Error::InvalidArgument(format!("metrics record lacks `hd95.{id}`"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_samples: get("n_samples")? as usize,
            dice_mean: get("dice_mean")?,
            dice_std: get("dice_std")?,
            hd95_mean: get("hd95_mean")?,
            hd95_std: get("hd95_std")?,
            auroc: get("auroc")?,
            aupr: get("aupr")?,
            dice: dice.into_iter().map(|(_, v)| v).collect(),
            hd95,
            sample_ids,
        })
    }
}
