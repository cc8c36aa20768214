//! Word-level precision/recall/F0.5, threshold sweeps and the speaker
//! statistics suite (RP rates, W1/KS distances, k-means, chi-squared).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// `(1 + 0.5^2) P R / (0.5^2 P + R)`, zero when both inputs are zero.
pub fn f_beta_half(precision: f64, recall: f64) -> f64 {
    let denom = 0.25 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        1.25 * precision * recall / denom
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_half: f64,
}

impl EvalReport {
    pub fn from_counts(threshold: f64, tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        let precision = ratio(tp, fp);
        let recall = ratio(tp, fn_);
        EvalReport { threshold, tp, fp, fn_, precision, recall, f_half: f_beta_half(precision, recall) }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "threshold {:>5.3}  P {:.4}  R {:.4}  F0.5 {:.4}  (tp {} fp {} fn {})",
            self.threshold, self.precision, self.recall, self.f_half, self.tp, self.fp, self.fn_
        )
    }
}

/// Counts over positions with `mask` set; a position is predicted positive
/// when its probability exceeds the threshold.
pub fn evaluate(probs: &[f64], mask: &[bool], labels: &[bool], threshold: f64) -> EvalReport {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for ((&p, &m), &y) in probs.iter().zip(mask).zip(labels) {
        if !m {
            continue;
        }
        match (p > threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    EvalReport::from_counts(threshold, tp, fp, fn_)
}

/// Thresholds `0, step, 2 step, ..., 1`.
pub fn threshold_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round().max(1.0) as usize;
    (0..=n).map(|k| k as f64 / n as f64).collect()
}

/// Best F0.5 over the grid; ties go to the smallest threshold.
pub fn sweep_threshold(probs: &[f64], mask: &[bool], labels: &[bool], step: f64) -> EvalReport {
    // Sort the evaluated scores once and sweep with two pointers.
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for ((&p, &m), &y) in probs.iter().zip(mask).zip(labels) {
        if m {
            if y {
                pos.push(p)
            } else {
                neg.push(p)
            }
        }
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let (mut ip, mut ineg) = (0, 0);
    let mut best: Option<EvalReport> = None;
    for t in threshold_grid(step) {
        while ip < pos.len() && pos[ip] <= t {
            ip += 1;
        }
        while ineg < neg.len() && neg[ineg] <= t {
            ineg += 1;
        }
        let r = EvalReport::from_counts(t, pos.len() - ip, neg.len() - ineg, ip);
        if best.is_none_or(|b| r.f_half > b.f_half) {
            best = Some(r);
        }
    }
    best.expect("grid is never empty")
}

// ---------------------------------------------------------------------------
// RP statistics

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpeakerRpStats {
    pub n_rp: usize,
    pub total_s: f64,
    pub f_rp_hz: f64,
    /// Absent for speakers without any RP.
    pub mean_t_rp_s: Option<f64>,
}

pub fn rp_stats(utterances: &[Utterance]) -> BTreeMap<u32, SpeakerRpStats> {
    let mut acc: BTreeMap<u32, (usize, f64, f64)> = BTreeMap::new();
    for u in utterances {
        let e = acc.entry(u.speaker_id).or_default();
        e.1 += u.total_duration_s;
        for (&rp, &ms) in u.rp_label.iter().zip(&u.boundary_pause_ms) {
            if rp {
                e.0 += 1;
                e.2 += ms / 1000.0;
            }
        }
    }
    acc.into_iter()
        .map(|(spk, (n, secs, rp_secs))| {
            let f = if secs > 0.0 { n as f64 / secs } else { 0.0 };
            (spk, SpeakerRpStats { n_rp: n, total_s: secs, f_rp_hz: f, mean_t_rp_s: (n > 0).then(|| rp_secs / n as f64) })
        })
        .collect()
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Fraction of `sorted` that is `<= x`.
fn ecdf(sorted: &[f64], x: f64) -> f64 {
    sorted.partition_point(|&v| v <= x) as f64 / sorted.len() as f64
}

fn check_samples(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite sample".into()));
    }
    Ok(())
}

/// 1-Wasserstein distance `integral |F_a - F_b| dx` between empirical
/// distributions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    check_samples(a, b)?;
    let (sa, sb) = (sorted(a), sorted(b));
    let mut pts: Vec<f64> = sa.iter().chain(&sb).copied().collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    Ok(pts.windows(2).map(|w| (ecdf(&sa, w[0]) - ecdf(&sb, w[0])).abs() * (w[1] - w[0])).sum())
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    check_samples(a, b)?;
    let (sa, sb) = (sorted(a), sorted(b));
    Ok(sa.iter().chain(&sb).map(|&x| (ecdf(&sa, x) - ecdf(&sb, x)).abs()).fold(0.0, f64::max))
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

// ---------------------------------------------------------------------------
// k-means

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached. An emptied cluster is reseeded with
/// the point farthest from its current centroid.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, stream: Stream, max_iters: usize) -> Result<KMeans> {
    if k == 0 || k > vectors.len() {
        return Err(Error::InvalidArgument(format!("k = {k} with {} points", vectors.len())));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("k-means vectors differ in dimension".into()));
    }
    let mut rng = stream.rng();
    let mut centroids = vec![vectors[rng.random_range(0..vectors.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = vectors.iter().map(|v| nearest(v, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let next = if total == 0.0 {
            rng.random_range(0..vectors.len())
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut pick = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        };
        centroids.push(vectors[next].clone());
    }

    let mut assignments = vec![usize::MAX; vectors.len()];
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, v) in vectors.iter().enumerate() {
            let (j, d) = nearest(v, &centroids);
            inertia += d;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &j) in vectors.iter().zip(&assignments) {
            counts[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(v) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..vectors.len())
                    .max_by(|&a, &b| {
                        sq_dist(&vectors[a], &centroids[assignments[a]])
                            .total_cmp(&sq_dist(&vectors[b], &centroids[assignments[b]]))
                    })
                    .unwrap();
                centroids[j] = vectors[far].clone();
                assignments[far] = j;
            }
        }
    }
    let inertia = vectors.iter().zip(&assignments).map(|(v, &j)| sq_dist(v, &centroids[j])).sum();
    Ok(KMeans { assignments, centroids, inertia, history })
}

// ---------------------------------------------------------------------------
// Chi-squared test

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContingencyTable {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ContingencyTable {
    pub fn new(counts: Vec<Vec<u64>>) -> Self {
        let r = counts.len();
        let c = counts.first().map_or(0, Vec::len);
        ContingencyTable {
            row_labels: (0..r).map(|i| i.to_string()).collect(),
            col_labels: (0..c).map(|j| j.to_string()).collect(),
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Removes rows and columns whose marginal is zero.
    pub fn drop_empty(&self) -> Self {
        let keep_r: Vec<usize> = (0..self.counts.len()).filter(|&i| self.counts[i].iter().sum::<u64>() > 0).collect();
        let ncols = self.col_labels.len();
        let keep_c: Vec<usize> = (0..ncols).filter(|&j| self.counts.iter().map(|r| r[j]).sum::<u64>() > 0).collect();
        ContingencyTable {
            row_labels: keep_r.iter().map(|&i| self.row_labels[i].clone()).collect(),
            col_labels: keep_c.iter().map(|&j| self.col_labels[j].clone()).collect(),
            counts: keep_r.iter().map(|&i| keep_c.iter().map(|&j| self.counts[i][j]).collect()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChiSquared {
    pub chi2: f64,
    pub df: usize,
    pub p: f64,
    pub cramers_v: f64,
    /// Some expected count is below 5.
    pub sparse: bool,
}

/// Pearson chi-squared test of independence without continuity correction.
pub fn chi_squared(table: &ContingencyTable) -> Result<ChiSquared> {
    let r = table.counts.len();
    let c = table.counts.first().map_or(0, Vec::len);
    if r < 2 || c < 2 || table.counts.iter().any(|row| row.len() != c) {
        return Err(Error::InvalidArgument(format!("contingency table must be at least 2x2 and rectangular, got {r} rows")));
    }
    let rows: Vec<f64> = table.counts.iter().map(|row| row.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..c).map(|j| table.counts.iter().map(|row| row[j]).sum::<u64>() as f64).collect();
    if rows.iter().chain(&cols).any(|&m| m == 0.0) {
        return Err(Error::InvalidArgument("contingency table has a zero marginal".into()));
    }
    let n: f64 = rows.iter().sum();
    let mut chi2 = 0.0;
    let mut sparse = false;
    for i in 0..r {
        for j in 0..c {
            let e = rows[i] * cols[j] / n;
            sparse |= e < 5.0;
            let d = table.counts[i][j] as f64 - e;
            chi2 += d * d / e;
        }
    }
    let df = (r - 1) * (c - 1);
    let p = regularized_gamma_q(df as f64 / 2.0, chi2 / 2.0);
    let v = (chi2 / (n * (r.min(c) - 1) as f64)).sqrt().min(1.0);
    Ok(ChiSquared { chi2, df, p, cramers_v: v, sparse })
}

/// `ln Gamma(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Upper regularized incomplete gamma `Q(a, x)`; the series for `P` below
/// `x < a + 1`, a Lentz continued fraction above.
pub fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let front = (-x + a * x.ln() - ln_gamma(a)).exp();
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..1000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (1.0 - sum * front).clamp(0.0, 1.0)
    } else {
        const TINY: f64 = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (front * h).clamp(0.0, 1.0)
    }
}

// ---------------------------------------------------------------------------
// Characteristic tables

pub const DEGREE_ADVERBS: &[&str] =
    &["a little", "a bit", "slightly", "very", "somewhat", "quite", "rather", "extremely", "fairly"];
pub const GENDER_CLASSES: &[&str] = &["feminine", "masculine", "gender-neutral", "unlabeled"];
pub const AGE_CLASSES: &[&str] = &["young", "adult-like", "middle-aged", "old", "unlabeled"];

/// Lowercases a prompt and removes degree adverbs.
pub fn strip_degree_adverbs(prompt: &str) -> String {
    let mut s = format!(" {} ", prompt.trim().to_lowercase());
    for adv in DEGREE_ADVERBS {
        let pat = format!(" {adv} ");
        while s.contains(&pat) {
            s = s.replace(&pat, " ");
        }
    }
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn class_of(prompts: &[String], classes: &[&str]) -> usize {
    prompts
        .iter()
        .find_map(|p| classes[..classes.len() - 1].iter().position(|c| p == c))
        .unwrap_or(classes.len() - 1)
}

/// Reads `speaker_id,prompt1|prompt2|...` lines; a non-numeric first field on
/// the first line is treated as a header.
pub fn parse_annotations<R: BufRead>(r: R) -> Result<BTreeMap<u32, Vec<String>>> {
    let mut out = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, prompts) = line.split_once(',').unwrap_or((line.as_str(), ""));
        let Ok(id) = id.trim().parse::<u32>() else {
            if i == 0 {
                continue;
            }
            return Err(Error::Parse { line: i + 1, msg: format!("bad speaker id {id:?}") });
        };
        let ps = prompts.split('|').map(str::trim).filter(|p| !p.is_empty()).map(String::from).collect();
        out.insert(id, ps);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CharacteristicTables {
    pub tables: Vec<(String, ContingencyTable)>,
    pub skipped: Vec<String>,
}

/// Cluster-by-characteristic tables: multi-class for gender expression and
/// age, presence/absence for every other stripped prompt.
pub fn build_characteristic_tables(
    assignments: &BTreeMap<u32, usize>,
    annotations: &BTreeMap<u32, Vec<String>>,
) -> CharacteristicTables {
    let k = assignments.values().copied().max().map_or(0, |m| m + 1);
    let prompts: BTreeMap<u32, Vec<String>> = assignments
        .keys()
        .map(|&s| {
            let ps = annotations.get(&s).map(|v| v.iter().map(|p| strip_degree_adverbs(p)).collect()).unwrap_or_default();
            (s, ps)
        })
        .collect();
    let mut raw: Vec<(String, ContingencyTable)> = Vec::new();
    for (name, classes) in [("gender", GENDER_CLASSES), ("age", AGE_CLASSES)] {
        let mut counts = vec![vec![0u64; classes.len()]; k];
        for (s, &c) in assignments {
            counts[c][class_of(&prompts[s], classes)] += 1;
        }
        raw.push((name.to_string(), labelled(counts, classes.iter().map(|c| c.to_string()).collect())));
    }
    let reserved: BTreeSet<&str> = GENDER_CLASSES.iter().chain(AGE_CLASSES).copied().collect();
    let others: BTreeSet<&String> = prompts.values().flatten().filter(|p| !reserved.contains(p.as_str())).collect();
    for ch in others {
        let mut counts = vec![vec![0u64; 2]; k];
        for (s, &c) in assignments {
            counts[c][usize::from(!prompts[s].contains(ch))] += 1;
        }
        raw.push((ch.clone(), labelled(counts, vec!["present".into(), "absent".into()])));
    }
    let mut tables = Vec::new();
    let mut skipped = Vec::new();
    for (name, t) in raw {
        let t = t.drop_empty();
        if t.counts.len() < 2 || t.col_labels.len() < 2 {
            log::info!("characteristic {name:?} skipped: table degenerates after removing empty marginals");
            skipped.push(name);
        } else {
            tables.push((name, t));
        }
    }
    CharacteristicTables { tables, skipped }
}

fn labelled(counts: Vec<Vec<u64>>, cols: Vec<String>) -> ContingencyTable {
    ContingencyTable {
        row_labels: (0..counts.len()).map(|i| format!("cluster{i}")).collect(),
        col_labels: cols,
        counts,
    }
}

// ---------------------------------------------------------------------------
// Report writers

pub fn write_report_jsonl<W: Write>(mut w: W, name: &str, r: &EvalReport) -> Result<()> {
    let mut v = serde_json::to_value(r)?;
    v["split"] = serde_json::Value::String(name.to_string());
    serde_json::to_writer(&mut w, &v)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_rp_csv<W: Write>(mut w: W, stats: &BTreeMap<u32, SpeakerRpStats>) -> Result<()> {
    writeln!(w, "speaker_id,f_rp_hz,mean_t_rp_s")?;
    for (s, st) in stats {
        let d = st.mean_t_rp_s.map(|d| format!("{d:.6}")).unwrap_or_default();
        writeln!(w, "{s},{:.6},{d}", st.f_rp_hz)?;
    }
    Ok(())
}
