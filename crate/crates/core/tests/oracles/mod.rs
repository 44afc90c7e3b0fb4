//! Independent reference implementations used as test oracles. Nothing
//! here calls into the library beyond its plain data types.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rapnet_core::data::{ProposalRecord, TemporalSegment};

/// IoU by interval arithmetic on the raw endpoints.
pub fn interval_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let inter = if hi > lo { hi - lo } else { 0.0 };
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    inter / union
}

fn ends(s: &TemporalSegment) -> (f64, f64) {
    (s.start(), s.end())
}

pub fn random_segment(rng: &mut impl Rng) -> TemporalSegment {
    loop {
        let a: f64 = rng.random();
        let b: f64 = rng.random();
        if let Ok(s) = TemporalSegment::new(a.min(b), a.max(b)) {
            return s;
        }
    }
}

/// Repeatedly takes the single best remaining (cell, gt) pair by scanning
/// every pair; ties prefer the lower cell, then the lower gt.
pub fn best_first(priors: &[Option<TemporalSegment>], gts: &[TemporalSegment]) -> Vec<(usize, usize)> {
    let mut used_c = vec![false; priors.len()];
    let mut used_g = vec![false; gts.len()];
    let mut out = Vec::new();
    for _ in 0..gts.len().min(priors.len()) {
        let mut best: Option<(f64, usize, usize)> = None;
        for c in 0..priors.len() {
            for g in 0..gts.len() {
                if used_c[c] || used_g[g] {
                    continue;
                }
                let iou = priors[c].map_or(0.0, |p| interval_iou(ends(&p), ends(&gts[g])));
                if best.is_none_or(|(bi, _, _)| iou > bi) {
                    best = Some((iou, c, g));
                }
            }
        }
        let (_, c, g) = best.unwrap();
        used_c[c] = true;
        used_g[g] = true;
        out.push((c, g));
    }
    out
}

fn width_dist(w: f64, c: f64) -> f64 {
    1.0 - w.min(c) / w.max(c)
}

/// Lloyd loop written from the update rule: nearest centroid by scanning,
/// mean of members unless the mean costs more, farthest-point reseed for
/// an empty cluster, stop on stable labels.
pub fn lloyd(widths: &[f64], init: &[f64]) -> Vec<f64> {
    let mut c = init.to_vec();
    let mut labels: Option<Vec<usize>> = None;
    for _ in 0..10_000 {
        let next: Vec<usize> = widths
            .iter()
            .map(|&w| {
                let mut best = 0;
                for j in 1..c.len() {
                    if width_dist(w, c[j]) < width_dist(w, c[best]) {
                        best = j;
                    }
                }
                best
            })
            .collect();
        if labels.as_ref() == Some(&next) {
            break;
        }
        for j in 0..c.len() {
            let mut sum = 0.0;
            let mut n = 0;
            for (w, &l) in widths.iter().zip(&next) {
                if l == j {
                    sum += w;
                    n += 1;
                }
            }
            if n > 0 {
                let mean = sum / n as f64;
                let cost = |x: f64| {
                    widths
                        .iter()
                        .zip(&next)
                        .filter(|(_, &l)| l == j)
                        .map(|(&w, _)| width_dist(w, x))
                        .sum::<f64>()
                };
                if cost(mean) <= cost(c[j]) {
                    c[j] = mean;
                }
            }
        }
        for j in 0..c.len() {
            if !next.contains(&j) {
                let mut far = (widths[0], -1.0);
                for (&w, &l) in widths.iter().zip(&next) {
                    if width_dist(w, c[l]) > far.1 {
                        far = (w, width_dist(w, c[l]));
                    }
                }
                c[j] = far.0;
            }
        }
        labels = Some(next);
    }
    c.sort_by(f64::total_cmp);
    c
}

/// Best prefix/suffix split of sorted widths into two mean-centred clusters.
pub fn two_cluster_split(widths: &[f64]) -> Vec<f64> {
    let mut sorted = widths.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let mut best = (f64::INFINITY, vec![]);
    for cut in 1..sorted.len() {
        let (a, b) = sorted.split_at(cut);
        let (ca, cb) = (mean(a), mean(b));
        let obj = a.iter().map(|&w| width_dist(w, ca)).sum::<f64>() + b.iter().map(|&w| width_dist(w, cb)).sum::<f64>();
        if obj < best.0 {
            best = (obj, vec![ca, cb]);
        }
    }
    best.1
}

/// Gaussian soft-NMS over plain `(start, end, score)` triples, O(n²).
pub fn soft_nms(input: &[(f64, f64, f64)], sigma: f64, floor: f64, max_kept: usize) -> Vec<(f64, f64, f64)> {
    let mut live: Vec<(f64, f64, f64)> = input.iter().copied().filter(|p| p.2 >= floor).collect();
    let mut kept = Vec::new();
    while !live.is_empty() && kept.len() < max_kept {
        let mut b = 0;
        for i in 1..live.len() {
            let (x, y) = (live[i], live[b]);
            let better = x.2 > y.2 || (x.2 == y.2 && (x.0 < y.0 || (x.0 == y.0 && x.1 < y.1)));
            if better {
                b = i;
            }
        }
        let top = live.remove(b);
        for p in live.iter_mut() {
            let iou = interval_iou((top.0, top.1), (p.0, p.1));
            p.2 *= (-(iou * iou) / sigma).exp();
        }
        live.retain(|p| p.2 >= floor);
        kept.push(top);
    }
    kept.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.total_cmp(&y.0)).then(x.1.total_cmp(&y.1)));
    kept
}

/// Proposals of one video as `(start, end)` in rank order.
fn ranked(props: Option<&Vec<ProposalRecord>>) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64, f64)> = props
        .map(|p| p.iter().map(|r| (r.segment.start(), r.segment.end(), r.score)).collect())
        .unwrap_or_default();
    v.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.total_cmp(&y.0)).then(x.1.total_cmp(&y.1)));
    v.into_iter().map(|x| (x.0, x.1)).collect()
}

/// Recall by checking every (gt, top-an proposal) pair.
pub fn recall(props: &BTreeMap<String, Vec<ProposalRecord>>, gts: &BTreeMap<String, Vec<TemporalSegment>>, tiou: f64, an: usize) -> f64 {
    let mut total = 0usize;
    let mut hit = 0usize;
    for (vid, segs) in gts {
        let r = ranked(props.get(vid));
        for g in segs {
            total += 1;
            let mut found = false;
            for (i, p) in r.iter().enumerate() {
                if i < an && interval_iou(*p, ends(g)) >= tiou {
                    found = true;
                }
            }
            if found {
                hit += 1;
            }
        }
    }
    hit as f64 / total as f64
}

pub fn ar_curve(
    props: &BTreeMap<String, Vec<ProposalRecord>>,
    gts: &BTreeMap<String, Vec<TemporalSegment>>,
    grid: &[f64],
    max_an: usize,
) -> Vec<f64> {
    (1..=max_an)
        .map(|an| {
            let mut s = 0.0;
            for &t in grid {
                s += recall(props, gts, t, an);
            }
            s / grid.len() as f64
        })
        .collect()
}

/// Trapezoid rule over unit AN steps, as a percentage of the span.
pub fn auc(ar: &[f64]) -> f64 {
    let mut area = 0.0;
    for i in 0..ar.len() - 1 {
        area += 1.0 * (ar[i] + ar[i + 1]) / 2.0;
    }
    area / (ar.len() - 1) as f64 * 100.0
}
