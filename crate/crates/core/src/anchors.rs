//! Anchor widths from 1-D K-means under the co-centered IoU distance, and
//! their assignment to pyramid levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `1 − min/max`: one minus the IoU of two segments sharing a center.
pub fn width_distance(w: f64, c: f64) -> f64 {
    1.0 - w.min(c) / w.max(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Ascending centroid widths.
    pub centroids: Vec<f64>,
    /// Objective after each assignment step, starting with the initial one.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn canonical_widths(widths: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Clustering("K must be at least 1".into()));
    }
    if let Some(w) = widths.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::Clustering(format!("width {w} is not positive")));
    }
    let mut sorted = widths.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Clustering(format!(
            "need at least {k} distinct widths, got {}",
            distinct.len()
        )));
    }
    Ok(sorted)
}

/// k-means++ seeding: the first centroid uniformly, each further one with
/// probability proportional to the squared distance to its nearest chosen
/// centroid. Input is sorted first, so the result ignores input order.
pub fn kmeans_init(widths: &[f64], k: usize, seed: u64) -> Result<Vec<f64>> {
    let sorted = canonical_widths(widths, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![sorted[rng.random_range(0..sorted.len())]];
    while centroids.len() < k {
        let weights: Vec<f64> = sorted
            .iter()
            .map(|&w| {
                let d = centroids
                    .iter()
                    .map(|&c| width_distance(w, c))
                    .fold(f64::INFINITY, f64::min);
                d * d
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut target = rng.random_range(0.0..total);
        let mut pick = weights.iter().rposition(|&w| w > 0.0).expect("distinct widths remain");
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        centroids.push(sorted[pick]);
    }
    Ok(centroids)
}

fn nearest(w: f64, centroids: &[f64]) -> (usize, f64) {
    let mut best = (0, width_distance(w, centroids[0]));
    for (j, &c) in centroids.iter().enumerate().skip(1) {
        let d = width_distance(w, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd iterations from given initial centroids.
///
/// Each round assigns every width to its nearest centroid, then moves each
/// centroid to the arithmetic mean of its members. A move is skipped when
/// the mean would raise that cluster's summed distance, which keeps the
/// objective non-increasing under the non-Euclidean distance. An empty
/// cluster is reseeded at the width farthest from its current centroid.
pub fn lloyd(widths: &[f64], init: &[f64], max_iter: usize) -> Result<KMeansResult> {
    let k = init.len();
    let sorted = canonical_widths(widths, k)?;
    let mut centroids = init.to_vec();
    let mut assignment: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    loop {
        let assigned: Vec<(usize, f64)> = sorted.iter().map(|&w| nearest(w, &centroids)).collect();
        let labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let objective: f64 = assigned.iter().map(|a| a.1).sum();
        if let Some(&prev) = trace.last() {
            debug_assert!(objective <= prev + 1e-12, "objective rose from {prev} to {objective}");
        }
        trace.push(objective);
        if labels == assignment {
            converged = true;
            break;
        }
        assignment = labels;
        if iterations == max_iter {
            break;
        }
        iterations += 1;

        for (j, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<f64> = sorted
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == j)
                .map(|(&w, _)| w)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            let cost = |c: f64| members.iter().map(|&w| width_distance(w, c)).sum::<f64>();
            if cost(mean) <= cost(*centroid) {
                *centroid = mean;
            }
        }

        for j in 0..k {
            if assignment.contains(&j) {
                continue;
            }
            let far = sorted
                .iter()
                .zip(&assignment)
                .map(|(&w, &a)| (w, width_distance(w, centroids[a])))
                .fold((sorted[0], f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            centroids[j] = far.0;
        }
    }

    centroids.sort_by(f64::total_cmp);
    Ok(KMeansResult {
        centroids,
        objective_trace: trace,
        iterations,
        converged,
    })
}

pub fn kmeans_anchors(widths: &[f64], k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let init = kmeans_init(widths, k, seed)?;
    lloyd(widths, &init, max_iter)
}

/// Anchor widths per pyramid level; level 0 is the finest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AnchorSetRepr", into = "AnchorSetRepr")]
pub struct AnchorSet {
    levels: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct AnchorSetRepr {
    k: usize,
    levels: Vec<Vec<f64>>,
}

impl TryFrom<AnchorSetRepr> for AnchorSet {
    type Error = Error;

    fn try_from(r: AnchorSetRepr) -> Result<Self> {
        let set = AnchorSet::new(r.levels)?;
        if set.total() != r.k {
            return Err(Error::Config(format!("k = {} but levels hold {} anchors", r.k, set.total())));
        }
        Ok(set)
    }
}

impl From<AnchorSet> for AnchorSetRepr {
    fn from(a: AnchorSet) -> Self {
        AnchorSetRepr {
            k: a.total(),
            levels: a.levels,
        }
    }
}

impl AnchorSet {
    pub fn new(levels: Vec<Vec<f64>>) -> Result<Self> {
        let m = levels.first().map_or(0, Vec::len);
        if m == 0 || levels.iter().any(|l| l.len() != m) {
            return Err(Error::Config("every level needs the same positive anchor count".into()));
        }
        let flat: Vec<f64> = levels.concat();
        if flat.iter().any(|w| !(*w > 0.0 && *w <= 1.0)) {
            return Err(Error::Config("anchor widths must lie in (0, 1]".into()));
        }
        if flat.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config("anchor widths must be strictly increasing".into()));
        }
        Ok(AnchorSet { levels })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn per_level(&self) -> usize {
        self.levels[0].len()
    }

    pub fn total(&self) -> usize {
        self.levels.len() * self.per_level()
    }

    pub fn width(&self, level: usize, anchor: usize) -> f64 {
        self.levels[level][anchor]
    }

    pub fn level(&self, level: usize) -> &[f64] {
        &self.levels[level]
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }
}

/// Chunks ascending widths into `n` consecutive groups, smallest first.
pub fn assign_anchors_to_levels(sorted_widths: &[f64], n: usize) -> Result<AnchorSet> {
    let k = sorted_widths.len();
    if n == 0 || k % n != 0 || k == 0 {
        return Err(Error::contract(
            "assign_anchors_to_levels",
            format!("{k} anchors cannot be split evenly over {n} levels"),
        ));
    }
    let m = k / n;
    AnchorSet::new(sorted_widths.chunks(m).map(<[f64]>::to_vec).collect())
}
