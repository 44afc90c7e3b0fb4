//! Deterministic synthetic corpus standing in for backbone snippet features.
//!
//! Every video gets 1–4 non-overlapping, snippet-aligned instances. The
//! feature map carries the instance layout in two coordinate blocks: an
//! "inside" block that reads +1 within instances and −1 elsewhere, and a
//! boundary block with Gaussian bumps at instance starts and ends. All
//! coordinates receive i.i.d. Gaussian noise of the configured sigma.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{oracle_actionness, ActionnessCurve, FeatureMap, Subset, TemporalSegment, VideoAnnotation};
use crate::error::{Error, Result};

pub const MAX_INSTANCES: usize = 4;
const PLACEMENT_ATTEMPTS: usize = 100;
const DURATION_SECONDS: (u32, u32) = (30, 240);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    /// The last `num_validation` videos form the validation subset.
    pub num_validation: usize,
    pub feature_dim: usize,
    pub temporal_length: usize,
    pub mean_instances_per_video: f64,
    pub duration_range: (f64, f64),
    pub actionness_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_videos: 250,
            num_validation: 50,
            feature_dim: 256,
            temporal_length: 128,
            mean_instances_per_video: 1.5,
            duration_range: (0.06, 0.3),
            actionness_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.duration_range;
        let fail = |msg: String| Err(Error::Config(format!("synthetic spec: {msg}")));
        if !(lo > 0.0 && lo < hi && hi <= 1.0) {
            return fail(format!("duration_range ({lo}, {hi}) must satisfy 0 < low < high <= 1"));
        }
        if self.num_validation > self.num_videos {
            return fail("num_validation exceeds num_videos".into());
        }
        if self.feature_dim < 3 {
            return fail("feature_dim must be at least 3".into());
        }
        if self.temporal_length < 4 {
            return fail("temporal_length must be at least 4".into());
        }
        let (min_n, max_n) = self.width_bounds();
        if min_n > max_n {
            return fail(format!("duration_range ({lo}, {hi}) contains no whole snippet count"));
        }
        if min_n + 2 > self.temporal_length {
            return fail("shortest instance does not fit between the edge margins".into());
        }
        if !(self.mean_instances_per_video > 0.0 && self.mean_instances_per_video.is_finite()) {
            return fail("mean_instances_per_video must be positive".into());
        }
        if !(self.actionness_noise_sigma >= 0.0 && self.actionness_noise_sigma.is_finite()) {
            return fail("actionness_noise_sigma must be nonnegative".into());
        }
        Ok(())
    }

    /// Instance widths in whole snippets.
    fn width_bounds(&self) -> (usize, usize) {
        let t = self.temporal_length as f64;
        let lo = ((self.duration_range.0 * t) - 1e-9).ceil().max(1.0) as usize;
        let hi = ((self.duration_range.1 * t) + 1e-9).floor() as usize;
        (lo, hi)
    }

    pub fn subset_of(&self, index: usize) -> Subset {
        if index < self.num_videos - self.num_validation {
            Subset::Training
        } else {
            Subset::Validation
        }
    }
}

pub fn video_id(index: usize) -> String {
    format!("video_{index:05}")
}

/// Parallel vectors, one entry per video in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub annotations: Vec<VideoAnnotation>,
    pub features: Vec<FeatureMap>,
    pub actionness: Vec<ActionnessCurve>,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }
}

fn video_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Instance count draw: Poisson, clipped to `[1, MAX_INSTANCES]`.
pub fn draw_instance_count(rng: &mut impl Rng, mean: f64) -> usize {
    let poisson = Poisson::new(mean).expect("validated positive mean");
    let k: f64 = poisson.sample(rng);
    (k as usize).clamp(1, MAX_INSTANCES)
}

/// Snippet index ranges `[start, end)` of the instances of one video.
fn place_instances(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, index: usize) -> Result<Vec<(usize, usize)>> {
    let t = spec.temporal_length;
    let (min_n, max_n) = spec.width_bounds();
    let count = draw_instance_count(rng, spec.mean_instances_per_video);
    let (lo, hi) = spec.duration_range;

    for _ in 0..PLACEMENT_ATTEMPTS {
        let widths: Vec<usize> = (0..count)
            .map(|_| {
                let w: f64 = rng.random_range(lo..hi);
                ((w * t as f64).round() as usize).clamp(min_n, max_n)
            })
            .collect();
        // one-snippet margin at both edges and between neighbours
        let needed = widths.iter().sum::<usize>() + 2 + (count - 1);
        if needed > t {
            continue;
        }
        let slack = t - needed;
        let mut cuts: Vec<usize> = (0..count).map(|_| rng.random_range(0..=slack)).collect();
        cuts.sort_unstable();
        let mut spans = Vec::with_capacity(count);
        let mut pos = 1;
        let mut prev_cut = 0;
        for (w, cut) in widths.iter().zip(&cuts) {
            pos += cut - prev_cut;
            prev_cut = *cut;
            spans.push((pos, pos + w));
            pos += w + 1;
        }
        return Ok(spans);
    }
    Err(Error::Generation {
        video_index: index,
        msg: format!("could not place {count} instances without overlap in {PLACEMENT_ATTEMPTS} attempts"),
    })
}

fn generate_video(spec: &SyntheticSpec, index: usize) -> Result<(VideoAnnotation, FeatureMap, ActionnessCurve)> {
    let mut rng = video_rng(spec.seed, index);
    let t = spec.temporal_length;
    let d = spec.feature_dim;
    let spans = place_instances(spec, &mut rng, index)?;
    let duration = rng.random_range(DURATION_SECONDS.0..=DURATION_SECONDS.1) as f64;

    let segments = spans
        .iter()
        .map(|&(a, b)| TemporalSegment::new(a as f64 / t as f64, b as f64 / t as f64))
        .collect::<Result<Vec<_>>>()?;
    let id = video_id(index);

    let inside_block = (d / 8).max(1);
    let bump_block = (d / 16).max(1);
    let start_block = inside_block..(inside_block + bump_block).min(d);
    let end_block = start_block.end..(start_block.end + bump_block).min(d);

    let noise = Normal::new(0.0, spec.actionness_noise_sigma).expect("validated sigma");
    let mut values = vec![0f32; t * d];
    for i in 0..t {
        let center = i as f64 + 0.5;
        let inside = spans.iter().any(|&(a, b)| a <= i && i < b);
        let bump = |edge: usize| (-0.5 * (center - edge as f64).powi(2)).exp();
        let start_bump = spans.iter().map(|&(a, _)| bump(a)).fold(0.0, f64::max);
        let end_bump = spans.iter().map(|&(_, b)| bump(b)).fold(0.0, f64::max);
        let row = &mut values[i * d..(i + 1) * d];
        for (c, v) in row.iter_mut().enumerate() {
            let clean = if c < inside_block {
                if inside {
                    1.0
                } else {
                    -1.0
                }
            } else if start_block.contains(&c) {
                start_bump
            } else if end_block.contains(&c) {
                end_bump
            } else {
                0.0
            };
            let n = if spec.actionness_noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            *v = (clean + n) as f32;
        }
    }

    let annotation = VideoAnnotation {
        video_id: id.clone(),
        duration_seconds: duration,
        subset: spec.subset_of(index),
        segments: segments.clone(),
    };
    let features = FeatureMap::new(id.clone(), t, d, values)?;
    let actionness = ActionnessCurve::new(id, oracle_actionness(&segments, t))?;
    Ok((annotation, features, actionness))
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let videos = (0..spec.num_videos)
        .into_par_iter()
        .map(|i| generate_video(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let mut corpus = SyntheticCorpus {
        annotations: Vec::with_capacity(videos.len()),
        features: Vec::with_capacity(videos.len()),
        actionness: Vec::with_capacity(videos.len()),
    };
    for (a, f, c) in videos {
        corpus.annotations.push(a);
        corpus.features.push(f);
        corpus.actionness.push(c);
    }
    Ok(corpus)
}
