//! Synthetic continuous "signing" videos with exact annotations.
//!
//! A sign is a colored square crossing the frame. Its hue and drift
//! direction are both set by a pattern parameter `p = c / C` for class `c`,
//! and it wobbles perpendicular to the drift twice per sign. Distractors are
//! drawn with held-out parameters `p = (k + 1/2) / C`, halfway between two
//! vocabulary classes. Every instance perturbs its parameter by Gaussian
//! jitter, and a fraction of signs are sloppy productions shifted most of
//! the way toward a distractor, so some true signs look like near misses.
//! Frames outside any segment hold only Gaussian noise.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metric::SignInterval;
use crate::sampler::AnnotationTrack;
use crate::video::VideoFrames;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_videos: usize,
    pub video_len: usize,
    pub height: usize,
    pub width: usize,
    pub signs_per_video: usize,
    pub min_sign_len: usize,
    pub max_sign_len: usize,
    /// Minimum number of still frames between segments.
    pub min_gap: usize,
    /// Fraction of moving segments that are out of vocabulary.
    pub distractor_rate: f64,
    /// Standard deviation of the per-instance pattern offset, in units of
    /// the spacing `1 / C` between classes.
    pub pattern_jitter: f64,
    /// Fraction of signs rendered with a parameter offset of
    /// `sloppy_offset / C` toward a random neighbour.
    pub sloppy_rate: f64,
    pub sloppy_offset: f64,
    pub noise_level: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 8,
            num_videos: 20,
            video_len: 600,
            height: 32,
            width: 32,
            signs_per_video: 16,
            min_sign_len: 12,
            max_sign_len: 24,
            min_gap: 4,
            distractor_rate: 0.2,
            pattern_jitter: 0.05,
            sloppy_rate: 0.15,
            sloppy_offset: 0.35,
            noise_level: 0.1,
            fps: 25.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Distractor segments per video: `round(signs * rate / (1 - rate))`.
    pub fn distractors_per_video(&self) -> usize {
        (self.signs_per_video as f64 * self.distractor_rate / (1.0 - self.distractor_rate)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_videos == 0 || self.video_len == 0 {
            return fail("num_classes, num_videos and video_len must be positive".into());
        }
        if self.height < 4 || self.width < 4 {
            return fail(format!("frames of {}x{} are too small", self.height, self.width));
        }
        if self.min_sign_len == 0 || self.min_sign_len > self.max_sign_len {
            return fail(format!("sign length range [{}, {}] is empty", self.min_sign_len, self.max_sign_len));
        }
        if !(0.0..1.0).contains(&self.distractor_rate) {
            return fail(format!("distractor_rate {} outside [0, 1)", self.distractor_rate));
        }
        if !(0.0..=1.0).contains(&self.sloppy_rate) || !(0.0..0.5).contains(&self.sloppy_offset) {
            return fail(format!(
                "sloppy_rate {} must lie in [0, 1] and sloppy_offset {} in [0, 0.5)",
                self.sloppy_rate, self.sloppy_offset
            ));
        }
        let finite_non_negative = |v: f64| v >= 0.0 && v.is_finite();
        if !finite_non_negative(self.noise_level) || !finite_non_negative(self.pattern_jitter) || !(self.fps > 0.0) {
            return fail("noise_level and pattern_jitter must be non-negative and fps positive".into());
        }
        let n = self.signs_per_video + self.distractors_per_video();
        let needed = n * self.max_sign_len + (n + 1) * self.min_gap;
        if needed > self.video_len {
            return fail(format!(
                "{n} segments of up to {} frames with gaps of {} need {needed} frames, video has {}",
                self.max_sign_len, self.min_gap, self.video_len
            ));
        }
        Ok(())
    }
}

/// A generated set plus the distractor segments, whose `class_id` is the
/// held-out pattern index `k`.
#[derive(Clone, Debug)]
pub struct SynthSet {
    pub dataset: Dataset,
    pub distractors: Vec<Vec<SignInterval>>,
}

/// Pattern parameter of vocabulary class `c`.
pub fn class_pattern(c: usize, num_classes: usize) -> f64 {
    c as f64 / num_classes as f64
}

/// Pattern parameter of held-out pattern `k`.
pub fn distractor_pattern(k: usize, num_classes: usize) -> f64 {
    (k as f64 + 0.5) / num_classes as f64
}

/// RGB in `[-0.9, 0.9]` for pattern `p`.
pub fn pattern_color(p: f64) -> [f32; 3] {
    let h = 2.0 * PI * p;
    [0.0, -2.0 * PI / 3.0, 2.0 * PI / 3.0].map(|o| (0.9 * (h + o).cos()) as f32)
}

/// Top-left corner of the square at relative time `u` in `[0, 1]`.
pub fn pattern_position(p: f64, u: f64, height: usize, width: usize) -> (f64, f64) {
    let theta = 2.0 * PI * p;
    let size = (width.min(height) / 4) as f64;
    let (cy, cx) = ((height as f64 - size) / 2.0, (width as f64 - size) / 2.0);
    let span = 0.5 * width.min(height) as f64;
    let wobble = 0.1 * width.min(height) as f64 * (4.0 * PI * u).sin();
    let x = cx + span * (u - 0.5) * theta.cos() - wobble * theta.sin();
    let y = cy + span * (u - 0.5) * theta.sin() + wobble * theta.cos();
    (y, x)
}

#[derive(Clone, Copy)]
enum Kind {
    Sign(usize),
    Distractor(usize),
}

fn render_segment(data: &mut [f32], cfg: &SynthConfig, p: f64, start: usize, end: usize) {
    let (h, w, len) = (cfg.height, cfg.width, cfg.video_len);
    let size = h.min(w) / 4;
    let color = pattern_color(p);
    for t in start..end {
        let u = (t - start) as f64 / (end - start - 1).max(1) as f64;
        let (y0, x0) = pattern_position(p, u, h, w);
        let (y0, x0) = (y0.round() as i64, x0.round() as i64);
        for y in y0.max(0)..(y0 + size as i64).min(h as i64) {
            for x in x0.max(0)..(x0 + size as i64).min(w as i64) {
                for (c, &v) in color.iter().enumerate() {
                    data[((c * len + t) * h + y as usize) * w + x as usize] = v;
                }
            }
        }
    }
}

fn generate_video(cfg: &SynthConfig, index: usize) -> Result<(VideoFrames, AnnotationTrack, Vec<SignInterval>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let id = format!("vid{index:03}");
    let mut kinds: Vec<Kind> = (0..cfg.signs_per_video)
        .map(|_| Kind::Sign(rng.random_range(0..cfg.num_classes)))
        .collect();
    for _ in 0..cfg.distractors_per_video() {
        kinds.push(Kind::Distractor(rng.random_range(0..cfg.num_classes)));
    }
    kinds.shuffle(&mut rng);
    let lens: Vec<usize> = kinds
        .iter()
        .map(|_| rng.random_range(cfg.min_sign_len..=cfg.max_sign_len))
        .collect();
    let jitter = Normal::new(0.0, cfg.pattern_jitter / cfg.num_classes as f64).map_err(|e| Error::Config(e.to_string()))?;
    let spacing = 1.0 / cfg.num_classes as f64;
    let offsets: Vec<f64> = kinds
        .iter()
        .map(|k| {
            let sloppy = match k {
                Kind::Sign(_) if rng.random::<f64>() < cfg.sloppy_rate => {
                    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    side * cfg.sloppy_offset * spacing
                }
                _ => 0.0,
            };
            sloppy + jitter.sample(&mut rng)
        })
        .collect();
    let n = kinds.len();
    let slack = cfg.video_len - lens.iter().sum::<usize>() - (n + 1) * cfg.min_gap;
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();

    let (h, w, len) = (cfg.height, cfg.width, cfg.video_len);
    let mut data = vec![0f32; 3 * len * h * w];
    let mut signs = Vec::new();
    let mut distractors = Vec::new();
    let mut pos = 0;
    let mut prev_cut = 0;
    for (((kind, &l), &cut), &offset) in kinds.iter().zip(&lens).zip(&cuts).zip(&offsets) {
        pos += cfg.min_gap + cut - prev_cut;
        prev_cut = cut;
        let (p, list, class) = match *kind {
            Kind::Sign(c) => (class_pattern(c, cfg.num_classes), &mut signs, c),
            Kind::Distractor(k) => (distractor_pattern(k, cfg.num_classes), &mut distractors, k),
        };
        render_segment(&mut data, cfg, p + offset, pos, pos + l);
        list.push(SignInterval::new(id.clone(), class, pos, pos + l));
        pos += l;
    }
    if cfg.noise_level > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_level).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut data {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    let track = AnnotationTrack {
        video_id: id,
        fps: cfg.fps,
        num_frames: len,
        intervals: signs,
    };
    Ok((VideoFrames::new(len, h, w, data)?, track, distractors))
}

/// Renders `cfg.num_videos` videos. Each video draws from its own stream of
/// the seeded generator, so the output does not depend on thread count.
pub fn generate(cfg: &SynthConfig) -> Result<SynthSet> {
    cfg.validate()?;
    let parts: Vec<_> = (0..cfg.num_videos)
        .into_par_iter()
        .map(|i| generate_video(cfg, i))
        .collect::<Result<_>>()?;
    let mut videos = Vec::new();
    let mut tracks = Vec::new();
    let mut distractors = Vec::new();
    for (v, t, d) in parts {
        videos.push(v);
        tracks.push(t);
        distractors.push(d);
    }
    Ok(SynthSet {
        dataset: Dataset::new(tracks, videos)?,
        distractors,
    })
}
