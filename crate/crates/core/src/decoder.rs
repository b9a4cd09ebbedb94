//! From level logits to sign intervals.
//!
//! Each level is softmaxed, resampled to the window length by nearest
//! neighbour and averaged with the other selected levels. Over a full video,
//! windows slide with a fixed stride and every frame takes the mean of the
//! rows of all windows that cover it. Runs of identical non-background argmax
//! labels become intervals.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{Level, LevelLogits};
use crate::kernels::nearest_source;
use crate::metric::SignInterval;
use crate::model::HsModel;
use crate::tensor::{softmax_channels, Real, Tensor};
use crate::video::VideoFrames;

/// Per-frame class probabilities, `frames x classes`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameProbs {
    pub frames: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl FrameProbs {
    pub fn zeros(frames: usize, classes: usize) -> Self {
        FrameProbs {
            frames,
            classes,
            data: vec![0.0; frames * classes],
        }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.classes..(t + 1) * self.classes]
    }

    /// Argmax per frame, ties resolved to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.frames)
            .map(|t| {
                let row = self.row(t);
                let mut best = 0;
                for (c, &p) in row.iter().enumerate().skip(1) {
                    if p > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Frames `0..frames` of a longer trace.
    pub fn truncate(mut self, frames: usize) -> Self {
        self.frames = self.frames.min(frames);
        self.data.truncate(self.frames * self.classes);
        self
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.frames)
            .map(|t| (self.row(t).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// CSV with a `frame` column followed by one `p<k>` column per class.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        self.write_csv_columns(w, &(0..self.classes).collect::<Vec<_>>())
    }

    /// Like [`FrameProbs::write_csv`] restricted to `classes`, in that order.
    pub fn write_csv_columns(&self, mut w: impl Write, classes: &[usize]) -> Result<()> {
        if let Some(&bad) = classes.iter().find(|&&c| c >= self.classes) {
            return Err(Error::Config(format!("class {bad} outside [0, {})", self.classes)));
        }
        let header: Vec<String> = std::iter::once("frame".to_string())
            .chain(classes.iter().map(|k| format!("p{k}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for t in 0..self.frames {
            write!(w, "{t}")?;
            let row = self.row(t);
            for &c in classes {
                write!(w, ",{}", row[c])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Softmax of one level for batch item `item`, resampled to `window` rows.
pub fn level_probs<R: Real>(logits: &LevelLogits<R>, item: usize, level: Level, window: usize) -> Result<FrameProbs> {
    let t = logits.get(level);
    let [_, k, steps] = <[usize; 3]>::try_from(t.shape())
        .map_err(|_| Error::contract("fuse_levels", format!("level logits shape {:?}", t.shape())))?;
    let slice = Tensor::new(vec![1, k, steps], t.data()[item * k * steps..(item + 1) * k * steps].to_vec())?;
    let probs = softmax_channels(&slice)?;
    let mut out = FrameProbs::zeros(window, k);
    for f in 0..window {
        let src = nearest_source(f, steps, window);
        for c in 0..k {
            out.data[f * k + c] = probs.data()[c * steps + src].as_f64();
        }
    }
    Ok(out)
}

/// Softmax, resample to `window`, then average over `levels`.
pub fn fuse_levels<R: Real>(logits: &LevelLogits<R>, item: usize, levels: &[Level], window: usize) -> Result<FrameProbs> {
    if levels.is_empty() {
        return Err(Error::Config("at least one level is required".into()));
    }
    let parts: Vec<FrameProbs> = levels
        .iter()
        .map(|&l| level_probs(logits, item, l, window))
        .collect::<Result<_>>()?;
    ensemble(&parts)
}

/// Elementwise mean of equally shaped traces.
pub fn ensemble(members: &[FrameProbs]) -> Result<FrameProbs> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("ensemble needs at least one member".into()))?;
    let mut out = FrameProbs::zeros(first.frames, first.classes);
    for m in members {
        if (m.frames, m.classes) != (first.frames, first.classes) {
            return Err(Error::contract(
                "ensemble",
                format!("{}x{} vs {}x{}", m.frames, m.classes, first.frames, first.classes),
            ));
        }
        out.data.iter_mut().zip(&m.data).for_each(|(a, b)| *a += b);
    }
    let n = members.len() as f64;
    out.data.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Maximal runs of the same non-background argmax label, at least `min_len`
/// frames long.
pub fn greedy_intervals(probs: &FrameProbs, video_id: &str, background: usize, min_len: usize) -> Vec<SignInterval> {
    let labels = probs.argmax();
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            let class = labels[start];
            if class != background && t - start >= min_len.max(1) {
                let score = (start..t).map(|f| probs.row(f)[class]).sum::<f64>() / (t - start) as f64;
                out.push(SignInterval {
                    video_id: video_id.to_string(),
                    class_id: class,
                    start,
                    end: t,
                    score,
                });
            }
            start = t;
        }
    }
    out
}

/// Anything that maps a batch of windows to per-level logits.
pub trait WindowModel: Sync {
    fn window(&self) -> usize;
    fn classes(&self) -> usize;
    fn level_logits(&self, batch: &Tensor<f32>) -> Result<LevelLogits<f64>>;
}

impl<R: Real> WindowModel for HsModel<R> {
    fn window(&self) -> usize {
        self.cfg.pyramid.input_t
    }

    fn classes(&self) -> usize {
        self.cfg.outputs()
    }

    fn level_logits(&self, batch: &Tensor<f32>) -> Result<LevelLogits<f64>> {
        let out = self.predict(&batch.cast::<R>())?;
        Ok(LevelLogits {
            levels: out.levels.map(|t| t.cast()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub levels: Vec<Level>,
    pub stride: usize,
    pub min_len: usize,
    /// Windows per forward pass.
    pub batch: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            levels: Level::ALL.to_vec(),
            stride: 1,
            min_len: 1,
            batch: 32,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.stride == 0 || self.batch == 0 {
            return Err(Error::Config("decode needs levels and a positive stride and batch".into()));
        }
        Ok(())
    }
}

/// Window start positions covering a video of `len` frames.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let last = len - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if *starts.last().expect("non-empty") != last {
        starts.push(last);
    }
    starts
}

/// Sliding-window probabilities of every level over a full video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLevelProbs {
    /// Indexed by [`Level::index`].
    pub levels: Vec<FrameProbs>,
}

impl VideoLevelProbs {
    pub fn fuse(&self, levels: &[Level]) -> Result<FrameProbs> {
        if levels.is_empty() {
            return Err(Error::Config("at least one level is required".into()));
        }
        let parts: Vec<FrameProbs> = levels.iter().map(|l| self.levels[l.index()].clone()).collect();
        ensemble(&parts)
    }
}

/// Runs `model` on every window and averages each frame over the windows
/// that contain it, separately per level. Short videos are padded by
/// repeating the last frame and the padded rows are dropped.
pub fn slide_levels(video: &VideoFrames, model: &dyn WindowModel, stride: usize, batch: usize) -> Result<VideoLevelProbs> {
    let window = model.window();
    let starts = window_starts(video.len, window, stride);
    let per_batch: Vec<Vec<[FrameProbs; 5]>> = starts
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let logits = model.level_logits(&video.batch(chunk, window))?;
            (0..chunk.len())
                .map(|i| {
                    let mut out: [FrameProbs; 5] = std::array::from_fn(|_| FrameProbs::zeros(0, 0));
                    for l in Level::ALL {
                        out[l.index()] = level_probs(&logits, i, l, window)?;
                    }
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let total = video.len.max(window);
    let k = model.classes();
    let mut sums: Vec<FrameProbs> = (0..5).map(|_| FrameProbs::zeros(total, k)).collect();
    let mut counts = vec![0usize; total];
    for (&s, probs) in starts.iter().zip(per_batch.iter().flatten()) {
        for f in 0..window {
            counts[s + f] += 1;
        }
        for (sum, p) in sums.iter_mut().zip(probs) {
            for f in 0..window {
                sum.row_mut(s + f).iter_mut().zip(p.row(f)).for_each(|(a, b)| *a += b);
            }
        }
    }
    let levels = sums
        .into_iter()
        .map(|mut sum| {
            for (t, &n) in counts.iter().enumerate() {
                let row = sum.row_mut(t);
                row.iter_mut().for_each(|v| *v /= n as f64);
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    row.iter_mut().for_each(|v| *v /= total);
                }
            }
            sum.truncate(video.len)
        })
        .collect();
    Ok(VideoLevelProbs { levels })
}

/// Per-frame probabilities over a full video for the selected levels.
pub fn slide_video(
    video: &VideoFrames,
    model: &dyn WindowModel,
    levels: &[Level],
    stride: usize,
    batch: usize,
) -> Result<FrameProbs> {
    slide_levels(video, model, stride, batch)?.fuse(levels)
}

/// Ensembles several models over one video and decodes intervals.
pub fn spot_video(
    video_id: &str,
    video: &VideoFrames,
    models: &[&dyn WindowModel],
    cfg: &DecodeConfig,
) -> Result<(FrameProbs, Vec<SignInterval>)> {
    let traces: Vec<FrameProbs> = models
        .iter()
        .map(|m| slide_video(video, *m, &cfg.levels, cfg.stride, cfg.batch))
        .collect::<Result<_>>()?;
    let probs = ensemble(&traces)?;
    let background = probs.classes - 1;
    let intervals = greedy_intervals(&probs, video_id, background, cfg.min_len);
    Ok((probs, intervals))
}
