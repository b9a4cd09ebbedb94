//! Training window sampling and annotation files.
//!
//! With probability `rsp` a window is placed uniformly at random in a
//! uniformly chosen video. Otherwise an annotated interval is picked (class
//! balanced when `rebalance` is set) and the window start is drawn uniformly
//! among the positions that contain it, clipped to the video.
//!
//! Annotations are read from a CSV with header
//! `video_id,class_id,start_frame,end_frame` plus a sidecar JSON next to it
//! (same stem, `.json` extension) mapping each video id to
//! `{"fps": .., "num_frames": ..}`, or from a JSON-lines file with one track
//! per line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::SignInterval;
use crate::objective::{WindowAnnotation, WindowInterval};

/// The annotated intervals of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTrack {
    pub video_id: String,
    pub fps: f64,
    pub num_frames: usize,
    pub intervals: Vec<SignInterval>,
}

impl AnnotationTrack {
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        for iv in &self.intervals {
            let bad_class = num_classes.is_some_and(|c| iv.class_id >= c);
            if iv.start >= iv.end || iv.end > self.num_frames || bad_class || iv.video_id != self.video_id {
                return Err(Error::Config(format!(
                    "interval {}:{} [{}, {}) invalid for a {}-frame video",
                    iv.video_id, iv.class_id, iv.start, iv.end, self.num_frames
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Probability of a uniformly placed window.
    pub rsp: f64,
    pub window: usize,
    pub rebalance: bool,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rsp) {
            return Err(Error::Config(format!("rsp {} outside [0, 1]", self.rsp)));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        Ok(())
    }
}

/// Per-class pick probabilities: uniform over classes that the sampler can
/// target. Every class in `0..num_classes` must have an instance.
pub fn rebalance_weights(tracks: &[AnnotationTrack], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for iv in tracks.iter().flat_map(|t| &t.intervals) {
        if iv.class_id >= num_classes {
            return Err(Error::Config(format!("class {} outside vocabulary of {num_classes}", iv.class_id)));
        }
        counts[iv.class_id] += 1;
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("class {empty} has no annotated instance to rebalance")));
    }
    Ok(vec![1.0 / num_classes as f64; num_classes])
}

/// A sampled window: which video and its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledWindow {
    pub track: usize,
    pub annotation: WindowAnnotation,
    /// Whether the start was drawn uniformly rather than around a sign.
    pub random: bool,
}

/// Precomputed instance tables for [`SamplerConfig`].
#[derive(Clone, Debug)]
pub struct Sampler {
    pub cfg: SamplerConfig,
    tracks: Vec<AnnotationTrack>,
    /// `(track, interval)` per class; a single pool when not rebalancing.
    pools: Vec<Vec<(usize, usize)>>,
}

impl Sampler {
    pub fn new(tracks: Vec<AnnotationTrack>, cfg: SamplerConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if tracks.is_empty() {
            return Err(Error::Config("no videos to sample from".into()));
        }
        for t in &tracks {
            t.validate(Some(num_classes))?;
            if t.num_frames == 0 {
                return Err(Error::Config(format!("video {} has no frames", t.video_id)));
            }
        }
        let all: Vec<(usize, usize)> = tracks
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (0..t.intervals.len()).map(move |ii| (ti, ii)))
            .collect();
        if cfg.rsp < 1.0 && all.is_empty() {
            return Err(Error::Config("rsp < 1 needs at least one annotated interval".into()));
        }
        let pools = if cfg.rebalance && cfg.rsp < 1.0 {
            rebalance_weights(&tracks, num_classes)?;
            let mut by_class = vec![Vec::new(); num_classes];
            for &(ti, ii) in &all {
                by_class[tracks[ti].intervals[ii].class_id].push((ti, ii));
            }
            by_class
        } else {
            vec![all]
        };
        Ok(Sampler { cfg, tracks, pools })
    }

    pub fn tracks(&self) -> &[AnnotationTrack] {
        &self.tracks
    }

    /// The interval a targeted draw would center on, `(track, interval)`.
    pub fn pick_interval(&self, rng: &mut impl Rng) -> (usize, usize) {
        let pool = &self.pools[rng.random_range(0..self.pools.len())];
        pool[rng.random_range(0..pool.len())]
    }

    pub fn sample(&self, rng: &mut impl Rng) -> SampledWindow {
        let w = self.cfg.window;
        let random = self.cfg.rsp > 0.0 && rng.random::<f64>() < self.cfg.rsp;
        let (track, start) = if random {
            let ti = rng.random_range(0..self.tracks.len());
            let last = self.tracks[ti].num_frames.saturating_sub(w);
            (ti, rng.random_range(0..=last))
        } else {
            let (ti, ii) = self.pick_interval(rng);
            let t = &self.tracks[ti];
            let iv = &t.intervals[ii];
            let last = t.num_frames.saturating_sub(w);
            let a = iv.end.saturating_sub(w);
            let (lo, hi) = (a.min(iv.start), a.max(iv.start));
            let (lo, hi) = (lo.min(last), hi.min(last));
            (ti, rng.random_range(lo..=hi))
        };
        SampledWindow {
            track,
            annotation: window_annotation(&self.tracks[track], start, w),
            random,
        }
    }
}

/// All intervals of `track` intersecting `[start, start + window)`, clipped
/// and shifted to window coordinates.
pub fn window_annotation(track: &AnnotationTrack, start: usize, window: usize) -> WindowAnnotation {
    let end = start + window;
    let intervals = track
        .intervals
        .iter()
        .filter(|iv| iv.start < end && iv.end > start)
        .map(|iv| WindowInterval {
            class_id: iv.class_id,
            start: iv.start.max(start) - start,
            end: iv.end.min(end) - start,
        })
        .collect();
    WindowAnnotation {
        window_start: start,
        length: window,
        intervals,
    }
}

/// Seconds to frame index, rounding half up.
pub fn frame_from_seconds(seconds: f64, fps: f64) -> Result<usize> {
    let f = (seconds * fps + 0.5).floor();
    if !f.is_finite() || f < 0.0 {
        return Err(Error::Config(format!("time {seconds}s at {fps} fps is not a valid frame")));
    }
    Ok(f as usize)
}

#[derive(Debug, Deserialize)]
struct IntervalRow {
    video_id: String,
    class_id: i64,
    #[serde(default)]
    start_frame: Option<i64>,
    #[serde(default)]
    end_frame: Option<i64>,
    #[serde(default)]
    start_time: Option<f64>,
    #[serde(default)]
    end_time: Option<f64>,
    #[serde(default)]
    score: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub fps: f64,
    pub num_frames: usize,
}

fn row_frame(row: usize, frame: Option<i64>, time: Option<f64>, fps: Option<f64>, what: &str) -> Result<usize> {
    match (frame, time, fps) {
        (Some(f), _, _) if f < 0 => Err(Error::Annotation {
            row,
            msg: format!("negative {what} frame {f}"),
        }),
        (Some(f), _, _) => Ok(f as usize),
        (None, Some(t), Some(fps)) => frame_from_seconds(t, fps).map_err(|e| Error::Annotation {
            row,
            msg: e.to_string(),
        }),
        _ => Err(Error::Annotation {
            row,
            msg: format!("missing {what}_frame"),
        }),
    }
}

fn read_rows(path: &Path, meta: Option<&BTreeMap<String, VideoMeta>>) -> Result<Vec<SignInterval>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    for required in ["video_id", "class_id"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::malformed(path, format!("missing column {required:?}")));
        }
    }
    let mut out = Vec::new();
    for (i, record) in reader.deserialize::<IntervalRow>().enumerate() {
        let row = i + 1;
        let r = record.map_err(|e| Error::Annotation { row, msg: e.to_string() })?;
        let fps = match meta {
            Some(m) => Some(
                m.get(&r.video_id)
                    .ok_or_else(|| Error::Annotation {
                        row,
                        msg: format!("unknown video {:?}", r.video_id),
                    })?
                    .fps,
            ),
            None => None,
        };
        if r.class_id < 0 {
            return Err(Error::Annotation {
                row,
                msg: format!("negative class id {}", r.class_id),
            });
        }
        let start = row_frame(row, r.start_frame, r.start_time, fps, "start")?;
        let end = row_frame(row, r.end_frame, r.end_time, fps, "end")?;
        if start >= end {
            return Err(Error::Annotation {
                row,
                msg: format!("start {start} is not before end {end}"),
            });
        }
        if let Some(m) = meta.and_then(|m| m.get(&r.video_id)) {
            if end > m.num_frames {
                return Err(Error::Annotation {
                    row,
                    msg: format!("end {end} beyond the {} frames of {:?}", m.num_frames, r.video_id),
                });
            }
        }
        out.push(SignInterval {
            video_id: r.video_id,
            class_id: r.class_id as usize,
            start,
            end,
            score: r.score.unwrap_or(0.0),
        });
    }
    Ok(out)
}

/// Reads bare intervals (ground truth or predictions) from a CSV. Extra
/// columns such as `score` are allowed; no sidecar is needed.
pub fn read_intervals(path: impl AsRef<Path>) -> Result<Vec<SignInterval>> {
    read_rows(path.as_ref(), None)
}

/// Writes intervals as `video_id,class_id,start_frame,end_frame,score`.
pub fn write_intervals(intervals: &[SignInterval], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["video_id", "class_id", "start_frame", "end_frame", "score"])?;
    for iv in intervals {
        w.write_record([
            iv.video_id.clone(),
            iv.class_id.to_string(),
            iv.start.to_string(),
            iv.end.to_string(),
            format!("{:.6}", iv.score),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar path for an annotation CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn group_tracks(meta: BTreeMap<String, VideoMeta>, intervals: Vec<SignInterval>) -> Result<Vec<AnnotationTrack>> {
    let mut tracks: BTreeMap<String, AnnotationTrack> = meta
        .into_iter()
        .map(|(id, m)| {
            let t = AnnotationTrack {
                video_id: id.clone(),
                fps: m.fps,
                num_frames: m.num_frames,
                intervals: Vec::new(),
            };
            (id, t)
        })
        .collect();
    for iv in intervals {
        match tracks.get_mut(&iv.video_id) {
            Some(t) => t.intervals.push(iv),
            None => return Err(Error::Config(format!("interval for unknown video {:?}", iv.video_id))),
        }
    }
    Ok(tracks.into_values().collect())
}

/// Loads tracks from a CSV plus sidecar, or from a `.jsonl` file.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationTrack>> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "jsonl") {
        return load_jsonl(path);
    }
    let side = sidecar_path(path);
    let meta: BTreeMap<String, VideoMeta> = serde_json::from_reader(BufReader::new(
        File::open(&side).map_err(|e| Error::malformed(&side, format!("sidecar metadata: {e}")))?,
    ))
    .map_err(|e| Error::malformed(&side, e.to_string()))?;
    let intervals = read_rows(path, Some(&meta))?;
    group_tracks(meta, intervals)
}

fn load_jsonl(path: &Path) -> Result<Vec<AnnotationTrack>> {
    let mut tracks = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = i + 1;
        let mut t: AnnotationTrack =
            serde_json::from_str(&line).map_err(|e| Error::Annotation { row, msg: e.to_string() })?;
        for iv in &mut t.intervals {
            if iv.video_id.is_empty() {
                iv.video_id = t.video_id.clone();
            }
        }
        t.validate(None).map_err(|e| Error::Annotation { row, msg: e.to_string() })?;
        if !seen.insert(t.video_id.clone()) {
            return Err(Error::Annotation {
                row,
                msg: format!("duplicate video {:?}", t.video_id),
            });
        }
        tracks.push(t);
    }
    tracks.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(tracks)
}

/// Writes tracks as a CSV plus sidecar, or as JSON lines for a `.jsonl` path.
pub fn save_annotations(tracks: &[AnnotationTrack], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "jsonl") {
        let mut w = BufWriter::new(File::create(path)?);
        for t in tracks {
            serde_json::to_writer(&mut w, t)?;
            writeln!(w)?;
        }
        w.flush()?;
        return Ok(());
    }
    let intervals: Vec<SignInterval> = tracks.iter().flat_map(|t| t.intervals.iter().cloned()).collect();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["video_id", "class_id", "start_frame", "end_frame"])?;
    for iv in &intervals {
        w.write_record([
            iv.video_id.clone(),
            iv.class_id.to_string(),
            iv.start.to_string(),
            iv.end.to_string(),
        ])?;
    }
    w.flush()?;
    let meta: BTreeMap<&str, VideoMeta> = tracks
        .iter()
        .map(|t| {
            (
                t.video_id.as_str(),
                VideoMeta {
                    fps: t.fps,
                    num_frames: t.num_frames,
                },
            )
        })
        .collect();
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Splits items into `folds` groups by key so that no key lands on both
/// sides. Distinct keys are sorted and dealt round-robin; returns
/// `(train, held_out)` indices for fold `fold`.
pub fn split_by_group(keys: &[String], folds: usize, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if folds < 2 || fold >= folds {
        return Err(Error::Config(format!("fold {fold} of {folds} is not a valid split")));
    }
    let distinct: Vec<&String> = keys.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if distinct.len() < folds {
        return Err(Error::Config(format!("{} groups cannot fill {folds} folds", distinct.len())));
    }
    let fold_of: BTreeMap<&String, usize> = distinct.iter().enumerate().map(|(i, k)| (*k, i % folds)).collect();
    let (held, train): (Vec<usize>, Vec<usize>) = (0..keys.len()).partition(|&i| fold_of[&keys[i]] == fold);
    Ok((train, held))
}
