//! IoU-matched spotting F1.
//!
//! Predictions and ground truth are matched one-to-one within each
//! `(video, class)` group at each IoU threshold. True positives, false
//! positives and false negatives are summed over all thresholds before
//! precision, recall and F1 are computed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// A half-open frame interval `[start, end)` carrying a class label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignInterval {
    #[serde(default)]
    pub video_id: String,
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
    /// Mean winning-class probability over the run; diagnostic only.
    #[serde(default)]
    pub score: f64,
}

impl SignInterval {
    pub fn new(video_id: impl Into<String>, class_id: usize, start: usize, end: usize) -> Self {
        SignInterval {
            video_id: video_id.into(),
            class_id,
            start,
            end,
            score: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Frames in common over frames covered by either interval.
pub fn interval_iou(a: &SignInterval, b: &SignInterval) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// How predictions are paired with ground truth at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchStrategy {
    /// Maximum number of one-to-one pairs with IoU at or above the threshold.
    #[default]
    Optimal,
    /// Pairs taken in descending IoU order while both sides are free.
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub strategy: MatchStrategy,
}

impl Default for MetricConfig {
    /// Thirteen thresholds 0.20, 0.25, ..., 0.80.
    fn default() -> Self {
        MetricConfig {
            thresholds: (0..13).map(|k| (20 + 5 * k) as f64 / 100.0).collect(),
            strategy: MatchStrategy::Optimal,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = !self.thresholds.is_empty()
            && self.thresholds.iter().all(|&t| t > 0.0 && t <= 1.0)
            && self.thresholds.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config(format!(
                "thresholds must be strictly increasing in (0, 1]: {:?}",
                self.thresholds
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCounts {
    pub threshold: f64,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpottingReport {
    pub per_threshold: Vec<ThresholdCounts>,
    pub totals: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SpottingReport {
    pub fn from_counts(per_threshold: Vec<ThresholdCounts>) -> Self {
        let mut totals = Counts::default();
        for c in &per_threshold {
            totals += c.counts;
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(totals.tp, totals.tp + totals.fp);
        let recall = ratio(totals.tp, totals.tp + totals.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        SpottingReport {
            per_threshold,
            totals,
            precision,
            recall,
            f1,
        }
    }
}

type Group<'a> = (Vec<&'a SignInterval>, Vec<&'a SignInterval>);

fn group<'a>(preds: &'a [SignInterval], gts: &'a [SignInterval]) -> BTreeMap<(&'a str, usize), Group<'a>> {
    let mut groups: BTreeMap<(&str, usize), Group<'a>> = BTreeMap::new();
    for p in preds {
        groups.entry((&p.video_id, p.class_id)).or_default().0.push(p);
    }
    for g in gts {
        groups.entry((&g.video_id, g.class_id)).or_default().1.push(g);
    }
    groups
}

/// Number of matched pairs within one `(video, class)` group.
fn match_group(preds: &[&SignInterval], gts: &[&SignInterval], threshold: f64, strategy: MatchStrategy) -> usize {
    // candidate edges sorted by descending IoU, then earlier GT, then earlier prediction
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in preds.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            let iou = interval_iou(p, g);
            if iou > 0.0 && iou >= threshold {
                edges.push((iou, pi, gi));
            }
        }
    }
    edges.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(gts[a.2].start.cmp(&gts[b.2].start))
            .then(preds[a.1].start.cmp(&preds[b.1].start))
    });
    match strategy {
        MatchStrategy::Greedy => {
            let mut pred_used = vec![false; preds.len()];
            let mut gt_used = vec![false; gts.len()];
            let mut matched = 0;
            for &(_, pi, gi) in &edges {
                if !pred_used[pi] && !gt_used[gi] {
                    pred_used[pi] = true;
                    gt_used[gi] = true;
                    matched += 1;
                }
            }
            matched
        }
        MatchStrategy::Optimal => {
            let mut adj = vec![Vec::new(); preds.len()];
            for &(_, pi, gi) in &edges {
                adj[pi].push(gi);
            }
            let mut gt_owner: Vec<Option<usize>> = vec![None; gts.len()];
            let mut matched = 0;
            for pi in 0..preds.len() {
                let mut seen = vec![false; gts.len()];
                if augment(pi, &adj, &mut seen, &mut gt_owner) {
                    matched += 1;
                }
            }
            matched
        }
    }
}

fn augment(pi: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
    for &gi in &adj[pi] {
        if seen[gi] {
            continue;
        }
        seen[gi] = true;
        if owner[gi].is_none_or(|other| augment(other, adj, seen, owner)) {
            owner[gi] = Some(pi);
            return true;
        }
    }
    false
}

/// TP/FP/FN at a single threshold, summed over `(video, class)` groups.
pub fn match_instances(preds: &[SignInterval], gts: &[SignInterval], threshold: f64, strategy: MatchStrategy) -> Counts {
    let mut total = Counts::default();
    for (p, g) in group(preds, gts).values() {
        let tp = match_group(p, g, threshold, strategy);
        total += Counts {
            tp,
            fp: p.len() - tp,
            fn_: g.len() - tp,
        };
    }
    total
}

pub fn evaluate(preds: &[SignInterval], gts: &[SignInterval], cfg: &MetricConfig) -> SpottingReport {
    let groups = group(preds, gts);
    let per_threshold = cfg
        .thresholds
        .iter()
        .map(|&t| {
            let mut counts = Counts::default();
            for (p, g) in groups.values() {
                let tp = match_group(p, g, t, cfg.strategy);
                counts += Counts {
                    tp,
                    fp: p.len() - tp,
                    fn_: g.len() - tp,
                };
            }
            ThresholdCounts { threshold: t, counts }
        })
        .collect();
    SpottingReport::from_counts(per_threshold)
}
