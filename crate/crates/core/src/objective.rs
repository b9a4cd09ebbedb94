//! Per-level targets, the multi-level loss and mixup.
//!
//! A prediction cell of stride `s` covers frames `[k*s, (k+1)*s)` of the
//! window. It takes the class of an annotated interval overlapping that span;
//! when several overlap, the one with the most frames in the span wins and
//! ties go to the earlier interval start. Cells with no overlap are
//! background (index `C`).

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{HeadConfig, Level, LevelLogits};
use crate::kernels;
use crate::tensor::{Real, Tensor};

/// An annotated interval in window-relative frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowInterval {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
}

/// Ground truth seen by one training window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowAnnotation {
    /// First frame of the window in the source video.
    pub window_start: usize,
    pub length: usize,
    /// Clipped to `[0, length)`.
    pub intervals: Vec<WindowInterval>,
}

impl WindowAnnotation {
    pub fn background(window_start: usize, length: usize) -> Self {
        WindowAnnotation {
            window_start,
            length,
            intervals: Vec::new(),
        }
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        for iv in &self.intervals {
            if iv.start >= iv.end || iv.end > self.length || iv.class_id >= num_classes {
                return Err(Error::contract(
                    "assign_targets",
                    format!(
                        "interval {iv:?} invalid for a {}-frame window and {num_classes} classes",
                        self.length
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Integer targets per level, indexed by [`Level::index`]. For a batch the
/// per-window vectors are concatenated in batch order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelTargets {
    pub levels: [Vec<usize>; 5],
}

impl LevelTargets {
    pub fn get(&self, level: Level) -> &[usize] {
        &self.levels[level.index()]
    }

    /// Concatenates per-window targets into batch targets.
    pub fn stack(items: &[LevelTargets]) -> LevelTargets {
        LevelTargets {
            levels: std::array::from_fn(|l| items.iter().flat_map(|t| t.levels[l].iter().copied()).collect()),
        }
    }
}

fn cell_label(ann: &WindowAnnotation, lo: usize, hi: usize, background: usize) -> usize {
    let mut best: Option<(usize, usize, usize)> = None; // (overlap, start, class)
    for iv in &ann.intervals {
        let overlap = iv.end.min(hi).saturating_sub(iv.start.max(lo));
        if overlap == 0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((o, s, c)) => overlap > o || (overlap == o && (iv.start, iv.class_id) < (s, c)),
        };
        if better {
            best = Some((overlap, iv.start, iv.class_id));
        }
    }
    best.map_or(background, |(_, _, c)| c)
}

/// Targets for every level of one window.
pub fn assign_targets(ann: &WindowAnnotation, cfg: &HeadConfig) -> Result<LevelTargets> {
    let window = cfg.pyramid.input_t;
    if ann.length != window {
        return Err(Error::contract(
            "assign_targets",
            format!("annotation covers {} frames, model window is {window}", ann.length),
        ));
    }
    ann.validate(cfg.num_classes)?;
    let background = cfg.background();
    Ok(LevelTargets {
        levels: Level::ALL.map(|level| {
            let s = level.stride(window);
            (0..level.extent(window))
                .map(|k| cell_label(ann, k * s, (k + 1) * s, background))
                .collect()
        }),
    })
}

fn check_targets(logits: &[usize], targets: &LevelTargets) -> Result<()> {
    for (l, (&want, t)) in logits.iter().zip(&targets.levels).enumerate() {
        if want != t.len() {
            return Err(Error::contract(
                "multi_level_loss",
                format!("level {} has {want} logit cells but {} targets", Level::ALL[l], t.len()),
            ));
        }
    }
    Ok(())
}

/// Equal-weight mean over levels of `sum_i w_i * CE(targets_i)`, as a graph
/// node so it can be differentiated.
pub fn multi_level_loss_node<R: Real>(
    graph: &mut Graph<R>,
    logits: [Var; 5],
    targets: &[(f64, &LevelTargets)],
) -> Result<Var> {
    let cells = logits.map(|v| {
        let s = graph.shape(v);
        s[0] * s[2]
    });
    for (_, t) in targets {
        check_targets(&cells, t)?;
    }
    let mut total: Option<Var> = None;
    for (l, &v) in logits.iter().enumerate() {
        let mixed: Vec<(f64, &[usize])> = targets.iter().map(|(w, t)| (*w, t.levels[l].as_slice())).collect();
        let ce = graph.cross_entropy_mixed(v, &mixed)?;
        total = Some(match total {
            None => ce,
            Some(acc) => graph.add(acc, ce)?,
        });
    }
    graph.scale(total.expect("five levels"), 1.0 / 5.0)
}

/// Value of the multi-level loss for concrete logits.
pub fn multi_level_loss<R: Real>(logits: &LevelLogits<R>, targets: &LevelTargets) -> Result<f64> {
    let cells = logits.levels.each_ref().map(|t| t.shape()[0] * t.shape()[2]);
    check_targets(&cells, targets)?;
    let mut total = 0.0;
    for (t, tg) in logits.levels.iter().zip(&targets.levels) {
        let [n, k, p] = <[usize; 3]>::try_from(t.shape())
            .map_err(|_| Error::contract("multi_level_loss", format!("logits shape {:?}", t.shape())))?;
        if let Some(&bad) = tg.iter().find(|&&c| c >= k) {
            return Err(Error::contract("multi_level_loss", format!("target {bad} out of range for {k} classes")));
        }
        total += kernels::cross_entropy(t.data(), n, k, p, &[(1.0, tg)]).0;
    }
    Ok(total / 5.0)
}

/// Draws a mixing coefficient from `Beta(alpha, alpha)`. `alpha <= 0`
/// disables mixup and always returns 1.
pub fn sample_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    if alpha <= 0.0 {
        return Ok(1.0);
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

/// A mixed batch and the two target sets its loss is blended from.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    pub frames: Tensor<f32>,
    pub targets_a: LevelTargets,
    pub targets_b: LevelTargets,
    pub lambda: f64,
}

impl MixedBatch {
    /// Loss weights `(lambda, targets_a), (1 - lambda, targets_b)`.
    pub fn loss_terms(&self) -> Vec<(f64, &LevelTargets)> {
        if self.lambda == 1.0 {
            vec![(1.0, &self.targets_a)]
        } else {
            vec![(self.lambda, &self.targets_a), (1.0 - self.lambda, &self.targets_b)]
        }
    }
}

/// Blends frames as `lambda * a + (1 - lambda) * b`.
pub fn mix_frames(a: &Tensor<f32>, b: &Tensor<f32>, lambda: f64) -> Result<Tensor<f32>> {
    if a.shape() != b.shape() {
        return Err(Error::contract("mixup", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if lambda == 1.0 {
        return Ok(a.clone());
    }
    let l = lambda as f32;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| l * x + (1.0 - l) * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Draws `lambda` and mixes two batches with their targets.
pub fn mixup_pair(
    a: (&Tensor<f32>, LevelTargets),
    b: (&Tensor<f32>, LevelTargets),
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<MixedBatch> {
    let lambda = sample_lambda(alpha, rng)?;
    Ok(MixedBatch {
        frames: mix_frames(a.0, b.0, lambda)?,
        targets_a: a.1,
        targets_b: b.1,
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::backbone::PyramidSpec;

    fn cfg() -> HeadConfig {
        HeadConfig {
            num_classes: 5,
            pyramid: PyramidSpec::desk(),
        }
    }

    fn ann(intervals: &[(usize, usize, usize)]) -> WindowAnnotation {
        WindowAnnotation {
            window_start: 0,
            length: 32,
            intervals: intervals
                .iter()
                .map(|&(class_id, start, end)| WindowInterval { class_id, start, end })
                .collect(),
        }
    }

    #[test]
    fn coarse_cells_take_any_overlap() {
        let t = assign_targets(&ann(&[(3, 10, 18)]), &cfg()).unwrap();
        assert_eq!(t.get(Level::X4), &[5, 3, 3, 5]);
        let x32 = t.get(Level::X32);
        for (f, &c) in x32.iter().enumerate() {
            assert_eq!(c, if (10..18).contains(&f) { 3 } else { 5 });
        }
        assert_eq!(t.get(Level::X), x32);
    }

    #[test]
    fn empty_window_is_background() {
        let t = assign_targets(&WindowAnnotation::background(7, 32), &cfg()).unwrap();
        assert!(t.levels.iter().flatten().all(|&c| c == 5));
    }

    #[test]
    fn largest_overlap_then_earlier_start() {
        // cell [0, 8): class 1 covers 3 frames, class 2 covers 5
        let t = assign_targets(&ann(&[(1, 0, 3), (2, 3, 8)]), &cfg()).unwrap();
        assert_eq!(t.get(Level::X4)[0], 2);
        let t = assign_targets(&ann(&[(2, 4, 8), (1, 0, 4)]), &cfg()).unwrap();
        assert_eq!(t.get(Level::X4)[0], 1);
    }

    #[test]
    fn invalid_annotations_rejected() {
        assert!(assign_targets(&ann(&[(5, 0, 4)]), &cfg()).is_err());
        assert!(assign_targets(&ann(&[(0, 4, 4)]), &cfg()).is_err());
        assert!(assign_targets(&ann(&[(0, 4, 40)]), &cfg()).is_err());
    }

    fn logits_for(t: &LevelTargets, k: usize, confident: bool) -> LevelLogits<f64> {
        LevelLogits {
            levels: std::array::from_fn(|l| {
                let tg = &t.levels[l];
                let p = tg.len();
                Tensor::from_fn(&[1, k, p], |i| {
                    let (c, pos) = (i / p, i % p);
                    if confident && tg[pos] == c {
                        60.0
                    } else {
                        0.0
                    }
                })
            }),
        }
    }

    #[test]
    fn loss_limits() {
        let t = assign_targets(&ann(&[(3, 10, 18)]), &cfg()).unwrap();
        let perfect = multi_level_loss(&logits_for(&t, 6, true), &t).unwrap();
        assert!(perfect >= 0.0 && perfect < 1e-20);
        let uniform = multi_level_loss(&logits_for(&t, 6, false), &t).unwrap();
        assert!((uniform - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn node_matches_value() {
        let t = assign_targets(&ann(&[(1, 2, 20)]), &cfg()).unwrap();
        let logits = LevelLogits {
            levels: std::array::from_fn(|l| {
                Tensor::<f64>::from_fn(&[1, 6, t.levels[l].len()], |i| ((i * 7 + l) as f64).sin())
            }),
        };
        let mut g = Graph::new();
        let vars = logits.levels.clone().map(|x| g.input(x));
        let node = multi_level_loss_node(&mut g, vars, &[(1.0, &t)]).unwrap();
        let want = multi_level_loss(&logits, &t).unwrap();
        assert!((g.value(node).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn degenerate_lambda() {
        let a = Tensor::from_fn(&[1, 3, 2, 1, 1], |i| i as f32);
        let b = Tensor::full(&[1, 3, 2, 1, 1], 9.0);
        assert_eq!(mix_frames(&a, &b, 1.0).unwrap(), a);
        assert_eq!(mix_frames(&a, &a, 0.5).unwrap(), a);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_lambda(0.0, &mut rng).unwrap(), 1.0);
    }
}
