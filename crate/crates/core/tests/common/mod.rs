//! Shared oracles for the integration tests.
#![allow(dead_code)]

use hsi3d::graph::{Graph, Var};
use hsi3d::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Reduces any node to the scalar `sum(y * proj)` with a fixed random
/// projection, so that every output element influences the check.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let m = g.value(y).len();
    if m == 1 {
        return Ok(y);
    }
    let mut r = rng(seed ^ 0x9e37);
    let flat = g.reshape(y, &[1, m, 1, 1, 1])?;
    let w = g.input(random_tensor(&[1, m], &mut r));
    let b = g.input(Tensor::zeros(&[1]));
    g.fully_connected(flat, w, b)
}

/// Largest relative error between back-propagated and central-difference
/// gradients over every coordinate of every input (at most `max_coords` per
/// input, picked at random).
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    max_coords: usize,
    seed: u64,
) -> f64 {
    let eval = |xs: &[Tensor<f64>], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone().with_requires_grad(grads))).collect();
        let y = build(&mut g, &vars).expect("forward");
        let l = project(&mut g, y, seed).expect("projection");
        let value = g.value(l).data()[0];
        if !grads {
            return (value, vec![]);
        }
        g.backward(l).expect("backward");
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        (value, gs)
    };
    let (_, analytic) = eval(inputs, true);
    let mut r = rng(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if x.len() <= max_coords {
            (0..x.len()).collect()
        } else {
            (0..max_coords).map(|_| r.random_range(0..x.len())).collect()
        };
        for j in coords {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += h;
            let (plus, _) = eval(&xs, false);
            xs[i].data_mut()[j] -= 2.0 * h;
            let (minus, _) = eval(&xs, false);
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i][j], numeric, 1e-6));
        }
    }
    worst
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One randomly shaped instance of a differentiable op.
pub struct OpCase {
    pub op: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn dims(r: &mut impl Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

/// Instance `k` of every differentiable graph op, shapes drawn from `seed`.
pub fn op_cases(k: u64) -> Vec<OpCase> {
    use hsi3d::kernels::ConvGeometry;
    let mut r = rng(1000 + k);
    let r = &mut r;
    let mut cases = Vec::new();

    let (n, c, t, h, w) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 2, 5), dims(r, 2, 4), dims(r, 2, 4));
    let kout = dims(r, 1, 3);
    let kernel = [dims(r, 1, 2), dims(r, 1, 2), dims(r, 1, 2)];
    let stride = [dims(r, 1, 2), dims(r, 1, 2), dims(r, 1, 2)];
    let pad = [dims(r, 0, 1), dims(r, 0, 1), dims(r, 0, 1)];
    let geom = ConvGeometry::strided(stride).with_padding(pad);
    cases.push(OpCase {
        op: "conv3d",
        inputs: vec![
            random_tensor(&[n, c, t, h, w], r),
            random_tensor(&[kout, c, kernel[0], kernel[1], kernel[2]], r),
            random_tensor(&[kout], r),
        ],
        build: Box::new(move |g, v| g.conv3d(v[0], v[1], Some(v[2]), geom)),
    });

    let (n, c, t, h, w, kout) = (dims(r, 1, 2), dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
    cases.push(OpCase {
        op: "transpose_conv3d_temporal",
        inputs: vec![
            random_tensor(&[n, c, t, h, w], r),
            random_tensor(&[c, kout, 2, 1, 1], r),
            random_tensor(&[kout], r),
        ],
        build: Box::new(|g, v| g.transpose_conv3d_temporal(v[0], v[1], Some(v[2]))),
    });

    let shape = [dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4)];
    cases.push(OpCase {
        op: "global_avg_pool_spatial",
        inputs: vec![random_tensor(&shape, r)],
        build: Box::new(|g, v| g.global_avg_pool_spatial(v[0])),
    });

    let (n, c) = (dims(r, 2, 3), dims(r, 1, 3));
    let shape = [n, c, dims(r, 2, 4), dims(r, 1, 3), dims(r, 1, 3)];
    cases.push(OpCase {
        op: "batch_norm_train",
        inputs: vec![random_tensor(&shape, r), random_tensor(&[c], r), random_tensor(&[c], r)],
        build: Box::new(|g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.output)),
    });

    let c = dims(r, 1, 4);
    let shape = [dims(r, 1, 2), c, dims(r, 1, 4), dims(r, 1, 3), dims(r, 1, 3)];
    let mean: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
    cases.push(OpCase {
        op: "batch_norm_eval",
        inputs: vec![random_tensor(&shape, r), random_tensor(&[c], r), random_tensor(&[c], r)],
        build: Box::new(move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)),
    });

    let shape = [dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 5), dims(r, 1, 3), dims(r, 1, 3)];
    cases.push(OpCase {
        op: "swish",
        inputs: vec![random_tensor(&shape, r).map_scale(3.0)],
        build: Box::new(|g, v| g.swish(v[0])),
    });

    let (n, t, s) = (dims(r, 1, 2), dims(r, 1, 4), dims(r, 1, 3));
    let parts = dims(r, 2, 4);
    let inputs = (0..parts).map(|_| random_tensor(&[n, dims(r, 1, 3), t, s, 1], r)).collect();
    cases.push(OpCase {
        op: "concat_channels",
        inputs,
        build: Box::new(|g, v| g.concat_channels(v)),
    });

    let t_in = dims(r, 1, 8);
    let t_out = dims(r, 1, 16);
    let shape = [dims(r, 1, 2), dims(r, 1, 3), t_in, dims(r, 1, 2), dims(r, 1, 2)];
    cases.push(OpCase {
        op: "nearest_interp_temporal",
        inputs: vec![random_tensor(&shape, r)],
        build: Box::new(move |g, v| g.nearest_interp_temporal(v[0], t_out)),
    });

    let (cin, cout) = (dims(r, 1, 5), dims(r, 1, 5));
    let shape = [dims(r, 1, 2), cin, dims(r, 1, 6)];
    cases.push(OpCase {
        op: "fully_connected",
        inputs: vec![random_tensor(&shape, r), random_tensor(&[cout, cin], r), random_tensor(&[cout], r)],
        build: Box::new(|g, v| g.fully_connected(v[0], v[1], v[2])),
    });

    let shape = [dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 4)];
    let factor = r.random_range(-2.0..2.0);
    cases.push(OpCase {
        op: "add_scale_reshape",
        inputs: vec![random_tensor(&shape, r), random_tensor(&shape, r)],
        build: Box::new(move |g, v| {
            let s = g.scale(v[1], factor)?;
            let a = g.add(v[0], s)?;
            let m = g.value(a).len();
            g.reshape(a, &[m])
        }),
    });

    let (n, k, p) = (dims(r, 1, 3), dims(r, 2, 6), dims(r, 1, 5));
    let ta: Vec<usize> = (0..n * p).map(|_| r.random_range(0..k)).collect();
    let tb: Vec<usize> = (0..n * p).map(|_| r.random_range(0..k)).collect();
    let lambda = r.random_range(0.0..1.0);
    cases.push(OpCase {
        op: "cross_entropy_mixed",
        inputs: vec![random_tensor(&[n, k, p], r).map_scale(2.0)],
        build: Box::new(move |g, v| g.cross_entropy_mixed(v[0], &[(lambda, &ta), (1.0 - lambda, &tb)])),
    });

    cases
}

pub trait MapScale {
    fn map_scale(self, s: f64) -> Self;
}

impl MapScale for Tensor<f64> {
    fn map_scale(mut self, s: f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v *= s);
        self
    }
}

use hsi3d::decoder::{FrameProbs, WindowModel};
use hsi3d::head::Level;
use hsi3d::video::VideoFrames;
use hsi3d::{LevelLogits, SignInterval};

/// Random predictions and ground truth over a couple of videos and classes.
pub fn random_case(r: &mut impl Rng) -> (Vec<SignInterval>, Vec<SignInterval>) {
    let draw = |r: &mut dyn rand::RngCore| {
        let n = r.random_range(0..=6);
        (0..n)
            .map(|_| {
                let s = r.random_range(0..40);
                let len = r.random_range(1..=15);
                let video = ["a", "b"][r.random_range(0..2)];
                SignInterval::new(video, r.random_range(0..3), s, s + len)
            })
            .collect::<Vec<_>>()
    };
    let p = draw(r);
    let g = draw(r);
    (p, g)
}

fn iou(a: &SignInterval, b: &SignInterval) -> f64 {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    let inter = hi.saturating_sub(lo) as f64;
    inter / ((a.end - a.start) as f64 + (b.end - b.start) as f64 - inter)
}

/// Largest one-to-one matching by exhaustive search.
fn best_matching(preds: &[&SignInterval], gts: &[&SignInterval], used: &mut Vec<bool>, t: f64) -> usize {
    let Some((p, rest)) = preds.split_first() else {
        return 0;
    };
    let mut best = best_matching(rest, gts, used, t);
    for j in 0..gts.len() {
        if !used[j] && gts[j].video_id == p.video_id && gts[j].class_id == p.class_id && iou(p, gts[j]) >= t {
            used[j] = true;
            best = best.max(1 + best_matching(rest, gts, used, t));
            used[j] = false;
        }
    }
    best
}

/// `(tp, fp, fn)` at each threshold from exhaustive optimal matching.
pub fn brute_force_counts(preds: &[SignInterval], gts: &[SignInterval], thresholds: &[f64]) -> Vec<(usize, usize, usize)> {
    let p: Vec<&SignInterval> = preds.iter().collect();
    let g: Vec<&SignInterval> = gts.iter().collect();
    thresholds
        .iter()
        .map(|&t| {
            let tp = best_matching(&p, &g, &mut vec![false; g.len()], t);
            (tp, p.len() - tp, g.len() - tp)
        })
        .collect()
}

/// Maximal constant runs of `labels` that are not `background`, found by
/// testing every `[s, e)` for maximality.
pub fn run_length_oracle(labels: &[usize], background: usize, min_len: usize) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let mut out = Vec::new();
    for s in 0..n {
        for e in s + 1..=n {
            let constant = labels[s..e].iter().all(|&l| l == labels[s]);
            let left = s == 0 || labels[s - 1] != labels[s];
            let right = e == n || labels[e] != labels[s];
            if constant && left && right && labels[s] != background && e - s >= min_len {
                out.push((labels[s], s, e));
            }
        }
    }
    out
}

/// Deterministic stand-in for a network: every logit is a smooth function
/// of the mean intensity of the frames its cell covers.
pub struct FakeModel {
    pub window: usize,
    pub classes: usize,
}

impl WindowModel for FakeModel {
    fn window(&self) -> usize {
        self.window
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn level_logits(&self, batch: &Tensor<f32>) -> Result<LevelLogits<f64>> {
        let s = batch.shape().to_vec();
        let (n, w, plane) = (s[0], s[2], s[3] * s[4]);
        let levels = Level::ALL.map(|level| {
            let steps = level.extent(w);
            let cell = w / steps;
            let mut data = vec![0.0; n * self.classes * steps];
            for b in 0..n {
                for j in 0..steps {
                    let mut m = 0.0;
                    for f in j * cell..(j + 1) * cell {
                        let base = ((b * 3) * w + f) * plane;
                        m += batch.data()[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    m /= (cell * plane) as f64;
                    for c in 0..self.classes {
                        data[(b * self.classes + c) * steps + j] =
                            3.0 * (1.7 * m * (c as f64 + 1.0) + 0.3 * level.index() as f64).sin();
                    }
                }
            }
            Tensor::new(vec![n, self.classes, steps], data).unwrap()
        });
        Ok(LevelLogits { levels })
    }
}

pub fn random_video(len: usize, h: usize, w: usize, r: &mut impl Rng) -> VideoFrames {
    VideoFrames::new(len, h, w, (0..3 * len * h * w).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Stride-1 decoding done the long way: run every window on its own,
/// softmax and upsample each level by hand, and average every frame over
/// all windows and selected levels that cover it.
pub fn brute_force_slide(video: &VideoFrames, model: &dyn WindowModel, levels: &[Level]) -> Vec<Vec<f64>> {
    let w = model.window();
    let k = model.classes();
    let last = video.len.saturating_sub(w);
    let mut acc = vec![vec![0.0; k]; video.len];
    let mut hits = vec![0usize; video.len];
    for s in 0..=last {
        let logits = model.level_logits(&video.batch(&[s], w)).unwrap();
        for &level in levels {
            let t = logits.get(level);
            let steps = t.shape()[2];
            for f in 0..w {
                if s + f >= video.len {
                    continue;
                }
                let j = f * steps / w;
                let col: Vec<f64> = (0..k).map(|c| t.data()[c * steps + j]).collect();
                let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = col.iter().map(|v| (v - mx).exp()).sum();
                for c in 0..k {
                    acc[s + f][c] += (col[c] - mx).exp() / z;
                }
                hits[s + f] += 1;
            }
        }
    }
    acc.into_iter()
        .zip(hits)
        .map(|(row, n)| row.into_iter().map(|v| v / n as f64).collect())
        .collect()
}

/// A trace whose rows are drawn from a few coarse values so that ties occur.
pub fn random_trace(frames: usize, classes: usize, r: &mut impl Rng) -> FrameProbs {
    let mut p = FrameProbs::zeros(frames, classes);
    let sticky = r.random_range(0.0..0.9);
    let mut prev: Vec<f64> = vec![1.0; classes];
    for t in 0..frames {
        if t == 0 || r.random_range(0.0..1.0) > sticky {
            prev = (0..classes).map(|_| r.random_range(1..=4) as f64).collect();
        }
        let z: f64 = prev.iter().sum();
        p.row_mut(t).iter_mut().zip(&prev).for_each(|(a, b)| *a = b / z);
    }
    p
}

use hsi3d::head::HeadConfig;
use hsi3d::model::HsModel;
use hsi3d::nn::{Forward, Mode};
use hsi3d::objective::{assign_targets, multi_level_loss_node, LevelTargets, WindowAnnotation, WindowInterval};

/// Train-mode loss of the full model, with parameter gradients on request.
fn model_loss(model: &HsModel<f64>, frames: &Tensor<f64>, targets: &LevelTargets, grads: bool) -> (f64, Vec<(String, Vec<f64>)>) {
    let mut g = Graph::new();
    let x = g.input(frames.clone());
    let mut f = Forward::new(&mut g, &model.store, Mode::Train);
    let logits = model.forward(&mut f, x).unwrap();
    let vars = f.param_vars().clone();
    let loss = multi_level_loss_node(&mut g, logits, &[(1.0, targets)]).unwrap();
    let value = g.value(loss).data()[0];
    if !grads {
        return (value, vec![]);
    }
    g.backward(loss).unwrap();
    let mut out: Vec<(String, Vec<f64>)> = vars.into_iter().map(|(name, v)| (name, g.grad(v).unwrap().to_vec())).collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    (value, out)
}

/// Checks `coords` random parameter coordinates of a nine-class model
/// (backbone and head) against central differences. Returns the worst
/// relative error and how many coordinates had a gradient above 1e-4.
pub fn model_gradcheck(coords: usize, seed: u64) -> (f64, usize) {
    let cfg = HeadConfig {
        num_classes: 9,
        ..HeadConfig::default()
    };
    let mut model = HsModel::<f64>::new(cfg, seed).unwrap();
    let p = cfg.pyramid;
    let mut r = rng(seed + 100);
    let frames = random_tensor(&[2, 3, p.input_t, p.input_h, p.input_w], &mut r);
    let anns = [
        WindowAnnotation {
            window_start: 0,
            length: p.input_t,
            intervals: vec![WindowInterval { class_id: 3, start: 4, end: 20 }],
        },
        WindowAnnotation {
            window_start: 0,
            length: p.input_t,
            intervals: vec![
                WindowInterval { class_id: 8, start: 0, end: 9 },
                WindowInterval { class_id: 1, start: 14, end: 30 },
            ],
        },
    ];
    let targets = LevelTargets::stack(&anns.map(|a| assign_targets(&a, &cfg).unwrap()));
    let (_, grads) = model_loss(&model, &frames, &targets, true);
    let h = 1e-5;
    let (mut worst, mut informative) = (0.0f64, 0);
    for _ in 0..coords {
        let (name, g) = &grads[r.random_range(0..grads.len())];
        let j = r.random_range(0..g.len());
        let orig = model.store.get(name).unwrap().data()[j];
        model.store.get_mut(name).unwrap().data_mut()[j] = orig + h;
        let (plus, _) = model_loss(&model, &frames, &targets, false);
        model.store.get_mut(name).unwrap().data_mut()[j] = orig - h;
        let (minus, _) = model_loss(&model, &frames, &targets, false);
        model.store.get_mut(name).unwrap().data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(rel_err(g[j], numeric, 1e-6));
        informative += (numeric.abs() > 1e-4) as usize;
    }
    (worst, informative)
}
