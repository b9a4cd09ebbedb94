mod common;

use common::rng;
use hsi3d::head::{HeadConfig, Level};
use hsi3d::objective::{assign_targets, multi_level_loss, WindowAnnotation, WindowInterval};
use hsi3d::{LevelLogits, Tensor};
use rand::Rng;

/// Label of frames `[a, b)`: the interval with the most frames inside,
/// then the earliest start, then the lowest class; background if none.
fn cell_oracle(ann: &WindowAnnotation, a: usize, b: usize, bg: usize) -> usize {
    let mut frames = vec![0usize; ann.intervals.len()];
    for f in a..b {
        for (i, iv) in ann.intervals.iter().enumerate() {
            if iv.start <= f && f < iv.end {
                frames[i] += 1;
            }
        }
    }
    let mut order: Vec<usize> = (0..ann.intervals.len()).filter(|&i| frames[i] > 0).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(frames[i]), ann.intervals[i].start, ann.intervals[i].class_id));
    order.first().map_or(bg, |&i| ann.intervals[i].class_id)
}

fn random_annotation(r: &mut impl Rng, window: usize, classes: usize) -> WindowAnnotation {
    let mut intervals = Vec::new();
    let mut t = r.random_range(0..6);
    while t < window {
        let e = (t + r.random_range(1..12)).min(window);
        intervals.push(WindowInterval {
            class_id: r.random_range(0..classes),
            start: t,
            end: e,
        });
        t = e + r.random_range(0..5);
    }
    WindowAnnotation {
        window_start: 0,
        length: window,
        intervals,
    }
}

#[test]
fn targets_follow_the_largest_overlap() {
    let cfg = HeadConfig::default();
    let w = cfg.pyramid.input_t;
    let mut r = rng(8);
    for _ in 0..500 {
        let ann = random_annotation(&mut r, w, cfg.num_classes);
        let got = assign_targets(&ann, &cfg).unwrap();
        for level in Level::ALL {
            let cell = w / level.extent(w);
            let want: Vec<usize> = (0..level.extent(w))
                .map(|k| cell_oracle(&ann, k * cell, (k + 1) * cell, cfg.num_classes))
                .collect();
            assert_eq!(got.get(level), &want[..], "{level} {ann:?}");
        }
    }
}

#[test]
fn level_targets_have_expected_extents() {
    let cfg = HeadConfig::default();
    let t = assign_targets(&WindowAnnotation::background(0, 32), &cfg).unwrap();
    assert_eq!(Level::ALL.map(|l| t.get(l).len()), [4, 8, 16, 32, 32]);
    assert!(t.levels.iter().flatten().all(|&c| c == cfg.num_classes));
}

#[test]
fn loss_is_the_mean_of_level_cross_entropies() {
    let cfg = HeadConfig::default();
    let k = cfg.outputs();
    let mut r = rng(9);
    let ann = random_annotation(&mut r, 32, cfg.num_classes);
    let targets = assign_targets(&ann, &cfg).unwrap();
    let levels = Level::ALL.map(|l| Tensor::<f64>::from_fn(&[1, k, l.extent(32)], |_| r.random_range(-3.0..3.0)));
    let logits = LevelLogits { levels };
    let mut want = 0.0;
    for l in Level::ALL {
        let t = logits.get(l);
        let p = t.shape()[2];
        let mut ce = 0.0;
        for j in 0..p {
            let z: f64 = (0..k).map(|c| t.data()[c * p + j].exp()).sum();
            ce += z.ln() - t.data()[targets.get(l)[j] * p + j];
        }
        want += ce / p as f64 / 5.0;
    }
    let got = multi_level_loss(&logits, &targets).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn bad_annotations_are_rejected() {
    let cfg = HeadConfig::default();
    let short = WindowAnnotation::background(0, 16);
    assert!(assign_targets(&short, &cfg).is_err());
    let bad = WindowAnnotation {
        window_start: 0,
        length: 32,
        intervals: vec![WindowInterval { class_id: 99, start: 0, end: 4 }],
    };
    assert!(assign_targets(&bad, &cfg).is_err());
}
