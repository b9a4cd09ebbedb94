use hsi3d::synth::{generate, SynthConfig};
use hsi3d::video::VideoFrames;
use hsi3d::SignInterval;

fn quiet() -> SynthConfig {
    SynthConfig {
        num_videos: 6,
        noise_level: 0.0,
        ..SynthConfig::default()
    }
}

fn lit(v: &VideoFrames, t: usize, y: usize, x: usize) -> bool {
    (0..3).any(|c| v.pixel(c, t, y, x) != 0.0)
}

/// Mean color of lit pixels and net displacement of the lit centroid from
/// the first to the last frame.
fn features(v: &VideoFrames, iv: &SignInterval) -> [f64; 5] {
    let mut color = [0.0; 3];
    let mut n = 0.0;
    let centroid = |t: usize| {
        let (mut sy, mut sx, mut m) = (0.0, 0.0, 0.0);
        for y in 0..v.height {
            for x in 0..v.width {
                if lit(v, t, y, x) {
                    sy += y as f64;
                    sx += x as f64;
                    m += 1.0;
                }
            }
        }
        (sy / m, sx / m)
    };
    for t in iv.start..iv.end {
        for y in 0..v.height {
            for x in 0..v.width {
                if lit(v, t, y, x) {
                    (0..3).for_each(|c| color[c] += v.pixel(c, t, y, x) as f64);
                    n += 1.0;
                }
            }
        }
    }
    let (y0, x0) = centroid(iv.start);
    let (y1, x1) = centroid(iv.end - 1);
    let scale = v.width as f64 / 2.0;
    [color[0] / n, color[1] / n, color[2] / n, (y1 - y0) / scale, (x1 - x0) / scale]
}

fn nearest_centroid_accuracy(cfg: &SynthConfig, dims: std::ops::Range<usize>) -> f64 {
    let set = generate(cfg).unwrap();
    let data = &set.dataset;
    let k = cfg.num_classes;
    let samples: Vec<(usize, [f64; 5], usize)> = data
        .tracks
        .iter()
        .zip(&data.videos)
        .enumerate()
        .flat_map(|(vi, (t, v))| t.intervals.iter().map(move |iv| (iv.class_id, features(v, iv), vi)))
        .collect();
    let train_videos = cfg.num_videos / 2;
    let mut sums = vec![[0.0; 5]; k];
    let mut counts = vec![0.0; k];
    for (c, f, vi) in &samples {
        if *vi < train_videos {
            (0..5).for_each(|d| sums[*c][d] += f[d]);
            counts[*c] += 1.0;
        }
    }
    let (mut right, mut total) = (0, 0);
    for (c, f, vi) in &samples {
        if *vi < train_videos {
            continue;
        }
        let dist = |j: usize| dims.clone().map(|d| (f[d] - sums[j][d] / counts[j]).powi(2)).sum::<f64>();
        let guess = (0..k).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
        right += (guess == *c) as usize;
        total += 1;
    }
    right as f64 / total as f64
}

#[test]
fn classes_are_separable_by_color_and_by_motion() {
    let cfg = quiet();
    assert!(nearest_centroid_accuracy(&cfg, 0..3) > 0.95);
    assert!(nearest_centroid_accuracy(&cfg, 3..5) > 0.95);
}

#[test]
fn same_seed_same_bytes() {
    let a = generate(&quiet()).unwrap();
    let b = generate(&quiet()).unwrap();
    assert_eq!(a.dataset, b.dataset);
    let c = generate(&SynthConfig { seed: 1, ..quiet() }).unwrap();
    assert_ne!(a.dataset.videos[0], c.dataset.videos[0]);
}

#[test]
fn layout_respects_the_config() {
    let cfg = SynthConfig {
        num_videos: 10,
        ..SynthConfig::default()
    };
    let set = generate(&cfg).unwrap();
    let mut seen = vec![false; cfg.num_classes];
    for (track, distractors) in set.dataset.tracks.iter().zip(&set.distractors) {
        assert_eq!(track.num_frames, cfg.video_len);
        assert_eq!(track.intervals.len(), cfg.signs_per_video);
        assert_eq!(distractors.len(), cfg.distractors_per_video());
        let mut all: Vec<&SignInterval> = track.intervals.iter().chain(distractors).collect();
        all.sort_by_key(|iv| iv.start);
        assert!(all[0].start >= cfg.min_gap);
        assert!(all.last().unwrap().end + cfg.min_gap <= cfg.video_len);
        for w in all.windows(2) {
            assert!(w[0].end + cfg.min_gap <= w[1].start);
        }
        for iv in &all {
            assert!((cfg.min_sign_len..=cfg.max_sign_len).contains(&iv.len()));
        }
        track.intervals.iter().for_each(|iv| seen[iv.class_id] = true);
    }
    assert!(seen.iter().all(|&s| s));
    let ratio = cfg.distractors_per_video() as f64 / (cfg.distractors_per_video() + cfg.signs_per_video) as f64;
    assert!((ratio - cfg.distractor_rate).abs() < 0.05);
}

#[test]
fn gaps_are_dark_without_noise() {
    let set = generate(&quiet()).unwrap();
    let (track, video) = (&set.dataset.tracks[0], &set.dataset.videos[0]);
    let busy = |t: usize| track.intervals.iter().chain(&set.distractors[0]).any(|iv| iv.start <= t && t < iv.end);
    for t in 0..video.len {
        let any = (0..video.height).any(|y| (0..video.width).any(|x| lit(video, t, y, x)));
        assert_eq!(any, busy(t), "frame {t}");
    }
}

#[test]
fn infeasible_layouts_are_rejected() {
    let cfg = SynthConfig {
        video_len: 100,
        ..SynthConfig::default()
    };
    assert!(matches!(generate(&cfg), Err(hsi3d::Error::Config(_))));
}
