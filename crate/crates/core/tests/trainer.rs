use hsi3d::checkpoint::Container;
use hsi3d::dataset::Dataset;
use hsi3d::head::HeadConfig;
use hsi3d::synth::{generate, SynthConfig};
use hsi3d::trainer::{Trainer, TrainConfig};
use hsi3d::video::VideoFrames;
use hsi3d::Error;

fn small_data() -> Dataset {
    generate(&SynthConfig {
        num_videos: 4,
        video_len: 200,
        signs_per_video: 5,
        ..SynthConfig::default()
    })
    .unwrap()
    .dataset
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        windows_per_epoch: 32,
        ..TrainConfig::default()
    }
}

fn params(t: &Trainer) -> Vec<(String, Vec<f32>)> {
    t.model.store.iter().map(|p| (p.name.clone(), p.tensor.data().to_vec())).collect()
}

#[test]
fn smoke_run_logs_every_epoch() {
    let data = small_data();
    let mut t = Trainer::new(HeadConfig::default(), quick(2), &data).unwrap();
    let mut seen = 0;
    let logs = t.train(&data, None, |_, _| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!((logs.len(), seen, t.epoch, t.step), (2, 2, 2, 8));
    assert!(logs.iter().all(|l| l.train_loss.is_finite() && l.val_f1.is_none()));
}

#[test]
fn loss_goes_down() {
    let data = small_data();
    let cfg = TrainConfig {
        windows_per_epoch: 64,
        ..quick(10)
    };
    let mut t = Trainer::new(HeadConfig::default(), cfg, &data).unwrap();
    let logs = t.train(&data, None, |_, _| Ok(())).unwrap();
    let first = logs[0].train_loss;
    let last = logs[8..].iter().map(|l| l.train_loss).sum::<f64>() / 2.0;
    assert!(last < 0.6 * first, "loss {first} -> {last}");
}

#[test]
fn resumed_run_continues_identically() {
    let data = small_data();
    let mut a = Trainer::new(HeadConfig::default(), quick(3), &data).unwrap();
    a.run_epoch(&data.videos).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    a.save(&path).unwrap();
    let mut b = Trainer::resume(&Container::load(&path).unwrap(), &data).unwrap();
    assert_eq!((b.epoch, b.step), (a.epoch, a.step));
    for _ in 0..3 {
        let la = a.step(&data.videos).unwrap();
        let lb = b.step(&data.videos).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
    }
    assert_eq!(params(&a), params(&b));
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let data = small_data();
    let cfg = TrainConfig {
        lr0: 0.0,
        ..quick(1)
    };
    let mut t = Trainer::new(HeadConfig::default(), cfg, &data).unwrap();
    let before = params(&t);
    t.run_epoch(&data.videos).unwrap();
    assert_eq!(params(&t), before);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = small_data();
    let mut t = Trainer::new(HeadConfig::default(), quick(1), &data).unwrap();
    t.run_epoch(&data.videos).unwrap();
    let c = t.to_container().unwrap();
    let bytes = c.to_bytes().unwrap();
    let back = Container::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let model = hsi3d::model::HsModel::<f32>::from_container(&back).unwrap();
    let values = |s: &hsi3d::nn::ParamStore<f32>| {
        let p: Vec<(String, Vec<u32>)> = s.iter().map(|p| (p.name.clone(), p.tensor.data().iter().map(|v| v.to_bits()).collect())).collect();
        let b: Vec<(String, Vec<u32>)> = s.buffers().map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect())).collect();
        (p, b)
    };
    assert_eq!(values(&model.store), values(&t.model.store));
}

#[test]
fn weights_only_checkpoint_cannot_resume() {
    let data = small_data();
    let t = Trainer::new(HeadConfig::default(), quick(1), &data).unwrap();
    let c = t.model.to_container().unwrap();
    assert!(matches!(Trainer::resume(&c, &data), Err(Error::Config(_))));
}

#[test]
fn non_finite_input_names_the_step() {
    let mut data = small_data();
    let v = &data.videos[0];
    let mut px = v.data().to_vec();
    px.iter_mut().for_each(|p| *p = f32::NAN);
    data.videos = vec![VideoFrames::new(v.len, v.height, v.width, px).unwrap(); data.len()];
    let mut t = Trainer::new(HeadConfig::default(), quick(1), &data).unwrap();
    match t.step(&data.videos) {
        Err(Error::Numeric(m)) => assert!(m.contains("epoch 1 step 1"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn frame_size_mismatch_is_a_config_error() {
    let data = small_data();
    let mut cfg = HeadConfig::default();
    cfg.pyramid.input_h = 64;
    cfg.pyramid.input_w = 64;
    assert!(matches!(Trainer::new(cfg, quick(1), &data), Err(Error::Config(_))));
}
