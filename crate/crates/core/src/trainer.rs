//! The training loop.
//!
//! Each step draws a batch of windows from the sampler, optionally mixes it
//! with a second batch, runs the model in train mode, backpropagates the
//! multi-level loss and applies Adam with a cosine learning rate. All
//! randomness comes from one seeded generator whose position is stored in
//! checkpoints, so a resumed run continues exactly where it stopped.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::dataset::Dataset;
use crate::decoder::{greedy_intervals, slide_video, DecodeConfig, WindowModel};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::head::HeadConfig;
use crate::metric::{evaluate, MetricConfig, SignInterval, SpottingReport};
use crate::model::HsModel;
use crate::nn::{apply_bn_updates, collect_grads, Forward, Mode};
use crate::objective::{assign_targets, mix_frames, multi_level_loss_node, sample_lambda, LevelTargets};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::sampler::{Sampler, SamplerConfig};
use crate::tensor::Tensor;
use crate::video::VideoFrames;

/// Augmentations named in the config but not applied; enabling one only
/// logs a warning.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub random_crop: bool,
    pub rotation: bool,
    pub horizontal_flip: bool,
    pub color_jitter: bool,
    pub grayscale: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub rsp: f64,
    /// `Beta(alpha, alpha)` mixup; 0 turns mixup off.
    pub mixup_alpha: f64,
    pub rebalance: bool,
    /// Windows drawn per epoch.
    pub windows_per_epoch: usize,
    /// Validate every this many epochs when validation data is given; 0
    /// validates only after the last epoch.
    pub val_every: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr0: 2e-3,
            rsp: 0.1,
            mixup_alpha: 0.0,
            rebalance: true,
            windows_per_epoch: 256,
            val_every: 0,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.windows_per_epoch == 0 {
            return Err(Error::Config("epochs, batch_size and windows_per_epoch must be positive".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 {} must be a non-negative number", self.lr0)));
        }
        if !(0.0..=1.0).contains(&self.rsp) {
            return Err(Error::Config(format!("rsp {} outside [0, 1]", self.rsp)));
        }
        if !(self.mixup_alpha >= 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::Config(format!("mixup_alpha {} must be non-negative", self.mixup_alpha)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.windows_per_epoch.div_ceil(self.batch_size)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: Option<f64>,
}

pub fn write_log(logs: &[EpochLog], mut w: impl Write) -> Result<()> {
    writeln!(w, "epoch,train_loss,val_f1")?;
    for l in logs {
        let f1 = l.val_f1.map(|f| format!("{f:.6}")).unwrap_or_default();
        writeln!(w, "{},{:.6},{f1}", l.epoch, l.train_loss)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainState {
    epoch: usize,
    step: usize,
    adam_step: u64,
    adam: AdamConfig,
    rng: RngState,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: HsModel<f32>,
    pub adam: Adam<f32>,
    sampler: Sampler,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(model_cfg: HeadConfig, cfg: TrainConfig, data: &Dataset) -> Result<Self> {
        let model = HsModel::new(model_cfg, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Self::assemble(model, cfg, data, rng, Adam::new(AdamConfig::default()), 0, 0)
    }

    fn assemble(
        model: HsModel<f32>,
        cfg: TrainConfig,
        data: &Dataset,
        rng: ChaCha8Rng,
        adam: Adam<f32>,
        epoch: usize,
        step: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let spec = model.cfg.pyramid;
        for v in &data.videos {
            if (v.height, v.width) != (spec.input_h, spec.input_w) {
                return Err(Error::Config(format!(
                    "frames are {}x{}, model expects {}x{}",
                    v.height, v.width, spec.input_h, spec.input_w
                )));
            }
        }
        let a = &cfg.augment;
        if a.random_crop || a.rotation || a.horizontal_flip || a.color_jitter || a.grayscale {
            log::warn!("augmentations are not implemented and will be skipped");
        }
        let sampler = Sampler::new(
            data.tracks.clone(),
            SamplerConfig {
                rsp: cfg.rsp,
                window: spec.input_t,
                rebalance: cfg.rebalance,
                seed: cfg.seed,
            },
            model.cfg.num_classes,
        )?;
        Ok(Trainer {
            cfg,
            model,
            adam,
            sampler,
            rng,
            epoch,
            step,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.cfg.steps_per_epoch()
    }

    fn draw(&mut self, videos: &[VideoFrames]) -> Result<(Tensor<f32>, LevelTargets)> {
        let window = self.model.cfg.pyramid.input_t;
        let spec = self.model.cfg.pyramid;
        let mut data = Vec::with_capacity(self.cfg.batch_size * 3 * window * spec.input_h * spec.input_w);
        let mut targets = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let w = self.sampler.sample(&mut self.rng);
            videos[w.track].window_into(w.annotation.window_start, window, &mut data);
            targets.push(assign_targets(&w.annotation, &self.model.cfg)?);
        }
        let frames = Tensor::new(
            vec![self.cfg.batch_size, 3, window, spec.input_h, spec.input_w],
            data,
        )?;
        Ok((frames, LevelTargets::stack(&targets)))
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self, videos: &[VideoFrames]) -> Result<f64> {
        let (frames_a, targets_a) = self.draw(videos)?;
        let (frames, terms) = if self.cfg.mixup_alpha > 0.0 {
            let (frames_b, targets_b) = self.draw(videos)?;
            let lambda = sample_lambda(self.cfg.mixup_alpha, &mut self.rng)?;
            (mix_frames(&frames_a, &frames_b, lambda)?, vec![(lambda, targets_a), (1.0 - lambda, targets_b)])
        } else {
            (frames_a, vec![(1.0, targets_a)])
        };

        let (epoch, step) = (self.epoch + 1, self.step + 1);
        let at = |e: Error| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m} at epoch {epoch} step {step}")),
            other => other,
        };
        let mut graph = Graph::new();
        let x = graph.input(frames);
        let mut f = Forward::new(&mut graph, &self.model.store, Mode::Train);
        let logits = self.model.forward(&mut f, x).map_err(at)?;
        let vars = f.param_vars().clone();
        let bn = f.take_bn_updates();
        let refs: Vec<(f64, &LevelTargets)> = terms.iter().map(|(w, t)| (*w, t)).collect();
        let loss_var = multi_level_loss_node(&mut graph, logits, &refs).map_err(at)?;
        let loss = graph.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            return Err(at(Error::Numeric(format!("training loss {loss}"))));
        }
        graph.backward(loss_var).map_err(at)?;
        collect_grads(&graph, &vars, &mut self.model.store)?;
        apply_bn_updates(&mut self.model.store, &bn)?;
        let lr = cosine_lr(self.step, self.total_steps(), self.cfg.lr0);
        self.adam.step(&mut self.model.store, lr);
        self.step += 1;
        Ok(loss)
    }

    /// Runs one epoch and returns the mean batch loss.
    pub fn run_epoch(&mut self, videos: &[VideoFrames]) -> Result<f64> {
        let n = self.cfg.steps_per_epoch();
        let mut total = 0.0;
        for _ in 0..n {
            total += self.step(videos)?;
        }
        self.epoch += 1;
        Ok(total / n as f64)
    }

    /// Trains until `cfg.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn train(
        &mut self,
        data: &Dataset,
        val: Option<(&Dataset, &DecodeConfig, &MetricConfig)>,
        mut on_epoch: impl FnMut(&EpochLog, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.cfg.epochs {
            let train_loss = self.run_epoch(&data.videos)?;
            let last = self.epoch == self.cfg.epochs;
            let due = self.cfg.val_every > 0 && self.epoch % self.cfg.val_every == 0;
            let val_f1 = match val {
                Some((v, decode, metric)) if last || due => Some(evaluate_model(&[&self.model], v, decode, metric)?.0.f1),
                _ => None,
            };
            let log = EpochLog {
                epoch: self.epoch,
                train_loss,
                val_f1,
            };
            log::info!("epoch {} loss {:.4} val_f1 {:?}", log.epoch, log.train_loss, log.val_f1);
            on_epoch(&log, self)?;
            logs.push(log);
        }
        Ok(logs)
    }

    /// Model, optimizer moments and generator position.
    pub fn to_container(&self) -> Result<Container> {
        let mut c = self.model.to_container()?;
        for (prefix, moments) in [("adam.m", &self.adam.first), ("adam.v", &self.adam.second)] {
            for (name, v) in moments {
                c.insert(format!("{prefix}.{name}"), &Tensor::new(vec![v.len()], v.clone())?);
            }
        }
        let state = TrainState {
            epoch: self.epoch,
            step: self.step,
            adam_step: self.adam.step,
            adam: self.adam.config,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
        };
        let meta = c
            .metadata
            .as_object_mut()
            .ok_or_else(|| Error::Config("model metadata is not an object".into()))?;
        meta.insert("train".into(), serde_json::to_value(&self.cfg)?);
        meta.insert("state".into(), serde_json::to_value(&state)?);
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    /// Continues a run saved by [`Trainer::save`]. `epochs` may be raised to
    /// extend the schedule; everything else comes from the checkpoint.
    pub fn resume(c: &Container, data: &Dataset) -> Result<Self> {
        let model = HsModel::from_container(c)?;
        let field = |k: &str| {
            c.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("checkpoint has no {k} state; it holds weights only")))
        };
        let cfg: TrainConfig = serde_json::from_value(field("train")?)?;
        let state: TrainState = serde_json::from_value(field("state")?)?;
        let mut adam = Adam::new(state.adam);
        adam.step = state.adam_step;
        for p in model.store.iter() {
            for (prefix, moments) in [("adam.m", &mut adam.first), ("adam.v", &mut adam.second)] {
                let key = format!("{prefix}.{}", p.name);
                if c.get(&key).is_some() {
                    let t = c.require::<f32>(&key, Some(&[p.tensor.len()]))?;
                    moments.insert(p.name.clone(), t.into_data());
                }
            }
        }
        let mut rng = ChaCha8Rng::from_seed(state.rng.seed);
        rng.set_stream(state.rng.stream);
        let word_pos: u128 = state
            .rng
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad generator position {:?}", state.rng.word_pos)))?;
        rng.set_word_pos(word_pos);
        Self::assemble(model, cfg, data, rng, adam, state.epoch, state.step)
    }
}

/// Decodes every video of `data` with the ensemble of `models` and scores
/// the result against its annotations.
pub fn evaluate_model(
    models: &[&dyn WindowModel],
    data: &Dataset,
    decode: &DecodeConfig,
    metric: &MetricConfig,
) -> Result<(SpottingReport, Vec<SignInterval>)> {
    let preds = spot_dataset(models, data, decode)?;
    let gts: Vec<SignInterval> = data.tracks.iter().flat_map(|t| t.intervals.iter().cloned()).collect();
    Ok((evaluate(&preds, &gts, metric), preds))
}

/// Predicted intervals for every video of `data`, in video order.
pub fn spot_dataset(models: &[&dyn WindowModel], data: &Dataset, decode: &DecodeConfig) -> Result<Vec<SignInterval>> {
    let per_video: Vec<Vec<SignInterval>> = data
        .tracks
        .par_iter()
        .zip(&data.videos)
        .map(|(t, v)| {
            let traces = models
                .iter()
                .map(|m| slide_video(v, *m, &decode.levels, decode.stride, decode.batch))
                .collect::<Result<Vec<_>>>()?;
            let probs = crate::decoder::ensemble(&traces)?;
            Ok(greedy_intervals(&probs, &t.video_id, probs.classes - 1, decode.min_len))
        })
        .collect::<Result<_>>()?;
    Ok(per_video.into_iter().flatten().collect())
}
