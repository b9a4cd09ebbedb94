//! Backbone and head bundled with their parameters.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{FeaturePyramid, MiniBackbone, PyramidVars};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{HeadConfig, HsHead, LevelLogits};
use crate::nn::{Forward, Mode, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct HsModel<R: Real> {
    pub cfg: HeadConfig,
    pub backbone: MiniBackbone,
    pub head: HsHead,
    pub store: ParamStore<R>,
}

impl<R: Real> HsModel<R> {
    /// Builds the architecture and initializes parameters from `seed`.
    pub fn new(cfg: HeadConfig, seed: u64) -> Result<Self> {
        let backbone = MiniBackbone::new(cfg.pyramid)?;
        let head = HsHead::new(cfg)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        backbone.register(&mut store, &mut rng)?;
        head.register(&mut store, &mut rng)?;
        Ok(HsModel {
            cfg,
            backbone,
            head,
            store,
        })
    }

    /// Frames `[N, 3, T, H, W]` to per-level logit handles.
    pub fn forward(&self, f: &mut Forward<'_, R>, frames: Var) -> Result<[Var; 5]> {
        let pyramid = self.backbone.forward(f, frames)?;
        self.head.forward(f, pyramid)
    }

    /// Eval-mode logits for a batch of windows.
    pub fn predict(&self, frames: &Tensor<R>) -> Result<LevelLogits<R>> {
        let mut graph = Graph::new();
        let x = graph.input(frames.clone());
        let mut f = Forward::new(&mut graph, &self.store, Mode::Eval);
        let vars = self.forward(&mut f, x)?;
        Ok(collect(&graph, vars))
    }

    /// Eval-mode logits from precomputed pyramid features.
    pub fn predict_from_pyramid(&self, pyramid: &FeaturePyramid<R>) -> Result<LevelLogits<R>> {
        pyramid.validate(&self.cfg.pyramid)?;
        let mut graph = Graph::new();
        let vars = PyramidVars::from_tensors(&mut graph, pyramid);
        let mut f = Forward::new(&mut graph, &self.store, Mode::Eval);
        let out = self.head.forward(&mut f, vars)?;
        Ok(collect(&graph, out))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        self.store.write_to(&mut c);
        c.metadata = serde_json::json!({ "model": self.cfg });
        Ok(c)
    }

    /// Rebuilds a model from a container written by [`HsModel::to_container`].
    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg: HeadConfig = serde_json::from_value(
            c.metadata
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Config("checkpoint has no model config".into()))?,
        )?;
        let mut model = Self::new(cfg, 0)?;
        model.store.read_from(c)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

pub(crate) fn collect<R: Real>(graph: &Graph<R>, vars: [Var; 5]) -> LevelLogits<R> {
    LevelLogits {
        levels: vars.map(|v| graph.value(v).clone()),
    }
}
