//! Feature-pyramid extraction.
//!
//! The head consumes three features at temporal extents `T/2`, `T/4`, `T/8`
//! and spatial extents `H/8`, `H/16`, `H/32`. [`MiniBackbone`] is a small
//! trainable 3D CNN that honors that contract; externally extracted features
//! can be loaded instead with [`load_feature_pyramid`].

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeometry;
use crate::nn::{Conv3d, ConvBnSwish, Forward, ParamStore};
use crate::tensor::{Real, Tensor};

pub const TEMPORAL_DIVISORS: [usize; 3] = [2, 4, 8];
pub const SPATIAL_DIVISORS: [usize; 3] = [8, 16, 32];

/// Window geometry and pyramid channel widths `(fine, mid, coarse)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidSpec {
    pub input_t: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub channels: [usize; 3],
}

impl Default for PyramidSpec {
    fn default() -> Self {
        PyramidSpec::desk()
    }
}

impl PyramidSpec {
    /// 32 frames at 224x224 with Inception-I3D tap widths.
    pub fn full_size() -> Self {
        PyramidSpec {
            input_t: 32,
            input_h: 224,
            input_w: 224,
            channels: [480, 832, 1024],
        }
    }

    /// Small geometry used for desk-scale experiments.
    pub fn desk() -> Self {
        PyramidSpec {
            input_t: 32,
            input_h: 32,
            input_w: 32,
            channels: [24, 40, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_t == 0 || self.input_t % 8 != 0 {
            return Err(Error::Config(format!("window length {} must be a positive multiple of 8", self.input_t)));
        }
        if self.input_h == 0 || self.input_w == 0 || self.input_h % 32 != 0 || self.input_w % 32 != 0 {
            return Err(Error::Config(format!(
                "frame size {}x{} must be a positive multiple of 32",
                self.input_h, self.input_w
            )));
        }
        if self.channels.iter().any(|&c| c < 2 || c % 2 != 0) {
            return Err(Error::Config(format!("pyramid channels {:?} must be even and >= 2", self.channels)));
        }
        Ok(())
    }

    /// Per-item `[C, T, H, W]` of the fine, mid and coarse features.
    pub fn level_shapes(&self) -> [[usize; 4]; 3] {
        std::array::from_fn(|i| {
            [
                self.channels[i],
                self.input_t / TEMPORAL_DIVISORS[i],
                self.input_h / SPATIAL_DIVISORS[i],
                self.input_w / SPATIAL_DIVISORS[i],
            ]
        })
    }
}

/// Backbone outputs, each `[N, C, T, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<R: Real> {
    pub fine: Tensor<R>,
    pub mid: Tensor<R>,
    pub coarse: Tensor<R>,
}

impl<R: Real> FeaturePyramid<R> {
    pub fn validate(&self, spec: &PyramidSpec) -> Result<()> {
        let n = self.fine.shape().first().copied().unwrap_or(0);
        for ((name, t), s) in ["fine", "mid", "coarse"]
            .into_iter()
            .zip([&self.fine, &self.mid, &self.coarse])
            .zip(spec.level_shapes())
        {
            let expected = vec![n, s[0], s[1], s[2], s[3]];
            if t.shape() != expected.as_slice() {
                return Err(Error::Shape {
                    name: name.to_string(),
                    expected,
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.fine.shape()[0]
    }
}

/// Pyramid features as graph handles.
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    pub fine: Var,
    pub mid: Var,
    pub coarse: Var,
}

impl PyramidVars {
    pub fn from_tensors<R: Real>(graph: &mut Graph<R>, pyramid: &FeaturePyramid<R>) -> Self {
        PyramidVars {
            fine: graph.input(pyramid.fine.clone()),
            mid: graph.input(pyramid.mid.clone()),
            coarse: graph.input(pyramid.coarse.clone()),
        }
    }
}

/// Four (conv 3x3x3, batch norm, swish) stages. Stage one downsamples space by
/// four; the others halve time and space. Stages two to four are tapped.
#[derive(Clone, Debug)]
pub struct MiniBackbone {
    pub spec: PyramidSpec,
    pub stages: Vec<ConvBnSwish>,
}

impl MiniBackbone {
    pub fn new(spec: PyramidSpec) -> Result<Self> {
        spec.validate()?;
        let [fine, mid, coarse] = spec.channels;
        let widths = [3, (fine / 2).max(1), fine, mid, coarse];
        let strides = [[1, 4, 4], [2, 2, 2], [2, 2, 2], [2, 2, 2]];
        let stages = (0..4)
            .map(|i| {
                let geom = ConvGeometry::strided(strides[i]).with_padding([1, 1, 1]);
                ConvBnSwish::new(Conv3d::new(format!("backbone.stage{}", i + 1), widths[i], widths[i + 1], [3, 3, 3]).geometry(geom))
            })
            .collect();
        Ok(MiniBackbone { spec, stages })
    }

    pub fn register<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<()> {
        self.stages.iter().try_for_each(|s| s.register(store, rng))
    }

    /// Shape propagation through the stages without computing values.
    pub fn output_shapes(&self, batch: usize) -> Result<[Vec<usize>; 3]> {
        let mut shape = vec![batch, 3, self.spec.input_t, self.spec.input_h, self.spec.input_w];
        let mut taps = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            shape = stage.conv.output_shape(&shape)?;
            if i >= 1 {
                taps.push(shape.clone());
            }
        }
        Ok([taps[0].clone(), taps[1].clone(), taps[2].clone()])
    }

    /// `frames` is `[N, 3, T, H, W]` with values in `[-1, 1]`.
    pub fn forward<R: Real>(&self, f: &mut Forward<'_, R>, frames: Var) -> Result<PyramidVars> {
        let s = self.spec;
        let shape = f.graph.shape(frames);
        if shape.len() != 5 || shape[1] != 3 || shape[2..] != [s.input_t, s.input_h, s.input_w] {
            return Err(Error::contract(
                "mini_backbone_forward",
                format!("frames {:?} do not match window {}x{}x{}", shape, s.input_t, s.input_h, s.input_w),
            ));
        }
        let mut x = frames;
        let mut taps = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(f, x)?;
            if i >= 1 {
                taps.push(x);
            }
        }
        Ok(PyramidVars {
            fine: taps[0],
            mid: taps[1],
            coarse: taps[2],
        })
    }
}

pub fn save_feature_pyramid<R: Real>(pyramid: &FeaturePyramid<R>, path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new();
    c.insert("fine", &pyramid.fine);
    c.insert("mid", &pyramid.mid);
    c.insert("coarse", &pyramid.coarse);
    c.save(path)
}

/// Reads `fine`, `mid` and `coarse` entries and checks them against `spec`.
pub fn load_feature_pyramid<R: Real>(path: impl AsRef<Path>, spec: &PyramidSpec) -> Result<FeaturePyramid<R>> {
    let c = Container::load(path)?;
    let pyramid = FeaturePyramid {
        fine: c.require("fine", None)?,
        mid: c.require("mid", None)?,
        coarse: c.require("coarse", None)?,
    };
    pyramid.validate(spec)?;
    Ok(pyramid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_shapes() {
        let b = MiniBackbone::new(PyramidSpec::full_size()).unwrap();
        let [fine, mid, coarse] = b.output_shapes(1).unwrap();
        assert_eq!(fine, vec![1, 480, 16, 28, 28]);
        assert_eq!(mid, vec![1, 832, 8, 14, 14]);
        assert_eq!(coarse, vec![1, 1024, 4, 7, 7]);
    }

    #[test]
    fn desk_shapes() {
        let spec = PyramidSpec::desk();
        let b = MiniBackbone::new(spec).unwrap();
        let [fine, mid, coarse] = b.output_shapes(2).unwrap();
        assert_eq!(fine, vec![2, 24, 16, 4, 4]);
        assert_eq!(mid, vec![2, 40, 8, 2, 2]);
        assert_eq!(coarse, vec![2, 64, 4, 1, 1]);
        let ls = spec.level_shapes();
        assert_eq!(ls[0], [24, 16, 4, 4]);
        assert_eq!(ls[2], [64, 4, 1, 1]);
    }

    #[test]
    fn divisibility_enforced() {
        let mut s = PyramidSpec::desk();
        s.input_t = 12;
        assert!(MiniBackbone::new(s).is_err());
        let mut s = PyramidSpec::desk();
        s.input_h = 48;
        assert!(s.validate().is_err());
    }
}
