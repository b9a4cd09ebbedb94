//! Hierarchical temporal head.
//!
//! The head walks the pyramid from coarse to fine in time, U-Net style:
//!
//! ```text
//! p4  = POOL(coarse)                          -> logits x4
//! m8  = MERGE(CAT(UP(p4),  DOWN+POOL(mid)))   -> logits x8
//! m16 = MERGE(CAT(UP(m8),  DOWN+POOL(fine)))  -> logits x16
//! u32 = CONV(UP(m16))                         -> logits x32
//! x   = CAT(INTER(p4), INTER(m8), INTER(m16), u32)  -> logits x
//! ```
//!
//! Every level has its own classifier with `C + 1` outputs; index `C` is the
//! background class.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{PyramidSpec, PyramidVars};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::kernels::ConvGeometry;
use crate::nn::{BatchNorm, Conv3d, ConvBnSwish, Forward, Linear, ParamStore, UpTemporal};
use crate::tensor::{Real, Tensor};

/// Output granularity of the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    X4,
    X8,
    X16,
    X32,
    /// All levels interpolated to frame rate and concatenated.
    X,
}

impl Level {
    pub const ALL: [Level; 5] = [Level::X4, Level::X8, Level::X16, Level::X32, Level::X];

    /// Frames covered by one prediction cell for a window of `window` frames.
    pub fn stride(self, window: usize) -> usize {
        window / self.extent(window)
    }

    /// Number of predictions per window.
    pub fn extent(self, window: usize) -> usize {
        match self {
            Level::X4 => window / 8,
            Level::X8 => window / 4,
            Level::X16 => window / 2,
            Level::X32 | Level::X => window,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::X4 => "x4",
            Level::X8 => "x8",
            Level::X16 => "x16",
            Level::X32 => "x32",
            Level::X => "x",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Level::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown level {s:?} (expected x4, x8, x16, x32 or x)")))
    }
}

/// Parses a comma-separated level list such as `x8,x16` or `all`.
pub fn parse_levels(s: &str) -> Result<Vec<Level>> {
    if s.trim() == "all" {
        return Ok(Level::ALL.to_vec());
    }
    let mut levels: Vec<Level> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_>>()?;
    levels.sort();
    levels.dedup();
    if levels.is_empty() {
        return Err(Error::Config("empty level list".into()));
    }
    Ok(levels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Vocabulary size, not counting background.
    pub num_classes: usize,
    pub pyramid: PyramidSpec,
}

impl Default for HeadConfig {
    /// Eight classes on the desk-scale pyramid.
    fn default() -> Self {
        HeadConfig {
            num_classes: 8,
            pyramid: PyramidSpec::desk(),
        }
    }
}

impl HeadConfig {
    pub fn full_size() -> Self {
        HeadConfig {
            num_classes: 60,
            pyramid: PyramidSpec::full_size(),
        }
    }

    pub fn outputs(&self) -> usize {
        self.num_classes + 1
    }

    pub fn background(&self) -> usize {
        self.num_classes
    }
}

/// Channel bookkeeping derived at build time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadWidths {
    pub p4: usize,
    pub up8: usize,
    pub down8: usize,
    pub m8: usize,
    pub up16: usize,
    pub down16: usize,
    pub m16: usize,
    pub u32: usize,
    pub concat: usize,
}

/// Residual block with swish that halves channels and strides space down to
/// the coarse resolution, followed by spatial average pooling.
#[derive(Clone, Debug)]
pub struct DownPool {
    pub conv_a: ConvBnSwish,
    pub conv_b: Conv3d,
    pub bn_b: BatchNorm,
    pub shortcut: Conv3d,
    pub bn_shortcut: BatchNorm,
}

impl DownPool {
    pub fn new(name: &str, channels: usize, spatial_stride: usize) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::Config(format!("{name}: cannot halve odd channel count {channels}")));
        }
        let half = channels / 2;
        let strided = ConvGeometry::strided([1, spatial_stride, spatial_stride]);
        Ok(DownPool {
            conv_a: ConvBnSwish::new(Conv3d::new(format!("{name}.conv_a"), channels, half, [1, 3, 3]).geometry(strided.with_padding([0, 1, 1]))),
            conv_b: Conv3d::new(format!("{name}.conv_b"), half, half, [1, 3, 3])
                .geometry(ConvGeometry::unit().with_padding([0, 1, 1]))
                .without_bias(),
            bn_b: BatchNorm::new(format!("{name}.conv_b.bn"), half),
            shortcut: Conv3d::new(format!("{name}.shortcut"), channels, half, [1, 1, 1]).geometry(strided).without_bias(),
            bn_shortcut: BatchNorm::new(format!("{name}.shortcut.bn"), half),
        })
    }

    pub fn register<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<()> {
        self.conv_a.register(store, rng)?;
        self.conv_b.register(store, rng)?;
        self.bn_b.register(store)?;
        self.shortcut.register(store, rng)?;
        self.bn_shortcut.register(store)
    }

    pub fn forward<R: Real>(&self, f: &mut Forward<'_, R>, x: Var) -> Result<Var> {
        let a = self.conv_a.forward(f, x)?;
        let b = self.conv_b.forward(f, a)?;
        let b = self.bn_b.forward(f, b)?;
        let s = self.shortcut.forward(f, x)?;
        let s = self.bn_shortcut.forward(f, s)?;
        let sum = f.graph.add(b, s)?;
        let y = f.graph.swish(sum)?;
        f.graph.global_avg_pool_spatial(y)
    }
}

/// Two pointwise (conv, batch norm, swish) stages; the second maps to
/// `2 * min(ca, cb)` channels.
#[derive(Clone, Debug)]
pub struct Merge {
    pub first: ConvBnSwish,
    pub second: ConvBnSwish,
}

impl Merge {
    pub fn output_channels(ca: usize, cb: usize) -> usize {
        2 * ca.min(cb)
    }

    pub fn new(name: &str, ca: usize, cb: usize) -> Self {
        let c = ca + cb;
        Merge {
            first: ConvBnSwish::new(Conv3d::new(format!("{name}.first"), c, c, [1, 1, 1])),
            second: ConvBnSwish::new(Conv3d::new(format!("{name}.second"), c, Self::output_channels(ca, cb), [1, 1, 1])),
        }
    }

    pub fn register<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<()> {
        self.first.register(store, rng)?;
        self.second.register(store, rng)
    }

    pub fn forward<R: Real>(&self, f: &mut Forward<'_, R>, x: Var) -> Result<Var> {
        let y = self.first.forward(f, x)?;
        self.second.forward(f, y)
    }
}

#[derive(Clone, Debug)]
pub struct HsHead {
    pub cfg: HeadConfig,
    pub widths: HeadWidths,
    up8: UpTemporal,
    down8: DownPool,
    merge8: Merge,
    up16: UpTemporal,
    down16: DownPool,
    merge16: Merge,
    up32: UpTemporal,
    conv32: Conv3d,
    fc: [Linear; 5],
}

impl HsHead {
    pub fn new(cfg: HeadConfig) -> Result<Self> {
        cfg.pyramid.validate()?;
        if cfg.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let [c_fine, c_mid, c_coarse] = cfg.pyramid.channels;
        let spatial = cfg.pyramid.level_shapes().map(|s| s[2]);
        let coarse_spatial = spatial[2];

        let up8 = UpTemporal::new("head.up8", c_coarse)?;
        let down8 = DownPool::new("head.down8", c_mid, spatial[1] / coarse_spatial)?;
        let (u8c, d8c) = (up8.out_channels(), c_mid / 2);
        let merge8 = Merge::new("head.merge8", u8c, d8c);
        let m8 = Merge::output_channels(u8c, d8c);

        let up16 = UpTemporal::new("head.up16", m8)?;
        let down16 = DownPool::new("head.down16", c_fine, spatial[0] / coarse_spatial)?;
        let (u16c, d16c) = (up16.out_channels(), c_fine / 2);
        let merge16 = Merge::new("head.merge16", u16c, d16c);
        let m16 = Merge::output_channels(u16c, d16c);

        let up32 = UpTemporal::new("head.up32", m16)?;
        let u32c = up32.out_channels();
        let conv32 = Conv3d::new("head.conv32", u32c, u32c, [1, 1, 1]);

        let widths = HeadWidths {
            p4: c_coarse,
            up8: u8c,
            down8: d8c,
            m8,
            up16: u16c,
            down16: d16c,
            m16,
            u32: u32c,
            concat: c_coarse + m8 + m16 + u32c,
        };
        if widths.concat != widths.p4 + widths.m8 + widths.m16 + widths.u32 {
            return Err(Error::Config("level-x concatenation width mismatch".into()));
        }
        let k = cfg.outputs();
        let fc = [
            Linear::new("head.fc.x4", c_coarse, k),
            Linear::new("head.fc.x8", m8, k),
            Linear::new("head.fc.x16", m16, k),
            Linear::new("head.fc.x32", u32c, k),
            Linear::new("head.fc.x", widths.concat, k),
        ];
        Ok(HsHead {
            cfg,
            widths,
            up8,
            down8,
            merge8,
            up16,
            down16,
            merge16,
            up32,
            conv32,
            fc,
        })
    }

    pub fn register<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<()> {
        self.up8.register(store, rng)?;
        self.down8.register(store, rng)?;
        self.merge8.register(store, rng)?;
        self.up16.register(store, rng)?;
        self.down16.register(store, rng)?;
        self.merge16.register(store, rng)?;
        self.up32.register(store, rng)?;
        self.conv32.register(store, rng)?;
        self.fc.iter().try_for_each(|fc| fc.register(store, rng))
    }

    /// Per-level logits `[N, C+1, T_level]` in [`Level::ALL`] order.
    pub fn forward<R: Real>(&self, f: &mut Forward<'_, R>, pyramid: PyramidVars) -> Result<[Var; 5]> {
        let spec = self.cfg.pyramid;
        let n = f.graph.shape(pyramid.fine)[0];
        for ((name, v), s) in ["fine", "mid", "coarse"]
            .into_iter()
            .zip([pyramid.fine, pyramid.mid, pyramid.coarse])
            .zip(spec.level_shapes())
        {
            let want = [n, s[0], s[1], s[2], s[3]];
            if f.graph.shape(v) != want {
                return Err(Error::Shape {
                    name: name.to_string(),
                    expected: want.to_vec(),
                    found: f.graph.shape(v).to_vec(),
                });
            }
        }
        let window = spec.input_t;

        let p4 = f.graph.global_avg_pool_spatial(pyramid.coarse)?;

        let u8 = self.up8.forward(f, p4)?;
        let d8 = self.down8.forward(f, pyramid.mid)?;
        let c8 = f.graph.concat_channels(&[u8, d8])?;
        let m8 = self.merge8.forward(f, c8)?;

        let u16 = self.up16.forward(f, m8)?;
        let d16 = self.down16.forward(f, pyramid.fine)?;
        let c16 = f.graph.concat_channels(&[u16, d16])?;
        let m16 = self.merge16.forward(f, c16)?;

        let up32 = self.up32.forward(f, m16)?;
        let u32 = self.conv32.forward(f, up32)?;

        let mut cat = Vec::with_capacity(4);
        for v in [p4, m8, m16] {
            cat.push(f.graph.nearest_interp_temporal(v, window)?);
        }
        cat.push(u32);
        let all = f.graph.concat_channels(&cat)?;
        debug_assert_eq!(f.graph.shape(all)[1], self.widths.concat);

        let features = [p4, m8, m16, u32, all];
        let k = self.cfg.outputs();
        let mut out = [p4; 5];
        for (i, (fc, x)) in self.fc.iter().zip(features).enumerate() {
            let logits = fc.forward(f, x)?;
            let t = f.graph.shape(logits)[2];
            out[i] = f.graph.reshape(logits, &[n, k, t])?;
        }
        Ok(out)
    }
}

/// Concrete per-level logits for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelLogits<R: Real> {
    /// Indexed by [`Level::index`]; each `[N, C+1, T_level]`.
    pub levels: [Tensor<R>; 5],
}

impl<R: Real> LevelLogits<R> {
    pub fn get(&self, level: Level) -> &Tensor<R> {
        &self.levels[level.index()]
    }

    pub fn batch(&self) -> usize {
        self.levels[0].shape()[0]
    }

    /// Logits of batch item `b` as `[1, C+1, T_level]` tensors.
    pub fn item(&self, b: usize) -> LevelLogits<R> {
        LevelLogits {
            levels: std::array::from_fn(|i| {
                let t = &self.levels[i];
                let (_, k, p) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let data = t.data()[b * k * p..(b + 1) * k * p].to_vec();
                Tensor::new(vec![1, k, p], data).expect("slice of valid tensor")
            }),
        }
    }
}
