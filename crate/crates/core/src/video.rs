//! Frame storage and window extraction.

use std::path::Path;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A video stored channel-major as `[3, len, height, width]`, values in
/// `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFrames {
    pub len: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl VideoFrames {
    pub fn new(len: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if len == 0 || data.len() != 3 * len * height * width {
            return Err(Error::contract(
                "video",
                format!("{} values for 3x{len}x{height}x{width} frames", data.len()),
            ));
        }
        Ok(VideoFrames {
            len,
            height,
            width,
            data,
        })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, channel: usize, frame: usize, y: usize, x: usize) -> f32 {
        self.data[((channel * self.len + frame) * self.height + y) * self.width + x]
    }

    /// Copies frames `[start, start + window)` into `out` as `[3, window, H, W]`,
    /// repeating the last frame past the end of the video.
    pub fn window_into(&self, start: usize, window: usize, out: &mut Vec<f32>) {
        let plane = self.plane();
        for c in 0..3 {
            for t in 0..window {
                let src = (start + t).min(self.len - 1);
                let base = (c * self.len + src) * plane;
                out.extend_from_slice(&self.data[base..base + plane]);
            }
        }
    }

    /// Stacks windows into a `[N, 3, window, H, W]` batch.
    pub fn batch(&self, starts: &[usize], window: usize) -> Tensor<f32> {
        let mut data = Vec::with_capacity(starts.len() * 3 * window * self.plane());
        for &s in starts {
            self.window_into(s, window, &mut data);
        }
        Tensor::new(vec![starts.len(), 3, window, self.height, self.width], data).expect("window batch extents")
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![3, self.len, self.height, self.width], self.data.clone()).expect("video extents")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::new();
        c.insert("frames", &self.to_tensor());
        c.save(path)
    }

    /// Reads a container holding a `frames` tensor of shape `[3, L, H, W]`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let c = Container::load(path)?;
        let t = c.require::<f32>("frames", None)?;
        match *t.shape() {
            [3, len, h, w] => VideoFrames::new(len, h, w, t.into_data()),
            ref s => Err(Error::malformed(path, format!("frames tensor has shape {s:?}, expected [3, L, H, W]"))),
        }
    }

    /// Reads numbered image files (sorted by name) resized to `height x width`.
    pub fn load_image_dir(dir: impl AsRef<Path>, height: usize, width: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::malformed(dir, "no png/jpg frames"));
        }
        let len = files.len();
        let plane = height * width;
        let mut data = vec![0f32; 3 * len * plane];
        for (t, file) in files.iter().enumerate() {
            let img = image::open(file)?
                .resize_exact(width as u32, height as u32, image::imageops::FilterType::Triangle)
                .to_rgb8();
            for (i, px) in img.pixels().enumerate() {
                for c in 0..3 {
                    data[(c * len + t) * plane + i] = px[c] as f32 / 127.5 - 1.0;
                }
            }
        }
        VideoFrames::new(len, height, width, data)
    }
}
