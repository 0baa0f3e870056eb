use serde::Serialize;

use super::model::BitAlignModel;
use crate::config::MapSource;
use crate::error::{Error, Result};
use crate::metrics::{gaussian_blur, resize_bilinear};
use crate::{Tape, Tensor};

/// Normalised localisation map at input resolution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationMap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f64>,
    pub label: String,
    pub source: String,
}

impl ActivationMap {
    /// Min-max normalises `raw`; a constant map becomes all zeros.
    pub fn normalised(raw: &Tensor, label: &str, source: &str) -> Self {
        let (lo, hi) = (raw.min(), raw.max());
        let values = if hi - lo > 0.0 {
            raw.data().iter().map(|&v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; raw.len()]
        };
        ActivationMap {
            height: raw.shape()[0],
            width: raw.shape()[1],
            values,
            label: label.to_string(),
            source: source.to_string(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.values.clone()).expect("consistent map")
    }

    /// Index of the largest value (first on ties).
    pub fn peak(&self) -> (usize, usize) {
        let i = (0..self.values.len()).fold(0, |b, i| if self.values[i] > self.values[b] { i } else { b });
        (i / self.width, i % self.width)
    }
}

impl BitAlignModel {
    /// Egocentric-only localisation for `label`.
    pub fn infer(&self, rgb: &Tensor, depth: &Tensor, label: &str) -> Result<ActivationMap> {
        let y = self.label_index(label)?;
        let raw = self.raw_map(rgb, depth, y)?;
        Ok(ActivationMap::normalised(&raw, &self.config.labels[y], self.source_name()))
    }

    fn source_name(&self) -> &'static str {
        match self.config.infer_map {
            MapSource::Cam => "cam",
            MapSource::Text => "text",
        }
    }

    /// Unnormalised map upsampled to the image size.
    pub fn raw_map(&self, rgb: &Tensor, depth: &Tensor, y: usize) -> Result<Tensor> {
        let s = rgb.shape();
        if s.len() != 3 {
            return Err(Error::shape("infer", format!("image must be 3×H×W, got {s:?}")));
        }
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let text_y = self.text_feature(&p, y)?;
        let ego = self.ego_pass(&p, rgb, depth, text_y)?;
        let g = self.config.grid();
        let grid = match self.config.infer_map {
            MapSource::Cam => self.head.cam(&p, ego.fused, y)?,
            MapSource::Text => {
                let d = self.config.dim;
                ego.fused.matmul(text_y.reshape(&[d, 1])?)?.reshape(&[g * g])?.relu()?
            }
        };
        let grid = grid.value().reshape(vec![g, g])?;
        let mut up = resize_bilinear(&grid, s[1], s[2])?;
        if self.config.blur_sigma > 0.0 {
            up = gaussian_blur(&up, self.config.blur_sigma)?;
        }
        Ok(up)
    }
}
