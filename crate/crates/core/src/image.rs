use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar `C×H×W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.plane_len()..(c + 1) * self.plane_len()]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let len = self.plane_len();
        &mut self.data[c * len..(c + 1) * len]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

/// Per-pixel class indices, row-major `H×W`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// Binary indicator of one class.
    pub fn binary(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }
}

/// Stacks equally-sized images into an `N×C×H×W` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<[usize; 3]> = None;
    let mut n = 0;
    for img in images {
        let s = [img.channels, img.height, img.width];
        match shape {
            None => shape = Some(s),
            Some(prev) if prev != s => {
                return Err(Error::invalid(format!("cannot stack images {prev:?} and {s:?}")))
            }
            _ => {}
        }
        data.extend_from_slice(&img.data);
        n += 1;
    }
    let [c, h, w] = shape.ok_or_else(|| Error::invalid("cannot stack zero images"))?;
    Tensor::from_vec([n, c, h, w], data)
}
