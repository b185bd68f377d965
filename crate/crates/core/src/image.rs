//! Dense `H x W x C` image tensors used for pixels, wavelet bands and
//! diffusion latents alike.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major `(row, col, channel)` array of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Parameter(format!(
                "image dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "ImageTensor::new",
                &[height * width * channels],
                &[data.len()],
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "image dims must be positive");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut img = Self::zeros(height, width, channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    img.data[(r * width + c) * channels + ch] = f(r, c, ch);
                }
            }
        }
        img
    }

    /// Unit Gaussian noise tensor.
    pub fn randn<R: Rng + ?Sized>(height: usize, width: usize, channels: usize, rng: &mut R) -> Self {
        let data = (0..height * width * channels)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(height: usize, width: usize, channels: usize, rng: &mut R) -> Self {
        let data = (0..height * width * channels).map(|_| rng.random::<f32>()).collect();
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &ImageTensor, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(context, &self.shape(), &other.shape()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageTensor {
        ImageTensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Elementwise `a * self + b * other`.
    pub fn axpby(&self, a: f32, other: &ImageTensor, b: f32) -> Result<ImageTensor> {
        self.check_same_shape(other, "axpby")?;
        Ok(ImageTensor {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
            ..*self
        })
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn clamp01(&self) -> ImageTensor {
        self.map(|v| v.clamp(0.0, 1.0))
    }
}
