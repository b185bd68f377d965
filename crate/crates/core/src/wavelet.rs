//! Single-level orthonormal 2D Haar analysis and synthesis.
//!
//! For a 2x2 block `[[a, b], [e, f]]` the bands are
//!
//! ```text
//! A = (a + b + e + f) / 2      approximation
//! V = (a + b - e - f) / 2      vertical band: difference between rows
//! H = (a - b + e - f) / 2      horizontal band: difference between columns
//! D = (a - b - e + f) / 2      diagonal
//! ```
//!
//! The transform is orthonormal, so band energy equals image energy.

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Approximation band plus the three detail bands, all `(H/2) x (W/2) x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBands {
    pub a: ImageTensor,
    pub v: ImageTensor,
    pub h: ImageTensor,
    pub d: ImageTensor,
}

/// The `{V, H, D}` detail triple.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailBands {
    pub v: ImageTensor,
    pub h: ImageTensor,
    pub d: ImageTensor,
}

impl DetailBands {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        let z = ImageTensor::zeros(height, width, channels);
        DetailBands {
            v: z.clone(),
            h: z.clone(),
            d: z,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.v.shape()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImageTensor> {
        [&self.v, &self.h, &self.d].into_iter()
    }

    pub fn check_consistent(&self, context: &'static str) -> Result<()> {
        self.v.check_same_shape(&self.h, context)?;
        self.v.check_same_shape(&self.d, context)
    }

    pub fn map(&self, f: impl Fn(&ImageTensor) -> ImageTensor) -> DetailBands {
        DetailBands {
            v: f(&self.v),
            h: f(&self.h),
            d: f(&self.d),
        }
    }
}

impl WaveletBands {
    pub fn from_parts(a: ImageTensor, details: DetailBands) -> Self {
        WaveletBands {
            a,
            v: details.v,
            h: details.h,
            d: details.d,
        }
    }

    pub fn details(&self) -> DetailBands {
        DetailBands {
            v: self.v.clone(),
            h: self.h.clone(),
            d: self.d.clone(),
        }
    }

    pub fn into_parts(self) -> (ImageTensor, DetailBands) {
        (
            self.a,
            DetailBands {
                v: self.v,
                h: self.h,
                d: self.d,
            },
        )
    }

    pub fn energy(&self) -> f64 {
        self.a.sum_sq() + self.v.sum_sq() + self.h.sum_sq() + self.d.sum_sq()
    }

    fn check(&self) -> Result<()> {
        for band in [&self.v, &self.h, &self.d] {
            self.a.check_same_shape(band, "idwt2 bands")?;
        }
        Ok(())
    }
}

pub fn dwt2(img: &ImageTensor) -> Result<WaveletBands> {
    let [height, width, channels] = img.shape();
    if height < 2 || height % 2 != 0 {
        return Err(Error::Dimension {
            axis: "height",
            size: height,
        });
    }
    if width < 2 || width % 2 != 0 {
        return Err(Error::Dimension {
            axis: "width",
            size: width,
        });
    }
    let (bh, bw) = (height / 2, width / 2);
    let mut a = ImageTensor::zeros(bh, bw, channels);
    let mut v = a.clone();
    let mut h = a.clone();
    let mut d = a.clone();
    for r in 0..bh {
        for c in 0..bw {
            for ch in 0..channels {
                let p00 = img.get(2 * r, 2 * c, ch);
                let p01 = img.get(2 * r, 2 * c + 1, ch);
                let p10 = img.get(2 * r + 1, 2 * c, ch);
                let p11 = img.get(2 * r + 1, 2 * c + 1, ch);
                a.set(r, c, ch, 0.5 * (p00 + p01 + p10 + p11));
                v.set(r, c, ch, 0.5 * (p00 + p01 - p10 - p11));
                h.set(r, c, ch, 0.5 * (p00 - p01 + p10 - p11));
                d.set(r, c, ch, 0.5 * (p00 - p01 - p10 + p11));
            }
        }
    }
    Ok(WaveletBands { a, v, h, d })
}

pub fn idwt2(bands: &WaveletBands) -> Result<ImageTensor> {
    bands.check()?;
    let [bh, bw, channels] = bands.a.shape();
    let mut out = ImageTensor::zeros(2 * bh, 2 * bw, channels);
    for r in 0..bh {
        for c in 0..bw {
            for ch in 0..channels {
                let a = bands.a.get(r, c, ch);
                let v = bands.v.get(r, c, ch);
                let h = bands.h.get(r, c, ch);
                let d = bands.d.get(r, c, ch);
                out.set(2 * r, 2 * c, ch, 0.5 * (a + v + h + d));
                out.set(2 * r, 2 * c + 1, ch, 0.5 * (a + v - h - d));
                out.set(2 * r + 1, 2 * c, ch, 0.5 * (a - v + h - d));
                out.set(2 * r + 1, 2 * c + 1, ch, 0.5 * (a - v - h + d));
            }
        }
    }
    Ok(out)
}
