//! Parameterized building blocks shared by the denoiser, the CSP encoder
//! and the CSHR module.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::Result;
use crate::image::ImageTensor;

/// `H x W x C` image to a `[C, H, W]` tensor.
pub fn to_chw<T: Scalar>(img: &ImageTensor) -> Tensor<T> {
    let [h, w, c] = img.shape();
    let mut data = vec![T::zero(); h * w * c];
    for (i, &v) in img.data().iter().enumerate() {
        let ch = i % c;
        let px = i / c;
        data[ch * h * w + px] = T::of(v as f64);
    }
    Tensor::new(vec![c, h, w], data)
}

pub fn from_chw<T: Scalar>(t: &Tensor<T>) -> ImageTensor {
    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
    ImageTensor::from_fn(h, w, c, |r, col, ch| {
        t.data[ch * h * w + r * w + col].to_f32().unwrap_or(f32::NAN)
    })
}

/// `[C, H, W]` map to `[H*W, C]` tokens.
pub fn tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]]);
    g.transpose(flat)
}

/// `[H*W, C]` tokens back to a `[C, H, W]` map.
pub fn untokens<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Var {
    let c = g.shape(x)[1];
    let t = g.transpose(x);
    g.reshape(t, &[c, h, w])
}

/// Sinusoidal features of a step index: `[sin(t w_i), cos(t w_i)]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

fn fan_in_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Same-padded convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub dil: usize,
    pub zero_init: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, dil: usize) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            k,
            dil,
            zero_init: false,
        }
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let shape = [self.cout, self.cin, self.k, self.k];
        let wname = format!("{}.w", self.name);
        if self.zero_init {
            store.insert(&wname, Tensor::zeros(&shape))?;
        } else {
            store.insert_uniform(&wname, &shape, fan_in_scale(self.cin * self.k * self.k), rng)?;
        }
        store.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.cout]))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.w", self.name))?;
        let b = g.param(store, &format!("{}.b", self.name))?;
        let y = g.conv2d(x, w, self.dil);
        Ok(g.add_channel(y, b))
    }
}

/// Depthwise `k x k` followed by a pointwise `1 x 1` projection.
#[derive(Debug, Clone)]
pub struct DwSepConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl DwSepConv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        DwSepConv {
            name: name.into(),
            cin,
            cout,
            k,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        store.insert_uniform(
            &format!("{}.dw.w", self.name),
            &[self.cin, self.k, self.k],
            fan_in_scale(self.k * self.k),
            rng,
        )?;
        store.insert(&format!("{}.dw.b", self.name), Tensor::zeros(&[self.cin]))?;
        Conv::new(format!("{}.pw", self.name), self.cin, self.cout, 1, 1).init(store, rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.dw.w", self.name))?;
        let b = g.param(store, &format!("{}.dw.b", self.name))?;
        let y = g.depthwise(x, w, 1);
        let y = g.add_channel(y, b);
        Conv::new(format!("{}.pw", self.name), self.cin, self.cout, 1, 1).forward(g, store, y)
    }
}

/// Dense layer on `[N, din]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Linear {
            name: name.into(),
            din,
            dout,
            bias: true,
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        store.insert_uniform(
            &format!("{}.w", self.name),
            &[self.din, self.dout],
            fan_in_scale(self.din),
            rng,
        )?;
        if self.bias {
            store.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.dout]))?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.w", self.name))?;
        let y = g.matmul(x, w);
        if self.bias {
            let b = g.param(store, &format!("{}.b", self.name))?;
            Ok(g.add_row(y, b))
        } else {
            Ok(y)
        }
    }
}

/// Residual block: local conv, dilated convs at growing rates, local conv.
#[derive(Debug, Clone)]
pub struct ProgressiveDilationBlock {
    convs: Vec<Conv>,
}

pub const PROGRESSIVE_DILATIONS: [usize; 4] = [1, 2, 4, 1];

impl ProgressiveDilationBlock {
    pub fn new(name: &str, channels: usize, width: usize) -> Self {
        let n = PROGRESSIVE_DILATIONS.len();
        let convs = PROGRESSIVE_DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &dil)| {
                let cin = if i == 0 { channels } else { width };
                let cout = if i + 1 == n { channels } else { width };
                Conv::new(format!("{name}.conv{i}"), cin, cout, 3, dil)
            })
            .collect();
        ProgressiveDilationBlock { convs }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.convs.iter().try_for_each(|c| c.init(store, rng))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, store, h)?;
            if i != last {
                h = g.silu(h);
            }
        }
        Ok(g.add(x, h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chw_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = ImageTensor::uniform(5, 7, 3, &mut rng);
        let t: Tensor<f32> = to_chw(&img);
        assert_eq!(t.shape, vec![3, 5, 7]);
        assert_eq!(t.data[2 * 35 + 7 + 3], img.get(1, 3, 2));
        assert_eq!(from_chw(&t), img);
    }

    #[test]
    fn embedding_is_bounded_and_distinct() {
        let a = timestep_embedding(0, 16);
        let b = timestep_embedding(500, 16);
        assert_eq!(a[0], 0.0);
        assert_eq!(a[8], 1.0);
        assert!(b.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }

    #[test]
    fn tokens_roundtrip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.input(Tensor::new(vec![2, 3, 4], data.clone()));
        let tk = tokens(&mut g, x);
        assert_eq!(g.shape(tk), &[12, 2]);
        // token 5 = pixel (1, 1): channel values 5 and 17
        assert_eq!(&g.value(tk).data[10..12], &[5.0, 17.0]);
        let back = untokens(&mut g, tk, 3, 4);
        assert_eq!(g.value(back).data, data);
    }
}
