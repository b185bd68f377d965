//! Conditional noise predictor: a two-level U-shaped conv net with
//! sinusoidal step embedding added at every level and the LF condition
//! concatenated to the noisy input.

use rand::Rng;

use super::graph::{Graph, Var};
use super::layers::{timestep_embedding, Conv, Linear};
use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use super::ArchConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Denoiser {
    arch: ArchConfig,
}

impl Denoiser {
    pub fn new(arch: &ArchConfig) -> Self {
        Denoiser { arch: arch.clone() }
    }

    fn widths(&self) -> (usize, usize) {
        (self.arch.base_width, 2 * self.arch.base_width)
    }

    fn convs(&self) -> [Conv; 7] {
        let c = self.arch.channels;
        let (w0, w1) = self.widths();
        [
            Conv::new("den.in", 2 * c, w0, 3, 1),
            Conv::new("den.down0", w0, w0, 3, 1),
            Conv::new("den.down1a", w0, w1, 3, 1),
            Conv::new("den.down1b", w1, w1, 3, 1),
            Conv::new("den.mid", w1, w1, 3, 1),
            Conv::new("den.up1", 2 * w1, w1, 3, 1),
            Conv::new("den.up0", w1 + w0, w0, 3, 1),
        ]
    }

    fn head(&self) -> Conv {
        Conv::new("den.out", self.widths().0, self.arch.channels, 3, 1).zeroed()
    }

    fn temb(&self) -> (Linear, Linear, [Linear; 4]) {
        let e = self.arch.temb_dim;
        let (w0, w1) = self.widths();
        (
            Linear::new("den.temb1", e, 2 * e),
            Linear::new("den.temb2", 2 * e, 2 * e),
            [
                Linear::new("den.tproj0", 2 * e, w0),
                Linear::new("den.tproj1", 2 * e, w1),
                Linear::new("den.tproj2", 2 * e, w1),
                Linear::new("den.tproj3", 2 * e, w1),
            ],
        )
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        for c in self.convs() {
            c.init(store, rng)?;
        }
        self.head().init(store, rng)?;
        let (t1, t2, projs) = self.temb();
        t1.init(store, rng)?;
        t2.init(store, rng)?;
        projs.iter().try_for_each(|p| p.init(store, rng))
    }

    /// Spatial sizes must be multiples of 4 (two pooling levels).
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if c != self.arch.channels {
            return Err(Error::shape("denoiser channels", &[self.arch.channels], &[c]));
        }
        for (axis, n) in [("height", h), ("width", w)] {
            if n < 4 || n % 4 != 0 {
                return Err(Error::Dimension { axis, size: n });
            }
        }
        Ok(())
    }

    /// `x_t` and `cond_lf` are `[C, H, W]`; returns the noise estimate.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_t: Var,
        cond_lf: Var,
        t: usize,
    ) -> Result<Var> {
        self.check_input(g.shape(x_t))?;
        if g.shape(x_t) != g.shape(cond_lf) {
            return Err(Error::shape("denoiser condition", g.shape(x_t), g.shape(cond_lf)));
        }
        let (t1, t2, projs) = self.temb();
        let emb: Vec<T> = timestep_embedding(t, self.arch.temb_dim)
            .into_iter()
            .map(T::of)
            .collect();
        let e = g.input(Tensor::new(vec![1, self.arch.temb_dim], emb));
        let e = t1.forward(g, store, e)?;
        let e = g.silu(e);
        let e = t2.forward(g, store, e)?;
        let e = g.silu(e);
        let mut level_bias = Vec::with_capacity(4);
        for p in &projs {
            let b = p.forward(g, store, e)?;
            let n = g.shape(b)[1];
            level_bias.push(g.reshape(b, &[n]));
        }

        let [c_in, c_d0, c_d1a, c_d1b, c_mid, c_up1, c_up0] = self.convs();
        let x = g.concat(&[x_t, cond_lf]);
        let h = c_in.forward(g, store, x)?;
        let h = g.add_channel(h, level_bias[0]);
        let h = g.silu(h);
        let h = c_d0.forward(g, store, h)?;
        let skip0 = g.silu(h);

        let p = g.avg_pool2(skip0);
        let h = c_d1a.forward(g, store, p)?;
        let h = g.add_channel(h, level_bias[1]);
        let h = g.silu(h);
        let h = c_d1b.forward(g, store, h)?;
        let skip1 = g.silu(h);

        let p = g.avg_pool2(skip1);
        let h = c_mid.forward(g, store, p)?;
        let h = g.add_channel(h, level_bias[2]);
        let mid = g.silu(h);

        let u = g.upsample2(mid);
        let u = g.concat(&[u, skip1]);
        let h = c_up1.forward(g, store, u)?;
        let h = g.add_channel(h, level_bias[3]);
        let h = g.silu(h);

        let u = g.upsample2(h);
        let u = g.concat(&[u, skip0]);
        let h = c_up0.forward(g, store, u)?;
        let h = g.silu(h);
        self.head().forward(g, store, h)
    }
}
