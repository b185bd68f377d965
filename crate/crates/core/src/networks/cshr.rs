//! Cross-scale high-frequency restoration: predicts the ×2 detail bands
//! from the input's detail bands under the HF condition.
//!
//! Per band, the LR detail band and the space-to-depth folded condition are
//! encoded with depthwise-separable convs. Two cross-attention layers let
//! the V and H streams feed the D stream. A progressive-dilation block and
//! a dilated conv produce `4 * 3C` channels that a pixel shuffle lifts to
//! the target resolution. The condition bands are added back as the base.

use rand::Rng;

use super::attention::CrossAttention;
use super::graph::{Graph, Var};
use super::layers::{tokens, untokens, Conv, DwSepConv, ProgressiveDilationBlock};
use super::params::ParamStore;
use super::tensor::Scalar;
use super::ArchConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Cshr {
    arch: ArchConfig,
}

const BANDS: [&str; 3] = ["v", "h", "d"];

impl Cshr {
    pub fn new(arch: &ArchConfig) -> Self {
        Cshr { arch: arch.clone() }
    }

    fn encoders(&self) -> Vec<DwSepConv> {
        let c = self.arch.channels;
        BANDS
            .iter()
            .map(|b| DwSepConv::new(format!("cshr.enc_{b}"), 5 * c, self.arch.feat_width, 3))
            .collect()
    }

    fn attn(&self) -> Result<[CrossAttention; 2]> {
        let f = self.arch.feat_width;
        let (a, h) = (self.arch.attn_dim, self.arch.heads);
        Ok([
            CrossAttention::new("cshr.attn_vd", f, f, a, h, f)?,
            CrossAttention::new("cshr.attn_hd", f, f, a, h, f)?,
        ])
    }

    fn tail(&self) -> (ProgressiveDilationBlock, Conv) {
        let f = self.arch.feat_width;
        let c = self.arch.channels;
        (
            ProgressiveDilationBlock::new("cshr.res", 3 * f, f),
            Conv::new("cshr.out", 3 * f, 12 * c, 3, 2).zeroed(),
        )
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        for e in self.encoders() {
            e.init(store, rng)?;
        }
        for a in self.attn()? {
            a.init(store, rng)?;
        }
        let (res, out) = self.tail();
        res.init(store, rng)?;
        out.init(store, rng)
    }

    /// `lr_bands` are three `[C, h, w]` maps; `cond` three `[C, 2h, 2w]` maps.
    /// Returns three `[C, 2h, 2w]` maps (V, H, D).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        lr_bands: [Var; 3],
        cond: [Var; 3],
    ) -> Result<[Var; 3]> {
        let s = g.shape(lr_bands[0]).to_vec();
        let (h, w) = (s[1], s[2]);
        let target = [s[0], 2 * h, 2 * w];
        for b in lr_bands {
            if g.shape(b) != s.as_slice() {
                return Err(Error::shape("cshr detail bands", &s, g.shape(b)));
            }
        }
        for c in cond {
            if g.shape(c) != target.as_slice() {
                return Err(Error::shape("cshr condition bands", &target, g.shape(c)));
            }
        }
        if s[0] != self.arch.channels {
            return Err(Error::shape("cshr channels", &[self.arch.channels], &[s[0]]));
        }

        let mut feats = Vec::with_capacity(3);
        for ((enc, &band), &cb) in self.encoders().iter().zip(&lr_bands).zip(&cond) {
            let folded = g.pixel_unshuffle(cb);
            let x = g.concat(&[band, folded]);
            let f = enc.forward(g, store, x)?;
            feats.push(g.silu(f));
        }
        let [attn_vd, attn_hd] = self.attn()?;
        let tv = tokens(g, feats[0]);
        let th = tokens(g, feats[1]);
        let td = tokens(g, feats[2]);
        let a1 = attn_vd.forward(g, store, td, tv)?.out;
        let td = g.add(td, a1);
        let a2 = attn_hd.forward(g, store, td, th)?.out;
        let td = g.add(td, a2);
        let fd = untokens(g, td, h, w);

        let z = g.concat(&[feats[0], feats[1], fd]);
        let (res, out) = self.tail();
        let z = res.forward(g, store, z)?;
        let y = out.forward(g, store, z)?;
        let y = g.pixel_shuffle(y);
        let c = self.arch.channels;
        let mut bands = [y; 3];
        for (i, b) in bands.iter_mut().enumerate() {
            let delta = g.slice_axis0(y, i * c, c);
            *b = g.add(cond[i], delta);
        }
        Ok(bands)
    }
}
