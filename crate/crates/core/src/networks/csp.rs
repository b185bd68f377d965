//! Cross-scale pyramid encoder: builds the LF and HF conditions for one
//! ×2 level from the current input and an aligned reference image.

use rand::Rng;

use super::attention::CrossAttention;
use super::graph::{Graph, Var};
use super::layers::{tokens, untokens, Conv, DwSepConv, ProgressiveDilationBlock};
use super::params::ParamStore;
use super::tensor::Scalar;
use super::ArchConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CspEncoder {
    arch: ArchConfig,
}

/// Graph outputs: `lf` is `[C, H, W]`, `hf` is `[3C, H, W]` ordered V, H, D.
pub struct CspVars {
    pub lf: Var,
    pub hf: Var,
}

impl CspEncoder {
    pub fn new(arch: &ArchConfig) -> Self {
        CspEncoder { arch: arch.clone() }
    }

    fn blocks(
        &self,
    ) -> Result<(
        DwSepConv,
        DwSepConv,
        DwSepConv,
        DwSepConv,
        CrossAttention,
        ProgressiveDilationBlock,
        Conv,
        Conv,
    )> {
        let c = self.arch.channels;
        let f = self.arch.feat_width;
        Ok((
            DwSepConv::new("csp.lr0", c, f, 3),
            DwSepConv::new("csp.lr1", f, f, 3),
            DwSepConv::new("csp.ref0", 4 * c, f, 3),
            DwSepConv::new("csp.ref1", f, f, 3),
            CrossAttention::new("csp.attn", f, f, self.arch.attn_dim, self.arch.heads, f)?,
            ProgressiveDilationBlock::new("csp.res", f, f),
            Conv::new("csp.head_lf", f, c, 3, 1).zeroed(),
            Conv::new("csp.head_hf", f, 3 * c, 3, 1).zeroed(),
        ))
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let (a, b, c, d, att, res, hl, hh) = self.blocks()?;
        a.init(store, rng)?;
        b.init(store, rng)?;
        c.init(store, rng)?;
        d.init(store, rng)?;
        att.init(store, rng)?;
        res.init(store, rng)?;
        hl.init(store, rng)?;
        hh.init(store, rng)
    }

    /// * `lr`: `[C, H, W]` current input
    /// * `ref_bands`: `[4C, H, W]` Haar bands of the reference aligned to `2H x 2W`
    /// * `base_lf`, `base_hf`: bands of the plug-in SR upsampling of `lr`
    ///
    /// The learned heads add residuals onto the plug-in bands.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        lr: Var,
        ref_bands: Var,
        base_lf: Var,
        base_hf: Var,
    ) -> Result<CspVars> {
        let c = self.arch.channels;
        let s = g.shape(lr).to_vec();
        let (h, w) = (s[1], s[2]);
        let expect = |ch: usize| vec![ch, h, w];
        for (name, v, ch) in [
            ("csp ref bands", ref_bands, 4 * c),
            ("csp base lf", base_lf, c),
            ("csp base hf", base_hf, 3 * c),
        ] {
            if g.shape(v) != expect(ch).as_slice() {
                return Err(Error::shape(name, &expect(ch), g.shape(v)));
            }
        }
        if s[0] != c {
            return Err(Error::shape("csp input channels", &[c], &[s[0]]));
        }
        let (lr0, lr1, ref0, ref1, att, res, head_lf, head_hf) = self.blocks()?;
        let fl = lr0.forward(g, store, lr)?;
        let fl = g.silu(fl);
        let fl = lr1.forward(g, store, fl)?;
        let fl = g.silu(fl);
        let fr = ref0.forward(g, store, ref_bands)?;
        let fr = g.silu(fr);
        let fr = ref1.forward(g, store, fr)?;
        let fr = g.silu(fr);

        let q = tokens(g, fl);
        let kv = tokens(g, fr);
        let a = att.forward(g, store, q, kv)?.out;
        let a = untokens(g, a, h, w);
        let z = g.add(fl, a);
        let z = res.forward(g, store, z)?;

        let dl = head_lf.forward(g, store, z)?;
        let dh = head_hf.forward(g, store, z)?;
        Ok(CspVars {
            lf: g.add(base_lf, dl),
            hf: g.add(base_hf, dh),
        })
    }
}
