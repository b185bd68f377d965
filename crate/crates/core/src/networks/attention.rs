//! Multi-head cross-attention: queries from one feature map, keys and values
//! from another, `softmax(Q K^T / sqrt(d)) V` per head.

use rand::Rng;

use super::graph::{Graph, Var};
use super::layers::{from_chw, to_chw, tokens, untokens, Linear};
use super::params::ParamStore;
use super::tensor::Scalar;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub name: String,
    pub q_dim: usize,
    pub kv_dim: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub out_dim: usize,
}

/// Attention output plus the per-head probability matrices `[Nq, Nk]`.
pub struct AttentionVars {
    pub out: Var,
    pub probs: Vec<Var>,
}

impl CrossAttention {
    pub fn new(
        name: impl Into<String>,
        q_dim: usize,
        kv_dim: usize,
        attn_dim: usize,
        heads: usize,
        out_dim: usize,
    ) -> Result<Self> {
        if heads == 0 || attn_dim % heads != 0 {
            return Err(Error::Parameter(format!(
                "attention dim {attn_dim} not divisible into {heads} heads"
            )));
        }
        Ok(CrossAttention {
            name: name.into(),
            q_dim,
            kv_dim,
            attn_dim,
            heads,
            out_dim,
        })
    }

    fn proj(&self) -> [Linear; 4] {
        let n = &self.name;
        [
            Linear::new(format!("{n}.wq"), self.q_dim, self.attn_dim).no_bias(),
            Linear::new(format!("{n}.wk"), self.kv_dim, self.attn_dim).no_bias(),
            Linear::new(format!("{n}.wv"), self.kv_dim, self.attn_dim).no_bias(),
            Linear::new(format!("{n}.wo"), self.attn_dim, self.out_dim),
        ]
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.proj().iter().try_for_each(|l| l.init(store, rng))
    }

    /// `q` is `[Nq, q_dim]`, `kv` is `[Nk, kv_dim]`; output `[Nq, out_dim]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q: Var,
        kv: Var,
    ) -> Result<AttentionVars> {
        if g.shape(q)[1] != self.q_dim || g.shape(kv)[1] != self.kv_dim {
            return Err(Error::shape(
                "cross_attention input dims",
                &[self.q_dim, self.kv_dim],
                &[g.shape(q)[1], g.shape(kv)[1]],
            ));
        }
        let [wq, wk, wv, wo] = self.proj();
        let qp = wq.forward(g, store, q)?;
        let kp = wk.forward(g, store, kv)?;
        let vp = wv.forward(g, store, kv)?;
        let dh = self.attn_dim / self.heads;
        let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(qp, h * dh, dh);
            let kh = g.slice_cols(kp, h * dh, dh);
            let vh = g.slice_cols(vp, h * dh, dh);
            let logits = g.matmul_nt(qh, kh);
            let logits = g.scale(logits, inv_sqrt);
            let p = g.softmax_rows(logits);
            probs.push(p);
            heads.push(g.matmul(p, vh));
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        let out = wo.forward(g, store, joined)?;
        Ok(AttentionVars { out, probs })
    }
}

/// Cross-attention between two images treated as flattened spatial tokens.
/// Parameters are read from `store` under `name`; the attention width is
/// taken from the stored query projection. Output has `q_src`'s spatial
/// shape and the stored output width.
pub fn cross_attention(
    q_src: &ImageTensor,
    kv_src: &ImageTensor,
    heads: usize,
    store: &ParamStore<f32>,
    name: &str,
) -> Result<ImageTensor> {
    let wq = store.get(&format!("{name}.wq.w"))?;
    let wo = store.get(&format!("{name}.wo.w"))?;
    let att = CrossAttention::new(
        name,
        q_src.channels(),
        kv_src.channels(),
        wq.shape[1],
        heads,
        wo.shape[1],
    )?;
    let mut g = Graph::<f32>::new();
    let q = g.input(to_chw(q_src));
    let kv = g.input(to_chw(kv_src));
    let qt = tokens(&mut g, q);
    let kvt = tokens(&mut g, kv);
    let out = att.forward(&mut g, store, qt, kvt)?.out;
    let map = untokens(&mut g, out, q_src.height(), q_src.width());
    Ok(from_chw(g.value(map)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye(n: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    fn identity_store(name: &str, d: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for p in ["wq", "wk", "wv", "wo"] {
            s.insert(&format!("{name}.{p}.w"), eye(d)).unwrap();
        }
        s.insert(&format!("{name}.wo.b"), Tensor::zeros(&[d])).unwrap();
        s
    }

    #[test]
    fn rows_are_stochastic_and_output_is_convex() {
        let d = 4;
        let store = identity_store("a", d);
        let att = CrossAttention::new("a", d, d, d, 2, d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..6 * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![6, d], data.clone()));
        let out = att.forward(&mut g, &store, x, x).unwrap();
        for &p in &out.probs {
            for row in g.value(p).data.chunks(6) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        // each output column lies within the range of the value column
        let o = &g.value(out.out).data;
        for col in 0..d {
            let vals: Vec<f64> = (0..6).map(|r| data[r * d + col]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..6 {
                assert!(o[r * d + col] >= lo - 1e-12 && o[r * d + col] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn single_token_passes_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let att = CrossAttention::new("s", 3, 5, 6, 3, 6).unwrap();
        let mut store = ParamStore::<f64>::new();
        att.init(&mut store, &mut rng).unwrap();
        // identity output projection
        *store.get_mut("s.wo.w").unwrap() = eye(6);
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.1, 0.2, 0.3]));
        let kv_data = vec![0.5, -0.25, 1.0, 2.0, -1.5];
        let kv = g.input(Tensor::new(vec![1, 5], kv_data.clone()));
        let out = att.forward(&mut g, &store, q, kv).unwrap();
        let wv = store.get("s.wv.w").unwrap();
        for j in 0..6 {
            let expect: f64 = (0..5).map(|i| kv_data[i] * wv.data[i * 6 + j]).sum();
            for r in 0..2 {
                assert!((g.value(out.out).data[r * 6 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_token_softmax_mixture() {
        // one head, d = 1: q = 1, keys (0, ln 3) => weights (1/4, 3/4) after /sqrt(1)
        let mut store = ParamStore::<f64>::new();
        for p in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("t.{p}.w"), eye(1)).unwrap();
        }
        store.insert("t.wo.b", Tensor::zeros(&[1])).unwrap();
        let att = CrossAttention::new("t", 1, 1, 1, 1, 1).unwrap();
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::new(vec![1, 1], vec![1.0]));
        let kv = g.input(Tensor::new(vec![2, 1], vec![0.0, 3f64.ln()]));
        let out = att.forward(&mut g, &store, q, kv).unwrap();
        let expect = 0.25 * 0.0 + 0.75 * 3f64.ln();
        assert!((g.value(out.out).data[0] - expect).abs() < 1e-12);
        assert!((g.value(out.probs[0]).data[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(matches!(
            CrossAttention::new("x", 4, 4, 32, 12, 4),
            Err(Error::Parameter(_))
        ));
    }
}
