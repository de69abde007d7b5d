//! Multi-head causal self-attention and unmasked cross-attention.
//!
//! Both blocks run on a [`Graph`] so their post-softmax weights stay
//! differentiable; cross-attention hands those weights back per head for the
//! grounding loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d_model == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        Ok(AttentionConfig { d_model, n_heads })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Parameter ids of the four projections of one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionBlock {
    pub config: AttentionConfig,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_o: usize,
}

impl AttentionBlock {
    /// Registers `{prefix}.w_q` .. `{prefix}.w_o`. Input projections use
    /// `N(0, 1/d)`; the output projection uses `out_std` (zero allowed).
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: AttentionConfig,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        let d = config.d_model;
        let std = 1.0 / (d as f64).sqrt();
        AttentionBlock {
            config,
            w_q: store.add_normal(&format!("{prefix}.w_q"), &[d, d], std, rng),
            w_k: store.add_normal(&format!("{prefix}.w_k"), &[d, d], std, rng),
            w_v: store.add_normal(&format!("{prefix}.w_v"), &[d, d], std, rng),
            w_o: store.add_normal(&format!("{prefix}.w_o"), &[d, d], out_std, rng),
        }
    }

    fn attend(
        &self,
        g: &mut Graph<'_>,
        queries: Var,
        keys_from: Var,
        causal: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let (wq, wk, wv, wo) = (
            g.param(self.w_q),
            g.param(self.w_k),
            g.param(self.w_v),
            g.param(self.w_o),
        );
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(keys_from, wk)?;
        let v = g.matmul(keys_from, wv)?;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut weights = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores, causal)?;
            heads.push(g.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        Ok((g.matmul(merged, wo)?, weights))
    }

    /// Causal multi-head self-attention over `h: [T×d]`.
    pub fn self_attention(&self, g: &mut Graph<'_>, h: Var) -> Result<(Var, Vec<Var>)> {
        self.check_width(g, h)?;
        self.attend(g, h, h, true)
    }

    /// Cross-attention with queries from `h: [T×d]` and keys/values from
    /// `visual: [N×d]`. Returns the output and the per-head `[T×N]` weights.
    pub fn cross_attention(
        &self,
        g: &mut Graph<'_>,
        h: Var,
        visual: Var,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_width(g, h)?;
        self.check_width(g, visual)?;
        self.attend(g, h, visual, false)
    }

    fn check_width(&self, g: &Graph<'_>, x: Var) -> Result<()> {
        let t = g.value(x);
        if t.rank() != 2 || t.shape()[1] != self.config.d_model {
            return Err(Error::shape(format!(
                "attention expects [*×{}], got {:?}",
                self.config.d_model,
                t.shape()
            )));
        }
        Ok(())
    }
}

/// Post-softmax cross-attention weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer_index: usize,
    /// `[n_heads × T × N]`.
    pub weights: Tensor,
    /// Head/query-averaged distribution over the visual grid, when computed.
    pub aggregated: Option<Tensor>,
}

impl AttentionRecord {
    pub fn from_heads(g: &Graph<'_>, layer_index: usize, heads: &[Var]) -> Result<Self> {
        let (t, n) = g.value(heads[0]).matrix_dims();
        let mut data = Vec::with_capacity(heads.len() * t * n);
        for &h in heads {
            data.extend_from_slice(g.value(h).data());
        }
        Ok(AttentionRecord {
            layer_index,
            weights: Tensor::new(vec![heads.len(), t, n], data)?,
            aggregated: None,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n_queries(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn n_keys(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Weight row for `head`, `query`.
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let (t, n) = (self.n_queries(), self.n_keys());
        let start = (head * t + query) * n;
        &self.weights.data()[start..start + n]
    }

    /// Largest deviation of any (head, query) row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.weights
            .data()
            .chunks(self.n_keys())
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(d: usize, heads: usize, seed: u64) -> (ParamStore, AttentionBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig::new(d, heads).unwrap();
        let b = AttentionBlock::register(&mut store, "attn", cfg, 0.3, &mut rng);
        (store, b)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn divisibility_is_enforced() {
        assert!(AttentionConfig::new(10, 3).is_err());
        assert_eq!(AttentionConfig::new(12, 3).unwrap().head_dim(), 4);
    }

    #[test]
    fn single_token_returns_value_projection() {
        let (store, b) = block(8, 2, 1);
        let x = random(1, 8, 2);
        let mut g = Graph::new(store.as_slice());
        let h = g.input(x.clone(), false);
        let (out, weights) = b.self_attention(&mut g, h).unwrap();
        for w in &weights {
            assert_eq!(g.value(*w).data(), &[1.0]);
        }
        let wv = &store.get(b.w_v).value;
        let wo = &store.get(b.w_o).value;
        let expect = crate::tensor::matmul(&crate::tensor::matmul(&x, wv).unwrap(), wo).unwrap();
        for (a, e) in g.value(out).data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn causal_rows_are_zero_beyond_diagonal() {
        let (store, b) = block(8, 2, 3);
        let mut g = Graph::new(store.as_slice());
        let h = g.input(random(5, 8, 4), false);
        let (_, weights) = b.self_attention(&mut g, h).unwrap();
        for w in weights {
            let t = g.value(w);
            for r in 0..5 {
                assert!(t.row(r)[r + 1..].iter().all(|&v| v == 0.0));
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perturbing_later_token_leaves_prefix_bitwise() {
        let (store, b) = block(8, 2, 5);
        let x = random(4, 8, 6);
        let mut y = x.clone();
        for v in &mut y.data_mut()[3 * 8..] {
            *v += 0.37;
        }
        let run = |input: &Tensor| {
            let mut g = Graph::new(store.as_slice());
            let h = g.input(input.clone(), false);
            let (out, _) = b.self_attention(&mut g, h).unwrap();
            g.value(out).data()[..3 * 8].to_vec()
        };
        let (a, c) = (run(&x), run(&y));
        assert!(a.iter().zip(&c).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn identical_visual_tokens_give_uniform_weights() {
        let (store, b) = block(8, 2, 7);
        let row = random(1, 8, 8);
        let visual = Tensor::new(vec![6, 8], row.data().repeat(6)).unwrap();
        let mut g = Graph::new(store.as_slice());
        let h = g.input(random(3, 8, 9), false);
        let v = g.input(visual, false);
        let (_, weights) = b.cross_attention(&mut g, h, v).unwrap();
        let rec = AttentionRecord::from_heads(&g, 0, &weights).unwrap();
        assert!(rec.weights.data().iter().all(|&w| (w - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn record_shape_at_full_scale() {
        // 32 heads, 10 query tokens, 576 visual tokens
        let (store, b) = block(64, 32, 10);
        let mut g = Graph::new(store.as_slice());
        let h = g.input(random(10, 64, 11), false);
        let v = g.input(random(576, 64, 12), false);
        let (_, weights) = b.cross_attention(&mut g, h, v).unwrap();
        let rec = AttentionRecord::from_heads(&g, 2, &weights).unwrap();
        assert_eq!(rec.weights.shape(), &[32, 10, 576]);
        assert!(rec.max_row_sum_error() < 1e-6);
    }

    #[test]
    fn cross_attention_is_permutation_equivariant() {
        let (store, b) = block(8, 2, 13);
        let visual = random(5, 8, 14);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = Tensor::new(
            vec![5, 8],
            perm.iter().flat_map(|&i| visual.row(i).to_vec()).collect(),
        )
        .unwrap();
        let text = random(3, 8, 15);
        let run = |vis: &Tensor| {
            let mut g = Graph::new(store.as_slice());
            let h = g.input(text.clone(), false);
            let v = g.input(vis.clone(), false);
            let (out, w) = b.cross_attention(&mut g, h, v).unwrap();
            (
                g.value(out).clone(),
                AttentionRecord::from_heads(&g, 0, &w).unwrap(),
            )
        };
        let (out_a, rec_a) = run(&visual);
        let (out_b, rec_b) = run(&permuted);
        for (x, y) in out_a.data().iter().zip(out_b.data()) {
            assert!((x - y).abs() < 1e-13);
        }
        for h in 0..2 {
            for q in 0..3 {
                for (j, &src) in perm.iter().enumerate() {
                    assert!((rec_b.row(h, q)[j] - rec_a.row(h, q)[src]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn self_attention_gradients() {
        for seed in 0..3 {
            let (store, b) = block(8, 2, 100 + seed);
            let x = random(4, 8, 200 + seed);
            let report = grad_check_params(
                &store,
                |_| true,
                |g| {
                    let h = g.input(x.clone(), false);
                    let (out, _) = b.self_attention(g, h)?;
                    let sq = g.mul(out, out)?;
                    Ok(g.sum(sq))
                },
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }
}
