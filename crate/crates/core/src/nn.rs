//! Transformer building blocks shared by the encoder, the diffusion decoder
//! and the language model.

use alloc::format;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{randn, ParamId, ParamStore};
use crate::tensor::Matrix;

/// `x · W + b`, `W` stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// LeCun-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        let std = 1.0 / libm::sqrt(d_in as f64);
        Self::with_std(store, rng, name, d_in, d_out, std)
    }

    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
    ) -> Self {
        let weight = store.add(format!("{name}/weight"), randn(rng, d_in, d_out, std));
        let bias = store.add(format!("{name}/bias"), Matrix::zeros(1, d_out));
        Self { weight, bias: Some(bias) }
    }

    /// All-zero weights and bias (adaLN-zero style output layers).
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}/weight"), Matrix::zeros(d_in, d_out));
        let bias = store.add(format!("{name}/bias"), Matrix::zeros(1, d_out));
        Self { weight, bias: Some(bias) }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.get(self.weight).cols()
    }
}

/// Layer norm with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}/gain"), Matrix::filled(1, dim, 1.0));
        let bias = store.add(format!("{name}/bias"), Matrix::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}/fc1"), dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}/fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// How a block normalises its inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Learned per-channel gain and bias, plain residuals.
    Affine,
    /// Parameter-free norm, shift/scale/gate produced from a conditioning
    /// vector by a zero-initialised linear map.
    Modulated,
}

/// Parameters of one stream of a (dual-stream) transformer block.
#[derive(Clone, Debug)]
struct Stream {
    norm1: Option<LayerNorm>,
    norm2: Option<LayerNorm>,
    qkv: Linear,
    out: Option<Linear>,
    mlp: Option<Mlp>,
    modulation: Option<Linear>,
}

/// Attention-ready projections of one stream, plus the residual state.
struct StreamQkv {
    x: Var,
    q: Var,
    k: Var,
    v: Var,
    rows: usize,
    /// `(gate1, shift2, scale2, gate2)` rows when modulated.
    post: Option<[Var; 4]>,
}

impl Stream {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        mlp_hidden: usize,
        norm: NormKind,
        emits_output: bool,
    ) -> Self {
        let (norm1, norm2, modulation) = match norm {
            NormKind::Affine => (
                Some(LayerNorm::new(store, &format!("{name}/norm1"), dim)),
                emits_output.then(|| LayerNorm::new(store, &format!("{name}/norm2"), dim)),
                None,
            ),
            NormKind::Modulated => {
                let chunks = if emits_output { 6 } else { 2 };
                (None, None, Some(Linear::zeros(store, &format!("{name}/modulation"), dim, chunks * dim)))
            }
        };
        let qkv = Linear::new(store, rng, &format!("{name}/qkv"), dim, 3 * dim);
        let (out, mlp) = if emits_output {
            (
                Some(Linear::new(store, rng, &format!("{name}/out"), dim, dim)),
                Some(Mlp::new(store, rng, &format!("{name}/mlp"), dim, mlp_hidden)),
            )
        } else {
            (None, None)
        };
        Self { norm1, norm2, qkv, out, mlp, modulation }
    }

    fn project(&self, g: &mut Graph<'_>, x: Var, cond: Option<Var>, dim: usize) -> StreamQkv {
        let (h, post) = match (&self.norm1, &self.modulation) {
            (Some(norm), _) => (norm.forward(g, x), None),
            (None, Some(modulation)) => {
                let c = cond.expect("modulated block needs a conditioning vector");
                let m = modulation.forward(g, c);
                let shift1 = g.slice_cols(m, 0, dim);
                let scale1 = g.slice_cols(m, dim, dim);
                let h = modulate(g, x, shift1, scale1);
                let post = self.out.as_ref().map(|_| {
                    [
                        g.slice_cols(m, 2 * dim, dim),
                        g.slice_cols(m, 3 * dim, dim),
                        g.slice_cols(m, 4 * dim, dim),
                        g.slice_cols(m, 5 * dim, dim),
                    ]
                });
                (h, post)
            }
            (None, None) => unreachable!("stream without normalisation"),
        };
        let qkv = self.qkv.forward(g, h);
        let rows = g.value(x).rows();
        StreamQkv {
            x,
            q: g.slice_cols(qkv, 0, dim),
            k: g.slice_cols(qkv, dim, dim),
            v: g.slice_cols(qkv, 2 * dim, dim),
            rows,
            post,
        }
    }

    /// Residual attention output and MLP; `None` when the stream's output is
    /// discarded after this block.
    fn finish(&self, g: &mut Graph<'_>, s: &StreamQkv, attn: Var) -> Option<Var> {
        let out = self.out.as_ref()?;
        let mlp = self.mlp.as_ref()?;
        let a = out.forward(g, attn);
        match &s.post {
            None => {
                let x = g.add(s.x, a);
                let norm2 = self.norm2.as_ref().expect("affine stream has norm2");
                let h = norm2.forward(g, x);
                let m = mlp.forward(g, h);
                Some(g.add(x, m))
            }
            Some([gate1, shift2, scale2, gate2]) => {
                let a = g.mul_row(a, *gate1);
                let x = g.add(s.x, a);
                let n = modulate(g, x, *shift2, *scale2);
                let m = mlp.forward(g, n);
                let m = g.mul_row(m, *gate2);
                Some(g.add(x, m))
            }
        }
    }
}

/// `LN(x) · (1 + scale) + shift`.
pub fn modulate(g: &mut Graph<'_>, x: Var, shift: Var, scale: Var) -> Var {
    let n = g.layer_norm(x);
    let s = g.add_const(scale, 1.0);
    let y = g.mul_row(n, s);
    g.add_row(y, shift)
}

/// Two token streams with separate weights whose queries, keys and values
/// are concatenated for one joint, bidirectional attention.
#[derive(Clone, Debug)]
pub struct DualStreamBlock {
    first: Stream,
    second: Stream,
    dim: usize,
    heads: usize,
}

/// Which stream outputs a block keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamOutputs {
    pub first: bool,
    pub second: bool,
}

impl StreamOutputs {
    pub const BOTH: Self = Self { first: true, second: true };
}

impl DualStreamBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        norm: NormKind,
        outputs: StreamOutputs,
    ) -> Self {
        let first = Stream::new(store, rng, &format!("{name}/first"), dim, mlp_hidden, norm, outputs.first);
        let second = Stream::new(store, rng, &format!("{name}/second"), dim, mlp_hidden, norm, outputs.second);
        Self { first, second, dim, heads }
    }

    pub fn forward(&self, g: &mut Graph<'_>, a: Var, b: Var, cond: Option<Var>) -> (Option<Var>, Option<Var>) {
        let sa = self.first.project(g, a, cond, self.dim);
        let sb = self.second.project(g, b, cond, self.dim);
        let q = g.concat_rows(&[sa.q, sb.q]);
        let k = g.concat_rows(&[sa.k, sb.k]);
        let v = g.concat_rows(&[sa.v, sb.v]);
        let joint = g.attention(q, k, v, self.heads, false);
        let attn_a = g.slice_rows(joint, 0, sa.rows);
        let attn_b = g.slice_rows(joint, sa.rows, sb.rows);
        (self.first.finish(g, &sa, attn_a), self.second.finish(g, &sb, attn_b))
    }
}

/// Pre-norm causal self-attention block.
#[derive(Clone, Debug)]
pub struct CausalBlock {
    stream: Stream,
    dim: usize,
    heads: usize,
}

impl CausalBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
    ) -> Self {
        Self { stream: Stream::new(store, rng, name, dim, mlp_hidden, NormKind::Affine, true), dim, heads }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let s = self.stream.project(g, x, None, self.dim);
        let attn = g.attention(s.q, s.k, s.v, self.heads, true);
        self.stream.finish(g, &s, attn).expect("causal block emits output")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dual_block_skips_params_of_discarded_stream() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        DualStreamBlock::new(
            &mut store,
            &mut rng,
            "blk",
            8,
            2,
            16,
            NormKind::Affine,
            StreamOutputs { first: true, second: false },
        );
        assert!(store.id("blk/first/mlp/fc1/weight").is_some());
        assert!(store.id("blk/second/mlp/fc1/weight").is_none());
        assert!(store.id("blk/second/qkv/weight").is_some());
    }

    #[test]
    fn modulated_block_starts_as_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blk = DualStreamBlock::new(&mut store, &mut rng, "b", 8, 2, 16, NormKind::Modulated, StreamOutputs::BOTH);
        let mut g = Graph::new(&store);
        let a = g.constant(randn(&mut rng, 3, 8, 1.0));
        let b = g.constant(randn(&mut rng, 5, 8, 1.0));
        let c = g.constant(randn(&mut rng, 1, 8, 1.0));
        let (oa, ob) = blk.forward(&mut g, a, b, Some(c));
        assert_eq!(g.value(oa.unwrap()), g.value(a));
        assert_eq!(g.value(ob.unwrap()), g.value(b));
    }
}
