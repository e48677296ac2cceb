//! Query-token encoder: a clean image plus `T` learnable queries go through
//! dual-stream blocks with joint attention; only the query stream is kept.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::TokenizerConfig;
use crate::embed;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{patchify, ImageTensor};
use crate::nn::{DualStreamBlock, LayerNorm, Linear, NormKind, StreamOutputs};
use crate::params::{randn, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Transformed query tokens `(V̂_1, …, V̂_T)`, one `n`-wide row each.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub features: Matrix,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    queries: ParamId,
    patch_embed: Linear,
    blocks: Vec<DualStreamBlock>,
    final_norm: LayerNorm,
    query_pos: Matrix,
    patch_pos: Matrix,
    channels: usize,
    resolution: usize,
    patch_size: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &TokenizerConfig) -> Self {
        let n = cfg.enc_dim;
        let queries = store.add("encoder/queries", randn(rng, cfg.tokens, n, 0.02));
        let patch_embed = Linear::new(store, rng, "encoder/patch_embed", cfg.patch_dim(), n);
        let blocks = (0..cfg.enc_layers)
            .map(|i| {
                let last = i + 1 == cfg.enc_layers;
                DualStreamBlock::new(
                    store,
                    rng,
                    &format!("encoder/blocks/{i}"),
                    n,
                    cfg.enc_heads,
                    cfg.mlp_ratio * n,
                    NormKind::Affine,
                    StreamOutputs { first: true, second: !last },
                )
            })
            .collect();
        let final_norm = LayerNorm::new(store, "encoder/final_norm", n);
        Self {
            queries,
            patch_embed,
            blocks,
            final_norm,
            query_pos: embed::sincos_1d(cfg.tokens, n),
            patch_pos: embed::sincos_2d(cfg.grid(), cfg.grid(), n),
            channels: cfg.channels,
            resolution: cfg.resolution,
            patch_size: cfg.patch_size,
        }
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let want = (self.channels, self.resolution, self.resolution);
        if image.shape() != want {
            return Err(Error::config(
                "resolution",
                format!("encoder expects {want:?} images, got {:?}", image.shape()),
            ));
        }
        Ok(())
    }

    /// Records the encoder on `g`; returns the `T × n` query features.
    pub fn forward(&self, g: &mut Graph<'_>, image: &ImageTensor) -> Result<Var> {
        self.check_image(image)?;
        let patches = g.constant(patchify(image, self.patch_size)?);
        let img = self.patch_embed.forward(g, patches);
        let ppos = g.constant(self.patch_pos.clone());
        let mut img = Some(g.add(img, ppos));

        let q = g.param(self.queries);
        let qpos = g.constant(self.query_pos.clone());
        let mut queries = g.add(q, qpos);

        for block in &self.blocks {
            let (qo, io) = block.forward(g, queries, img.expect("image stream alive until the last block"), None);
            queries = qo.expect("query stream is always kept");
            img = io;
        }
        Ok(self.final_norm.forward(g, queries))
    }

    pub fn encode(&self, store: &ParamStore, image: &ImageTensor) -> Result<EncoderOutput> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, image)?;
        Ok(EncoderOutput { features: g.value(out).clone() })
    }
}
