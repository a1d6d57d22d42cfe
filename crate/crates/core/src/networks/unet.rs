//! Affine regressor, shared encoder, velocity decoders and gated fusion.

use rand::Rng;

use super::config::NetConfig;
use super::layers::{Builder, Conv, ConvBlock, Ctx, Init, Linear};
use crate::field::AffineParams;
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

/// Strided CNN regressing the 12 affine parameters from both images.
#[derive(Clone, Debug)]
pub struct AffineNet {
    pub blocks: Vec<ConvBlock>,
    pub fc: Linear,
}

impl AffineNet {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<'_, T, R>, cfg: &NetConfig) -> Self {
        let mut blocks = Vec::new();
        let mut cin = 2;
        for (s, &c) in cfg.affine_channels.iter().enumerate() {
            blocks.push(bld.scope(format!("stage{s}.down"), |b| ConvBlock::new(b, cin, c, 2, cfg.leaky_slope)));
            for j in 0..cfg.affine_convs_per_stage {
                blocks.push(bld.scope(format!("stage{s}.conv{j}"), |b| ConvBlock::new(b, c, c, 1, cfg.leaky_slope)));
            }
            cin = c;
        }
        let fc = bld.scope("fc", |b| {
            let w = b.param("w", &[cin, 12], Init::Zeros, 0);
            let bias = b.param("b", &[12], Init::Zeros, 0);
            let ident = AffineParams::IDENTITY.0.iter().map(|&v| T::lit(v)).collect();
            b.store.set(bias, Tensor::from_vec(&[12], ident).unwrap()).unwrap();
            Linear { w, b: bias }
        });
        Self { blocks, fc }
    }

    /// `f`, `m`: `[b, 1, ...]`. Returns `[b, 12]`.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, f: Var, m: Var) -> Var {
        let mut x = ctx.g.concat_channels(&[f, m]);
        for blk in &self.blocks {
            x = blk.forward(ctx, x);
        }
        let pooled = ctx.g.global_avg_pool(x);
        self.fc.forward(ctx, pooled)
    }
}

/// Shared encoder; level 0 keeps full resolution.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<ConvBlock>,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<'_, T, R>, cfg: &NetConfig) -> Self {
        let mut cin = 1;
        let blocks = cfg
            .encoder_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stride = if i == 0 { 1 } else { 2 };
                let blk = bld.scope(format!("level{i}"), |b| ConvBlock::new(b, cin, c, stride, cfg.leaky_slope));
                cin = c;
                blk
            })
            .collect();
        Self { blocks }
    }

    /// Features of every level, full resolution first.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Vec<Var> {
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for blk in &self.blocks {
            h = blk.forward(ctx, h);
            feats.push(h);
        }
        feats
    }
}

/// Input at the deepest level of a decoder.
#[derive(Clone, Debug)]
pub enum DecoderEntry {
    /// Token rows of width `2k`, projected to the first decoder width.
    Tokens(Linear),
    /// Channel concatenation of both images' deepest features.
    Grid,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub entry: DecoderEntry,
    pub blocks: Vec<ConvBlock>,
    pub head: Conv,
}

impl Decoder {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<'_, T, R>, cfg: &NetConfig, tokens: bool, head_init: Init) -> Self {
        let enc = &cfg.encoder_channels;
        let dec = &cfg.decoder_channels;
        let h = cfg.halvings();
        let entry = if tokens {
            let d = 2 * cfg.token_dim;
            DecoderEntry::Tokens(bld.scope("tokens", |b| Linear::new(b, d, dec[0], Init::Normal(1.0 / (d as f64).sqrt()))))
        } else {
            DecoderEntry::Grid
        };
        let mut blocks = Vec::with_capacity(h);
        let first_in = if tokens { dec[0] } else { 2 * enc[h] };
        blocks.push(bld.scope("block0", |b| ConvBlock::new(b, first_in, dec[0], 1, cfg.leaky_slope)));
        for j in 1..h {
            let level = h - j;
            let cin = dec[j - 1] + 2 * enc[level];
            blocks.push(bld.scope(format!("block{j}"), |b| ConvBlock::new(b, cin, dec[j], 1, cfg.leaky_slope)));
        }
        let head = bld.scope("head", |b| Conv::new(b, dec[h - 1] + 2 * enc[0], 3, 1, head_init));
        Self { entry, blocks, head }
    }

    /// `input` is token rows (`Tokens`) or ignored (`Grid`); `skips_f` and
    /// `skips_m` are the encoder pyramids of the two images.
    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        cfg: &NetConfig,
        input: Option<Var>,
        skips_f: &[Var],
        skips_m: &[Var],
        batch: usize,
    ) -> Var {
        let g = ctx.g;
        let levels = cfg.level_dims();
        let h = cfg.halvings();
        let mut x = match &self.entry {
            DecoderEntry::Tokens(lin) => {
                let t = lin.forward(ctx, input.expect("decoder tokens"));
                g.tokens_to_grid(t, batch, levels[h])
            }
            DecoderEntry::Grid => g.concat_channels(&[skips_f[h], skips_m[h]]),
        };
        x = self.blocks[0].forward(ctx, x);
        for j in 1..=h {
            let level = h - j;
            x = g.upsample_nearest(x, levels[level]);
            x = g.concat_channels(&[x, skips_f[level], skips_m[level]]);
            x = if j < h {
                self.blocks[j].forward(ctx, x)
            } else {
                self.head.forward(ctx, x)
            };
        }
        x
    }
}

/// Gated fusion of the two branch velocities.
#[derive(Clone, Debug)]
pub struct Gfm {
    pub gate: Conv,
    pub out: Conv,
}

impl Gfm {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<'_, T, R>) -> Self {
        Self {
            gate: bld.scope("conv1", |b| Conv::new(b, 6, 6, 1, Init::He { slope: 1.0 })),
            out: bld.scope("conv2", |b| Conv::new(b, 6, 3, 1, Init::Zeros)),
        }
    }

    /// Returns the fused velocity and the gates `[b, 6, ...]` (`w_c` then `w_s`).
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, v_c: Var, v_s: Var) -> (Var, Var) {
        let g = ctx.g;
        let both = g.concat_channels(&[v_c, v_s]);
        let gates = g.sigmoid(self.gate.forward(ctx, both));
        let w_c = g.slice_channels(gates, 0, 3);
        let w_s = g.slice_channels(gates, 3, 3);
        let gated = g.concat_channels(&[g.mul(w_c, v_c), g.mul(w_s, v_s)]);
        (self.out.forward(ctx, gated), gates)
    }
}
