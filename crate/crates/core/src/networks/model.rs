//! The composed registration network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::NetConfig;
use super::layers::{Builder, Ctx, Init, Linear};
use super::tem::{Cam, Sam};
use super::unet::{AffineNet, Decoder, Encoder, Gfm};
use crate::error::Result;
use crate::graph::Var;
use crate::params::ParamStore;
use crate::real::Real;

/// Standard deviation of a branch head that feeds the gated fusion.
pub const FUSED_HEAD_STD: f64 = 1e-5;

/// Parameter handles of every submodule; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetConfig,
    pub affine: AffineNet,
    pub encoder: Encoder,
    pub tokens: Option<Linear>,
    pub sam: Option<Sam>,
    pub cam: Option<Cam>,
    pub decoder_s: Option<Decoder>,
    pub decoder_c: Option<Decoder>,
    pub decoder_base: Option<Decoder>,
    pub gfm: Option<Gfm>,
}

/// Graph values produced by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    /// `[b, 12]`
    pub affine: Var,
    /// Affine displacement `[b, 3, ...]`.
    pub u_affine: Var,
    pub m_a: Var,
    pub v_s: Option<Var>,
    pub v_c: Option<Var>,
    pub gates: Option<Var>,
    pub v: Var,
    /// Deformable displacement.
    pub phi: Var,
    pub m_d: Var,
}

impl Model {
    /// Builds the network and a freshly initialized parameter store.
    pub fn init<T: Real>(config: &NetConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bld = Builder::new(&mut store, &mut rng);
        let cfg = config;
        let flags = cfg.flags;
        let affine = bld.scope("affine", |b| AffineNet::new(b, cfg));
        let encoder = bld.scope("encoder", |b| Encoder::new(b, cfg));
        let branch_head = if flags.gated() { Init::Normal(FUSED_HEAD_STD) } else { Init::Zeros };
        let mut model = Self {
            config: cfg.clone(),
            affine,
            encoder,
            tokens: None,
            sam: None,
            cam: None,
            decoder_s: None,
            decoder_c: None,
            decoder_base: None,
            gfm: None,
        };
        if flags.is_base() {
            model.decoder_base = Some(bld.scope("decoder", |b| Decoder::new(b, cfg, false, Init::Zeros)));
        } else {
            let c = *cfg.encoder_channels.last().unwrap();
            let k = cfg.token_dim;
            model.tokens = Some(bld.scope("tokens", |b| Linear::new(b, c, k, Init::Normal(1.0 / (c as f64).sqrt()))));
            if flags.use_sam {
                model.sam = Some(Sam::new(&mut bld, cfg));
                model.decoder_s = Some(bld.scope("decoder_s", |b| Decoder::new(b, cfg, true, branch_head)));
            }
            if flags.use_cam {
                model.cam = Some(Cam::new(&mut bld, cfg));
                model.decoder_c = Some(bld.scope("decoder_c", |b| Decoder::new(b, cfg, true, branch_head)));
            }
            if flags.gated() {
                model.gfm = Some(bld.scope("gfm", |b| Gfm::new(b)));
            }
        }
        Ok((model, store))
    }

    /// `f`, `m`: `[b, 1, ...]` images in the configured dims.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, f: Var, m: Var) -> ForwardOut {
        let g = ctx.g;
        let cfg = &self.config;
        let shape = g.shape(f);
        let batch = shape[0];
        assert_eq!(
            shape,
            cfg.dims.shape(batch, 1).to_vec(),
            "input shape does not match the configuration"
        );

        let affine = self.affine.forward(ctx, f, m);
        let u_affine = g.affine_displacement(affine, cfg.dims);
        let m_a = g.warp_linear(m, u_affine);

        let feats_f = self.encoder.forward(ctx, f);
        let feats_m = self.encoder.forward(ctx, m_a);

        let (v_s, v_c, gates, v) = if let Some(dec) = &self.decoder_base {
            let v = dec.forward(ctx, cfg, None, &feats_f, &feats_m, batch);
            (None, None, None, v)
        } else {
            let proj = self.tokens.as_ref().expect("token projection");
            let tok = |feats: &[Var]| proj.forward(ctx, g.grid_to_tokens(*feats.last().unwrap()));
            let (e_f, e_m) = (tok(&feats_f), tok(&feats_m));
            let v_s = self.sam.as_ref().map(|sam| {
                let t = sam.forward(ctx, e_f, e_m, batch);
                self.decoder_s
                    .as_ref()
                    .unwrap()
                    .forward(ctx, cfg, Some(t), &feats_f, &feats_m, batch)
            });
            let v_c = self.cam.as_ref().map(|cam| {
                let t = cam.forward(ctx, e_f, e_m, batch);
                self.decoder_c
                    .as_ref()
                    .unwrap()
                    .forward(ctx, cfg, Some(t), &feats_f, &feats_m, batch)
            });
            match (v_s, v_c, &self.gfm) {
                (Some(s), Some(c), Some(gfm)) => {
                    let (v, gates) = gfm.forward(ctx, c, s);
                    (v_s, v_c, Some(gates), v)
                }
                (Some(s), Some(c), None) => (v_s, v_c, None, g.lincomb(&[(s, 0.5), (c, 0.5)])),
                (Some(s), None, _) => (v_s, None, None, s),
                (None, Some(c), _) => (None, v_c, None, c),
                (None, None, _) => unreachable!("non-base model without branches"),
            }
        };
        let phi = g.exponentiate(v, cfg.integration_steps);
        let m_d = g.warp_linear(m_a, phi);
        ForwardOut {
            affine,
            u_affine,
            m_a,
            v_s,
            v_c,
            gates,
            v,
            phi,
            m_d,
        }
    }
}
