//! Network hyperparameters and ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Dims;

/// Which attention branches and fusion stage are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_sam: bool,
    pub use_cam: bool,
    pub use_gfm: bool,
}

impl AblationFlags {
    pub const BASE: Self = Self::new(false, false, false);
    pub const SAM: Self = Self::new(true, false, false);
    pub const CAM: Self = Self::new(false, true, false);
    pub const FULL: Self = Self::new(true, true, true);

    pub const fn new(use_sam: bool, use_cam: bool, use_gfm: bool) -> Self {
        Self { use_sam, use_cam, use_gfm }
    }

    /// The four variants of the ablation study, in report order.
    pub fn ablation_variants() -> [Self; 4] {
        [Self::BASE, Self::SAM, Self::CAM, Self::FULL]
    }

    /// Fusion is only meaningful when both branches exist.
    pub fn gated(&self) -> bool {
        self.use_sam && self.use_cam && self.use_gfm
    }

    pub fn is_base(&self) -> bool {
        !self.use_sam && !self.use_cam
    }

    pub fn label(&self) -> String {
        match (self.use_sam, self.use_cam, self.use_gfm) {
            (false, false, _) => "BaseModel".into(),
            (true, false, _) => "BaseModel + SAM".into(),
            (false, true, _) => "BaseModel + CAM".into(),
            (true, true, true) => "The proposed method".into(),
            (true, true, false) => "BaseModel + SAM + CAM".into(),
        }
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

/// Attention logit scaling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `1 / sqrt(d_head)` per head.
    #[default]
    PerHead,
    /// `1 / sqrt(k)` regardless of the head count.
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Input volume size.
    pub dims: Dims,
    /// Encoder widths; the first block keeps full resolution and every later
    /// block halves it.
    pub encoder_channels: Vec<usize>,
    /// Decoder widths from the deepest level upward; one entry per encoder level
    /// except the full-resolution one.
    pub decoder_channels: Vec<usize>,
    pub token_dim: usize,
    pub heads: usize,
    pub tem_layers: usize,
    pub mlp_hidden: usize,
    pub attention_scale: AttentionScale,
    /// Affine regressor widths, one per stride-2 stage.
    pub affine_channels: Vec<usize>,
    pub affine_convs_per_stage: usize,
    pub integration_steps: u32,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub flags: AblationFlags,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            dims: Dims::new(32, 32, 16),
            encoder_channels: vec![16, 32, 32, 32],
            decoder_channels: vec![32, 32, 16],
            token_dim: 252,
            heads: 12,
            tem_layers: 12,
            mlp_hidden: 1008,
            attention_scale: AttentionScale::PerHead,
            affine_channels: vec![16, 32, 64, 128, 256],
            affine_convs_per_stage: 2,
            integration_steps: crate::field::DEFAULT_INTEGRATION_STEPS,
            leaky_slope: 0.2,
            bn_momentum: 0.1,
            flags: AblationFlags::FULL,
        }
    }
}

impl NetConfig {
    /// Narrow three-level network for quick experiments and tests.
    pub fn small(dims: Dims) -> Self {
        Self {
            dims,
            encoder_channels: vec![4, 8, 8],
            decoder_channels: vec![8, 4],
            token_dim: 8,
            heads: 2,
            tem_layers: 1,
            mlp_hidden: 16,
            affine_channels: vec![4, 8],
            affine_convs_per_stage: 1,
            ..Self::default()
        }
    }

    pub fn halvings(&self) -> usize {
        self.encoder_channels.len().saturating_sub(1)
    }

    /// Spatial size of every encoder level, full resolution first.
    pub fn level_dims(&self) -> Vec<Dims> {
        let mut out = vec![self.dims];
        for _ in 0..self.halvings() {
            out.push(out.last().unwrap().halved());
        }
        out
    }

    /// Token grid (deepest encoder level).
    pub fn token_grid(&self) -> Dims {
        *self.level_dims().last().unwrap()
    }

    /// Tokens per image.
    pub fn max_tokens(&self) -> usize {
        self.token_grid().len()
    }

    pub fn attention_scale_value(&self) -> f64 {
        match self.attention_scale {
            AttentionScale::PerHead => 1.0 / ((self.token_dim / self.heads.max(1)) as f64).sqrt(),
            AttentionScale::Model => 1.0 / (self.token_dim as f64).sqrt(),
        }
    }

    /// All problems found, one per entry.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let h = self.halvings();
        if self.encoder_channels.len() < 2 {
            p.push("encoder_channels needs at least two levels".into());
        }
        if self.decoder_channels.len() != h {
            p.push(format!(
                "decoder_channels needs {h} entries (one per halving), got {}",
                self.decoder_channels.len()
            ));
        }
        for (axis, n) in [("x", self.dims.nx), ("y", self.dims.ny), ("z", self.dims.nz)] {
            if n % (1 << h) != 0 {
                p.push(format!("dims {} along {axis} is not divisible by 2^{h}", self.dims));
            }
            if n < 2 {
                p.push(format!("dims {} too small along {axis}", self.dims));
            }
        }
        if self.affine_channels.is_empty() {
            p.push("affine_channels must not be empty".into());
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            p.push(format!("token_dim {} not divisible by heads {}", self.token_dim, self.heads));
        }
        if self.tem_layers == 0 {
            p.push("tem_layers must be at least 1".into());
        }
        if self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .chain(&self.affine_channels)
            .any(|&c| c == 0)
            || self.mlp_hidden == 0
            || self.token_dim == 0
        {
            p.push("layer widths must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            p.push("bn_momentum must lie in [0, 1]".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(p.join("; ")))
        }
    }
}
