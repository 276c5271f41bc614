//! BEV token initialization from the finest fused ground map.
//!
//! A per-pixel depth distribution lifts `C4` into an `(H, W, D, C)` volume,
//! the image-height axis is max-pooled away, and the resulting depth × width
//! plane is resampled onto the BEV grid (depth → rows, azimuth → columns).
//! A learnable positional embedding is added to the grid tokens only.

use rand::Rng;

use crate::autodiff::{CollapseMode, Graph, Var};
use crate::error::Result;
use crate::params::{glorot, Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::windows::GridGeometry;

#[derive(Clone, Debug, PartialEq)]
pub struct BevInitConfig {
    pub depth_bins: usize,
    pub collapse: CollapseMode,
    /// When off, tokens start as zeros plus the positional embedding.
    pub enabled: bool,
}

/// Grid tokens `(H_b, W_b, C)` and their window tiling.
#[derive(Clone, Copy, Debug)]
pub struct BevGrid {
    pub tokens: Var,
    pub geom: GridGeometry,
}

#[derive(Clone, Debug)]
pub struct BevInit {
    config: BevInitConfig,
    geom: GridGeometry,
    c_model: usize,
    depth_weight: ParamId,
    depth_bias: ParamId,
    pos_embed: ParamId,
}

impl BevInit {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: &BevInitConfig,
        geom: GridGeometry,
        c_model: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.depth_bins;
        if d == 0 {
            return Err(crate::Error::config("depth_bins", "must be positive"));
        }
        Ok(BevInit {
            config: config.clone(),
            geom,
            c_model,
            depth_weight: store.add("bev_init.depth.weight", glorot(&[c_model, d], c_model, d, rng)?)?,
            depth_bias: store.add("bev_init.depth.bias", Tensor::zeros(&[d])?)?,
            pos_embed: store.add(
                "bev_init.pos_embed",
                Tensor::randn(&[geom.height, geom.width, c_model], 0.02, rng)?,
            )?,
        })
    }

    pub fn config(&self) -> &BevInitConfig {
        &self.config
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geom
    }

    /// Per-pixel `softmax(c4 · W + b)` over `D` bins → `(H, W, D)`.
    pub fn predict_depth<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, c4: Var) -> Result<Var> {
        let logits = g.linear(c4, p[self.depth_weight], Some(p[self.depth_bias]))?;
        g.softmax(logits, 2)
    }

    pub fn lift<T: Scalar>(&self, g: &mut Graph<T>, c4: Var, depth: Var) -> Result<Var> {
        g.lift_to_3d(c4, depth)
    }

    pub fn collapse<T: Scalar>(&self, g: &mut Graph<T>, volume: Var) -> Result<Var> {
        g.collapse_height(volume, self.config.collapse)
    }

    /// Bilinear resize of the `(D, W, C)` plane onto the grid, plus the
    /// positional embedding.
    pub fn resample_to_grid<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, collapsed: Var) -> Result<BevGrid> {
        let plane = g.resample_bilinear(collapsed, self.geom.height, self.geom.width)?;
        let tokens = g.add(plane, p[self.pos_embed])?;
        Ok(BevGrid {
            tokens,
            geom: self.geom,
        })
    }

    /// Full initialization; returns the grid and, when enabled, the depth
    /// field it was built from.
    pub fn init<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, c4: Var) -> Result<(BevGrid, Option<Var>)> {
        if !self.config.enabled {
            return Ok((self.positional_only(p), None));
        }
        let depth = self.predict_depth(g, p, c4)?;
        let volume = self.lift(g, c4, depth)?;
        let collapsed = self.collapse(g, volume)?;
        Ok((self.resample_to_grid(g, p, collapsed)?, Some(depth)))
    }

    /// The ablation grid: zeros plus positional embedding, which is just the
    /// embedding itself.
    pub fn positional_only(&self, p: &Bound) -> BevGrid {
        BevGrid {
            tokens: p[self.pos_embed],
            geom: self.geom,
        }
    }

    pub fn pos_embed_id(&self) -> ParamId {
        self.pos_embed
    }

    pub fn c_model(&self) -> usize {
        self.c_model
    }
}
