//! The full two-branch retrieval model: ground pyramid → BEV init →
//! window-to-window encoder → embedding, and aerial C4 → embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CollapseMode, Graph, PadMode, Var};
use crate::backbone::{Backbone, BackboneConfig, Pyramid, INPUT_MULTIPLE};
use crate::bev_init::{BevGrid, BevInit, BevInitConfig};
use crate::encoder::{BlockTrace, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::params::{Bound, ParamStore};
use crate::retrieval::EmbeddingHead;
use crate::synth::to_tensor;
use crate::tensor::{Scalar, Tensor};
use crate::windows::GridGeometry;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stage_channels: [usize; 4],
    pub c_model: usize,
    pub bev_h: usize,
    pub bev_w: usize,
    pub windows: usize,
    pub depth_bins: usize,
    pub collapse: CollapseMode,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub embed_dim: usize,
    pub bev_init_enabled: bool,
    pub shared_backbone: bool,
    /// Panorama width. Inputs of this width are treated as full panoramas
    /// (circular padding); narrower crops are zero-padded on the right.
    pub ground_width: usize,
    /// Pad crops all the way to `ground_width`, keeping one BEV column per
    /// fixed azimuth range whatever the FoV. Otherwise crops are padded only
    /// to the next multiple of [`ModelConfig::width_unit`].
    pub pad_crops_to_panorama: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: [8, 16, 24, 32],
            c_model: 32,
            bev_h: 16,
            bev_w: 16,
            windows: 4,
            depth_bins: 16,
            collapse: CollapseMode::Max,
            blocks: 3,
            heads: 4,
            ffn_expansion: 4,
            embed_dim: 64,
            bev_init_enabled: true,
            shared_backbone: false,
            ground_width: 128,
            pad_crops_to_panorama: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c_model", self.c_model),
            ("depth_bins", self.depth_bins),
            ("num_heads", self.heads),
            ("embed_dim", self.embed_dim),
            ("ffn_expansion", self.ffn_expansion),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::config(
                "stage_channels",
                "every stage needs at least one channel",
            ));
        }
        GridGeometry::new(self.bev_h, self.bev_w, self.windows)?;
        let multiple = self.width_unit();
        if self.ground_width == 0 || !self.ground_width.is_multiple_of(multiple) {
            return Err(Error::config(
                "ground_width",
                format!("{} is not a positive multiple of {multiple}", self.ground_width),
            ));
        }
        self.encoder().validate()
    }

    /// Ground widths must be multiples of this: the stride-16 level is cut
    /// into `windows` strips.
    pub fn width_unit(&self) -> usize {
        INPUT_MULTIPLE * self.windows
    }

    fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            stage_channels: self.stage_channels,
            c_model: self.c_model,
        }
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            blocks: self.blocks,
            heads: self.heads,
            ffn_expansion: self.ffn_expansion,
            c_model: self.c_model,
        }
    }
}

/// Parameter handles; independent of precision.
#[derive(Clone, Debug)]
pub struct Parts {
    pub ground: Backbone,
    pub aerial: Backbone,
    pub bev_init: BevInit,
    pub encoder: Encoder,
    pub ground_head: EmbeddingHead,
    pub aerial_head: EmbeddingHead,
}

pub struct W2wBev<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub parts: Parts,
}

/// A ground image ready for the backbone.
#[derive(Clone, Debug)]
pub struct GroundInput<T> {
    pub image: Tensor<T>,
    pub pad: PadMode,
}

/// Intermediate values of one ground forward pass.
pub struct GroundTrace {
    pub pyramid: Pyramid,
    pub grid: BevGrid,
    pub depth: Option<Var>,
    pub bev: Var,
    pub blocks: Vec<BlockTrace>,
    pub embedding: Var,
}

impl<T: Scalar> W2wBev<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bb = config.backbone();
        let ground = Backbone::new("ground", &bb, &mut store, &mut rng)?;
        let aerial = if config.shared_backbone {
            ground.clone()
        } else {
            Backbone::new("aerial", &bb, &mut store, &mut rng)?
        };
        let geom = GridGeometry::new(config.bev_h, config.bev_w, config.windows)?;
        let init_cfg = BevInitConfig {
            depth_bins: config.depth_bins,
            collapse: config.collapse,
            enabled: config.bev_init_enabled,
        };
        let bev_init = BevInit::new(&init_cfg, geom, config.c_model, &mut store, &mut rng)?;
        let encoder = Encoder::new(&config.encoder(), &mut store, &mut rng)?;
        let ground_head = EmbeddingHead::new("head.ground", config.c_model, config.embed_dim, &mut store, &mut rng)?;
        let aerial_head = EmbeddingHead::new("head.aerial", config.c_model, config.embed_dim, &mut store, &mut rng)?;
        Ok(W2wBev {
            config: config.clone(),
            store,
            parts: Parts {
                ground,
                aerial,
                bev_init,
                encoder,
                ground_head,
                aerial_head,
            },
        })
    }

    pub fn cast<U: Scalar>(&self) -> W2wBev<U> {
        W2wBev {
            config: self.config.clone(),
            store: self.store.cast(),
            parts: self.parts.clone(),
        }
    }

    /// Full panoramas keep circular padding; narrower crops are zero-padded
    /// on the right and use zero padding.
    pub fn prepare_ground(&self, img: &RgbImage) -> Result<GroundInput<T>> {
        let full = self.config.ground_width;
        if img.width > full {
            return Err(Error::config(
                "ground_width",
                format!("input width {} exceeds {full}", img.width),
            ));
        }
        let t = to_tensor::<T>(img);
        if img.width == full {
            return Ok(GroundInput {
                image: t,
                pad: PadMode::CircularWidth,
            });
        }
        let w = if self.config.pad_crops_to_panorama {
            full
        } else {
            img.width.div_ceil(self.config.width_unit()) * self.config.width_unit()
        };
        let mut data = vec![T::zero(); img.height * w * 3];
        for y in 0..img.height {
            let src = &t.data()[y * img.width * 3..(y + 1) * img.width * 3];
            data[y * w * 3..y * w * 3 + src.len()].copy_from_slice(src);
        }
        Ok(GroundInput {
            image: Tensor::from_vec(&[img.height, w, 3], data)?,
            pad: PadMode::Zero,
        })
    }

    pub fn ground_forward(&self, g: &mut Graph<T>, p: &Bound, input: &GroundInput<T>) -> Result<GroundTrace> {
        let image = g.constant(input.image.clone());
        self.ground_forward_var(g, p, image, input.pad)
    }

    /// As [`W2wBev::ground_forward`] for an image already on the tape.
    pub fn ground_forward_var(&self, g: &mut Graph<T>, p: &Bound, image: Var, pad: PadMode) -> Result<GroundTrace> {
        let parts = &self.parts;
        let pyramid = parts.ground.pyramid(g, p, image, pad)?;
        let (grid, depth) = parts.bev_init.init(g, p, pyramid.c4())?;
        let (bev, blocks) = parts.encoder.encode(g, p, &grid, &pyramid)?;
        let embedding = parts.ground_head.embed(g, p, bev)?;
        Ok(GroundTrace {
            pyramid,
            grid,
            depth,
            bev,
            blocks,
            embedding,
        })
    }

    pub fn aerial_forward(&self, g: &mut Graph<T>, p: &Bound, aerial: &Tensor<T>) -> Result<Var> {
        let image = g.constant(aerial.clone());
        self.aerial_forward_var(g, p, image)
    }

    pub fn aerial_forward_var(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        let map = self.parts.aerial.encode_aerial(g, p, image)?;
        self.parts.aerial_head.embed(g, p, map)
    }

    /// Stacks per-sample `[E]` embeddings into `[B × E]`.
    pub fn stack(g: &mut Graph<T>, rows: &[Var]) -> Result<Var> {
        let mut flat = Vec::with_capacity(rows.len());
        for &r in rows {
            let e = g.shape(r)[0];
            flat.push(g.reshape(r, &[1, e])?);
        }
        g.concat_rows(&flat)
    }

    /// Inference embedding of one ground image.
    pub fn embed_ground(&self, input: &GroundInput<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let e = self.ground_forward(&mut g, &p, input)?.embedding;
        Ok(g.data(e).iter().map(|v| v.to_f64_lossy()).collect())
    }

    pub fn embed_aerial(&self, aerial: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let e = self.aerial_forward(&mut g, &p, aerial)?;
        Ok(g.data(e).iter().map(|v| v.to_f64_lossy()).collect())
    }
}
