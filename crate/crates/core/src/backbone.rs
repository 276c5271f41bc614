//! Four-stage convolutional feature extractor with top-down fusion.
//!
//! Stage `k` (1-based) has stride `2^k`. Fusion produces the pyramid
//! `C1..C4` at strides 16, 8, 4 and 2, where `C1` is the coarsest:
//!
//! ```text
//! C1 = P(S4)
//! C2 = P(S3) + up(C1)
//! C3 = P(S2) + up(C2)
//! C4 = P(S1) + up(C3)
//! ```
//!
//! with `P` a bias-free 1×1 projection to `c_model` channels and `up`
//! nearest-neighbour 2× upsampling.

use rand::Rng;

use crate::autodiff::{Graph, PadMode, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming, Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Strides of the fused levels `C1..C4`.
pub const PYRAMID_STRIDES: [usize; 4] = [16, 8, 4, 2];

/// Every input side must be divisible by this.
pub const INPUT_MULTIPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    pub c_model: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: [8, 16, 24, 32],
            c_model: 32,
        }
    }
}

/// The fused multi-scale ground (or aerial) features, coarsest first.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub levels: [Var; 4],
}

impl Pyramid {
    pub fn c4(&self) -> Var {
        self.levels[3]
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

impl ConvLayer {
    fn new<T: Scalar, R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConvLayer {
            weight: store.add(format!("{name}.weight"), kaiming(&[3, 3, cin, cout], 9 * cin, rng)?)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])?)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, stride: usize, pad: PadMode) -> Result<Var> {
        let y = g.conv2d(x, p[self.weight], stride, pad)?;
        let y = g.bias_add(y, p[self.bias])?;
        Ok(g.relu(y))
    }
}

/// One branch's backbone: four `conv(stride 2) → relu → conv → relu`
/// stages plus the lateral projections used by fusion.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<[ConvLayer; 2]>,
    laterals: [ParamId; 4],
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        prefix: &str,
        config: &BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for (s, &cout) in config.stage_channels.iter().enumerate() {
            let down = ConvLayer::new(&format!("{prefix}.stage{}.down", s + 1), cin, cout, store, rng)?;
            let refine = ConvLayer::new(&format!("{prefix}.stage{}.refine", s + 1), cout, cout, store, rng)?;
            stages.push([down, refine]);
            cin = cout;
        }
        let mut laterals = Vec::with_capacity(4);
        for (s, &c) in config.stage_channels.iter().enumerate() {
            let w = kaiming(&[1, 1, c, config.c_model], c, rng)?;
            laterals.push(store.add(format!("{prefix}.lateral{}.weight", s + 1), w)?);
        }
        Ok(Backbone {
            config: config.clone(),
            stages,
            laterals: laterals.try_into().expect("four laterals"),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Runs the four stages on an `(H, W, 3)` image; returns `S1..S4`.
    pub fn extract_stages<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var, pad: PadMode) -> Result<[Var; 4]> {
        let [h, w, c] = g.value(image).dims3("extract_stages")?;
        if c != 3 {
            return Err(Error::config("image", format!("expected 3 channels, got {c}")));
        }
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::config(
                "image",
                format!("{h}×{w} input is not divisible by {INPUT_MULTIPLE}"),
            ));
        }
        let mut x = image;
        let mut out = [image; 4];
        for (s, [down, refine]) in self.stages.iter().enumerate() {
            x = down.forward(g, p, x, 2, pad)?;
            x = refine.forward(g, p, x, 1, pad)?;
            out[s] = x;
        }
        Ok(out)
    }

    /// Top-down upsample-and-add fusion of `S1..S4` into `C1..C4`.
    pub fn fuse_topdown<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, stages: &[Var; 4]) -> Result<Pyramid> {
        // 1×1 convolutions never touch the padding, so the mode is irrelevant
        let project = |g: &mut Graph<T>, s: usize| g.conv2d(stages[s], p[self.laterals[s]], 1, PadMode::Zero);
        let c1 = project(g, 3)?;
        let mut levels = [c1; 4];
        for (l, s) in [(1, 2), (2, 1), (3, 0)] {
            let lateral = project(g, s)?;
            let up = g.upsample2x(levels[l - 1])?;
            levels[l] = g.add(lateral, up)?;
        }
        Ok(Pyramid { levels })
    }

    pub fn pyramid<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var, pad: PadMode) -> Result<Pyramid> {
        let stages = self.extract_stages(g, p, image, pad)?;
        self.fuse_topdown(g, p, &stages)
    }

    /// Aerial branch: the stride-2 fused map of a zero-padded aerial image.
    pub fn encode_aerial<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        Ok(self.pyramid(g, p, image, PadMode::Zero)?.c4())
    }
}
