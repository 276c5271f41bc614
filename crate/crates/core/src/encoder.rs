//! The stacked BEV encoder.
//!
//! Each block re-matches BEV windows to ground strips, then applies three
//! post-norm residual sublayers:
//!
//! ```text
//! X ← LN(X + Σ_l MHA(X_i, S_l[m(i,l)], S_l[m(i,l)]))   per window i
//! X ← LN(X + MHA(X, X, X))
//! X ← LN(X + W2·relu(W1·X + b1) + b2)
//! ```
//!
//! One attention module serves all four levels of a block.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::Pyramid;
use crate::bev_init::BevGrid;
use crate::error::{Error, Result};
use crate::params::{glorot, kaiming, Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::windows::{match_windows, partition_bev, partition_ground, WindowAssignment};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub c_model: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.c_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "num_heads",
                format!("{} channels cannot be split into {} heads", self.c_model, self.heads),
            ));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::config("ffn_expansion", "must be positive"));
        }
        Ok(())
    }
}

/// Query/key/value/output projections of one multi-head attention.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    fn new<T: Scalar, R: Rng + ?Sized>(
        name: &str,
        c: usize,
        heads: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut proj = |p: &str, rng: &mut R| store.add(format!("{name}.{p}"), glorot(&[c, c], c, c, rng)?);
        Ok(AttentionParams {
            wq: proj("wq", rng)?,
            wk: proj("wk", rng)?,
            wv: proj("wv", rng)?,
            wo: proj("wo", rng)?,
            heads,
        })
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new<T: Scalar>(name: &str, c: usize, store: &mut ParamStore<T>) -> Result<Self> {
        Ok(Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], T::one())?)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])?)?,
        })
    }

    fn residual<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, update: Var) -> Result<Var> {
        let s = g.add(x, update)?;
        g.layer_norm(s, p[self.gamma], p[self.beta])
    }
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub cross: AttentionParams,
    pub self_attn: AttentionParams,
    pub ffn: FfnParams,
    norms: [Norm; 3],
}

/// Per-block record of what the encoder did, for inspection.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub assignment: WindowAssignment,
    /// `cross[i][l]`: attention node of BEV window `i` against its level-`l`
    /// strip (weights via [`Graph::attention_weights`]).
    pub cross: Vec<[Var; 4]>,
    pub self_attn: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    blocks: Vec<Block>,
}

/// `Concat_h(softmax(Q_h K_hᵀ/√d) V_h) · W^O` with `Q = q·W^Q`, `K = kv·W^K`,
/// `V = kv·W^V`; tokens are `[L × C]`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &AttentionParams,
    q_tokens: Var,
    kv_tokens: Var,
) -> Result<Var> {
    Ok(attend(g, p, params, q_tokens, kv_tokens)?.0)
}

/// As [`multi_head_attention`], also returning the attention node.
fn attend<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &AttentionParams,
    q_tokens: Var,
    kv_tokens: Var,
) -> Result<(Var, Var)> {
    let (q, k, v) = (
        g.linear(q_tokens, p[params.wq], None)?,
        g.linear(kv_tokens, p[params.wk], None)?,
        g.linear(kv_tokens, p[params.wv], None)?,
    );
    let a = g.attention(q, k, v, params.heads)?;
    Ok((g.linear(a, p[params.wo], None)?, a))
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.c_model;
        let hidden = c * config.ffn_expansion;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let name = format!("encoder.block{b}");
            blocks.push(Block {
                cross: AttentionParams::new(&format!("{name}.cross"), c, config.heads, store, rng)?,
                self_attn: AttentionParams::new(&format!("{name}.self"), c, config.heads, store, rng)?,
                ffn: FfnParams {
                    w1: store.add(format!("{name}.ffn.w1"), kaiming(&[c, hidden], c, rng)?)?,
                    b1: store.add(format!("{name}.ffn.b1"), Tensor::zeros(&[hidden])?)?,
                    w2: store.add(format!("{name}.ffn.w2"), glorot(&[hidden, c], hidden, c, rng)?)?,
                    b2: store.add(format!("{name}.ffn.b2"), Tensor::zeros(&[c])?)?,
                },
                norms: [
                    Norm::new(&format!("{name}.norm1"), c, store)?,
                    Norm::new(&format!("{name}.norm2"), c, store)?,
                    Norm::new(&format!("{name}.norm3"), c, store)?,
                ],
            });
        }
        Ok(Encoder {
            config: config.clone(),
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Window-to-window cross-attention sublayer; `tokens` is `[H_b·W_b × C]`
    /// in raster order and so is the result.
    #[allow(clippy::too_many_arguments)]
    pub fn w2w_cross_attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        block: usize,
        grid: &BevGrid,
        tokens: Var,
        pyramid: &Pyramid,
        assignment: &WindowAssignment,
    ) -> Result<(Var, Vec<[Var; 4]>)> {
        let blk = &self.blocks[block];
        let prm = &blk.cross;
        let geom = grid.geom;
        let n = geom.windows;
        if assignment.windows() != n {
            return Err(Error::Invalid(format!(
                "assignment covers {} windows, grid has {n}",
                assignment.windows()
            )));
        }
        // Projections are per token, so projecting whole maps once and then
        // gathering windows is the same as projecting each gathered window.
        let q_all = g.linear(tokens, p[prm.wq], None)?;
        let mut kv = Vec::with_capacity(4);
        let mut strips = Vec::with_capacity(4);
        for (l, &level) in pyramid.levels.iter().enumerate() {
            let [h, w, c] = g.value(level).dims3("ground level")?;
            let flat = g.reshape(level, &[h * w, c])?;
            kv.push((g.linear(flat, p[prm.wk], None)?, g.linear(flat, p[prm.wv], None)?));
            strips.push(crate::windows::strip_tokens(h, w, n, l)?);
        }
        let mut per_window = Vec::with_capacity(n);
        let mut attn_nodes = Vec::with_capacity(n);
        let mut order = Vec::with_capacity(geom.tokens());
        for (i, m) in assignment.matches.iter().enumerate() {
            let idx = geom.window_tokens(i);
            let q = g.gather_rows(q_all, &idx)?;
            order.extend(idx);
            let mut acc: Option<Var> = None;
            let mut nodes = [q; 4];
            for l in 0..4 {
                let strip = strips[l]
                    .get(m[l])
                    .unwrap_or_else(|| panic!("assignment strip {} out of range at window {i}, level {l}", m[l]));
                let k = g.gather_rows(kv[l].0, strip)?;
                let v = g.gather_rows(kv[l].1, strip)?;
                let a = g.attention(q, k, v, prm.heads)?;
                nodes[l] = a;
                acc = Some(match acc {
                    None => a,
                    Some(s) => g.add(s, a)?,
                });
            }
            per_window.push(acc.expect("four levels"));
            attn_nodes.push(nodes);
        }
        // Σ_l (A_l W^O) = (Σ_l A_l) W^O
        let stacked = g.concat_rows(&per_window)?;
        let mut inverse = vec![0; order.len()];
        for (pos, &t) in order.iter().enumerate() {
            inverse[t] = pos;
        }
        let raster = g.gather_rows(stacked, &inverse)?;
        let update = g.linear(raster, p[prm.wo], None)?;
        Ok((blk.norms[0].residual(g, p, tokens, update)?, attn_nodes))
    }

    /// Global self-attention sublayer over `[L × C]` tokens.
    pub fn bev_self_attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        block: usize,
        tokens: Var,
    ) -> Result<(Var, Var)> {
        let blk = &self.blocks[block];
        let (update, attn) = attend(g, p, &blk.self_attn, tokens, tokens)?;
        Ok((blk.norms[1].residual(g, p, tokens, update)?, attn))
    }

    pub fn ffn<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, block: usize, tokens: Var) -> Result<Var> {
        let blk = &self.blocks[block];
        let f = &blk.ffn;
        let h = g.linear(tokens, p[f.w1], Some(p[f.b1]))?;
        let h = g.relu(h);
        let update = g.linear(h, p[f.w2], Some(p[f.b2]))?;
        blk.norms[2].residual(g, p, tokens, update)
    }

    /// Runs every block; returns the `(H_b, W_b, C)` representation and a
    /// trace per block.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        grid: &BevGrid,
        pyramid: &Pyramid,
    ) -> Result<(Var, Vec<BlockTrace>)> {
        let geom = grid.geom;
        let c = self.config.c_model;
        let ground = partition_ground(g, pyramid, geom.windows)?;
        let mut map = grid.tokens;
        let mut trace = Vec::with_capacity(self.blocks.len());
        for b in 0..self.blocks.len() {
            let assignment = match_windows(g, &partition_bev(map, &geom), &ground)?;
            let tokens = g.reshape(map, &[geom.tokens(), c])?;
            let (x, cross) = self.w2w_cross_attention(g, p, b, grid, tokens, pyramid, &assignment)?;
            let (x, self_attn) = self.bev_self_attention(g, p, b, x)?;
            let x = self.ffn(g, p, b, x)?;
            map = g.reshape(x, &[geom.height, geom.width, c])?;
            trace.push(BlockTrace {
                assignment,
                cross,
                self_attn,
                output: map,
            });
        }
        Ok((map, trace))
    }
}

#[cfg(test)]
mod tests;
