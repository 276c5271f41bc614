//! Embedding heads, the symmetric InfoNCE objective and recall@k evaluation.

use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Added to the norm before dividing, so an all-zero vector stays finite.
pub const NORM_EPS: f64 = 1e-8;

/// `normalize(W · mean_tokens(x) + b)`.
#[derive(Clone, Debug)]
pub struct EmbeddingHead {
    weight: ParamId,
    bias: ParamId,
}

impl EmbeddingHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        name: &str,
        c: usize,
        dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EmbeddingHead {
            weight: store.add(format!("{name}.weight"), glorot(&[c, dim], c, dim, rng)?)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])?)?,
        })
    }

    /// Any `[... × C]` token map → unit-norm `[E]`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, tokens: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(tokens);
        let z = g.linear(pooled, p[self.weight], Some(p[self.bias]))?;
        Ok(g.l2_normalize(z, NORM_EPS))
    }
}

/// `½ [CE(G Aᵀ/τ, diag) + CE(A Gᵀ/τ, diag)]` over `[B × E]` batches whose
/// row `i` is the positive pair.
pub fn infonce<T: Scalar>(g: &mut Graph<T>, ground: Var, aerial: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config("tau", format!("temperature must be positive, got {tau}")));
    }
    if g.shape(ground) != g.shape(aerial) || g.shape(ground).len() != 2 {
        return Err(Error::Shape {
            op: "infonce",
            lhs: g.shape(ground).to_vec(),
            rhs: g.shape(aerial).to_vec(),
        });
    }
    let b = g.shape(ground)[0];
    let targets: Vec<usize> = (0..b).collect();
    let at = g.transpose(aerial)?;
    let sim = g.matmul(ground, at)?;
    let sim = g.scale(sim, 1.0 / tau);
    let rows = g.cross_entropy(sim, &targets)?;
    let sim_t = g.transpose(sim)?;
    let cols = g.cross_entropy(sim_t, &targets)?;
    let total = g.add(rows, cols)?;
    Ok(g.scale(total, 0.5))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecallRow {
    /// Display label: `"1"`, `"5"`, `"10"` or `"1%"`.
    pub label: String,
    pub k: usize,
    pub hits: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub queries: usize,
    pub references: usize,
    pub rows: Vec<RecallRow>,
    /// Reference ids per query, best first.
    pub rankings: Vec<Vec<usize>>,
}

impl RetrievalReport {
    pub fn rate(&self, label: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.label == label)
            .map(|r| r.hits as f64 / self.queries as f64)
    }

    pub fn r1(&self) -> f64 {
        self.rate("1").unwrap_or(0.0)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("queries {}  references {}\n", self.queries, self.references);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "R@{:<4} k={:<4} {:>5}/{:<5} {:.4}",
                r.label,
                r.k,
                r.hits,
                self.queries,
                r.hits as f64 / self.queries as f64
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,hits,total,rate\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6}",
                r.label,
                r.hits,
                self.queries,
                r.hits as f64 / self.queries as f64
            );
        }
        s
    }
}

/// Reference ids sorted by descending similarity; equal scores (including
/// `0.0` and `-0.0`) keep the lower id first.
pub fn rank_references(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids
}

/// Recall at 1, 5, 10 and 1% of the reference count; embeddings are rows.
pub fn recall_at_k(ground: &[Vec<f64>], aerial: &[Vec<f64>], truth: &[usize]) -> Result<RetrievalReport> {
    let r = aerial.len();
    if truth.len() != ground.len() {
        return Err(Error::Invalid(format!(
            "{} queries but {} truth entries",
            ground.len(),
            truth.len()
        )));
    }
    if ground.is_empty() || r == 0 {
        return Err(Error::Invalid(
            "recall needs at least one query and one reference".into(),
        ));
    }
    if let Some(&bad) = truth.iter().find(|&&t| t >= r) {
        return Err(Error::Invalid(format!(
            "truth id {bad} out of range for {r} references"
        )));
    }
    let pct = (r as f64 * 0.01).ceil() as usize;
    let ks = [
        ("1".to_string(), 1),
        ("5".into(), 5),
        ("10".into(), 10),
        ("1%".into(), pct),
    ];
    let mut positions = Vec::with_capacity(ground.len());
    let mut rankings = Vec::with_capacity(ground.len());
    for (q, &t) in ground.iter().zip(truth) {
        let scores: Vec<f64> = aerial
            .iter()
            .map(|a| a.iter().zip(q).map(|(x, y)| x * y).sum())
            .collect();
        let ranking = rank_references(&scores);
        positions.push(ranking.iter().position(|&id| id == t).expect("truth in range"));
        rankings.push(ranking);
    }
    let rows = ks
        .into_iter()
        .map(|(label, k)| RecallRow {
            hits: positions.iter().filter(|&&p| p < k).count(),
            label,
            k,
        })
        .collect();
    Ok(RetrievalReport {
        queries: ground.len(),
        references: r,
        rows,
        rankings,
    })
}
