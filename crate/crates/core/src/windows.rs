//! Window partitioning of BEV grids and ground feature maps, and the hard
//! window-to-strip assignment.
//!
//! The BEV grid is cut into `N = s²` windows in raster order; every ground
//! level is cut into `N` vertical strips, left to right. Each BEV window is
//! then assigned, per level, the strip whose pooled descriptor has the
//! largest dot product with its own.

use crate::autodiff::{Graph, Var};
use crate::backbone::Pyramid;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Shape of a BEV token grid and its window tiling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
    pub windows: usize,
    /// `√windows`: windows per grid row and per grid column.
    pub side: usize,
}

impl GridGeometry {
    pub fn new(height: usize, width: usize, windows: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::config("bev_size", "grid must be non-empty"));
        }
        let side = (windows as f64).sqrt().round() as usize;
        if windows == 0 || side * side != windows {
            return Err(Error::config("windows", format!("{windows} is not a perfect square")));
        }
        if !height.is_multiple_of(side) {
            return Err(Error::config(
                "bev_h",
                format!("{height} rows cannot be split into {side} window rows"),
            ));
        }
        if !width.is_multiple_of(side) {
            return Err(Error::config(
                "bev_w",
                format!("{width} columns cannot be split into {side} window columns"),
            ));
        }
        Ok(GridGeometry {
            height,
            width,
            windows,
            side,
        })
    }

    pub fn window_height(&self) -> usize {
        self.height / self.side
    }

    pub fn window_width(&self) -> usize {
        self.width / self.side
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Flat token indices of window `i`, raster order inside the window.
    pub fn window_tokens(&self, i: usize) -> Vec<usize> {
        let (wh, ww) = (self.window_height(), self.window_width());
        let (r0, c0) = ((i / self.side) * wh, (i % self.side) * ww);
        let mut idx = Vec::with_capacity(wh * ww);
        for r in r0..r0 + wh {
            idx.extend((c0..c0 + ww).map(|c| r * self.width + c));
        }
        idx
    }
}

/// Flat token indices of each of `n` vertical strips of an `h × w` map.
pub fn strip_tokens(h: usize, w: usize, n: usize, level: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 || !w.is_multiple_of(n) {
        return Err(Error::config(
            "windows",
            format!("level {} width {w} is not divisible by {n} strips", level + 1),
        ));
    }
    let sw = w / n;
    Ok((0..n)
        .map(|j| {
            let mut idx = Vec::with_capacity(h * sw);
            for r in 0..h {
                idx.extend((j * sw..(j + 1) * sw).map(|c| r * w + c));
            }
            idx
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Bev,
    Ground { level: usize },
}

/// A feature map together with a tiling of its tokens.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub source: Source,
    /// The full map, `(H, W, C)`.
    pub map: Var,
    /// Flat token indices per window.
    pub windows: Vec<Vec<usize>>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Tokens of window `i` as a `[len × C]` matrix.
    pub fn gather<T: Scalar>(&self, g: &mut Graph<T>, i: usize) -> Result<Var> {
        g.gather_rows(self.map, &self.windows[i])
    }

    /// Per-window channel means, accumulated in 64-bit.
    pub fn pooled<T: Scalar>(&self, g: &Graph<T>) -> Vec<Vec<f64>> {
        let c = *g.shape(self.map).last().expect("non-empty shape");
        let data = g.data(self.map);
        self.windows
            .iter()
            .map(|idx| {
                let mut acc = vec![0.0; c];
                for &t in idx {
                    for (a, &v) in acc.iter_mut().zip(&data[t * c..(t + 1) * c]) {
                        *a += v.to_f64_lossy();
                    }
                }
                acc.iter_mut().for_each(|a| *a /= idx.len() as f64);
                acc
            })
            .collect()
    }
}

pub fn partition_bev(map: Var, geom: &GridGeometry) -> WindowSet {
    WindowSet {
        source: Source::Bev,
        map,
        windows: (0..geom.windows).map(|i| geom.window_tokens(i)).collect(),
    }
}

pub fn partition_ground<T: Scalar>(g: &Graph<T>, pyramid: &Pyramid, n: usize) -> Result<[WindowSet; 4]> {
    let mut out = Vec::with_capacity(4);
    for (level, &map) in pyramid.levels.iter().enumerate() {
        let (h, w) = (g.shape(map)[0], g.shape(map)[1]);
        out.push(WindowSet {
            source: Source::Ground { level },
            map,
            windows: strip_tokens(h, w, n, level)?,
        });
    }
    Ok(out.try_into().expect("four levels"))
}

/// Result of matching BEV windows to ground strips at every level.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowAssignment {
    /// `matches[i][l]`: strip assigned to BEV window `i` at level `l`.
    pub matches: Vec<[usize; 4]>,
    /// `scores[l][i][j]`: correlation of BEV window `i` with strip `j`.
    pub scores: [Vec<Vec<f64>>; 4],
}

impl WindowAssignment {
    pub fn windows(&self) -> usize {
        self.matches.len()
    }
}

/// Dot-product score table and its row-wise argmax (first maximum wins).
pub fn match_descriptors(bev: &[Vec<f64>], strips: &[Vec<f64>]) -> (Vec<usize>, Vec<Vec<f64>>) {
    let scores: Vec<Vec<f64>> = bev
        .iter()
        .map(|b| {
            strips
                .iter()
                .map(|s| b.iter().zip(s).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect();
    let best = scores
        .iter()
        .map(|row: &Vec<f64>| {
            let mut arg = 0;
            for (j, &s) in row.iter().enumerate().skip(1) {
                if s > row[arg] {
                    arg = j;
                }
            }
            arg
        })
        .collect();
    (best, scores)
}

/// Hard assignment; reads values only, so nothing flows back through it.
pub fn match_windows<T: Scalar>(g: &Graph<T>, bev: &WindowSet, ground: &[WindowSet; 4]) -> Result<WindowAssignment> {
    let n = bev.len();
    if let Some(bad) = ground.iter().find(|s| s.len() != n) {
        return Err(Error::Invalid(format!(
            "{n} BEV windows but {} ground strips in {:?}",
            bad.len(),
            bad.source
        )));
    }
    let bev_desc = bev.pooled(g);
    let mut matches = vec![[0usize; 4]; n];
    let mut scores: [Vec<Vec<f64>>; 4] = Default::default();
    for (l, strips) in ground.iter().enumerate() {
        let (best, table) = match_descriptors(&bev_desc, &strips.pooled(g));
        for (m, b) in matches.iter_mut().zip(best) {
            m[l] = b;
        }
        scores[l] = table;
    }
    Ok(WindowAssignment { matches, scores })
}
