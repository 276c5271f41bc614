//! Seeded toy world: circular landmarks around a camera at the origin,
//! rendered as a top-down aerial raster and as a cylindrical ground
//! panorama.
//!
//! Azimuth `θ` is measured clockwise from north. A landmark at `(r, θ)`
//! sits `r sin θ` metres east and `r cos θ` north of the camera; in the
//! panorama it is centred on column `θ W / 2π`.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::tensor::{Scalar, Tensor};

pub const SKY: [u8; 3] = [150, 190, 230];

/// Ground colours; shared by many scenes so they carry no identity.
pub const BASE_PALETTE: [[u8; 3]; 4] = [[96, 112, 72], [120, 104, 80], [104, 104, 100], [88, 120, 96]];

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub pano_h: usize,
    pub pano_w: usize,
    pub aerial_size: usize,
    pub metres_per_pixel: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub footprint_min: f64,
    pub footprint_max: f64,
    /// First panorama row below the sky.
    pub horizon_row: usize,
    /// Painted height in rows is `round(height_scale / r)`.
    pub height_scale: f64,
    /// Landmark colours drawn from the whole RGB cube rather than a hue circle.
    pub rgb_colors: bool,
    /// How many entries of [`BASE_PALETTE`] ground colours are drawn from.
    pub base_colors: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            pano_h: 32,
            pano_w: 128,
            aerial_size: 64,
            metres_per_pixel: 1.0,
            r_min: 6.0,
            r_max: 27.0,
            footprint_min: 2.0,
            footprint_max: 4.0,
            horizon_row: 8,
            height_scale: 120.0,
            rgb_colors: false,
            base_colors: BASE_PALETTE.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub r: f64,
    pub theta: f64,
    pub footprint: f64,
    pub color: [u8; 3],
}

impl Landmark {
    pub fn east(&self) -> f64 {
        self.r * self.theta.sin()
    }

    pub fn north(&self) -> f64 {
        self.r * self.theta.cos()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub seed: u64,
    pub base_color: [u8; 3],
    pub landmarks: Vec<Landmark>,
}

/// Vivid colour from a hue in `[0, 1)`.
fn hue_color(h: f64, value: f64) -> [u8; 3] {
    let h6 = h * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    let (r, g, b) = match h6 as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|c| (c * value * 255.0).round() as u8)
}

/// Uniform over the RGB cube, away from the sky and the ground colour.
fn cube_color(rng: &mut ChaCha8Rng, base: [u8; 3]) -> [u8; 3] {
    let far = |a: [u8; 3], b: [u8; 3]| {
        a.iter()
            .zip(&b)
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum::<f64>()
            > 60.0 * 60.0
    };
    loop {
        let c: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        if far(c, base) && far(c, SKY) {
            return c;
        }
    }
}

/// Rejection-samples `k` pairwise disjoint discs. After 1000 failed draws
/// for one landmark the footprint range is halved, once.
pub fn generate_scene(id: usize, seed: u64, k: usize, cfg: &WorldConfig) -> Result<Scene> {
    if k < 3 {
        return Err(Error::config("landmarks", format!("need at least 3, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_color = BASE_PALETTE[rng.random_range(0..cfg.base_colors.clamp(1, BASE_PALETTE.len()))];
    let half = cfg.aerial_size as f64 * cfg.metres_per_pixel / 2.0;
    let mut landmarks: Vec<Landmark> = Vec::with_capacity(k);
    for n in 0..k {
        let mut placed = None;
        'relax: for scale in [1.0, 0.5] {
            for _ in 0..1000 {
                let footprint = rng.random_range(cfg.footprint_min..=cfg.footprint_max) * scale;
                let r = rng.random_range(cfg.r_min..=cfg.r_max);
                let theta = rng.random_range(0.0..TAU);
                let cand = Landmark {
                    r,
                    theta,
                    footprint,
                    color: [0; 3],
                };
                let inside = cand.east().abs() + footprint < half && cand.north().abs() + footprint < half;
                let clear = landmarks.iter().all(|o| {
                    let d = (o.east() - cand.east()).hypot(o.north() - cand.north());
                    d > o.footprint + footprint + cfg.metres_per_pixel
                });
                if inside && clear && r > footprint {
                    placed = Some(cand);
                    break 'relax;
                }
            }
        }
        let mut lm = placed.ok_or_else(|| {
            Error::Invalid(format!(
                "scene {id}: no room for landmark {n} of {k} after relaxing footprints"
            ))
        })?;
        lm.color = if cfg.rgb_colors {
            cube_color(&mut rng, base_color)
        } else {
            hue_color(rng.random_range(0.0..1.0), rng.random_range(0.55..1.0))
        };
        landmarks.push(lm);
    }
    Ok(Scene {
        id,
        seed,
        base_color,
        landmarks,
    })
}

/// Orthographic top-down view: north up, camera at the image centre.
pub fn render_aerial(scene: &Scene, cfg: &WorldConfig) -> RgbImage {
    let s = cfg.aerial_size;
    let mut img = RgbImage::filled(s, s, scene.base_color);
    for lm in &scene.landmarks {
        for y in 0..s {
            let north = (s as f64 / 2.0 - (y as f64 + 0.5)) * cfg.metres_per_pixel;
            for x in 0..s {
                let east = (x as f64 + 0.5 - s as f64 / 2.0) * cfg.metres_per_pixel;
                if (east - lm.east()).hypot(north - lm.north()) <= lm.footprint {
                    img.set(y, x, lm.color);
                }
            }
        }
    }
    img
}

/// Rows painted below the horizon for a landmark at distance `r`.
pub fn painted_height(r: f64, cfg: &WorldConfig) -> usize {
    ((cfg.height_scale / r).round() as usize).clamp(1, cfg.pano_h - cfg.horizon_row)
}

/// Columns covered by a landmark: those whose azimuth lies within its
/// angular half-width, or the nearest column if none does.
pub fn painted_columns(lm: &Landmark, w: usize) -> Vec<usize> {
    let half = (lm.footprint / lm.r).min(1.0).asin();
    let wrapped = |c: usize| {
        let d = (TAU * c as f64 / w as f64 - lm.theta).rem_euclid(TAU);
        d.min(TAU - d)
    };
    let cols: Vec<usize> = (0..w).filter(|&c| wrapped(c) <= half).collect();
    if cols.is_empty() {
        vec![((lm.theta / TAU * w as f64).round() as usize) % w]
    } else {
        cols
    }
}

/// Cylindrical panorama: sky above the horizon row, ground below, and each
/// landmark as a block hanging from the horizon whose height falls off as
/// `1/r`. Farther landmarks are drawn first.
pub fn render_pano(scene: &Scene, cfg: &WorldConfig) -> RgbImage {
    let (h, w) = (cfg.pano_h, cfg.pano_w);
    let mut img = RgbImage::filled(h, w, scene.base_color);
    for y in 0..cfg.horizon_row {
        for x in 0..w {
            img.set(y, x, SKY);
        }
    }
    let mut order: Vec<&Landmark> = scene.landmarks.iter().collect();
    order.sort_by(|a, b| b.r.total_cmp(&a.r));
    for lm in order {
        let rows = painted_height(lm.r, cfg);
        for c in painted_columns(lm, w) {
            for y in cfg.horizon_row..cfg.horizon_row + rows {
                img.set(y, c, lm.color);
            }
        }
    }
    img
}

/// Rolls `pano` right by `offset` columns (column `c` moves to
/// `c + offset mod W`).
pub fn roll(pano: &RgbImage, offset: usize) -> RgbImage {
    let w = pano.width;
    let mut out = pano.clone();
    for y in 0..pano.height {
        for x in 0..w {
            out.set(y, (x + offset) % w, pano.get(y, x));
        }
    }
    out
}

/// Rotates a square image clockwise by `quarters` quarter turns. Paired with
/// a panorama roll of the same angle this is the same scene, so under a
/// uniformly random roll it leaves the pair distribution unchanged.
pub fn rotate_quarter(img: &RgbImage, quarters: usize) -> RgbImage {
    let n = img.width;
    debug_assert_eq!(img.height, n, "rotate_quarter needs a square image");
    let mut out = img.clone();
    for y in 0..n {
        for x in 0..n {
            let (ty, tx) = match quarters % 4 {
                0 => (y, x),
                1 => (x, n - 1 - y),
                2 => (n - 1 - y, n - 1 - x),
                _ => (n - 1 - x, y),
            };
            out.set(ty, tx, img.get(y, x));
        }
    }
    out
}

/// Width kept by a `fov`-degree crop of a `w`-column panorama.
pub fn crop_width(w: usize, fov: f64) -> usize {
    ((w as f64 * fov / 360.0).round() as usize).max(1)
}

/// Random roll by `offset ∈ [0, W)`, then the first `round(W·fov/360)`
/// columns. Returns the crop and the offset.
pub fn augment<R: Rng + ?Sized>(pano: &RgbImage, fov: f64, rng: &mut R) -> Result<(RgbImage, usize)> {
    let offset = rng.random_range(0..pano.width);
    Ok((augment_with(pano, fov, offset)?, offset))
}

pub fn augment_with(pano: &RgbImage, fov: f64, offset: usize) -> Result<RgbImage> {
    if !(fov > 0.0 && fov <= 360.0) {
        return Err(Error::config("fov", format!("must lie in (0, 360], got {fov}")));
    }
    let rolled = roll(pano, offset);
    let cw = crop_width(pano.width, fov);
    if cw == pano.width {
        return Ok(rolled);
    }
    let mut out = RgbImage::filled(pano.height, cw, [0; 3]);
    for y in 0..pano.height {
        for x in 0..cw {
            out.set(y, x, rolled.get(y, x));
        }
    }
    Ok(out)
}

/// Pixels scaled to `[-1, 1]`, `(H, W, 3)`.
pub fn to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let data = img.pixels.iter().map(|&v| T::of(v as f64 / 127.5 - 1.0)).collect();
    Tensor::from_vec(&[img.height, img.width, 3], data).expect("image dims are positive")
}

/// One rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPair {
    pub scene: Scene,
    pub pano: RgbImage,
    pub aerial: RgbImage,
}

impl RenderedPair {
    pub fn render(scene: Scene, cfg: &WorldConfig) -> Self {
        RenderedPair {
            pano: render_pano(&scene, cfg),
            aerial: render_aerial(&scene, cfg),
            scene,
        }
    }

    /// key=value sidecar. `roll` and `fov` describe the stored panorama,
    /// which is never augmented on disk.
    pub fn metadata(&self) -> String {
        let s = &self.scene;
        let mut out = format!(
            "id={}\nseed={}\nK={}\nbase_color={} {} {}\nroll=0\nfov=360\n",
            s.id,
            s.seed,
            s.landmarks.len(),
            s.base_color[0],
            s.base_color[1],
            s.base_color[2]
        );
        for (i, lm) in s.landmarks.iter().enumerate() {
            let _ = writeln!(
                out,
                "landmark.{i}={:.6} {:.6} {:.6} {} {} {}",
                lm.r, lm.theta, lm.footprint, lm.color[0], lm.color[1], lm.color[2]
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<RenderedPair>,
    pub val: Vec<RenderedPair>,
    pub test: Vec<RenderedPair>,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub scenes: usize,
    /// Train, validation and test fractions; must sum to 1.
    pub fractions: [f64; 3],
    pub seed: u64,
    pub landmarks: usize,
}

impl DatasetSpec {
    /// Scene counts per split: rounded train and validation, remainder test.
    pub fn counts(&self) -> Result<[usize; 3]> {
        let [a, b, c] = self.fractions;
        if self.fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "split",
                format!("fractions {a}/{b}/{c} must be in [0, 1] and sum to 1"),
            ));
        }
        let train = (self.scenes as f64 * a).round() as usize;
        let val = ((self.scenes as f64 * b).round() as usize).min(self.scenes - train);
        Ok([train, val, self.scenes - train - val])
    }
}

/// Per-scene seed, decorrelated from neighbouring ids.
pub fn scene_seed(master: u64, id: usize) -> u64 {
    let mut z = master ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates every scene and assigns shuffled ids to splits.
pub fn make_dataset(spec: &DatasetSpec, cfg: &WorldConfig) -> Result<Dataset> {
    let counts = spec.counts()?;
    let mut ids: Vec<usize> = (0..spec.scenes).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut splits: [Vec<RenderedPair>; 3] = Default::default();
    let mut start = 0;
    for (split, &n) in splits.iter_mut().zip(&counts) {
        let mut chunk = ids[start..start + n].to_vec();
        chunk.sort_unstable();
        for id in chunk {
            let scene = generate_scene(id, scene_seed(spec.seed, id), spec.landmarks, cfg)?;
            split.push(RenderedPair::render(scene, cfg));
        }
        start += n;
    }
    let [train, val, test] = splits;
    Ok(Dataset { train, val, test })
}

fn stem(dir: &Path, split: &str, id: usize) -> PathBuf {
    dir.join(split).join(format!("scene_{id:05}"))
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[RenderedPair]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Writes `<split>/scene_NNNNN.{pano.ppm,aerial.ppm,txt}` and a manifest.
    pub fn save(&self, dir: &Path) -> Result<String> {
        let mut manifest = String::new();
        for name in SPLITS {
            let pairs = self.split(name).expect("known split");
            let sub = dir.join(name);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let _ = writeln!(manifest, "{name}={}", pairs.len());
            for p in pairs {
                let base = stem(dir, name, p.scene.id);
                p.pano.save(&base.with_extension("pano.ppm"))?;
                p.aerial.save(&base.with_extension("aerial.ppm"))?;
                let meta = base.with_extension("txt");
                fs::write(&meta, p.metadata()).map_err(|e| Error::io(&meta, e))?;
            }
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, &manifest).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Reads a directory written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = dir.join("manifest.txt");
        if !manifest.is_file() {
            return Err(Error::io(
                &manifest,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset manifest not found"),
            ));
        }
        let mut out: [Vec<RenderedPair>; 3] = Default::default();
        for (slot, name) in out.iter_mut().zip(SPLITS) {
            let sub = dir.join(name);
            let mut metas: Vec<PathBuf> = fs::read_dir(&sub)
                .map_err(|e| Error::io(&sub, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                .collect();
            metas.sort();
            for meta in metas {
                let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
                let scene = parse_metadata(&text)?;
                let base = meta.with_extension("");
                slot.push(RenderedPair {
                    pano: RgbImage::load(&base.with_extension("pano.ppm"))?,
                    aerial: RgbImage::load(&base.with_extension("aerial.ppm"))?,
                    scene,
                });
            }
        }
        let [train, val, test] = out;
        Ok(Dataset { train, val, test })
    }
}

fn parse_metadata(text: &str) -> Result<Scene> {
    let bad = |what: &str| Error::format("scene metadata", what.to_string());
    let mut id = None;
    let mut seed = None;
    let mut base = None;
    let mut landmarks = Vec::new();
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        let nums = || -> Vec<f64> { v.split_whitespace().filter_map(|t| t.parse().ok()).collect() };
        match k {
            "id" => id = v.parse().ok(),
            "seed" => seed = v.parse().ok(),
            "base_color" => base = <[f64; 3]>::try_from(nums()).ok().map(|c| c.map(|x| x as u8)),
            k if k.starts_with("landmark.") => {
                let n = nums();
                if n.len() != 6 {
                    return Err(bad(line));
                }
                landmarks.push(Landmark {
                    r: n[0],
                    theta: n[1],
                    footprint: n[2],
                    color: [n[3] as u8, n[4] as u8, n[5] as u8],
                });
            }
            _ => {}
        }
    }
    Ok(Scene {
        id: id.ok_or_else(|| bad("missing id"))?,
        seed: seed.ok_or_else(|| bad("missing seed"))?,
        base_color: base.ok_or_else(|| bad("missing base_color"))?,
        landmarks,
    })
}

/// Column of the panorama that looks along azimuth `theta`.
pub fn azimuth_column(theta: f64, w: usize) -> f64 {
    theta.rem_euclid(TAU) / TAU * w as f64
}

/// Azimuth of an aerial-frame point, clockwise from north.
pub fn aerial_azimuth(east: f64, north: f64) -> f64 {
    east.atan2(north).rem_euclid(2.0 * PI)
}
