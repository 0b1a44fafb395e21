//! Multi-scale sliding-window image entropy, percentile normalization,
//! cross-scale softmax weights, and per-primitive entropy sampling.

use serde::Serialize;

use crate::error::{GefError, Result};
use crate::primitive::{project_covariance_indexed, Camera, Scene};

pub const DEFAULT_LEVELS: usize = 3;
pub const DEFAULT_TEMPERATURE: f64 = 6.0;
pub const DEFAULT_CONCENTRATION_THRESHOLD: f64 = 0.6;
pub const MAX_LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GefError::param("image", "dimensions must be positive"));
        }
        if pixels.len() != width * height {
            return Err(GefError::Dimension(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let pixels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Rounds and clamps a float raster in [0, 1] to 8 bits.
    pub fn from_unit_raster(r: &Raster) -> Self {
        Self {
            width: r.width,
            height: r.height,
            pixels: r.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }
}

/// Single-channel row-major float raster.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(GefError::Dimension(format!(
                "{}x{} raster needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mean over the columns `x0..x1`.
    pub fn region_mean(&self, x0: usize, x1: usize) -> f64 {
        let mut acc = 0.0;
        for y in 0..self.height {
            acc += self.data[y * self.width + x0..y * self.width + x1].iter().sum::<f64>();
        }
        acc / ((x1 - x0) * self.height) as f64
    }
}

/// Sliding-window Shannon entropy (bits) of the 256-bin intensity histogram,
/// with replicate padding at the borders.
pub fn local_entropy_map(image: &GrayImage, window: usize) -> Result<Raster> {
    if window < 3 || window % 2 == 0 {
        return Err(GefError::param("window", format!("{window} must be odd and at least 3")));
    }
    if window > image.width.min(image.height) {
        return Err(GefError::param(
            "window",
            format!("{window} exceeds the image size {}x{}", image.width, image.height),
        ));
    }
    let (w, h) = (image.width as isize, image.height as isize);
    let r = (window / 2) as isize;
    let n = window * window;
    // c * log2(c) for every count a window can reach
    let clog: Vec<f64> = (0..=n).map(|c| if c > 1 { c as f64 * (c as f64).log2() } else { 0.0 }).collect();
    let log_n = (n as f64).log2();
    let px = |x: isize, y: isize| image.pixels[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize] as usize;

    let mut out = Raster::zeros(image.width, image.height);
    let mut hist = [0usize; 256];
    for y in 0..h {
        hist.fill(0);
        let mut sum = 0.0;
        let bump = |hist: &mut [usize; 256], sum: &mut f64, v: usize, up: bool| {
            let c = hist[v];
            let c2 = if up { c + 1 } else { c - 1 };
            *sum += clog[c2] - clog[c];
            hist[v] = c2;
        };
        for dy in -r..=r {
            for dx in -r..=r {
                bump(&mut hist, &mut sum, px(dx, y + dy), true);
            }
        }
        for x in 0..w {
            if x > 0 {
                for dy in -r..=r {
                    bump(&mut hist, &mut sum, px(x - r - 1, y + dy), false);
                    bump(&mut hist, &mut sum, px(x + r, y + dy), true);
                }
            }
            let e = log_n - sum / n as f64;
            // incremental updates leave roundoff where the window is uniform
            out.data[(y * w + x) as usize] = if e < 1e-12 { 0.0 } else { e };
        }
    }
    Ok(out)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Clamps to the [1st, 99th] percentile range and maps it onto [0, 1].
/// A constant raster maps to 0.
pub fn percentile_normalize(raw: &Raster) -> Raster {
    let mut sorted = raw.data.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, 1.0);
    let hi = percentile(&sorted, 99.0);
    let span = hi - lo;
    let data = if span < 1e-12 {
        vec![0.0; raw.data.len()]
    } else {
        raw.data.iter().map(|v| (v.clamp(lo, hi) - lo) / span).collect()
    };
    Raster {
        width: raw.width,
        height: raw.height,
        data,
    }
}

pub fn level_window(level: usize) -> usize {
    (1 << level) + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub scale: usize,
    pub window: usize,
    pub raw: Raster,
    pub normalized: Raster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyPyramid {
    pub levels: Vec<PyramidLevel>,
    pub weights: Vec<Raster>,
    pub temperature: f64,
}

impl EntropyPyramid {
    pub fn width(&self) -> usize {
        self.levels[0].raw.width
    }

    pub fn height(&self) -> usize {
        self.levels[0].raw.height
    }
}

pub fn build_pyramid(image: &GrayImage, n_levels: usize, temperature: f64) -> Result<EntropyPyramid> {
    if n_levels == 0 || n_levels > MAX_LEVELS {
        return Err(GefError::param("levels", format!("{n_levels} is outside 1..={MAX_LEVELS}")));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(GefError::param("temperature", "must be positive and finite"));
    }
    let levels = (1..=n_levels)
        .map(|l| {
            let raw = local_entropy_map(image, level_window(l))?;
            let normalized = percentile_normalize(&raw);
            Ok(PyramidLevel {
                scale: l,
                window: level_window(l),
                raw,
                normalized,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = softmax_levels(&levels, temperature);
    Ok(EntropyPyramid {
        levels,
        weights,
        temperature,
    })
}

/// Per-pixel softmax across levels of `temperature * normalized entropy`.
pub fn softmax_levels(levels: &[PyramidLevel], temperature: f64) -> Vec<Raster> {
    let (w, h) = (levels[0].normalized.width, levels[0].normalized.height);
    let mut weights = vec![Raster::zeros(w, h); levels.len()];
    let mut logits = vec![0.0; levels.len()];
    for i in 0..w * h {
        for (z, lvl) in logits.iter_mut().zip(levels) {
            *z = temperature * lvl.normalized.data[i];
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|z| (z - m).exp()).sum();
        for (wl, z) in weights.iter_mut().zip(&logits) {
            wl.data[i] = (z - m).exp() / total;
        }
    }
    weights
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concentration {
    pub map: Raster,
    pub threshold: f64,
    pub fraction_above: f64,
}

pub fn concentration_stats(pyramid: &EntropyPyramid, threshold: f64) -> Concentration {
    let (w, h) = (pyramid.width(), pyramid.height());
    let mut map = Raster::zeros(w, h);
    for i in 0..w * h {
        map.data[i] = pyramid.weights.iter().map(|wl| wl.data[i]).fold(0.0, f64::max);
    }
    let above = map.data.iter().filter(|&&c| c > threshold).count();
    Concentration {
        fraction_above: above as f64 / map.data.len() as f64,
        map,
        threshold,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrimitiveEntropies {
    pub values: Vec<f64>,
    /// Set where the primitive is behind the camera or its footprint carries
    /// no mass; such entries hold the map's global mean.
    pub fallback: Vec<bool>,
}

/// Per-primitive footprint mass and weighted sum over the 3-sigma ellipse of
/// the projected covariance. `None` for primitives behind the camera.
pub(crate) fn footprint_sums(
    scene: &Scene,
    camera: &Camera,
    map: &Raster,
) -> Vec<Option<(f64, f64)>> {
    scene
        .primitives
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let proj = project_covariance_indexed(p, camera, k).ok()?;
            let inv = proj.covariance.try_inverse()?;
            let c = proj.center;
            let rx = 3.0 * proj.covariance[(0, 0)].sqrt();
            let ry = 3.0 * proj.covariance[(1, 1)].sqrt();
            let x0 = (c.x - rx - 0.5).ceil().max(0.0);
            let x1 = (c.x + rx - 0.5).floor().min(map.width as f64 - 1.0);
            let y0 = (c.y - ry - 0.5).ceil().max(0.0);
            let y1 = (c.y + ry - 0.5).floor().min(map.height as f64 - 1.0);
            let alpha = p.opacity();
            let (mut mass, mut acc) = (0.0, 0.0);
            if x0 <= x1 && y0 <= y1 {
                for y in y0 as usize..=y1 as usize {
                    for x in x0 as usize..=x1 as usize {
                        let dx = x as f64 + 0.5 - c.x;
                        let dy = y as f64 + 0.5 - c.y;
                        let m2 = inv[(0, 0)] * dx * dx + 2.0 * inv[(0, 1)] * dx * dy + inv[(1, 1)] * dy * dy;
                        if m2 <= 9.0 {
                            let a = alpha * (-0.5 * m2).exp();
                            mass += a;
                            acc += a * map.get(x, y);
                        }
                    }
                }
            }
            Some((mass, acc))
        })
        .collect()
}

/// Footprint-weighted mean of `map` for each primitive.
pub fn primitive_image_entropy(scene: &Scene, camera: &Camera, map: &Raster) -> Result<PrimitiveEntropies> {
    if map.width != camera.width() || map.height != camera.height() {
        return Err(GefError::Dimension(format!(
            "entropy map is {}x{} but the camera renders {}x{}",
            map.width,
            map.height,
            camera.width(),
            camera.height()
        )));
    }
    let global = map.mean();
    let (values, fallback) = footprint_sums(scene, camera, map)
        .into_iter()
        .map(|s| match s {
            Some((mass, acc)) if mass >= 1e-9 => (acc / mass, false),
            _ => (global, true),
        })
        .unzip();
    Ok(PrimitiveEntropies { values, fallback })
}

/// Averages per-view entropies, ignoring views where the primitive fell back
/// to the global mean unless every view did.
pub fn combine_views(views: &[PrimitiveEntropies]) -> PrimitiveEntropies {
    let n = views.first().map_or(0, |v| v.values.len());
    let mut values = Vec::with_capacity(n);
    let mut fallback = Vec::with_capacity(n);
    for k in 0..n {
        let hits: Vec<f64> = views.iter().filter(|v| !v.fallback[k]).map(|v| v.values[k]).collect();
        if hits.is_empty() {
            values.push(views.iter().map(|v| v.values[k]).sum::<f64>() / views.len() as f64);
            fallback.push(true);
        } else {
            values.push(hits.iter().sum::<f64>() / hits.len() as f64);
            fallback.push(false);
        }
    }
    PrimitiveEntropies { values, fallback }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrimitiveImageWeights {
    pub entropies: Vec<f64>,
    pub weights: Vec<f64>,
    pub e_min: f64,
    pub e_max: f64,
}

/// Min-max weights `1 - (E - E_min) / (E_max - E_min)`; all ones when the
/// entropies carry no spread.
pub fn entropy_guided_weights(entropies: &[f64]) -> Result<PrimitiveImageWeights> {
    if entropies.is_empty() {
        return Err(GefError::param("entropies", "at least one primitive is required"));
    }
    let e_min = entropies.iter().copied().fold(f64::INFINITY, f64::min);
    let e_max = entropies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = e_max - e_min;
    let weights = if span < 1e-12 {
        vec![1.0; entropies.len()]
    } else {
        entropies.iter().map(|e| (1.0 - (e - e_min) / span).clamp(0.0, 1.0)).collect()
    };
    Ok(PrimitiveImageWeights {
        entropies: entropies.to_vec(),
        weights,
        e_min,
        e_max,
    })
}

/// Raw-entropy range of one pyramid level, in bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelStats {
    pub level: usize,
    pub window: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

pub fn level_stats(pyramid: &EntropyPyramid) -> Vec<LevelStats> {
    pyramid
        .levels
        .iter()
        .map(|l| LevelStats {
            level: l.scale,
            window: l.window,
            min: l.raw.min(),
            mean: l.raw.mean(),
            max: l.raw.max(),
        })
        .collect()
}
