//! Loss terms with analytic gradients.
//!
//! Image-space terms (photometric, depth, normal) are evaluated from pixel
//! traces of the supervising views. Entropy terms (sparsity, align) read
//! per-primitive thresholds and image weights from an [`EntropyContext`],
//! which the optimizer refreshes on its delayed schedule and which is held
//! constant for differentiation.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{GefError, Result};
use crate::image_entropy::{
    build_pyramid, combine_views, entropy_guided_weights, primitive_image_entropy, EntropyPyramid, GrayImage, Raster,
};
use crate::neighborhood::{neighborhood_entropies, neighborhood_entropy_grad, snri_all, NeighborGraph, ThresholdParams};
use crate::primitive::Camera;
use crate::primitive::Scene;
use crate::ray_oracle::Ray;
use crate::render::{
    blend_backward, blend_scalar, render, render_backward, trace, Fragment, GradAccum, Gradient, PixelGrads, Prepared,
    RgbImage, Trace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Photometric,
    Sparsity,
    Depth,
    Normal,
    Align,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Photometric, Term::Sparsity, Term::Depth, Term::Normal, Term::Align];

    pub fn name(self) -> &'static str {
        match self {
            Term::Photometric => "photometric",
            Term::Sparsity => "sparsity",
            Term::Depth => "depth",
            Term::Normal => "normal",
            Term::Align => "align",
        }
    }

    /// Terms derived from neighborhood entropies; these are cached between
    /// refreshes.
    pub fn is_entropy(self) -> bool {
        matches!(self, Term::Sparsity | Term::Align)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Term {
    type Err = GefError;

    fn from_str(s: &str) -> Result<Self> {
        Term::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| GefError::param("term", format!("unknown loss term `{s}`")))
    }
}

/// Set of enabled terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TermSet(u8);

impl TermSet {
    pub const NONE: TermSet = TermSet(0);

    pub fn all() -> Self {
        Term::ALL.into_iter().collect()
    }

    pub fn only(t: Term) -> Self {
        TermSet(1 << t as u8)
    }

    pub fn contains(self, t: Term) -> bool {
        self.0 & (1 << t as u8) != 0
    }

    pub fn with(self, t: Term) -> Self {
        TermSet(self.0 | 1 << t as u8)
    }

    pub fn without(self, t: Term) -> Self {
        TermSet(self.0 & !(1 << t as u8))
    }

    pub fn intersect(self, other: TermSet) -> Self {
        TermSet(self.0 & other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Term> {
        Term::ALL.into_iter().filter(move |&t| self.contains(t))
    }
}

impl FromIterator<Term> for TermSet {
    fn from_iter<I: IntoIterator<Item = Term>>(iter: I) -> Self {
        iter.into_iter().fold(TermSet::NONE, TermSet::with)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_sparsity: f64,
    pub lambda_align: f64,
    /// Per-level align weights; empty means `1 / L` for every level.
    pub lambda_levels: Vec<f64>,
    pub lambda_depth: f64,
    pub lambda_normal: f64,
    pub ssim_mix: f64,
    pub enable_photometric: bool,
    pub enable_sparsity: bool,
    pub enable_depth: bool,
    pub enable_normal: bool,
    pub enable_align: bool,
    /// Ray hits with density at or below this are culled from traces.
    pub min_density: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_sparsity: 0.1,
            lambda_align: 0.05,
            lambda_levels: Vec::new(),
            lambda_depth: 1.0,
            lambda_normal: 1.0,
            ssim_mix: 0.2,
            enable_photometric: true,
            enable_sparsity: true,
            enable_depth: true,
            enable_normal: true,
            enable_align: true,
            min_density: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, n_levels: usize) -> Result<()> {
        let nonneg = [
            ("lambda_sparsity", self.lambda_sparsity),
            ("lambda_align", self.lambda_align),
            ("lambda_depth", self.lambda_depth),
            ("lambda_normal", self.lambda_normal),
            ("min_density", self.min_density),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(GefError::Config {
                    field: format!("losses.{name}"),
                    message: format!("{v} must be a finite nonnegative number"),
                });
            }
        }
        if !(0.0..=1.0).contains(&self.ssim_mix) {
            return Err(GefError::Config {
                field: "losses.ssim_mix".into(),
                message: format!("{} is outside [0, 1]", self.ssim_mix),
            });
        }
        if !self.lambda_levels.is_empty() && self.lambda_levels.len() != n_levels {
            return Err(GefError::Config {
                field: "losses.lambda_levels".into(),
                message: format!("{} weights for {} pyramid levels", self.lambda_levels.len(), n_levels),
            });
        }
        if self.lambda_levels.iter().any(|v| !(*v >= 0.0)) {
            return Err(GefError::Config {
                field: "losses.lambda_levels".into(),
                message: "weights must be nonnegative".into(),
            });
        }
        Ok(())
    }

    pub fn enabled(&self) -> TermSet {
        [
            (Term::Photometric, self.enable_photometric),
            (Term::Sparsity, self.enable_sparsity),
            (Term::Depth, self.enable_depth),
            (Term::Normal, self.enable_normal),
            (Term::Align, self.enable_align),
        ]
        .into_iter()
        .filter(|x| x.1)
        .map(|x| x.0)
        .collect()
    }

    pub fn weight(&self, t: Term) -> f64 {
        match t {
            Term::Photometric => 1.0,
            Term::Sparsity => self.lambda_sparsity,
            Term::Depth => self.lambda_depth,
            Term::Normal => self.lambda_normal,
            Term::Align => self.lambda_align,
        }
    }

    pub fn level_weights(&self, n_levels: usize) -> Vec<f64> {
        if self.lambda_levels.is_empty() {
            vec![1.0 / n_levels as f64; n_levels]
        } else {
            self.lambda_levels.clone()
        }
    }
}

/// Value and gradient of one unweighted term.
#[derive(Debug, Clone, PartialEq)]
pub struct TermValue {
    pub value: f64,
    pub grad: Gradient,
}

impl TermValue {
    pub fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: Gradient::zeros(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub photometric: f64,
    pub sparsity: f64,
    pub depth: f64,
    pub normal: f64,
    pub align: f64,
    pub total: f64,
    #[serde(skip)]
    pub gradient: Gradient,
    /// Unweighted gradient of every evaluated term.
    #[serde(skip)]
    pub term_gradients: Vec<(Term, Gradient)>,
}

impl LossBreakdown {
    pub fn value(&self, t: Term) -> f64 {
        match t {
            Term::Photometric => self.photometric,
            Term::Sparsity => self.sparsity,
            Term::Depth => self.depth,
            Term::Normal => self.normal,
            Term::Align => self.align,
        }
    }

    pub fn term_gradient(&self, t: Term) -> Option<&Gradient> {
        self.term_gradients.iter().find(|(u, _)| *u == t).map(|(_, g)| g)
    }
}

/// Composes evaluated terms into the weighted total. Terms missing from
/// `terms` or disabled in `config` contribute exactly zero.
pub fn total_loss(terms: &[(Term, TermValue)], config: &LossConfig, n_primitives: usize) -> LossBreakdown {
    let enabled = config.enabled();
    let mut out = LossBreakdown {
        photometric: 0.0,
        sparsity: 0.0,
        depth: 0.0,
        normal: 0.0,
        align: 0.0,
        total: 0.0,
        gradient: Gradient::zeros(n_primitives),
        term_gradients: Vec::new(),
    };
    for (t, v) in terms {
        if !enabled.contains(*t) {
            continue;
        }
        let slot = match t {
            Term::Photometric => &mut out.photometric,
            Term::Sparsity => &mut out.sparsity,
            Term::Depth => &mut out.depth,
            Term::Normal => &mut out.normal,
            Term::Align => &mut out.align,
        };
        *slot = v.value;
        out.gradient.add_scaled(&v.grad, config.weight(*t));
        out.term_gradients.push((*t, v.grad.clone()));
    }
    out.total = out.photometric
        + config.lambda_sparsity * out.sparsity
        + config.lambda_align * out.align
        + config.lambda_depth * out.depth
        + config.lambda_normal * out.normal;
    out
}

/// One supervising camera with its target image and entropy pyramid.
#[derive(Debug, Clone)]
pub struct View {
    pub camera: Camera,
    pub target: RgbImage,
    pub pyramid: EntropyPyramid,
}

impl View {
    pub fn new(camera: Camera, target: RgbImage, levels: usize, temperature: f64) -> Result<Self> {
        if target.width() != camera.width() || target.height() != camera.height() {
            return Err(GefError::Dimension(format!(
                "target is {}x{} but the camera renders {}x{}",
                target.width(),
                target.height(),
                camera.width(),
                camera.height()
            )));
        }
        let gray = GrayImage::from_unit_raster(&target.luma());
        let pyramid = build_pyramid(&gray, levels, temperature)?;
        Ok(Self {
            camera,
            target,
            pyramid,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.pyramid.levels.len()
    }
}

/// Entropy-derived constants held fixed between refreshes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyContext {
    pub snri: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Footprint-averaged finest-level image entropy per primitive.
    pub image_entropy: Vec<f64>,
    pub image_weights: Vec<f64>,
}

impl EntropyContext {
    pub fn compute(
        scene: &Scene,
        graph: &NeighborGraph,
        views: &[View],
        params: &ThresholdParams,
        use_image_weights: bool,
    ) -> Result<Self> {
        graph.check_scene(scene)?;
        let snri = snri_all(scene, graph);
        let thresholds = snri.iter().map(|&s| params.threshold(scene.sigma_min, s)).collect();
        let (image_entropy, image_weights) = if use_image_weights && !views.is_empty() {
            let per_view = views
                .iter()
                .map(|v| primitive_image_entropy(scene, &v.camera, &v.pyramid.levels[0].raw))
                .collect::<Result<Vec<_>>>()?;
            let e = combine_views(&per_view).values;
            let w = entropy_guided_weights(&e)?.weights;
            (e, w)
        } else {
            (vec![0.0; scene.len()], vec![1.0; scene.len()])
        };
        Ok(Self {
            snri,
            thresholds,
            image_entropy,
            image_weights,
        })
    }

    /// Fraction of neighborhoods with entropy at or below their threshold.
    pub fn satisfied_fraction(&self, entropies: &[f64]) -> f64 {
        let ok = entropies.iter().zip(&self.thresholds).filter(|(h, e)| h <= e).count();
        ok as f64 / entropies.len().max(1) as f64
    }
}

/// Mean over primitives of `w_k * max(0, H_k - eta_k)^2`.
pub fn sparsity_loss(
    scene: &Scene,
    graph: &NeighborGraph,
    thresholds: &[f64],
    img_weights: &[f64],
) -> Result<TermValue> {
    graph.check_scene(scene)?;
    let n = scene.len();
    if thresholds.len() != n || img_weights.len() != n {
        return Err(GefError::Dimension(format!(
            "{} thresholds and {} image weights for {n} primitives",
            thresholds.len(),
            img_weights.len()
        )));
    }
    let opacities = scene.opacities();
    let prep_alpha = &opacities;
    let mut value = 0.0;
    let mut acc = GradAccum::new(n);
    for k in 0..n {
        let (h, grad) = neighborhood_entropy_grad(&opacities, graph, k)?;
        let excess = h - thresholds[k];
        if excess <= 0.0 {
            continue;
        }
        value += img_weights[k] * excess * excess;
        let scale = 2.0 * img_weights[k] * excess / n as f64;
        for (j, g) in graph.members(k).zip(grad) {
            acc.opacity[j] += scale * g;
        }
    }
    let mut grad = Gradient::zeros(n);
    for j in 0..n {
        let a = prep_alpha[j];
        grad.data[j * crate::render::STRIDE + crate::render::LOGIT] = acc.opacity[j] * a * (1.0 - a);
    }
    Ok(TermValue {
        value: value / n as f64,
        grad,
    })
}

/// Ordered-pair depth distortion `sum_{i,j} w_i w_j (d_i - d_j)^2` of one ray
/// and its partials `(dL/domega_i, dL/dd_i)`. Rays with fewer than two hits
/// contribute zero.
pub fn depth_distortion(hits: &[(f64, f64)]) -> (f64, Vec<(f64, f64)>) {
    if hits.len() < 2 {
        return (0.0, vec![(0.0, 0.0); hits.len()]);
    }
    let reference = hits[0].1;
    let (mut w, mut a, mut b) = (0.0, 0.0, 0.0);
    for &(om, d) in hits {
        let s = d - reference;
        w += om;
        a += om * s;
        b += om * s * s;
    }
    let value = (2.0 * (w * b - a * a)).max(0.0);
    let grads = hits
        .iter()
        .map(|&(om, d)| {
            let s = d - reference;
            (2.0 * (b + w * s * s - 2.0 * a * s), 4.0 * om * (w * s - a))
        })
        .collect();
    (value, grads)
}

fn ray_fragments(prep: &Prepared, ray: &Ray, min_density: f64) -> Vec<Fragment> {
    let q_max = if min_density > 0.0 { -2.0 * min_density.ln() } else { f64::INFINITY };
    let mut frags: Vec<Fragment> = (0..prep.len())
        .filter_map(|i| {
            let (t, q) = prep.hit(i, &ray.origin, &ray.direction);
            let g = (-0.5 * q).exp();
            (t > crate::primitive::NEAR_PLANE && q < q_max && g > min_density).then(|| Fragment {
                prim: i as u32,
                depth: t,
                omega: prep.alpha[i] * g,
                trans: 1.0,
            })
        })
        .collect();
    frags.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.prim.cmp(&b.prim)));
    frags
}

fn depth_backward(
    prep: &Prepared,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    frags: &[Fragment],
    scale: f64,
    acc: &mut GradAccum,
) -> f64 {
    let hits: Vec<(f64, f64)> = frags.iter().map(|f| (f.omega, f.depth)).collect();
    let (v, grads) = depth_distortion(&hits);
    if v > 0.0 {
        for (f, (gw, gd)) in frags.iter().zip(grads) {
            prep.hit_backward(f.prim as usize, origin, dir, f.omega, scale * gw, scale * gd, acc);
        }
    }
    v
}

/// Mean depth distortion over `rays`.
pub fn depth_loss(scene: &Scene, rays: &[Ray], min_density: f64) -> TermValue {
    let prep = Prepared::new(scene);
    let mut acc = GradAccum::new(scene.len());
    let scale = 1.0 / rays.len().max(1) as f64;
    let mut value = 0.0;
    for ray in rays {
        let frags = ray_fragments(&prep, ray, min_density);
        value += depth_backward(&prep, &ray.origin, &ray.direction, &frags, scale, &mut acc);
    }
    TermValue {
        value: value * scale,
        grad: acc.finish(scene, &prep),
    }
}

/// Weighted misalignment `omega * (1 - n . n_ref)`.
pub fn normal_term(n: &Vector3<f64>, n_ref: &Vector3<f64>, omega: f64) -> f64 {
    omega * (1.0 - n.dot(n_ref))
}

/// Per-pixel surface normals from central differences of the back-projected
/// depth map, oriented toward the camera. `None` where a neighbor is
/// uncovered or the cross product degenerates.
pub fn depth_normals(camera: &Camera, depth: &Raster, alpha: &Raster) -> Vec<Option<Vector3<f64>>> {
    let (w, h) = (depth.width, depth.height);
    let o = camera.position();
    let point = |x: usize, y: usize| -> Option<Vector3<f64>> {
        let p = y * w + x;
        (alpha.data[p] > 1e-6).then(|| o + camera.pixel_direction(x, y) * depth.data[p])
    };
    let mut out = vec![None; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let (Some(l), Some(r), Some(u), Some(d)) = (point(x - 1, y), point(x + 1, y), point(x, y - 1), point(x, y + 1))
            else {
                continue;
            };
            let n = (r - l).cross(&(d - u));
            let len = n.norm();
            if !(len > 1e-12) {
                continue;
            }
            let n = n / len;
            let dir = camera.pixel_direction(x, y);
            out[y * w + x] = Some(if n.dot(&dir) > 0.0 { -n } else { n });
        }
    }
    out
}

fn normal_backward(
    prep: &Prepared,
    trace: &Trace,
    refs: &[Option<Vector3<f64>>],
    scale: f64,
    acc: &mut GradAccum,
) -> f64 {
    let mut value = 0.0;
    let mut d_omega = Vec::new();
    for p in 0..trace.n_pixels() {
        let Some(nref) = refs[p] else { continue };
        let frags = trace.pixel(p);
        if frags.is_empty() {
            continue;
        }
        let dir = &trace.dirs[p];
        let oriented = |i: usize| {
            let n = prep.normals[i].direction;
            if n.dot(dir) > 0.0 {
                (-n, -1.0)
            } else {
                (n, 1.0)
            }
        };
        for f in frags {
            value += normal_term(&oriented(f.prim as usize).0, &nref, f.weight());
        }
        blend_backward(frags, |f| scale * (1.0 - oriented(f.prim as usize).0.dot(&nref)), &mut d_omega);
        for (f, &dw) in frags.iter().zip(&d_omega) {
            let i = f.prim as usize;
            let sign = oriented(i).1;
            acc.normal[i] -= nref * (scale * f.weight() * sign);
            prep.hit_backward(i, &trace.origin, dir, f.omega, dw, 0.0, acc);
        }
    }
    value
}

/// Mean over pixels of the blended normal misalignment against the normals
/// of `depth_map`, which is treated as a constant.
pub fn normal_loss(scene: &Scene, camera: &Camera, depth_map: &Raster, alpha: &Raster, min_density: f64) -> TermValue {
    let prep = Prepared::new(scene);
    let tr = trace(&prep, camera, min_density);
    let refs = depth_normals(camera, depth_map, alpha);
    let scale = 1.0 / tr.n_pixels() as f64;
    let mut acc = GradAccum::new(scene.len());
    let v = normal_backward(&prep, &tr, &refs, scale, &mut acc);
    TermValue {
        value: v * scale,
        grad: acc.finish(scene, &prep),
    }
}

/// Mean of `v` over a `k x k` window with replicate padding.
pub fn box_smooth(r: &Raster, k: usize) -> Raster {
    let (w, h) = (r.width as isize, r.height as isize);
    let rad = (k / 2) as isize;
    let norm = 1.0 / (k * k) as f64;
    let mut out = Raster::zeros(r.width, r.height);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -rad..=rad {
                let yy = (y + dy).clamp(0, h - 1);
                for dx in -rad..=rad {
                    s += r.data[(yy * w + (x + dx).clamp(0, w - 1)) as usize];
                }
            }
            out.data[(y * w + x) as usize] = s * norm;
        }
    }
    out
}

/// Adjoint of [`box_smooth`].
pub fn box_smooth_transpose(g: &Raster, k: usize) -> Raster {
    let (w, h) = (g.width as isize, g.height as isize);
    let rad = (k / 2) as isize;
    let norm = 1.0 / (k * k) as f64;
    let mut out = Raster::zeros(g.width, g.height);
    for y in 0..h {
        for x in 0..w {
            let v = g.data[(y * w + x) as usize] * norm;
            if v == 0.0 {
                continue;
            }
            for dy in -rad..=rad {
                let yy = (y + dy).clamp(0, h - 1);
                for dx in -rad..=rad {
                    out.data[(yy * w + (x + dx).clamp(0, w - 1)) as usize] += v;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedEntropy {
    pub map: Raster,
    pub coverage: Vec<bool>,
}

fn entropy_map_from_trace(tr: &Trace, entropies: &[f64], window: usize) -> RenderedEntropy {
    let mut blended = blend_scalar(tr, entropies);
    let coverage = tr.coverage();
    for (v, c) in blended.data.iter_mut().zip(&coverage) {
        if !c {
            *v = 0.0;
        }
    }
    RenderedEntropy {
        map: box_smooth(&blended, window),
        coverage,
    }
}

/// Blended neighborhood entropies seen from `camera`, box-smoothed with
/// `level_window`.
pub fn render_entropy_map(
    scene: &Scene,
    graph: &NeighborGraph,
    camera: &Camera,
    level_window: usize,
    min_density: f64,
) -> Result<RenderedEntropy> {
    graph.check_scene(scene)?;
    let entropies = neighborhood_entropies(&scene.opacities(), graph)?;
    let prep = Prepared::new(scene);
    Ok(entropy_map_from_trace(&trace(&prep, camera, min_density), &entropies, level_window))
}

/// `sum_l lambda_l * mean_px [covered] W_l (H_l - E_l)^2` and its gradient with
/// respect to each rendered level.
pub fn align_loss(
    rendered: &[Raster],
    coverage: &[bool],
    targets: &[Raster],
    weights: &[Raster],
    lambdas: &[f64],
) -> Result<(f64, Vec<Raster>)> {
    let l = rendered.len();
    if targets.len() != l || weights.len() != l || lambdas.len() != l {
        return Err(GefError::Contract(format!(
            "align needs matching level counts: {} rendered, {} targets, {} weights, {} lambdas",
            l,
            targets.len(),
            weights.len(),
            lambdas.len()
        )));
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(l);
    for k in 0..l {
        let (h, e, w) = (&rendered[k], &targets[k], &weights[k]);
        if !h.same_shape(e) || !h.same_shape(w) || coverage.len() != h.data.len() {
            return Err(GefError::Contract("align rasters differ in size".into()));
        }
        let n = h.data.len() as f64;
        let mut g = Raster::zeros(h.width, h.height);
        for p in 0..h.data.len() {
            if !coverage[p] {
                continue;
            }
            let diff = h.data[p] - e.data[p];
            value += lambdas[k] * w.data[p] * diff * diff / n;
            g.data[p] = 2.0 * lambdas[k] * w.data[p] * diff / n;
        }
        grads.push(g);
    }
    Ok((value, grads))
}

/// Normalized 11-tap Gaussian (sigma 1.5).
fn ssim_kernel() -> [f64; 11] {
    let mut k = [0.0; 11];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter with zero padding; self-adjoint.
fn gauss_filter(r: &Raster, k: &[f64; 11]) -> Raster {
    let (w, h) = (r.width as isize, r.height as isize);
    let mut tmp = Raster::zeros(r.width, r.height);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = x + t as isize - 5;
                if (0..w).contains(&xx) {
                    s += kv * r.data[(y * w + xx) as usize];
                }
            }
            tmp.data[(y * w + x) as usize] = s;
        }
    }
    let mut out = Raster::zeros(r.width, r.height);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = y + t as isize - 5;
                if (0..h).contains(&yy) {
                    s += kv * tmp.data[(yy * w + x) as usize];
                }
            }
            out.data[(y * w + x) as usize] = s;
        }
    }
    out
}

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM of two unit-range rasters and its gradient with respect to `x`.
pub fn ssim_with_grad(x: &Raster, y: &Raster) -> (f64, Raster) {
    let k = ssim_kernel();
    let sq = |a: &Raster, b: &Raster| Raster {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(u, v)| u * v).collect(),
    };
    let mx = gauss_filter(x, &k);
    let my = gauss_filter(y, &k);
    let bxx = gauss_filter(&sq(x, x), &k);
    let byy = gauss_filter(&sq(y, y), &k);
    let bxy = gauss_filter(&sq(x, y), &k);
    let n = x.data.len();
    let mut d_mx = Raster::zeros(x.width, x.height);
    let mut d_bxx = Raster::zeros(x.width, x.height);
    let mut d_bxy = Raster::zeros(x.width, x.height);
    let mut total = 0.0;
    for p in 0..n {
        let (ux, uy) = (mx.data[p], my.data[p]);
        let sxx = bxx.data[p] - ux * ux;
        let syy = byy.data[p] - uy * uy;
        let sxy = bxy.data[p] - ux * uy;
        let n1 = 2.0 * ux * uy + SSIM_C1;
        let n2 = 2.0 * sxy + SSIM_C2;
        let d1 = ux * ux + uy * uy + SSIM_C1;
        let d2 = sxx + syy + SSIM_C2;
        let s = n1 * n2 / (d1 * d2);
        total += s;
        let ds_dux = s * (2.0 * uy / n1 - 2.0 * ux / d1);
        let ds_dsxy = s * 2.0 / n2;
        let ds_dsxx = -s / d2;
        d_mx.data[p] = (ds_dux - 2.0 * ux * ds_dsxx - uy * ds_dsxy) / n as f64;
        d_bxx.data[p] = ds_dsxx / n as f64;
        d_bxy.data[p] = ds_dsxy / n as f64;
    }
    let a = gauss_filter(&d_mx, &k);
    let b = gauss_filter(&d_bxx, &k);
    let c = gauss_filter(&d_bxy, &k);
    let grad = Raster {
        width: x.width,
        height: x.height,
        data: (0..n)
            .map(|p| a.data[p] + 2.0 * x.data[p] * b.data[p] + y.data[p] * c.data[p])
            .collect(),
    };
    (total / n as f64, grad)
}

pub fn ssim(x: &Raster, y: &Raster) -> f64 {
    ssim_with_grad(x, y).0
}

/// `(1 - m) * L1 + m * (1 - SSIM)`, both averaged over pixels and channels,
/// and its gradient with respect to `rendered`.
pub fn photometric_loss(rendered: &RgbImage, target: &RgbImage, ssim_mix: f64) -> Result<(f64, RgbImage)> {
    if rendered.width() != target.width() || rendered.height() != target.height() {
        return Err(GefError::Contract(format!(
            "rendered image is {}x{} but the target is {}x{}",
            rendered.width(),
            rendered.height(),
            target.width(),
            target.height()
        )));
    }
    let n = (rendered.width() * rendered.height() * 3) as f64;
    let mut grad = RgbImage::zeros(rendered.width(), rendered.height());
    let mut l1 = 0.0;
    let mut ssim_sum = 0.0;
    for c in 0..3 {
        let (r, t) = (&rendered.channels[c], &target.channels[c]);
        let g = &mut grad.channels[c];
        for p in 0..r.data.len() {
            let d = r.data[p] - t.data[p];
            l1 += d.abs();
            g.data[p] = (1.0 - ssim_mix) * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 } / n;
        }
        if ssim_mix > 0.0 {
            let (s, ds) = ssim_with_grad(r, t);
            ssim_sum += s;
            for p in 0..r.data.len() {
                g.data[p] -= ssim_mix * ds.data[p] / 3.0;
            }
        } else {
            ssim_sum += 1.0;
        }
    }
    let value = (1.0 - ssim_mix) * l1 / n + ssim_mix * (1.0 - ssim_sum / 3.0);
    Ok((value.max(0.0), grad))
}

/// Fixed normal targets for differentiation: one per view, per pixel.
pub type NormalTargets = Vec<Vec<Option<Vector3<f64>>>>;

/// Fresh photometric, depth and normal terms over all views. Photometric is
/// averaged over views; depth and normal over every pixel ray of every view.
pub fn image_terms(
    scene: &Scene,
    views: &[View],
    config: &LossConfig,
    terms: TermSet,
    normal_targets: Option<&NormalTargets>,
) -> Result<Vec<(Term, TermValue)>> {
    let n = scene.len();
    let terms = terms.intersect(TermSet::only(Term::Photometric).with(Term::Depth).with(Term::Normal));
    if terms.is_empty() || views.is_empty() {
        return Ok(terms.iter().map(|t| (t, TermValue::zero(n))).collect());
    }
    let prep = Prepared::new(scene);
    let total_rays: usize = views.iter().map(|v| v.camera.width() * v.camera.height()).sum();
    let ray_scale = 1.0 / total_rays as f64;
    let mut photo = (0.0, GradAccum::new(n));
    let mut depth = (0.0, GradAccum::new(n));
    let mut normal = (0.0, GradAccum::new(n));
    for (vi, view) in views.iter().enumerate() {
        let tr = trace(&prep, &view.camera, config.min_density);
        let rendered = render(scene, &tr);
        if terms.contains(Term::Photometric) {
            let (v, g) = photometric_loss(&rendered.color, &view.target, config.ssim_mix)?;
            photo.0 += v / views.len() as f64;
            let g = RgbImage {
                channels: g.channels.map(|c| Raster {
                    data: c.data.iter().map(|x| x / views.len() as f64).collect(),
                    ..c
                }),
            };
            render_backward(
                scene,
                &prep,
                &tr,
                &PixelGrads {
                    color: Some(g),
                    scalar: None,
                },
                &mut photo.1,
                None,
            );
        }
        if terms.contains(Term::Depth) {
            for p in 0..tr.n_pixels() {
                depth.0 += depth_backward(&prep, &tr.origin, &tr.dirs[p], tr.pixel(p), ray_scale, &mut depth.1);
            }
        }
        if terms.contains(Term::Normal) {
            let refs = match normal_targets {
                Some(t) => t[vi].clone(),
                None => depth_normals(&view.camera, &rendered.depth, &rendered.alpha),
            };
            normal.0 += normal_backward(&prep, &tr, &refs, ray_scale, &mut normal.1);
        }
    }
    let mut out = Vec::new();
    if terms.contains(Term::Photometric) {
        out.push((Term::Photometric, TermValue { value: photo.0, grad: photo.1.finish(scene, &prep) }));
    }
    if terms.contains(Term::Depth) {
        out.push((Term::Depth, TermValue { value: depth.0 * ray_scale, grad: depth.1.finish(scene, &prep) }));
    }
    if terms.contains(Term::Normal) {
        out.push((Term::Normal, TermValue { value: normal.0 * ray_scale, grad: normal.1.finish(scene, &prep) }));
    }
    Ok(out)
}

/// Normal targets of the current scene, for holding them fixed.
pub fn current_normal_targets(scene: &Scene, views: &[View], min_density: f64) -> NormalTargets {
    let prep = Prepared::new(scene);
    views
        .iter()
        .map(|v| {
            let r = render(scene, &trace(&prep, &v.camera, min_density));
            depth_normals(&v.camera, &r.depth, &r.alpha)
        })
        .collect()
}

/// Align term over all views: per view the level sum, averaged over views.
pub fn align_term(scene: &Scene, graph: &NeighborGraph, views: &[View], config: &LossConfig) -> Result<TermValue> {
    let n = scene.len();
    if views.is_empty() {
        return Ok(TermValue::zero(n));
    }
    let opacities = scene.opacities();
    let entropies = neighborhood_entropies(&opacities, graph)?;
    let prep = Prepared::new(scene);
    let mut acc = GradAccum::new(n);
    let mut d_h = vec![0.0; n];
    let mut value = 0.0;
    for view in views {
        let tr = trace(&prep, &view.camera, config.min_density);
        let levels = &view.pyramid.levels;
        let lambdas = config.level_weights(levels.len());
        let blended_cov = entropy_map_from_trace(&tr, &entropies, 1);
        let coverage = blended_cov.coverage;
        let rendered: Vec<Raster> = levels.iter().map(|l| box_smooth(&blended_cov.map, l.window)).collect();
        let targets: Vec<Raster> = levels.iter().map(|l| l.normalized.clone()).collect();
        let (v, grads) = align_loss(&rendered, &coverage, &targets, &view.pyramid.weights, &lambdas)?;
        value += v / views.len() as f64;
        let mut g_blend = Raster::zeros(tr.width, tr.height);
        for (lvl, g) in levels.iter().zip(&grads) {
            let back = box_smooth_transpose(g, lvl.window);
            for (a, b) in g_blend.data.iter_mut().zip(&back.data) {
                *a += b / views.len() as f64;
            }
        }
        for (g, c) in g_blend.data.iter_mut().zip(&coverage) {
            if !c {
                *g = 0.0;
            }
        }
        render_backward(
            scene,
            &prep,
            &tr,
            &PixelGrads {
                color: None,
                scalar: Some((g_blend, entropies.clone())),
            },
            &mut acc,
            Some(&mut d_h),
        );
    }
    for (k, &g) in d_h.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let (_, grad) = neighborhood_entropy_grad(&opacities, graph, k)?;
        for (j, gj) in graph.members(k).zip(grad) {
            acc.opacity[j] += g * gj;
        }
    }
    Ok(TermValue {
        value,
        grad: acc.finish(scene, &prep),
    })
}

/// Sparsity and align terms under the constants of `ctx`.
pub fn entropy_terms(
    scene: &Scene,
    graph: &NeighborGraph,
    views: &[View],
    ctx: &EntropyContext,
    config: &LossConfig,
    terms: TermSet,
) -> Result<Vec<(Term, TermValue)>> {
    let mut out = Vec::new();
    if terms.contains(Term::Sparsity) {
        out.push((Term::Sparsity, sparsity_loss(scene, graph, &ctx.thresholds, &ctx.image_weights)?));
    }
    if terms.contains(Term::Align) {
        out.push((Term::Align, align_term(scene, graph, views, config)?));
    }
    Ok(out)
}

/// Every active term, freshly evaluated.
pub fn evaluate(
    scene: &Scene,
    graph: &NeighborGraph,
    views: &[View],
    ctx: &EntropyContext,
    config: &LossConfig,
    active: TermSet,
) -> Result<LossBreakdown> {
    let active = active.intersect(config.enabled());
    let mut terms = image_terms(scene, views, config, active, None)?;
    terms.extend(entropy_terms(scene, graph, views, ctx, config, active)?);
    Ok(total_loss(&terms, config, scene.len()))
}
