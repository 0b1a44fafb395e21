//! Ray-based differentiable splatting.
//!
//! Every pixel ray collects the primitives it passes near. A primitive's blend
//! weight is `opacity * G(closest ray point)`, the same quantity reported by
//! [`crate::ray_oracle::per_ray_depths`], and its depth is the ray parameter
//! of that point. Weights have closed-form derivatives in every primitive
//! parameter, which the backward helpers here accumulate into a flat
//! [`Gradient`].

use nalgebra::{Matrix3, Vector3};

use crate::image_entropy::Raster;
use crate::primitive::{principal_normal, rotation_matrix_vjp, Camera, GaussianPrimitive, Scene, NEAR_PLANE};

/// Parameters per primitive in a [`Gradient`]: center (3), log-scale (3),
/// quaternion (4), opacity logit (1), color (3).
pub const STRIDE: usize = 14;
pub const CENTER: usize = 0;
pub const LOG_SCALE: usize = 3;
pub const ROTATION: usize = 6;
pub const LOGIT: usize = 10;
pub const COLOR: usize = 11;

pub const PARAM_NAMES: [&str; STRIDE] = [
    "x", "y", "z", "log_sx", "log_sy", "log_sz", "qw", "qx", "qy", "qz", "logit", "r", "g", "b",
];

/// Flat parameter vector of a scene in [`STRIDE`] layout.
pub fn scene_params(scene: &Scene) -> Vec<f64> {
    let mut out = Vec::with_capacity(scene.len() * STRIDE);
    for p in &scene.primitives {
        out.extend(p.center.iter());
        out.extend(p.log_scale.iter());
        out.extend(p.rotation.iter());
        out.push(p.opacity_logit);
        out.extend(p.color.iter());
    }
    out
}

pub fn set_scene_params(scene: &mut Scene, params: &[f64]) {
    assert_eq!(params.len(), scene.len() * STRIDE, "parameter vector length");
    for (p, v) in scene.primitives.iter_mut().zip(params.chunks_exact(STRIDE)) {
        p.center = Vector3::new(v[0], v[1], v[2]);
        p.log_scale = Vector3::new(v[3], v[4], v[5]);
        p.rotation = nalgebra::Vector4::new(v[6], v[7], v[8], v[9]);
        p.opacity_logit = v[10];
        p.color = Vector3::new(v[11], v[12], v[13]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub data: Vec<f64>,
}

impl Gradient {
    pub fn zeros(n_primitives: usize) -> Self {
        Self {
            data: vec![0.0; n_primitives * STRIDE],
        }
    }

    pub fn n_primitives(&self) -> usize {
        self.data.len() / STRIDE
    }

    pub fn primitive(&self, i: usize) -> &[f64] {
        &self.data[i * STRIDE..(i + 1) * STRIDE]
    }

    pub fn add_scaled(&mut self, other: &Gradient, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.data.iter_mut().for_each(|v| *v *= s);
        self
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// First non-finite entry as (primitive, parameter name).
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|k| (k / STRIDE, PARAM_NAMES[k % STRIDE]))
    }
}

/// Accumulates gradients in natural (matrix) form before the quaternion and
/// normal chain rules are applied.
#[derive(Debug, Clone)]
pub struct GradAccum {
    pub center: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub rot: Vec<Matrix3<f64>>,
    pub logit: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    /// Gradient with respect to the unoriented principal normal.
    pub normal: Vec<Vector3<f64>>,
    /// Gradient with respect to opacity itself (not the logit).
    pub opacity: Vec<f64>,
}

impl GradAccum {
    pub fn new(n: usize) -> Self {
        Self {
            center: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rot: vec![Matrix3::zeros(); n],
            logit: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            normal: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
        }
    }

    pub fn finish(&self, scene: &Scene, prep: &Prepared) -> Gradient {
        let mut g = Gradient::zeros(scene.len());
        for (i, p) in scene.primitives.iter().enumerate() {
            let out = &mut g.data[i * STRIDE..(i + 1) * STRIDE];
            let mut rot = self.rot[i];
            let nrm = &prep.normals[i];
            if !tied(p) {
                let col = self.normal[i] * nrm.sign;
                for r in 0..3 {
                    rot[(r, nrm.axis)] += col[r];
                }
            }
            let dq = rotation_matrix_vjp(&p.rotation, &rot);
            let a = prep.alpha[i];
            out[CENTER..CENTER + 3].copy_from_slice(self.center[i].as_slice());
            out[LOG_SCALE..LOG_SCALE + 3].copy_from_slice(self.log_scale[i].as_slice());
            out[ROTATION..ROTATION + 4].copy_from_slice(dq.as_slice());
            out[LOGIT] = self.logit[i] + self.opacity[i] * a * (1.0 - a);
            out[COLOR..COLOR + 3].copy_from_slice(self.color[i].as_slice());
        }
        g
    }
}

fn tied(p: &GaussianPrimitive) -> bool {
    let s = p.log_scale;
    (s[0] - s[1]).abs() <= 1e-12 && (s[1] - s[2]).abs() <= 1e-12
}

/// Per-primitive quantities shared by every ray of an evaluation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub centers: Vec<Vector3<f64>>,
    pub rot: Vec<Matrix3<f64>>,
    pub inv_s2: Vec<Vector3<f64>>,
    pub s_max: Vec<f64>,
    pub alpha: Vec<f64>,
    pub normals: Vec<crate::primitive::Normal>,
}

impl Prepared {
    pub fn new(scene: &Scene) -> Self {
        let n = scene.len();
        let mut out = Self {
            centers: Vec::with_capacity(n),
            rot: Vec::with_capacity(n),
            inv_s2: Vec::with_capacity(n),
            s_max: Vec::with_capacity(n),
            alpha: Vec::with_capacity(n),
            normals: Vec::with_capacity(n),
        };
        for p in &scene.primitives {
            let s = p.scale();
            out.centers.push(p.center);
            out.rot.push(p.rotation_matrix());
            out.inv_s2.push(s.map(|v| 1.0 / (v * v)));
            out.s_max.push(s.max());
            out.alpha.push(p.opacity());
            out.normals.push(principal_normal(p));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Ray parameter of the closest point and the Mahalanobis square there.
    #[inline]
    pub fn hit(&self, i: usize, o: &Vector3<f64>, d: &Vector3<f64>) -> (f64, f64) {
        let m = self.centers[i] - o;
        let t = d.dot(&m);
        let r = d * t - m;
        let u = self.rot[i].tr_mul(&r);
        let q = u.component_mul(&u).dot(&self.inv_s2[i]);
        (t, q)
    }

    /// Chain rule from `dL/domega` and `dL/dt` of one ray hit to the
    /// primitive parameters.
    pub fn hit_backward(
        &self,
        i: usize,
        o: &Vector3<f64>,
        d: &Vector3<f64>,
        omega: f64,
        d_omega: f64,
        d_depth: f64,
        acc: &mut GradAccum,
    ) {
        let m = self.centers[i] - o;
        let t = d.dot(&m);
        let r = d * t - m;
        let u = self.rot[i].tr_mul(&r);
        let us = u.component_mul(&self.inv_s2[i]);
        let dq = -0.5 * omega * d_omega;
        let w = self.rot[i] * us;
        acc.center[i] += (d * d.dot(&w) - w) * (2.0 * dq) + d * d_depth;
        acc.log_scale[i] += u.component_mul(&us) * (-2.0 * dq);
        acc.rot[i] += r * us.transpose() * (2.0 * dq);
        let a = self.alpha[i];
        acc.logit[i] += d_omega * omega * (1.0 - a);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub prim: u32,
    pub depth: f64,
    /// Raw blend weight `opacity * G`.
    pub omega: f64,
    /// Transmittance in front of this fragment.
    pub trans: f64,
}

impl Fragment {
    /// Effective weight `T * omega`.
    pub fn weight(&self) -> f64 {
        self.trans * self.omega
    }
}

/// Depth-sorted fragments of every pixel of one camera.
#[derive(Debug, Clone)]
pub struct Trace {
    pub width: usize,
    pub height: usize,
    pub origin: Vector3<f64>,
    pub dirs: Vec<Vector3<f64>>,
    pub frags: Vec<Fragment>,
    offsets: Vec<usize>,
}

impl Trace {
    pub fn pixel(&self, p: usize) -> &[Fragment] {
        &self.frags[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn covered(&self, p: usize) -> bool {
        self.offsets[p + 1] > self.offsets[p]
    }

    pub fn coverage(&self) -> Vec<bool> {
        (0..self.n_pixels()).map(|p| self.covered(p)).collect()
    }
}

/// Inclusive pixel range whose rays can pass within `rho` of `center`, or
/// `None` when the bound is unavailable (sphere reaching the near plane).
fn pixel_bounds(camera: &Camera, center: &Vector3<f64>, rho: f64) -> Option<[isize; 4]> {
    let c = camera.to_camera(center);
    if c.z - rho <= NEAR_PLANE || !rho.is_finite() {
        return None;
    }
    let (zn, zf) = (c.z - rho, c.z + rho);
    let span = |lo: f64, hi: f64, f: f64, pp: f64| {
        let umax = if hi >= 0.0 { hi / zn } else { hi / zf };
        let umin = if lo >= 0.0 { lo / zf } else { lo / zn };
        (
            (f * umin + pp - 0.5).ceil() as isize,
            (f * umax + pp - 0.5).floor() as isize,
        )
    };
    let (x0, x1) = span(c.x - rho, c.x + rho, camera.focal.x, camera.principal_point.x);
    let (y0, y1) = span(c.y - rho, c.y + rho, camera.focal.y, camera.principal_point.y);
    Some([x0, x1, y0, y1])
}

/// Collects and depth-sorts the fragments of every pixel. Primitives whose
/// density at the closest ray point is at or below `min_density` are culled;
/// `min_density = 0` keeps every primitive in front of the camera.
pub fn trace(prep: &Prepared, camera: &Camera, min_density: f64) -> Trace {
    let (w, h) = (camera.width(), camera.height());
    let origin = camera.position();
    let dirs: Vec<Vector3<f64>> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| camera.pixel_direction(x, y))
        .collect();
    let q_max = if min_density > 0.0 { -2.0 * min_density.ln() } else { f64::INFINITY };

    let mut raw: Vec<(u32, Fragment)> = Vec::new();
    for i in 0..prep.len() {
        let rho = prep.s_max[i] * q_max.sqrt();
        let [x0, x1, y0, y1] = pixel_bounds(camera, &prep.centers[i], rho).unwrap_or([0, w as isize - 1, 0, h as isize - 1]);
        let (x0, x1) = (x0.max(0), x1.min(w as isize - 1));
        let (y0, y1) = (y0.max(0), y1.min(h as isize - 1));
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let p = y * w + x;
                let (t, q) = prep.hit(i, &origin, &dirs[p]);
                if t <= NEAR_PLANE || q >= q_max {
                    continue;
                }
                let g = (-0.5 * q).exp();
                if g <= min_density {
                    continue;
                }
                raw.push((
                    p as u32,
                    Fragment {
                        prim: i as u32,
                        depth: t,
                        omega: prep.alpha[i] * g,
                        trans: 1.0,
                    },
                ));
            }
        }
    }

    // counting sort by pixel, then depth order within each pixel
    let mut offsets = vec![0usize; w * h + 1];
    for (p, _) in &raw {
        offsets[*p as usize + 1] += 1;
    }
    for k in 0..w * h {
        offsets[k + 1] += offsets[k];
    }
    let mut cursor = offsets.clone();
    let mut frags = vec![
        Fragment {
            prim: 0,
            depth: 0.0,
            omega: 0.0,
            trans: 1.0
        };
        raw.len()
    ];
    for (p, f) in raw {
        frags[cursor[p as usize]] = f;
        cursor[p as usize] += 1;
    }
    for p in 0..w * h {
        let list = &mut frags[offsets[p]..offsets[p + 1]];
        list.sort_unstable_by(|a, b| a.depth.total_cmp(&b.depth).then(a.prim.cmp(&b.prim)));
        let mut t = 1.0;
        for f in list.iter_mut() {
            f.trans = t;
            t *= 1.0 - f.omega;
        }
    }
    Trace {
        width: w,
        height: h,
        origin,
        dirs,
        frags,
        offsets,
    }
}

/// Three-channel float image.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub channels: [Raster; 3],
}

impl RgbImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            channels: [Raster::zeros(width, height), Raster::zeros(width, height), Raster::zeros(width, height)],
        }
    }

    pub fn width(&self) -> usize {
        self.channels[0].width
    }

    pub fn height(&self) -> usize {
        self.channels[0].height
    }

    /// Rec. 601 luma in [0, 1].
    pub fn luma(&self) -> Raster {
        let [r, g, b] = &self.channels;
        Raster {
            width: r.width,
            height: r.height,
            data: (0..r.data.len())
                .map(|i| 0.299 * r.data[i] + 0.587 * g.data[i] + 0.114 * b.data[i])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub color: RgbImage,
    /// Accumulated weight `sum_k T_k omega_k`.
    pub alpha: Raster,
    /// Weighted depth divided by accumulated weight; 0 where uncovered.
    pub depth: Raster,
}

/// Composites primitive colors over a black background.
pub fn render(scene: &Scene, trace: &Trace) -> Rendered {
    let (w, h) = (trace.width, trace.height);
    let mut color = RgbImage::zeros(w, h);
    let mut alpha = Raster::zeros(w, h);
    let mut depth = Raster::zeros(w, h);
    for p in 0..w * h {
        let (mut c, mut a, mut d) = (Vector3::zeros(), 0.0, 0.0);
        for f in trace.pixel(p) {
            let e = f.weight();
            c += scene.primitives[f.prim as usize].color * e;
            a += e;
            d += f.depth * e;
        }
        for k in 0..3 {
            color.channels[k].data[p] = c[k];
        }
        alpha.data[p] = a;
        depth.data[p] = if a > 1e-12 { d / a } else { 0.0 };
    }
    Rendered { color, alpha, depth }
}

/// Blends one scalar per primitive (e.g. neighborhood entropy) at every pixel.
pub fn blend_scalar(trace: &Trace, values: &[f64]) -> Raster {
    let mut out = Raster::zeros(trace.width, trace.height);
    for p in 0..trace.n_pixels() {
        out.data[p] = trace.pixel(p).iter().map(|f| f.weight() * values[f.prim as usize]).sum();
    }
    out
}

/// Reverse pass of front-to-back compositing for one pixel.
///
/// `value(f)` must return the upstream gradient dotted with the fragment's
/// blended value. Returns `dL/domega` per fragment in order.
pub fn blend_backward(frags: &[Fragment], mut value: impl FnMut(&Fragment) -> f64, out: &mut Vec<f64>) {
    out.clear();
    out.resize(frags.len(), 0.0);
    let mut behind = 0.0;
    for (k, f) in frags.iter().enumerate().rev() {
        let v = value(f);
        out[k] = f.trans * (v - behind);
        behind = f.omega * v + (1.0 - f.omega) * behind;
    }
}

/// Per-pixel upstream gradients of a rendered view.
#[derive(Debug, Clone)]
pub struct PixelGrads {
    pub color: Option<RgbImage>,
    /// Gradient with respect to a blended per-primitive scalar and the scalar
    /// values themselves.
    pub scalar: Option<(Raster, Vec<f64>)>,
}

/// Propagates color and blended-scalar gradients through one trace.
/// Gradients with respect to the blended scalars are added to `d_values`.
pub fn render_backward(
    scene: &Scene,
    prep: &Prepared,
    trace: &Trace,
    grads: &PixelGrads,
    acc: &mut GradAccum,
    mut d_values: Option<&mut Vec<f64>>,
) {
    let mut d_omega = Vec::new();
    for p in 0..trace.n_pixels() {
        let frags = trace.pixel(p);
        if frags.is_empty() {
            continue;
        }
        let gc = grads
            .color
            .as_ref()
            .map(|c| Vector3::new(c.channels[0].data[p], c.channels[1].data[p], c.channels[2].data[p]));
        let gs = grads.scalar.as_ref().map(|(r, v)| (r.data[p], v));
        if gc.is_some_and(|g| g == Vector3::zeros()) && gs.is_none_or(|(g, _)| g == 0.0) {
            continue;
        }
        blend_backward(
            frags,
            |f| {
                let i = f.prim as usize;
                let mut v = 0.0;
                if let Some(g) = gc {
                    v += g.dot(&scene.primitives[i].color);
                }
                if let Some((g, vals)) = gs {
                    v += g * vals[i];
                }
                v
            },
            &mut d_omega,
        );
        for (f, &dw) in frags.iter().zip(&d_omega) {
            let i = f.prim as usize;
            let e = f.weight();
            if let Some(g) = gc {
                acc.color[i] += g * e;
            }
            if let (Some((g, _)), Some(dv)) = (gs, d_values.as_deref_mut()) {
                dv[i] += g * e;
            }
            prep.hit_backward(i, &trace.origin, &trace.dirs[p], f.omega, dw, 0.0, acc);
        }
    }
}
