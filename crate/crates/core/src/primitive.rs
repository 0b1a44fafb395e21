//! Gaussian primitives, covariance algebra, pinhole cameras and alpha blending.
//!
//! Primitives store their bounded quantities through unconstrained
//! parameters: scales as logarithms and opacity as a logit. Every optimizer
//! step therefore works on an unconstrained vector while the mapped values
//! always satisfy their bounds.

use nalgebra::{Matrix2, Matrix3, Matrix4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{GefError, Result};

/// Primitives closer to the camera plane than this are rejected by the projection.
pub const NEAR_PLANE: f64 = 1e-4;

/// Logits are kept inside this range so that `sigmoid` never saturates to NaN.
const LOGIT_LIMIT: f64 = 50.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    (p.ln() - (-p).ln_1p()).clamp(-LOGIT_LIMIT, LOGIT_LIMIT)
}

/// Rotation matrix of the (possibly unnormalized) quaternion `(w, x, y, z)`.
pub fn rotation_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient with respect to the rotation matrix back to the raw
/// quaternion, including the normalization step.
pub fn rotation_matrix_vjp(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let n = q.norm();
    let u = q / n;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gu = Vector4::new(gw, gx, gy, gz);
    (gu - u * u.dot(&gu)) / n
}

/// Unit quaternion for a rotation of `angle` radians about `axis`.
pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> Vector4<f64> {
    let a = axis.normalize() * (0.5 * angle).sin();
    Vector4::new((0.5 * angle).cos(), a.x, a.y, a.z)
}

pub const IDENTITY_ROTATION: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub center: Vector3<f64>,
    /// Natural logarithm of the per-axis scale (diagonal of S).
    pub log_scale: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`; renormalized after every optimizer step.
    pub rotation: Vector4<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
    /// Mixture weight used by the ray formulation.
    pub weight: f64,
}

impl GaussianPrimitive {
    pub fn new(
        center: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: Vector4<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Self {
        Self {
            center,
            log_scale: scale.map(f64::ln),
            rotation: rotation.normalize(),
            opacity_logit: logit(opacity),
            color,
            weight: 1.0,
        }
    }

    pub fn isotropic(center: Vector3<f64>, sigma: f64, opacity: f64) -> Self {
        Self::new(
            center,
            Vector3::repeat(sigma),
            Vector4::from(IDENTITY_ROTATION),
            opacity,
            Vector3::repeat(0.5),
        )
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn set_scale(&mut self, scale: Vector3<f64>) {
        self.log_scale = scale.map(f64::ln);
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn set_opacity(&mut self, opacity: f64) {
        self.opacity_logit = logit(opacity);
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(&self.rotation)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance(self)
    }

    /// Inverse covariance `R S^-2 R^T`, built directly from the factors.
    pub fn inverse_covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s = self.scale();
        let d = Matrix3::from_diagonal(&s.map(|v| 1.0 / (v * v)));
        r * d * r.transpose()
    }
}

/// Ordered primitives plus the global regularization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<GaussianPrimitive>,
    pub sigma_min: f64,
    pub epsilon_tangent: f64,
    pub decay_rate: f64,
}

impl Scene {
    /// Builds a scene with `epsilon_tangent = 0.5 sigma_min` and
    /// `decay_rate = 1 / sigma_min^2`; scales below `sigma_min` are clamped up.
    pub fn new(mut primitives: Vec<GaussianPrimitive>, sigma_min: f64) -> Self {
        assert!(sigma_min > 0.0, "sigma_min must be positive");
        let floor = sigma_min.ln();
        for p in &mut primitives {
            p.log_scale = p.log_scale.map(|v| v.max(floor));
        }
        Self {
            primitives,
            sigma_min,
            epsilon_tangent: 0.5 * sigma_min,
            decay_rate: 1.0 / (sigma_min * sigma_min),
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon_tangent = epsilon;
        self
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.decay_rate = decay;
        self
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn opacities(&self) -> Vec<f64> {
        self.primitives.iter().map(|p| p.opacity()).collect()
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.primitives.iter().map(|p| p.center).collect()
    }
}

/// Pinhole camera. Camera space looks down `+z` with `x` right and `y` down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub world_to_camera: Matrix4<f64>,
    pub focal: Vector2<f64>,
    pub principal_point: Vector2<f64>,
    pub resolution: (usize, usize),
}

impl Camera {
    pub fn new(
        world_to_camera: Matrix4<f64>,
        focal: Vector2<f64>,
        principal_point: Vector2<f64>,
        resolution: (usize, usize),
    ) -> Result<Self> {
        let r = world_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(GefError::param(
                "world_to_camera",
                format!("rotation block is not orthonormal (error {err:e})"),
            ));
        }
        Ok(Self {
            world_to_camera,
            focal,
            principal_point,
            resolution,
        })
    }

    /// Camera at `eye` looking at `target`; the principal point is the image center.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self {
            world_to_camera: m,
            focal: Vector2::new(focal, focal),
            principal_point: Vector2::new(width as f64 / 2.0, height as f64 / 2.0),
            resolution: (width, height),
        }
    }

    pub fn width(&self) -> usize {
        self.resolution.0
    }

    pub fn height(&self) -> usize {
        self.resolution.1
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// Unit world-space direction through the center of pixel `(px, py)`.
    pub fn pixel_direction(&self, px: usize, py: usize) -> Vector3<f64> {
        let u = (px as f64 + 0.5 - self.principal_point.x) / self.focal.x;
        let v = (py as f64 + 0.5 - self.principal_point.y) / self.focal.y;
        (self.rotation().transpose() * Vector3::new(u, v, 1.0)).normalize()
    }
}

pub fn covariance(p: &GaussianPrimitive) -> Matrix3<f64> {
    let r = p.rotation_matrix();
    let s = p.scale();
    let s2 = Matrix3::from_diagonal(&s.component_mul(&s));
    let sigma = r * s2 * r.transpose();
    // symmetrize away the last-bit asymmetry of the triple product
    (sigma + sigma.transpose()) * 0.5
}

/// Unnormalized Gaussian `exp(-0.5 * mahalanobis^2)`; equals 1 at the center.
pub fn evaluate_density(p: &GaussianPrimitive, point: &Vector3<f64>) -> f64 {
    let local = p.rotation_matrix().transpose() * (point - p.center);
    let s = p.scale();
    let q: f64 = (0..3).map(|a| (local[a] / s[a]).powi(2)).sum();
    (-0.5 * q).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normal {
    pub direction: Vector3<f64>,
    /// Index of the scale axis the normal comes from.
    pub axis: usize,
    /// Sign applied to the rotation column.
    pub sign: f64,
    pub degenerate: bool,
}

/// Surface normal of a primitive: the covariance eigenvector with the
/// smallest eigenvalue, i.e. the rotation column of the thinnest axis.
///
/// The sign is chosen so the largest-magnitude component is positive (first
/// such component on ties). An isotropic covariance yields `+z` and a partial
/// tie yields the lower-index axis; both are flagged degenerate.
pub fn principal_normal(p: &GaussianPrimitive) -> Normal {
    let s = p.log_scale;
    let tie = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let mut axis = 0;
    for a in 1..3 {
        if s[a] < s[axis] && !tie(s[a], s[axis]) {
            axis = a;
        }
    }
    let ties = (0..3).filter(|&a| tie(s[a], s[axis])).count();
    if ties == 3 {
        return Normal {
            direction: Vector3::z(),
            axis: 2,
            sign: 1.0,
            degenerate: true,
        };
    }
    let col = p.rotation_matrix().column(axis).into_owned();
    let mut lead = 0;
    for k in 1..3 {
        if col[k].abs() > col[lead].abs() {
            lead = k;
        }
    }
    let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
    Normal {
        direction: col * sign,
        axis,
        sign,
        degenerate: ties > 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub covariance: Matrix2<f64>,
    /// Pixel coordinates of the projected center.
    pub center: Vector2<f64>,
    pub depth: f64,
}

/// First-order pinhole projection of the primitive's covariance.
pub fn project_covariance(p: &GaussianPrimitive, camera: &Camera) -> Result<Projection> {
    project_covariance_indexed(p, camera, 0)
}

pub(crate) fn project_covariance_indexed(
    p: &GaussianPrimitive,
    camera: &Camera,
    index: usize,
) -> Result<Projection> {
    let t = camera.to_camera(&p.center);
    if t.z <= NEAR_PLANE {
        return Err(GefError::BehindCamera { index, depth: t.z });
    }
    let (fx, fy) = (camera.focal.x, camera.focal.y);
    let inv_z = 1.0 / t.z;
    let j = nalgebra::Matrix2x3::new(
        fx * inv_z,
        0.0,
        -fx * t.x * inv_z * inv_z,
        0.0,
        fy * inv_z,
        -fy * t.y * inv_z * inv_z,
    );
    let w = camera.rotation();
    let cov = j * w * covariance(p) * w.transpose() * j.transpose();
    let cov = (cov + cov.transpose()) * 0.5;
    Ok(Projection {
        covariance: cov,
        center: Vector2::new(
            fx * t.x * inv_z + camera.principal_point.x,
            fy * t.y * inv_z + camera.principal_point.y,
        ),
        depth: t.z,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blend {
    pub value: Vec<f64>,
    /// Effective front-to-back weights `omega_i * prod_{j<i} (1 - omega_j)`.
    pub weights: Vec<f64>,
}

/// Front-to-back alpha compositing of `(value, omega)` items.
///
/// `depths` must be nondecreasing; every value must have the same length.
pub fn alpha_blend(items: &[(Vec<f64>, f64)], depths: &[f64]) -> Result<Blend> {
    if depths.len() != items.len() {
        return Err(GefError::Contract(format!(
            "{} depths supplied for {} items",
            depths.len(),
            items.len()
        )));
    }
    if let Some(i) = depths.windows(2).position(|w| w[1] < w[0]) {
        return Err(GefError::Contract(format!(
            "items are not depth sorted at position {}",
            i + 1
        )));
    }
    let dim = items.first().map_or(0, |(v, _)| v.len());
    let mut value = vec![0.0; dim];
    let mut weights = Vec::with_capacity(items.len());
    let mut transmittance = 1.0;
    for (i, (v, omega)) in items.iter().enumerate() {
        if !(0.0..=1.0).contains(omega) {
            return Err(GefError::Contract(format!(
                "omega {omega} of item {i} is outside [0, 1]"
            )));
        }
        if v.len() != dim {
            return Err(GefError::Contract(format!(
                "item {i} has {} channels, expected {dim}",
                v.len()
            )));
        }
        let w = omega * transmittance;
        for (acc, x) in value.iter_mut().zip(v) {
            *acc += x * w;
        }
        weights.push(w);
        transmittance *= 1.0 - omega;
    }
    Ok(Blend { value, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn prim(scale: [f64; 3], rot: Vector4<f64>) -> GaussianPrimitive {
        GaussianPrimitive::new(
            Vector3::zeros(),
            Vector3::from(scale),
            rot,
            0.5,
            Vector3::repeat(0.5),
        )
    }

    #[test]
    fn covariance_examples() {
        let id = Vector4::from(IDENTITY_ROTATION);
        assert_relative_eq!(
            covariance(&prim([1.0, 1.0, 1.0], id)),
            Matrix3::identity(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            covariance(&prim([2.0, 1.0, 1.0], id)),
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)),
            epsilon = 1e-12
        );
        // R diag(4,1,1) R^T with R = [[0,-1,0],[1,0,0],[0,0,1]] worked by hand
        let rz = axis_angle(Vector3::z(), FRAC_PI_2);
        assert_relative_eq!(
            covariance(&prim([2.0, 1.0, 1.0], rz)),
            Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn density_examples() {
        let p = prim([1.0, 1.0, 1.0], Vector4::from(IDENTITY_ROTATION));
        assert_eq!(evaluate_density(&p, &Vector3::zeros()), 1.0);
        assert_relative_eq!(
            evaluate_density(&p, &Vector3::new(0.0, 1.0, 0.0)),
            (-0.5f64).exp(),
            epsilon = 1e-15
        );
        let q = prim(
            [0.7, 1.9, 0.3],
            axis_angle(Vector3::new(0.3, -1.0, 0.4), 0.9),
        );
        let x = Vector3::new(0.2, -0.4, 0.15);
        let dense = covariance(&q).try_inverse().unwrap();
        let expect = (-0.5 * (x.transpose() * dense * x)[0]).exp();
        assert_relative_eq!(evaluate_density(&q, &x), expect, epsilon = 1e-12);
    }

    #[test]
    fn normal_examples() {
        let id = Vector4::from(IDENTITY_ROTATION);
        let n = principal_normal(&prim([2.0, 2.0, 0.1], id));
        assert_eq!(n.direction, Vector3::z());
        assert!(!n.degenerate);
        let n = principal_normal(&prim([1.0, 1.0, 1.0], id));
        assert_eq!(n.direction, Vector3::z());
        assert!(n.degenerate);
        let rx = axis_angle(Vector3::x(), FRAC_PI_2);
        let n = principal_normal(&prim([2.0, 2.0, 0.1], rx));
        assert_relative_eq!(n.direction, Vector3::y(), epsilon = 1e-12);
    }

    #[test]
    fn normal_matches_eigendecomposition() {
        let p = prim(
            [1.5, 0.2, 0.9],
            axis_angle(Vector3::new(1.0, 2.0, -0.5), 1.3),
        );
        let eig = covariance(&p).symmetric_eigen();
        let imin = eig.eigenvalues.imin();
        let v = eig.eigenvectors.column(imin).into_owned();
        let n = principal_normal(&p).direction;
        assert_relative_eq!(n.dot(&v).abs(), 1.0, epsilon = 1e-10);
        let lead = n.iamax();
        assert!(n[lead] > 0.0);
    }

    fn axis_camera(depth: f64, focal: f64) -> Camera {
        Camera::look_at(
            Vector3::new(0.0, 0.0, -depth),
            Vector3::zeros(),
            Vector3::y(),
            focal,
            64,
            64,
        )
    }

    #[test]
    fn projection_on_axis() {
        let p = prim([1.0, 1.0, 1.0], Vector4::from(IDENTITY_ROTATION));
        let proj = project_covariance(&p, &axis_camera(5.0, 100.0)).unwrap();
        let k = (100.0f64 / 5.0).powi(2);
        assert_relative_eq!(proj.covariance, Matrix2::identity() * k, epsilon = 1e-9);
        assert_relative_eq!(proj.center, Vector2::new(32.0, 32.0), epsilon = 1e-12);
        let far = project_covariance(&p, &axis_camera(10.0, 100.0)).unwrap();
        assert_relative_eq!(far.covariance * 4.0, proj.covariance, epsilon = 1e-9);
    }

    #[test]
    fn projection_rejects_behind_camera() {
        let mut p = prim([1.0, 1.0, 1.0], Vector4::from(IDENTITY_ROTATION));
        p.center = Vector3::new(0.0, 0.0, -7.0);
        let err = project_covariance(&p, &axis_camera(5.0, 100.0)).unwrap_err();
        assert!(matches!(err, GefError::BehindCamera { .. }));
    }

    #[test]
    fn camera_rejects_non_orthonormal_rotation() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 1.1;
        assert!(Camera::new(m, Vector2::new(1.0, 1.0), Vector2::zeros(), (4, 4)).is_err());
    }

    #[test]
    fn blend_examples() {
        let b = alpha_blend(&[(vec![0.3, 0.6], 1.0)], &[1.0]).unwrap();
        assert_eq!(b.value, vec![0.3, 0.6]);
        let b = alpha_blend(&[(vec![2.0], 0.5), (vec![8.0], 0.5)], &[1.0, 2.0]).unwrap();
        assert_relative_eq!(b.value[0], 0.5 * 2.0 + 0.25 * 8.0, epsilon = 1e-15);
        assert!(alpha_blend(&[(vec![1.0], 0.5), (vec![1.0], 0.5)], &[2.0, 1.0]).is_err());
    }

    #[test]
    fn blend_matches_direct_expansion() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let items: Vec<(Vec<f64>, f64)> = (0..10)
            .map(|_| (vec![rng.random::<f64>(), rng.random()], rng.random()))
            .collect();
        let depths: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let b = alpha_blend(&items, &depths).unwrap();
        for c in 0..2 {
            let mut expect = 0.0;
            for i in 0..items.len() {
                let mut t = 1.0;
                for item in &items[..i] {
                    t *= 1.0 - item.1;
                }
                expect += items[i].0[c] * items[i].1 * t;
            }
            assert_relative_eq!(b.value[c], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_vjp_matches_finite_differences() {
        let q = Vector4::new(0.8, -0.3, 0.4, 0.2);
        let g = Matrix3::new(0.3, -1.2, 0.5, 0.7, 0.1, -0.4, 0.9, 0.2, -0.6);
        let analytic = rotation_matrix_vjp(&q, &g);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = ((rotation_matrix(&qp) - rotation_matrix(&qm)).component_mul(&g)).sum()
                / (2.0 * h);
            assert_relative_eq!(analytic[k], fd, epsilon = 1e-8);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn quat() -> impl Strategy<Value = Vector4<f64>> {
            (
                -1.0f64..1.0,
                -1.0f64..1.0,
                -1.0f64..1.0,
                -1.0f64..1.0,
            )
                .prop_filter("nonzero", |(a, b, c, d)| a * a + b * b + c * c + d * d > 0.1)
                .prop_map(|(a, b, c, d)| Vector4::new(a, b, c, d))
        }

        fn scale() -> impl Strategy<Value = [f64; 3]> {
            [0.05f64..3.0, 0.05f64..3.0, 0.05f64..3.0]
        }

        proptest! {
            #[test]
            fn covariance_round_trips_through_eigendecomposition(q in quat(), s in scale()) {
                let p = prim(s, q);
                let sigma = covariance(&p);
                prop_assert!((sigma - sigma.transpose()).abs().max() <= 1e-12);
                let eig = sigma.symmetric_eigen();
                let rebuilt = eig.eigenvectors * Matrix3::from_diagonal(&eig.eigenvalues)
                    * eig.eigenvectors.transpose();
                prop_assert!((rebuilt - sigma).abs().max() <= 1e-10);
                let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
                prop_assert!(eig.eigenvalues.min() >= smin * smin * (1.0 - 1e-9));
            }

            #[test]
            fn density_is_rotation_invariant(q in quat(), s in scale(), axis in quat(),
                                             x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0) {
                let p = prim(s, q);
                let point = Vector3::new(x, y, z);
                let rot = Vector4::new(axis[0], axis[1], axis[2], axis[3]).normalize();
                let rm = rotation_matrix(&rot);
                let mut rotated = p.clone();
                // left-multiplying the rotation quaternion composes the rotations
                let qa = nalgebra::Quaternion::new(rot[0], rot[1], rot[2], rot[3]);
                let qp = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]).normalize();
                let qc = qa * qp;
                rotated.rotation = Vector4::new(qc.w, qc.i, qc.j, qc.k);
                let a = evaluate_density(&p, &point);
                let b = evaluate_density(&rotated, &(rm * point));
                prop_assert!((a - b).abs() <= 1e-12);
            }

            #[test]
            fn blend_weights_are_bounded(omegas in proptest::collection::vec(0.0f64..=1.0, 1..20)) {
                let items: Vec<(Vec<f64>, f64)> = omegas.iter().map(|&o| (vec![1.0], o)).collect();
                let depths: Vec<f64> = (0..items.len()).map(|i| i as f64).collect();
                let b = alpha_blend(&items, &depths).unwrap();
                let sum: f64 = b.weights.iter().sum();
                prop_assert!(b.weights.iter().all(|w| (0.0..=1.0).contains(w)));
                prop_assert!(sum <= 1.0 + 1e-12);
            }

            #[test]
            fn projection_stays_psd(q in quat(), s in scale(), cam_q in quat(),
                                    tx in -1.0f64..1.0, ty in -1.0f64..1.0) {
                let p = prim(s, q);
                let r = rotation_matrix(&cam_q);
                let mut m = Matrix4::identity();
                m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
                m.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::new(tx, ty, 6.0));
                let cam = Camera::new(m, Vector2::new(80.0, 90.0), Vector2::new(32.0, 32.0), (64, 64)).unwrap();
                let proj = project_covariance(&p, &cam).unwrap();
                let c = proj.covariance;
                prop_assert!((c[(0, 1)] - c[(1, 0)]).abs() <= 1e-10);
                let eig = c.symmetric_eigen();
                prop_assert!(eig.eigenvalues.min() >= -1e-10 * eig.eigenvalues.max().abs().max(1.0));
            }
        }
    }

    #[test]
    fn all_opaque_only_first_contributes() {
        let items = vec![(vec![1.0], 1.0), (vec![5.0], 1.0), (vec![7.0], 1.0)];
        let b = alpha_blend(&items, &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(b.weights, vec![1.0, 0.0, 0.0]);
    }
}
