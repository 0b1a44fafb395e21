//! Ray-integrated opacity fields and their differential entropy.
//!
//! This is the expensive reference formulation: every ray is sampled densely
//! and every primitive is tested against it. Training uses the neighborhood
//! form in [`crate::neighborhood`]; this module backs the correlation tests
//! and the cost benchmark.

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::{GefError, Result};
use crate::primitive::{evaluate_density, Scene};

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Primitives whose density at the closest ray point is at or below this
/// value are treated as missing the ray.
pub const RAY_MIN_DENSITY: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    /// Integration window; derived from the scene when `None`.
    pub span: Option<(f64, f64)>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
            span: None,
        }
    }

    pub fn with_span(mut self, t_near: f64, t_far: f64) -> Result<Self> {
        if !(t_near < t_far) {
            return Err(GefError::param(
                "span",
                format!("t_near {t_near} must be below t_far {t_far}"),
            ));
        }
        self.span = Some((t_near, t_far));
        Ok(self)
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// One primitive's 1D footprint on a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayComponent {
    pub index: usize,
    /// Mixture weight `w_i * opacity_i * G_i(closest point)`.
    pub mass: f64,
    pub mean: f64,
    pub std: f64,
}

/// Marginalizes every primitive onto the ray: mean `d.(mu - o)`, variance
/// `d^T Sigma d`, weighted by the primitive's density at the closest ray
/// point so that primitives far from the ray drop out.
pub fn ray_components(scene: &Scene, ray: &Ray) -> Vec<RayComponent> {
    let d = ray.direction;
    scene
        .primitives
        .iter()
        .enumerate()
        .filter_map(|(index, p)| {
            let mean = d.dot(&(p.center - ray.origin));
            let g = evaluate_density(p, &ray.at(mean));
            let mass = p.weight * p.opacity() * g;
            if g <= RAY_MIN_DENSITY || mass <= 0.0 {
                return None;
            }
            let var = (d.transpose() * p.covariance() * d)[0];
            Some(RayComponent {
                index,
                mass,
                mean,
                std: var.sqrt(),
            })
        })
        .collect()
}

fn mixture_at(components: &[RayComponent], t: f64) -> f64 {
    components
        .iter()
        .map(|c| {
            let z = (t - c.mean) / c.std;
            c.mass * (-0.5 * z * z).exp() / (c.std * SQRT_2PI)
        })
        .sum()
}

/// Opacity field `alpha(t)` along the ray.
pub fn opacity_field(scene: &Scene, ray: &Ray, t: f64) -> f64 {
    mixture_at(&ray_components(scene, ray), t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayProfile {
    pub samples: Vec<(f64, f64)>,
    /// Trapezoid estimate of the L1 norm of the field.
    pub normalization: f64,
}

fn window(components: &[RayComponent], ray: &Ray) -> Option<(f64, f64)> {
    if let Some(span) = ray.span {
        return Some(span);
    }
    let smax = components.iter().map(|c| c.std).fold(0.0, f64::max);
    let lo = components.iter().map(|c| c.mean).fold(f64::INFINITY, f64::min);
    let hi = components.iter().map(|c| c.mean).fold(f64::NEG_INFINITY, f64::max);
    (lo.is_finite() && hi.is_finite()).then(|| (lo - 6.0 * smax, hi + 6.0 * smax))
}

fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    let inner: f64 = values[1..n - 1].iter().sum();
    h * (inner + 0.5 * (values[0] + values[n - 1]))
}

pub fn ray_profile(scene: &Scene, ray: &Ray, n_samples: usize) -> Result<RayProfile> {
    profile_from_components(&ray_components(scene, ray), ray, n_samples)
}

fn profile_from_components(
    components: &[RayComponent],
    ray: &Ray,
    n_samples: usize,
) -> Result<RayProfile> {
    if n_samples < 16 {
        return Err(GefError::param("n_samples", "at least 16 samples are required"));
    }
    let Some((t0, t1)) = window(components, ray) else {
        return Err(GefError::EmptyRay { mass: 0.0 });
    };
    let h = (t1 - t0) / (n_samples - 1) as f64;
    let samples: Vec<(f64, f64)> = (0..n_samples)
        .map(|k| {
            let t = t0 + h * k as f64;
            (t, mixture_at(components, t))
        })
        .collect();
    let alphas: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let normalization = trapezoid(&alphas, h);
    if !(normalization > 1e-12) {
        return Err(GefError::EmptyRay {
            mass: normalization,
        });
    }
    Ok(RayProfile {
        samples,
        normalization,
    })
}

/// Differential entropy (nats) of the normalized opacity profile, by composite
/// trapezoid quadrature over `n_samples` uniform points.
pub fn ray_entropy(scene: &Scene, ray: &Ray, n_samples: usize) -> Result<f64> {
    entropy_from_components(&ray_components(scene, ray), ray, n_samples)
}

pub fn entropy_from_components(
    components: &[RayComponent],
    ray: &Ray,
    n_samples: usize,
) -> Result<f64> {
    let profile = profile_from_components(components, ray, n_samples)?;
    let h = profile.samples[1].0 - profile.samples[0].0;
    let integrand: Vec<f64> = profile
        .samples
        .iter()
        .map(|&(_, a)| {
            let p = a / profile.normalization;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .collect();
    Ok(trapezoid(&integrand, h))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub index: usize,
    pub depth: f64,
    /// Blend weight `opacity_i * G_i(closest ray point)`.
    pub omega: f64,
}

/// Depth and blend weight of every primitive the ray passes through, sorted
/// front to back. Only primitives in front of the origin count.
pub fn per_ray_depths(scene: &Scene, ray: &Ray) -> Vec<RayHit> {
    let d = ray.direction;
    let mut hits: Vec<RayHit> = scene
        .primitives
        .iter()
        .enumerate()
        .filter_map(|(index, p)| {
            let depth = d.dot(&(p.center - ray.origin));
            if depth <= 0.0 {
                return None;
            }
            let g = evaluate_density(p, &ray.at(depth));
            (g > RAY_MIN_DENSITY).then(|| RayHit {
                index,
                depth,
                omega: p.opacity() * g,
            })
        })
        .collect();
    hits.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    hits
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostModel {
    pub ray_operations: f64,
    pub neighborhood_operations: f64,
    pub ratio: f64,
}

pub fn ray_cost_model(n_rays: u64, n_samples: u64, gaussians_per_sample: u64) -> f64 {
    n_rays as f64 * n_samples as f64 * gaussians_per_sample as f64
}

pub fn neighborhood_cost_model(n_primitives: u64, k: u64) -> f64 {
    n_primitives as f64 * k as f64
}

pub fn cost_model(
    n_rays: u64,
    n_samples: u64,
    gaussians_per_sample: u64,
    n_primitives: u64,
    k: u64,
) -> CostModel {
    let ray_operations = ray_cost_model(n_rays, n_samples, gaussians_per_sample);
    let neighborhood_operations = neighborhood_cost_model(n_primitives, k);
    CostModel {
        ray_operations,
        neighborhood_operations,
        ratio: ray_operations / neighborhood_operations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitive::{GaussianPrimitive, IDENTITY_ROTATION};
    use approx::assert_relative_eq;
    use nalgebra::Vector4;

    const GAUSS_ENTROPY: f64 = 1.418_938_533_204_672_7; // 0.5 ln(2 pi e)

    fn on_axis(z: f64, sigma: f64) -> GaussianPrimitive {
        GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, z), sigma, 1.0)
    }

    fn axis_ray() -> Ray {
        Ray::new(Vector3::zeros(), Vector3::z())
    }

    #[test]
    fn peak_value_of_single_primitive() {
        let scene = Scene::new(vec![on_axis(4.0, 0.5)], 0.1);
        let v = opacity_field(&scene, &axis_ray(), 4.0);
        assert_relative_eq!(v, 1.0 / (0.5 * SQRT_2PI), epsilon = 1e-12);
        let empty = Scene::new(vec![], 0.1);
        assert_eq!(opacity_field(&empty, &axis_ray(), 4.0), 0.0);
    }

    #[test]
    fn colocated_primitives_add() {
        let one = Scene::new(vec![on_axis(4.0, 0.5)], 0.1);
        let two = Scene::new(vec![on_axis(4.0, 0.5), on_axis(4.0, 0.5)], 0.1);
        for t in [3.0, 3.7, 4.0, 5.1] {
            assert_eq!(
                opacity_field(&two, &axis_ray(), t),
                2.0 * opacity_field(&one, &axis_ray(), t)
            );
        }
    }

    #[test]
    fn entropy_of_single_gaussian() {
        let scene = Scene::new(vec![on_axis(10.0, 1.0)], 0.1);
        let ray = axis_ray().with_span(4.0, 16.0).unwrap();
        let h = ray_entropy(&scene, &ray, 128).unwrap();
        assert!((h - GAUSS_ENTROPY).abs() < 1e-3, "{h}");
        let h = ray_entropy(&scene, &ray, 8192).unwrap();
        assert!((h - GAUSS_ENTROPY).abs() < 1e-6, "{h}");
    }

    /// Brute-force trapezoid quadrature of the two-component mixture entropy
    /// at 1e5 samples, evaluated directly from the closed-form density.
    fn mixture_entropy_oracle(means: &[f64], lo: f64, hi: f64) -> f64 {
        let n = 100_000;
        let h = (hi - lo) / (n - 1) as f64;
        let k = means.len() as f64;
        let f = |t: f64| {
            means
                .iter()
                .map(|m| (-0.5 * (t - m).powi(2)).exp() / SQRT_2PI)
                .sum::<f64>()
                / k
        };
        let mut acc = 0.0;
        for i in 0..n {
            let p = f(lo + h * i as f64);
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            if p > 0.0 {
                acc -= w * p * p.ln();
            }
        }
        acc * h
    }

    #[test]
    fn separated_pair_adds_ln2() {
        let oracle = mixture_entropy_oracle(&[10.0, 30.0], 4.0, 36.0);
        assert!((oracle - (GAUSS_ENTROPY + std::f64::consts::LN_2)).abs() < 1e-6);
        let scene = Scene::new(vec![on_axis(10.0, 1.0), on_axis(30.0, 1.0)], 0.1);
        let ray = axis_ray().with_span(4.0, 36.0).unwrap();
        let h = ray_entropy(&scene, &ray, 512).unwrap();
        assert!((h - oracle).abs() < 2e-3, "{h} vs {oracle}");
    }

    #[test]
    fn entropy_is_weight_scale_invariant() {
        let mut a = vec![on_axis(8.0, 1.0), on_axis(11.0, 0.7)];
        let ray = axis_ray().with_span(2.0, 18.0).unwrap();
        let base = ray_entropy(&Scene::new(a.clone(), 0.1), &ray, 256).unwrap();
        for p in &mut a {
            p.weight *= 10.0;
        }
        let scaled = ray_entropy(&Scene::new(a, 0.1), &ray, 256).unwrap();
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn merged_duplicates_leave_entropy_unchanged() {
        let ray = axis_ray().with_span(2.0, 18.0).unwrap();
        let dup = Scene::new(vec![on_axis(8.0, 1.0), on_axis(8.0, 1.0), on_axis(12.0, 0.8)], 0.1);
        let mut merged = vec![on_axis(8.0, 1.0), on_axis(12.0, 0.8)];
        merged[0].weight = 2.0;
        let a = ray_entropy(&dup, &ray, 256).unwrap();
        let b = ray_entropy(&Scene::new(merged, 0.1), &ray, 256).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn entropy_is_translation_invariant_along_ray() {
        let base = Scene::new(vec![on_axis(8.0, 1.0), on_axis(10.5, 0.6)], 0.1);
        let mut moved = base.clone();
        for p in &mut moved.primitives {
            p.center.z += 3.25;
        }
        let a = ray_entropy(&base, &axis_ray().with_span(2.0, 18.0).unwrap(), 300).unwrap();
        let b = ray_entropy(&moved, &axis_ray().with_span(5.25, 21.25).unwrap(), 300).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn quadrature_refines_monotonically() {
        let scene = Scene::new(vec![on_axis(8.0, 1.0), on_axis(10.0, 0.5)], 0.1);
        let ray = axis_ray().with_span(1.0, 17.0).unwrap();
        let hs: Vec<f64> = [16, 32, 64, 128]
            .iter()
            .map(|&n| ray_entropy(&scene, &ray, n).unwrap())
            .collect();
        let deltas: Vec<f64> = hs.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        assert!(deltas.windows(2).all(|d| d[1] < d[0]), "{deltas:?}");
    }

    #[test]
    fn empty_ray_is_an_error() {
        let scene = Scene::new(vec![on_axis(8.0, 1.0)], 0.1);
        let ray = Ray::new(Vector3::new(50.0, 0.0, 0.0), Vector3::z());
        assert!(matches!(
            ray_entropy(&scene, &ray, 64),
            Err(GefError::EmptyRay { .. })
        ));
        assert!(ray_entropy(&scene, &axis_ray(), 8).is_err());
    }

    #[test]
    fn depths_on_axis() {
        let mut p = on_axis(5.0, 0.5);
        p.set_opacity(0.7);
        let scene = Scene::new(vec![p], 0.1);
        let hits = per_ray_depths(&scene, &axis_ray());
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].index, 0);
        assert_relative_eq!(hits[0].depth, 5.0, epsilon = 1e-15);
        assert_relative_eq!(hits[0].omega, 0.7, epsilon = 1e-15);
    }

    #[test]
    fn coplanar_primitives_share_depth() {
        let a = GaussianPrimitive::isotropic(Vector3::new(0.3, 0.0, 5.0), 1.0, 0.5);
        let b = GaussianPrimitive::isotropic(Vector3::new(-0.3, 0.0, 5.0), 1.0, 0.5);
        let hits = per_ray_depths(&Scene::new(vec![a, b], 0.1), &axis_ray());
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].depth, hits[1].depth);
    }

    #[test]
    fn depths_match_projection_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let prims: Vec<GaussianPrimitive> = (0..40)
            .map(|_| {
                GaussianPrimitive::new(
                    Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(1.0..9.0)),
                    Vector3::new(rng.random_range(0.3..1.5), rng.random_range(0.3..1.5), rng.random_range(0.3..1.5)),
                    Vector4::from(IDENTITY_ROTATION),
                    rng.random_range(0.1..0.9),
                    Vector3::repeat(0.5),
                )
            })
            .collect();
        let scene = Scene::new(prims, 0.1);
        let ray = Ray::new(Vector3::new(0.1, -0.2, -1.0), Vector3::new(0.05, 0.02, 1.0));
        let hits = per_ray_depths(&scene, &ray);
        assert!(hits.len() > 3);
        for h in &hits {
            let c = scene.primitives[h.index].center - ray.origin;
            let expect = c.x * ray.direction.x + c.y * ray.direction.y + c.z * ray.direction.z;
            assert!((h.depth - expect).abs() < 1e-12);
        }
        assert!(hits.windows(2).all(|w| w[0].depth <= w[1].depth));
    }

    #[test]
    fn cost_model_reproduces_reference_figures() {
        let m = cost_model(1_000_000, 128, 50, 100_000, 50);
        assert_eq!(m.ray_operations, 6.4e9);
        assert_eq!(m.neighborhood_operations, 5e6);
        assert_eq!(m.ratio, 1280.0);
    }
}
