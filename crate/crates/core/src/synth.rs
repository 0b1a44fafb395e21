//! Synthetic scenes with known surfaces, test images, sensor noise and
//! geometric error metrics.

use nalgebra::{UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GefError, Result};
use crate::image_entropy::GrayImage;
use crate::primitive::{GaussianPrimitive, Scene, IDENTITY_ROTATION};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    Plane { point: Vector3<f64>, normal: Vector3<f64> },
    Sphere { center: Vector3<f64>, radius: f64 },
}

impl Surface {
    /// Unsigned perpendicular distance from `p`.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Surface::Plane { point, normal } => normal.normalize().dot(&(p - point)).abs(),
            Surface::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
        }
    }

    /// Closest point on the surface.
    pub fn project(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Surface::Plane { point, normal } => {
                let n = normal.normalize();
                p - n * n.dot(&(p - point))
            }
            Surface::Sphere { center, radius } => {
                let v = p - center;
                let len = v.norm();
                if len < 1e-12 {
                    center + Vector3::z() * *radius
                } else {
                    center + v * (*radius / len)
                }
            }
        }
    }

    pub fn normal_at(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Surface::Plane { normal, .. } => normal.normalize(),
            Surface::Sphere { center, .. } => {
                let v = p - center;
                if v.norm() < 1e-12 {
                    Vector3::z()
                } else {
                    v.normalize()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub scene: Scene,
    pub ground_truth: Surface,
    pub seed: u64,
}

/// Sampling density and primitive shape for surface generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurfaceSampling {
    /// Mean spacing between neighboring samples.
    pub spacing: f64,
    /// In-plane standard deviation of each primitive.
    pub tangent_scale: f64,
    /// Scale floor; also the primitives' thickness along the normal.
    pub sigma_min: f64,
}

impl Default for SurfaceSampling {
    fn default() -> Self {
        Self {
            spacing: 1.5,
            tangent_scale: 1.5,
            sigma_min: 1.0,
        }
    }
}

impl SurfaceSampling {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("spacing", self.spacing),
            ("tangent_scale", self.tangent_scale),
            ("sigma_min", self.sigma_min),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GefError::param("sampling", format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Smooth color pattern over the surface so views carry parallax cues.
pub fn surface_color(p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 + 0.35 * (0.7 * p.x + 0.3 * p.z).sin(),
        0.5 + 0.35 * (0.6 * p.y + 1.0).sin(),
        0.5 + 0.3 * (0.5 * (p.x + p.y) - 0.4 * p.z).cos(),
    )
}

fn oriented_to(n: &Vector3<f64>) -> Vector4<f64> {
    let q = UnitQuaternion::rotation_between(&Vector3::z(), n)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
    Vector4::new(q.w, q.i, q.j, q.k)
}

fn check_n(n: usize, min: usize) -> Result<()> {
    if n < min {
        return Err(GefError::param("n", format!("need at least {min} primitives, got {n}")));
    }
    Ok(())
}

/// `n` flat primitives stacked along +z, `spacing` apart, with small lateral
/// jitter. Every neighbor offset along the shared normal is a multiple of
/// `spacing`, which must be at least the scene's tangent tolerance.
pub fn make_stacked_scene(n: usize, spacing: f64, seed: u64) -> Result<SyntheticScene> {
    check_n(n, 3)?;
    let sigma_min = 0.1;
    if !(spacing >= 0.5 * sigma_min) {
        return Err(GefError::param(
            "spacing",
            format!("{spacing} is below the tangent tolerance {}", 0.5 * sigma_min),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = (0..n)
        .map(|i| {
            let c = Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), i as f64 * spacing);
            GaussianPrimitive::new(
                c,
                Vector3::new(0.5, 0.5, sigma_min),
                Vector4::from(IDENTITY_ROTATION),
                rng.random_range(0.3..0.7),
                surface_color(&c),
            )
        })
        .collect();
    Ok(SyntheticScene {
        scene: Scene::new(prims, sigma_min),
        ground_truth: Surface::Plane {
            point: Vector3::zeros(),
            normal: Vector3::z(),
        },
        seed,
    })
}

/// `n` flat primitives jittered within the plane `z = 0`, all sharing its
/// normal.
pub fn make_tangential_scene(n: usize, seed: u64) -> Result<SyntheticScene> {
    check_n(n, 3)?;
    let sigma_min = 0.1;
    let half = 0.25 * (n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = (0..n)
        .map(|_| {
            let c = Vector3::new(rng.random_range(-half..half), rng.random_range(-half..half), 0.0);
            GaussianPrimitive::new(
                c,
                Vector3::new(0.5, 0.5, sigma_min),
                Vector4::from(IDENTITY_ROTATION),
                rng.random_range(0.3..0.7),
                surface_color(&c),
            )
        })
        .collect();
    Ok(SyntheticScene {
        scene: Scene::new(prims, sigma_min),
        ground_truth: Surface::Plane {
            point: Vector3::zeros(),
            normal: Vector3::z(),
        },
        seed,
    })
}

fn surface_primitive(
    on_surface: Vector3<f64>,
    normal: Vector3<f64>,
    offset: f64,
    sampling: &SurfaceSampling,
    rng: &mut ChaCha8Rng,
) -> GaussianPrimitive {
    GaussianPrimitive::new(
        on_surface + normal * offset,
        Vector3::new(sampling.tangent_scale, sampling.tangent_scale, sampling.sigma_min),
        oriented_to(&normal),
        rng.random_range(0.3..0.7),
        surface_color(&on_surface),
    )
}

/// Plane `z = 0` sampled uniformly over a square of side
/// `spacing * sqrt(n)`, each sample offset along the normal by
/// `N(0, noise_sigma^2)`.
pub fn make_noisy_plane_with(n: usize, noise_sigma: f64, seed: u64, sampling: &SurfaceSampling) -> Result<SyntheticScene> {
    check_n(n, 50)?;
    sampling.validate()?;
    if !(noise_sigma >= 0.0) {
        return Err(GefError::param("noise_sigma", format!("{noise_sigma} must be nonnegative")));
    }
    let half = 0.5 * sampling.spacing * (n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = (0..n)
        .map(|_| {
            let p = Vector3::new(rng.random_range(-half..half), rng.random_range(-half..half), 0.0);
            let z: f64 = StandardNormal.sample(&mut rng);
            surface_primitive(p, Vector3::z(), noise_sigma * z, sampling, &mut rng)
        })
        .collect();
    Ok(SyntheticScene {
        scene: Scene::new(prims, sampling.sigma_min),
        ground_truth: Surface::Plane {
            point: Vector3::zeros(),
            normal: Vector3::z(),
        },
        seed,
    })
}

pub fn make_noisy_plane(n: usize, noise_sigma: f64, seed: u64) -> Result<SyntheticScene> {
    make_noisy_plane_with(n, noise_sigma, seed, &SurfaceSampling::default())
}

/// Sphere about the origin sampled uniformly in area, each sample offset
/// along the radial normal by `N(0, noise_sigma^2)`.
pub fn make_sphere_with(
    n: usize,
    radius: f64,
    noise_sigma: f64,
    seed: u64,
    sampling: &SurfaceSampling,
) -> Result<SyntheticScene> {
    check_n(n, 50)?;
    sampling.validate()?;
    if !(radius > 0.0) || !(noise_sigma >= 0.0) {
        return Err(GefError::param(
            "radius",
            format!("need radius > 0 and noise >= 0, got {radius} and {noise_sigma}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = (0..n)
        .map(|_| {
            let v = loop {
                let v = Vector3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                );
                if v.norm() > 1e-9 {
                    break v.normalize();
                }
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            surface_primitive(v * radius, v, noise_sigma * z, sampling, &mut rng)
        })
        .collect();
    Ok(SyntheticScene {
        scene: Scene::new(prims, sampling.sigma_min),
        ground_truth: Surface::Sphere {
            center: Vector3::zeros(),
            radius,
        },
        seed,
    })
}

pub fn make_sphere(n: usize, radius: f64, noise_sigma: f64, seed: u64) -> Result<SyntheticScene> {
    make_sphere_with(n, radius, noise_sigma, seed, &SurfaceSampling::default())
}

/// Copy of `scene` with every center snapped onto `surface`, oriented along
/// its normal and set to `opacity`. Renders of it serve as clean targets.
pub fn clean_reference(scene: &Scene, surface: &Surface, opacity: f64) -> Scene {
    let mut out = scene.clone();
    for p in &mut out.primitives {
        p.center = surface.project(&p.center);
        p.rotation = oriented_to(&surface.normal_at(&p.center));
        p.color = surface_color(&p.center);
        p.set_opacity(opacity);
    }
    out
}

/// Left half: shallow diagonal ramp. Right half: checkerboard of 2x2-pixel
/// cells in 0/255.
pub fn make_composite_image(width: usize, height: usize) -> Result<GrayImage> {
    if width < 64 || height < 64 {
        return Err(GefError::param(
            "composite",
            format!("dimensions must be at least 64, got {width}x{height}"),
        ));
    }
    let mid = width / 2;
    Ok(GrayImage::from_fn(width, height, |x, y| {
        if x < mid {
            (40 + (x + y) / 3).min(255) as u8
        } else if ((x / 2) + (y / 2)) % 2 == 0 {
            0
        } else {
            255
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePresetName {
    Light,
    Medium,
    Heavy,
    RealisticSensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePreset {
    pub name: String,
    pub shot_scale: f64,
    pub gaussian_std: f64,
    pub dark_intensity: f64,
    pub impulse_prob: f64,
}

impl NoisePreset {
    pub fn preset(name: NoisePresetName) -> Self {
        let (label, shot, std, dark, imp) = match name {
            NoisePresetName::Light => ("light", 0.5, 5.0, 2.0, 0.002),
            NoisePresetName::Medium => ("medium", 1.0, 10.0, 4.0, 0.005),
            NoisePresetName::Heavy => ("heavy", 2.0, 25.0, 10.0, 0.02),
            NoisePresetName::RealisticSensor => ("realistic_sensor", 1.3, 12.0, 6.0, 0.008),
        };
        Self {
            name: label.into(),
            shot_scale: shot,
            gaussian_std: std,
            dark_intensity: dark,
            impulse_prob: imp,
        }
    }

    pub fn zero() -> Self {
        Self {
            name: "none".into(),
            shot_scale: 0.0,
            gaussian_std: 0.0,
            dark_intensity: 0.0,
            impulse_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.shot_scale, self.gaussian_std, self.dark_intensity]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
            && (0.0..=1.0).contains(&self.impulse_prob);
        if ok {
            Ok(())
        } else {
            Err(GefError::param("noise preset", format!("invalid parameters in `{}`", self.name)))
        }
    }
}

/// Shot, Gaussian, dark-current and impulse noise, in that order, clamped
/// to 8 bits.
///
/// Shot noise is `N(0, (shot_scale * sqrt(v))^2)`; dark current adds a
/// half-normal offset of scale `dark_intensity`; impulses set a pixel to 0
/// or 255 with equal odds.
pub fn add_sensor_noise(image: &GrayImage, preset: &NoisePreset, seed: u64) -> Result<GrayImage> {
    preset.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = image
        .pixels
        .iter()
        .map(|&p| {
            let mut v = p as f64;
            let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
            let (a, b, c) = (normal(), normal(), normal());
            v += preset.shot_scale * v.sqrt() * a;
            v += preset.gaussian_std * b;
            v += preset.dark_intensity * c.abs();
            let impulse: f64 = rng.random();
            let salt: bool = rng.random();
            if impulse < preset.impulse_prob {
                v = if salt { 255.0 } else { 0.0 };
            }
            v.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage::new(image.width, image.height, pixels)
}

/// RMS perpendicular distance to `surface` of primitives with opacity at
/// least `threshold`.
pub fn surface_rms(scene: &Scene, surface: &Surface, threshold: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(GefError::param("threshold", format!("{threshold} is outside [0, 1]")));
    }
    let d: Vec<f64> = scene
        .primitives
        .iter()
        .filter(|p| p.opacity() >= threshold)
        .map(|p| surface.distance(&p.center))
        .collect();
    if d.is_empty() {
        return Err(GefError::NoDominantPrimitives { threshold });
    }
    Ok((d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64).sqrt())
}

fn mean_nearest(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter()
        .map(|p| b.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
        .sum::<f64>()
        / a.len() as f64
}

/// Average of the two directed mean nearest-neighbor distances.
pub fn chamfer_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(GefError::param("points", "chamfer distance needs non-empty point sets"));
    }
    Ok(0.5 * (mean_nearest(a, b) + mean_nearest(b, a)))
}
