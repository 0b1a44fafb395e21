//! Wall-clock comparison of the two entropy paths on a generated plane.

use std::time::Instant;

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::{GefError, Result};
use crate::neighborhood::{build_knn, neighborhood_entropies};
use crate::primitive::Scene;
use crate::ray_oracle::{cost_model, ray_entropy, CostModel, Ray};
use crate::synth::make_noisy_plane;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchParams {
    pub primitives: usize,
    pub rays: usize,
    pub samples: usize,
    pub k: usize,
    pub gaussians_per_sample: usize,
    pub seed: u64,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            primitives: 20_000,
            rays: 10_000,
            samples: 128,
            k: 50,
            gaussians_per_sample: 50,
            seed: 0,
        }
    }
}

impl BenchParams {
    pub fn model(&self) -> CostModel {
        cost_model(
            self.rays as u64,
            self.samples as u64,
            self.gaussians_per_sample as u64,
            self.primitives as u64,
            self.k as u64,
        )
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("primitives", self.primitives),
            ("rays", self.rays),
            ("samples", self.samples),
            ("k", self.k),
            ("gaussians_per_sample", self.gaussians_per_sample),
        ] {
            if v == 0 {
                return Err(GefError::param(name, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Deterministic part of a measurement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchCounts {
    pub rays_evaluated: usize,
    pub empty_rays: usize,
    pub mean_ray_entropy: f64,
    pub mean_neighborhood_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchTiming {
    pub ray_seconds: f64,
    pub neighborhood_seconds: f64,
    /// k-NN construction, reported apart: the cost model counts entropy terms only.
    pub knn_seconds: f64,
    pub measured_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub params: BenchParams,
    pub model: CostModel,
    pub counts: Option<BenchCounts>,
    pub timing: Option<BenchTiming>,
}

/// Vertical rays on a `ceil(sqrt(R))` grid over the generated plane, first `R` taken.
pub fn bench_rays(scene: &Scene, n_rays: usize) -> Vec<Ray> {
    let half = scene
        .primitives
        .iter()
        .map(|p| p.center.x.abs().max(p.center.y.abs()))
        .fold(0.0, f64::max);
    let side = (n_rays as f64).sqrt().ceil() as usize;
    let step = 2.0 * half / side as f64;
    (0..n_rays)
        .map(|i| {
            let (ix, iy) = (i % side, i / side);
            let x = -half + (ix as f64 + 0.5) * step;
            let y = -half + (iy as f64 + 0.5) * step;
            Ray::new(Vector3::new(x, y, 20.0), -Vector3::z())
        })
        .collect()
}

pub fn bench_scene(p: &BenchParams) -> Result<Scene> {
    Ok(make_noisy_plane(p.primitives, 0.1, p.seed)?.scene)
}

/// Times ray-oracle entropy over `R` rays against neighborhood entropy over
/// all `P` primitives.
pub fn measure_entropy_paths(p: &BenchParams) -> Result<BenchReport> {
    p.validate()?;
    let scene = bench_scene(p)?;
    let rays = bench_rays(&scene, p.rays);

    let t0 = Instant::now();
    let graph = build_knn(&scene, p.k)?;
    let knn_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let h = neighborhood_entropies(&scene.opacities(), &graph)?;
    let neighborhood_seconds = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let (mut sum, mut used, mut empty) = (0.0, 0usize, 0usize);
    for ray in &rays {
        match ray_entropy(&scene, ray, p.samples) {
            Ok(v) => {
                sum += v;
                used += 1;
            }
            Err(GefError::EmptyRay { .. }) => empty += 1,
            Err(e) => return Err(e),
        }
    }
    let ray_seconds = t2.elapsed().as_secs_f64();

    Ok(BenchReport {
        params: *p,
        model: p.model(),
        counts: Some(BenchCounts {
            rays_evaluated: used,
            empty_rays: empty,
            mean_ray_entropy: if used > 0 { sum / used as f64 } else { 0.0 },
            mean_neighborhood_entropy: h.iter().sum::<f64>() / h.len() as f64,
        }),
        timing: Some(BenchTiming {
            ray_seconds,
            neighborhood_seconds,
            knn_seconds,
            measured_ratio: ray_seconds / neighborhood_seconds.max(1e-9),
        }),
    })
}

/// Cost model only, no scene is generated.
pub fn model_report(p: &BenchParams) -> Result<BenchReport> {
    p.validate()?;
    Ok(BenchReport {
        params: *p,
        model: p.model(),
        counts: None,
        timing: None,
    })
}
