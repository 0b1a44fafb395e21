//! Fixtures shared by the criterion benches.

use gef_core::bench::{bench_rays, bench_scene, BenchParams};
use gef_core::neighborhood::{build_knn, NeighborGraph};
use gef_core::primitive::Scene;
use gef_core::ray_oracle::Ray;

pub struct Fixture {
    pub params: BenchParams,
    pub scene: Scene,
    pub graph: NeighborGraph,
    pub rays: Vec<Ray>,
}

/// Plane scene of `primitives` with a prebuilt k-NN graph and `rays` vertical rays.
pub fn fixture(primitives: usize, rays: usize, samples: usize, k: usize) -> Fixture {
    let params = BenchParams {
        primitives,
        rays,
        samples,
        k,
        ..BenchParams::default()
    };
    let scene = bench_scene(&params).expect("bench scene");
    let graph = build_knn(&scene, k).expect("k-NN graph");
    let rays = bench_rays(&scene, rays);
    Fixture {
        params,
        scene,
        graph,
        rays,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shapes() {
        let f = fixture(200, 10, 32, 8);
        assert_eq!(f.scene.len(), 200);
        assert_eq!(f.graph.len(), 200);
        assert_eq!(f.rays.len(), 10);
    }
}
