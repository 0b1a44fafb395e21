//! Frozen k-NN topology, surface redundancy (SNRI), neighborhood opacity
//! entropy and the adaptive entropy ceiling.

use serde::{Deserialize, Serialize};

use crate::error::{GefError, Result};
use crate::primitive::{principal_normal, Scene};

/// `0.5 * ln(2 pi e)`.
pub const GAUSSIAN_ENTROPY_UNIT: f64 = 1.418_938_533_204_672_7;

pub const DEFAULT_K: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborGraph {
    pub k: usize,
    pub neighbor_indices: Vec<Vec<usize>>,
    pub built_at_iteration: usize,
    pub frozen: bool,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.neighbor_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_indices.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbor_indices[i]
    }

    /// The center followed by its neighbors.
    pub fn members(&self, i: usize) -> impl Iterator<Item = usize> + Clone + '_ {
        std::iter::once(i).chain(self.neighbor_indices[i].iter().copied())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Rebuilds the topology unless frozen. Returns whether it changed.
    pub fn rebuild(&mut self, scene: &Scene, iteration: usize) -> Result<bool> {
        if self.frozen {
            return Ok(false);
        }
        let fresh = build_knn(scene, self.k)?;
        let changed = fresh.neighbor_indices != self.neighbor_indices;
        self.neighbor_indices = fresh.neighbor_indices;
        self.built_at_iteration = iteration;
        Ok(changed)
    }

    pub(crate) fn check_scene(&self, scene: &Scene) -> Result<()> {
        if self.len() != scene.len() {
            return Err(GefError::Dimension(format!(
                "graph has {} nodes but scene has {} primitives",
                self.len(),
                scene.len()
            )));
        }
        Ok(())
    }
}

/// Brute-force k nearest neighbors by Euclidean center distance, ties going
/// to the lower index.
pub fn build_knn(scene: &Scene, k: usize) -> Result<NeighborGraph> {
    let n = scene.len();
    if k == 0 {
        return Err(GefError::param("k", "must be positive"));
    }
    if n <= k {
        return Err(GefError::SceneTooSmall { have: n, need: k + 1 });
    }
    let centers = scene.centers();
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    let neighbor_indices = (0..n)
        .map(|i| {
            scratch.clear();
            let c = centers[i];
            scratch.extend(
                centers
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(j, p)| ((p - c).norm_squared(), j)),
            );
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < scratch.len() {
                scratch.select_nth_unstable_by(k - 1, cmp);
                scratch.truncate(k);
            }
            scratch.sort_unstable_by(cmp);
            scratch.iter().map(|&(_, j)| j).collect()
        })
        .collect();
    Ok(NeighborGraph {
        k,
        neighbor_indices,
        built_at_iteration: 0,
        frozen: false,
    })
}

/// Mean of `exp(-decay * max(0, eps - d_j))` over the neighbors, where `d_j`
/// is the offset of neighbor `j` along primitive `i`'s normal.
pub fn snri(scene: &Scene, graph: &NeighborGraph, i: usize) -> f64 {
    let p = &scene.primitives[i];
    let n = principal_normal(p).direction;
    let eps = scene.epsilon_tangent;
    let nbrs = graph.neighbors(i);
    let sum: f64 = nbrs
        .iter()
        .map(|&j| {
            let d = n.dot(&(scene.primitives[j].center - p.center)).abs();
            (-scene.decay_rate * (eps - d).max(0.0)).exp()
        })
        .sum();
    sum / nbrs.len() as f64
}

pub fn snri_all(scene: &Scene, graph: &NeighborGraph) -> Vec<f64> {
    (0..scene.len()).map(|i| snri(scene, graph, i)).collect()
}

/// Shannon entropy (nats) of the opacities in `members`, normalized to sum 1.
pub fn opacity_entropy(opacities: &[f64], members: impl IntoIterator<Item = usize> + Clone) -> Option<f64> {
    let total: f64 = members.clone().into_iter().map(|j| opacities[j]).sum();
    if !(total > 1e-12) {
        return None;
    }
    let h = members
        .into_iter()
        .map(|j| {
            let p = opacities[j] / total;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>();
    Some(h.max(0.0))
}

pub fn neighborhood_entropy(scene: &Scene, graph: &NeighborGraph, i: usize) -> Result<f64> {
    opacity_entropy(&scene.opacities(), graph.members(i)).ok_or(GefError::EmptyNeighborhood { index: i })
}

pub fn neighborhood_entropies(opacities: &[f64], graph: &NeighborGraph) -> Result<Vec<f64>> {
    (0..graph.len())
        .map(|i| opacity_entropy(opacities, graph.members(i)).ok_or(GefError::EmptyNeighborhood { index: i }))
        .collect()
}

/// Entropy of neighborhood `i` and its partial derivatives with respect to
/// each member opacity, in the order of [`NeighborGraph::members`].
pub fn neighborhood_entropy_grad(
    opacities: &[f64],
    graph: &NeighborGraph,
    i: usize,
) -> Result<(f64, Vec<f64>)> {
    let total: f64 = graph.members(i).map(|j| opacities[j]).sum();
    let h = opacity_entropy(opacities, graph.members(i)).ok_or(GefError::EmptyNeighborhood { index: i })?;
    let grad = graph
        .members(i)
        .map(|j| {
            let p = opacities[j] / total;
            // a member with exactly zero opacity has an unbounded derivative;
            // the logit clamp keeps stored opacities strictly positive
            -(p.max(f64::MIN_POSITIVE).ln() + h) / total
        })
        .collect();
    Ok((h, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdParams {
    pub epsilon_stability: f64,
    /// SNRI coupling; `None` means `-sigma_min^2`.
    pub coupling_beta: Option<f64>,
    pub eta_floor: f64,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self {
            epsilon_stability: 0.01,
            coupling_beta: None,
            eta_floor: 0.0,
        }
    }
}

impl ThresholdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_stability > 0.0) {
            return Err(GefError::param("epsilon_stability", "must be positive"));
        }
        Ok(())
    }

    pub fn beta(&self, sigma_min: f64) -> f64 {
        self.coupling_beta.unwrap_or(-sigma_min * sigma_min)
    }

    pub fn threshold(&self, sigma_min: f64, snri: f64) -> f64 {
        let base = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma_min * sigma_min).ln();
        (base + self.epsilon_stability + self.beta(sigma_min) * snri).max(self.eta_floor)
    }
}

pub fn adaptive_threshold(scene: &Scene, graph: &NeighborGraph, params: &ThresholdParams, i: usize) -> f64 {
    params.threshold(scene.sigma_min, snri(scene, graph, i))
}

/// Per-primitive SNRI, entropy and threshold, as dumped by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NeighborhoodStats {
    pub index: usize,
    pub snri: f64,
    pub entropy: f64,
    pub threshold: f64,
}

pub fn neighborhood_stats(
    scene: &Scene,
    graph: &NeighborGraph,
    params: &ThresholdParams,
) -> Result<Vec<NeighborhoodStats>> {
    graph.check_scene(scene)?;
    let opacities = scene.opacities();
    (0..scene.len())
        .map(|i| {
            let s = snri(scene, graph, i);
            Ok(NeighborhoodStats {
                index: i,
                snri: s,
                entropy: opacity_entropy(&opacities, graph.members(i))
                    .ok_or(GefError::EmptyNeighborhood { index: i })?,
                threshold: params.threshold(scene.sigma_min, s),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitive::{axis_angle, GaussianPrimitive, IDENTITY_ROTATION};
    use approx::assert_relative_eq;
    use nalgebra::{UnitQuaternion, Vector3, Vector4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disk(center: Vector3<f64>) -> GaussianPrimitive {
        GaussianPrimitive::new(
            center,
            Vector3::new(2.0, 2.0, 1.0),
            Vector4::from(IDENTITY_ROTATION),
            0.5,
            Vector3::repeat(0.5),
        )
    }

    fn points(xs: &[[f64; 3]]) -> Scene {
        Scene::new(xs.iter().map(|p| disk(Vector3::from(*p))).collect(), 1.0)
    }

    #[test]
    fn knn_collinear() {
        let g = build_knn(&points(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]), 1).unwrap();
        assert_eq!(g.neighbor_indices, vec![vec![1], vec![0], vec![1]]);
        assert!(!g.frozen);
    }

    #[test]
    fn knn_unit_square() {
        let s = points(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        let g = build_knn(&s, 2).unwrap();
        assert_eq!(g.neighbor_indices, vec![vec![1, 3], vec![0, 2], vec![1, 3], vec![0, 2]]);
    }

    #[test]
    fn knn_rejects_small_scene() {
        let s = points(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(matches!(build_knn(&s, 2), Err(GefError::SceneTooSmall { have: 2, need: 3 })));
    }

    #[test]
    fn knn_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let s = points(&pts);
        let g = build_knn(&s, 10).unwrap();
        for i in 0..200 {
            let mut all: Vec<(f64, usize)> = (0..200)
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = (0..3).map(|a| (pts[i][a] - pts[j][a]).powi(2)).sum();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all[..10].iter().map(|x| x.1).collect();
            assert_eq!(g.neighbors(i), &want[..]);
            assert!(!g.neighbors(i).contains(&i));
        }
    }

    fn star(offsets: &[f64]) -> (Scene, NeighborGraph) {
        // primitive 0 at the origin with +z normal; neighbors on a ring
        let n = offsets.len();
        let mut prims = vec![disk(Vector3::zeros())];
        for (k, &dz) in offsets.iter().enumerate() {
            let a = k as f64 / n as f64 * std::f64::consts::TAU;
            prims.push(disk(Vector3::new(a.cos(), a.sin(), dz)));
        }
        let scene = Scene::new(prims, 1.0).with_decay(1.0);
        let g = NeighborGraph {
            k: n,
            neighbor_indices: (0..=n)
                .map(|i| (0..=n).filter(|&j| j != i).take(n).collect())
                .collect(),
            built_at_iteration: 0,
            frozen: true,
        };
        (scene, g)
    }

    #[test]
    fn snri_closed_forms() {
        let (s, g) = star(&[0.5, 0.7, -0.6, 1.0]);
        assert_eq!(snri(&s, &g, 0), 1.0);
        let (s, g) = star(&[0.0; 6]);
        assert_relative_eq!(snri(&s, &g, 0), (-0.5f64).exp(), epsilon = 1e-15);
        let (s, g) = star(&[0.0, 0.5, 0.0, -0.5]);
        assert_relative_eq!(snri(&s, &g, 0), (1.0 + (-0.5f64).exp()) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn entropy_examples() {
        let g = NeighborGraph {
            k: 7,
            neighbor_indices: vec![(1..8).collect()],
            built_at_iteration: 0,
            frozen: false,
        };
        let uniform = vec![0.3; 8];
        assert_relative_eq!(opacity_entropy(&uniform, g.members(0)).unwrap(), 8f64.ln(), epsilon = 1e-14);
        let mut spike = vec![1e-15; 8];
        spike[3] = 1.0;
        assert!(opacity_entropy(&spike, g.members(0)).unwrap() < 1e-12);
        assert!(opacity_entropy(&[0.0; 8], g.members(0)).is_none());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ops: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let total: f64 = ops.iter().sum();
        let oracle: f64 = ops.iter().map(|a| -(a / total) * (a / total).ln()).sum();
        assert_relative_eq!(opacity_entropy(&ops, g.members(0)).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = NeighborGraph {
            k: 5,
            neighbor_indices: vec![vec![1, 2, 3, 4, 5]],
            built_at_iteration: 0,
            frozen: false,
        };
        let ops: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..1.0)).collect();
        let (_, grad) = neighborhood_entropy_grad(&ops, &g, 0).unwrap();
        let h = 1e-6;
        for j in 0..6 {
            let mut a = ops.clone();
            let mut b = ops.clone();
            a[j] += h;
            b[j] -= h;
            let fd = (opacity_entropy(&a, g.members(0)).unwrap() - opacity_entropy(&b, g.members(0)).unwrap()) / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-8, "{j}: {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn threshold_examples() {
        let p = ThresholdParams::default();
        assert_relative_eq!(p.threshold(1.0, 0.0), GAUSSIAN_ENTROPY_UNIT + 0.01, epsilon = 1e-12);
        assert_relative_eq!(p.threshold(1.0, 0.0), 1.42894, epsilon = 1e-5);
        assert_relative_eq!(p.threshold(1.0, 1.0), 0.42894, epsilon = 1e-5);
        assert_eq!(p.threshold(0.1, 0.0), 0.0);
        let raw = GAUSSIAN_ENTROPY_UNIT + (0.1f64).ln() + 0.01;
        assert!((raw - (-0.873_647)).abs() < 1e-6 && raw < 0.0);
        assert!(ThresholdParams { epsilon_stability: 0.0, ..p }.validate().is_err());
    }

    #[test]
    fn frozen_graph_does_not_rebuild() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f64; 3]> = (0..20).map(|_| [rng.random(), rng.random(), 0.0]).collect();
        let mut s = points(&pts);
        let mut g = build_knn(&s, 4).unwrap();
        let before = g.neighbor_indices.clone();
        g.freeze();
        s.primitives.reverse();
        assert!(!g.rebuild(&s, 10).unwrap());
        assert_eq!(g.neighbor_indices, before);
    }

    proptest! {
        #[test]
        fn snri_monotone_in_offsets(
            base in prop::collection::vec(0.0f64..1.0, 6),
            bump in 0usize..6,
            delta in 0.0f64..0.5,
        ) {
            let (s, g) = star(&base);
            let mut raised = base.clone();
            raised[bump] += delta;
            let (s2, g2) = star(&raised);
            let a = snri(&s, &g, 0);
            let b = snri(&s2, &g2, 0);
            prop_assert!(b >= a - 1e-15);
            prop_assert!(a > 0.0 && a <= 1.0);
            let all_far = base.iter().all(|&d| d >= 0.5);
            prop_assert_eq!(a == 1.0, all_far);
        }

        #[test]
        fn snri_rigid_invariant(
            offsets in prop::collection::vec(-1.0f64..1.0, 5),
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in 0.0f64..3.0,
            shift in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let ax = Vector3::from(axis);
            prop_assume!(ax.norm() > 0.1);
            let (s, g) = star(&offsets);
            let q = axis_angle(ax, angle);
            let rot = crate::primitive::rotation_matrix(&q);
            let mut moved = s.clone();
            for p in &mut moved.primitives {
                p.center = rot * p.center + Vector3::from(shift);
                let r = rot * p.rotation_matrix();
                let c = UnitQuaternion::from_matrix(&r);
                p.rotation = Vector4::new(c.w, c.i, c.j, c.k);
            }
            prop_assert!((snri(&s, &g, 0) - snri(&moved, &g, 0)).abs() < 1e-9);
        }

        #[test]
        fn entropy_scale_and_permutation_invariant(
            ops in prop::collection::vec(0.01f64..1.0, 8),
            scale in 0.01f64..100.0,
            rot in 0usize..8,
        ) {
            let g = NeighborGraph { k: 7, neighbor_indices: vec![(1..8).collect()], built_at_iteration: 0, frozen: false };
            let h = opacity_entropy(&ops, g.members(0)).unwrap();
            let scaled: Vec<f64> = ops.iter().map(|a| a * scale).collect();
            prop_assert!((h - opacity_entropy(&scaled, g.members(0)).unwrap()).abs() < 1e-12);
            let mut perm = ops.clone();
            perm.rotate_left(rot);
            prop_assert!((h - opacity_entropy(&perm, g.members(0)).unwrap()).abs() < 1e-12);
            prop_assert!(h >= 0.0 && h <= 8f64.ln() + 1e-12);
        }

        #[test]
        fn threshold_nonincreasing_in_snri(
            sigma in 0.05f64..3.0,
            beta in -4.0f64..0.0,
            eps in 1e-4f64..0.1,
            floor in -1.0f64..1.0,
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let p = ThresholdParams { epsilon_stability: eps, coupling_beta: Some(beta), eta_floor: floor };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(p.threshold(sigma, hi) <= p.threshold(sigma, lo));
        }
    }
}
