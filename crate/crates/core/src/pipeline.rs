//! Complete optimization runs described by a JSON [`RunConfig`].

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{GefError, Result};
use crate::image_entropy::{DEFAULT_LEVELS, DEFAULT_TEMPERATURE, MAX_LEVELS};
use crate::io::{parse_json_config, read_point_cloud, read_text, smallest_scale, to_json_pretty, write_file, write_point_cloud, JsonLines};
use crate::losses::{evaluate, EntropyContext, LossBreakdown, LossConfig, TermSet, View};
use crate::neighborhood::{
    build_knn, neighborhood_entropies, neighborhood_stats, NeighborGraph, NeighborhoodStats, ThresholdParams, DEFAULT_K,
};
use crate::optimizer::{step, LearningRates, MonitorRow, OptimizerConfig, OptimizerState, Schedule};
use crate::primitive::{Camera, GaussianPrimitive, Scene};
use crate::render::{render, trace, Prepared};
use crate::synth::{
    clean_reference, make_noisy_plane_with, make_sphere_with, make_stacked_scene, make_tangential_scene, surface_rms,
    Surface, SurfaceSampling,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    NoisyPlane,
    Sphere,
    Stacked,
    Tangential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub generator: Generator,
    pub n: usize,
    pub noise_sigma: f64,
    pub radius: f64,
    pub spacing: f64,
    pub tangent_scale: f64,
    /// Point-cloud CSV to load instead of generating; its targets are renders
    /// of the loaded scene itself.
    pub input: Option<PathBuf>,
    pub ground_truth: Option<Surface>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            generator: Generator::NoisyPlane,
            n: 500,
            noise_sigma: 0.1,
            radius: 10.0,
            spacing: 1.5,
            tangent_scale: 1.5,
            input: None,
            ground_truth: None,
        }
    }
}

/// Cameras placed around the scene's ground-truth surface center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewConfig {
    pub resolution: usize,
    /// Camera distance as a multiple of the scene extent.
    pub distance_factor: f64,
    /// Fraction of the image width the scene extent spans.
    pub fill: f64,
    /// Angle of each camera from the surface normal, degrees.
    pub tilts_deg: Vec<f64>,
    pub azimuths_deg: Vec<f64>,
    /// Opacity of the clean reference primitives rendered as targets.
    pub target_opacity: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            distance_factor: 2.0,
            fill: 0.9,
            tilts_deg: vec![0.0, 30.0],
            azimuths_deg: vec![0.0, 90.0],
            target_opacity: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    pub levels: usize,
    pub temperature: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LEVELS,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeighborhoodConfig {
    pub k: usize,
    pub sigma_min: f64,
    /// Tangent tolerance; `None` means `0.5 * sigma_min`.
    pub epsilon: Option<f64>,
    /// SNRI decay; `None` means `1 / sigma_min^2`.
    pub decay: Option<f64>,
    pub epsilon_stability: f64,
    pub coupling_beta: Option<f64>,
    pub eta_floor: f64,
}

impl Default for NeighborhoodConfig {
    fn default() -> Self {
        let t = ThresholdParams::default();
        Self {
            k: DEFAULT_K,
            sigma_min: 1.0,
            epsilon: None,
            decay: None,
            epsilon_stability: t.epsilon_stability,
            coupling_beta: t.coupling_beta,
            eta_floor: t.eta_floor,
        }
    }
}

impl NeighborhoodConfig {
    pub fn threshold(&self) -> ThresholdParams {
        ThresholdParams {
            epsilon_stability: self.epsilon_stability,
            coupling_beta: self.coupling_beta,
            eta_floor: self.eta_floor,
        }
    }

    fn apply(&self, scene: Scene) -> Scene {
        let mut scene = scene;
        if let Some(e) = self.epsilon {
            scene = scene.with_epsilon(e);
        }
        if let Some(d) = self.decay {
            scene = scene.with_decay(d);
        }
        scene
    }
}

/// SNRI, entropy and threshold of every primitive of a loaded point cloud.
/// `sigma_min` comes from the smallest scale in the cloud; `nb` supplies the
/// tangent tolerance, decay and threshold parameters, `k` the neighborhood size.
pub fn neighborhood_report(prims: Vec<GaussianPrimitive>, k: usize, nb: &NeighborhoodConfig) -> Result<Vec<NeighborhoodStats>> {
    let sigma = smallest_scale(&prims).ok_or(GefError::SceneTooSmall { have: 0, need: 2 })?;
    let scene = nb.apply(Scene::new(prims, sigma));
    let graph = build_knn(&scene, k)?;
    neighborhood_stats(&scene, &graph, &nb.threshold())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSection {
    pub learning_rates: LearningRates,
    pub beta_v: f64,
    pub image_weights: bool,
    /// Metrics are written every this many iterations (and at the last).
    pub log_interval: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        Self {
            learning_rates: o.learning_rates,
            beta_v: o.beta_v,
            image_weights: o.image_weights,
            log_interval: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub views: ViewConfig,
    pub schedule: Schedule,
    pub losses: LossConfig,
    pub optimizer: OptimizerSection,
    pub pyramid: PyramidConfig,
    pub neighborhood: NeighborhoodConfig,
    /// Opacity at or above which a primitive counts as dominant in metrics.
    pub opacity_threshold: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            views: ViewConfig::default(),
            schedule: Schedule::default(),
            losses: LossConfig::default(),
            optimizer: OptimizerSection::default(),
            pyramid: PyramidConfig::default(),
            neighborhood: NeighborhoodConfig::default(),
            opacity_threshold: 0.5,
            seed: 0,
            output_dir: PathBuf::from("gef-run"),
        }
    }
}

impl RunConfig {
    /// Parses a config, returning the paths of unrecognized keys.
    pub fn from_json(text: &str) -> Result<(Self, Vec<String>)> {
        let (cfg, unknown): (RunConfig, _) = parse_json_config(text)?;
        cfg.validate()?;
        Ok((cfg, unknown))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vec<String>)> {
        Self::from_json(&read_text(path)?)
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            schedule: self.schedule.clone(),
            learning_rates: self.optimizer.learning_rates.clone(),
            losses: self.losses.clone(),
            threshold: self.neighborhood.threshold(),
            k: self.neighborhood.k,
            beta_v: self.optimizer.beta_v,
            image_weights: self.optimizer.image_weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |field: &str, message: String| GefError::Config {
            field: field.into(),
            message,
        };
        if self.pyramid.levels == 0 || self.pyramid.levels > MAX_LEVELS {
            return Err(cfg_err("pyramid.levels", format!("must be in 1..={MAX_LEVELS}")));
        }
        if !(self.pyramid.temperature > 0.0) {
            return Err(cfg_err("pyramid.temperature", "must be positive".into()));
        }
        if !(self.neighborhood.sigma_min > 0.0) {
            return Err(cfg_err("neighborhood.sigma_min", "must be positive".into()));
        }
        if self.neighborhood.epsilon.is_some_and(|e| !(e >= 0.0)) || self.neighborhood.decay.is_some_and(|d| !(d >= 0.0)) {
            return Err(cfg_err("neighborhood.epsilon", "epsilon and decay must be nonnegative".into()));
        }
        if self.views.resolution < 8 {
            return Err(cfg_err("views.resolution", "must be at least 8".into()));
        }
        if self.views.tilts_deg.is_empty() || self.views.tilts_deg.len() != self.views.azimuths_deg.len() {
            return Err(cfg_err("views.tilts_deg", "needs one azimuth per tilt and at least one view".into()));
        }
        if !(self.views.distance_factor > 0.0 && self.views.fill > 0.0) {
            return Err(cfg_err("views.distance_factor", "distance_factor and fill must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.views.target_opacity) {
            return Err(cfg_err("views.target_opacity", "must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.opacity_threshold) {
            return Err(cfg_err("opacity_threshold", "must lie in [0, 1]".into()));
        }
        if self.optimizer.log_interval == 0 {
            return Err(cfg_err("optimizer.log_interval", "must be at least 1".into()));
        }
        self.optimizer_config().validate(self.pyramid.levels)
    }
}

/// Initial scene, its ground truth if known, and the supervising views.
#[derive(Debug, Clone)]
pub struct Problem {
    pub scene: Scene,
    pub ground_truth: Option<Surface>,
    pub views: Vec<View>,
}

fn scene_extent(scene: &Scene, center: &Vector3<f64>) -> f64 {
    let r = scene
        .primitives
        .iter()
        .map(|p| (p.center - center).norm() + 3.0 * p.scale().max())
        .fold(0.0, f64::max);
    2.0 * r.max(1e-6)
}

/// Cameras on a ring around `normal` through `center`.
pub fn surface_cameras(center: &Vector3<f64>, normal: &Vector3<f64>, extent: f64, cfg: &ViewConfig) -> Vec<Camera> {
    let n = normal.normalize();
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = n.cross(&helper).normalize();
    let v = n.cross(&u);
    let dist = cfg.distance_factor * extent;
    let focal = cfg.fill * cfg.resolution as f64 * dist / extent;
    cfg.tilts_deg
        .iter()
        .zip(&cfg.azimuths_deg)
        .map(|(&tilt, &az)| {
            let (t, a) = (tilt.to_radians(), az.to_radians());
            let dir = n * t.cos() + (u * a.cos() + v * a.sin()) * t.sin();
            let eye = center + dir * dist;
            let up = if dir.cross(&v).norm() > 1e-6 { v } else { u };
            Camera::look_at(eye, *center, up, focal, cfg.resolution, cfg.resolution)
        })
        .collect()
}

/// Builds the initial scene and its target views.
pub fn build_problem(cfg: &RunConfig) -> Result<Problem> {
    let sc = &cfg.scene;
    let nb = &cfg.neighborhood;
    let sampling = SurfaceSampling {
        spacing: sc.spacing,
        tangent_scale: sc.tangent_scale,
        sigma_min: nb.sigma_min,
    };
    let (scene, gt) = match &sc.input {
        Some(path) => {
            let prims = read_point_cloud(&read_text(path)?)?;
            let floor = smallest_scale(&prims).unwrap_or(nb.sigma_min).min(nb.sigma_min);
            (Scene::new(prims, floor), sc.ground_truth)
        }
        None => {
            let s = match sc.generator {
                Generator::NoisyPlane => make_noisy_plane_with(sc.n, sc.noise_sigma, cfg.seed, &sampling)?,
                Generator::Sphere => make_sphere_with(sc.n, sc.radius, sc.noise_sigma, cfg.seed, &sampling)?,
                Generator::Stacked => make_stacked_scene(sc.n, sc.spacing, cfg.seed)?,
                Generator::Tangential => make_tangential_scene(sc.n, cfg.seed)?,
            };
            (s.scene, Some(s.ground_truth))
        }
    };
    let scene = nb.apply(scene);
    let (center, normal, reference) = match gt {
        Some(Surface::Plane { point, normal }) => (point, normal, clean_reference(&scene, &gt.unwrap(), cfg.views.target_opacity)),
        Some(Surface::Sphere { center, .. }) => (center, Vector3::z(), clean_reference(&scene, &gt.unwrap(), cfg.views.target_opacity)),
        None => {
            let c = scene.centers().iter().fold(Vector3::zeros(), |a, b| a + b) / scene.len().max(1) as f64;
            (c, Vector3::z(), scene.clone())
        }
    };
    let extent = scene_extent(&scene, &center);
    let cameras = surface_cameras(&center, &normal, extent, &cfg.views);
    let prep = Prepared::new(&reference);
    let views = cameras
        .into_iter()
        .map(|cam| {
            let target = render(&reference, &trace(&prep, &cam, cfg.losses.min_density)).color;
            View::new(cam, target, cfg.pyramid.levels, cfg.pyramid.temperature)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Problem {
        scene,
        ground_truth: gt,
        views,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneStats {
    pub surface_rms: Option<f64>,
    pub dominant: usize,
    pub mean_entropy: f64,
    pub satisfied_fraction: f64,
}

/// Statistics of `scene` over the neighborhoods in `graph`. The run reports
/// the final state over the graph the regularizer acted on, since after the
/// freeze a fresh k-NN build would judge different neighborhoods.
pub fn scene_stats(
    scene: &Scene,
    graph: &NeighborGraph,
    gt: Option<&Surface>,
    views: &[View],
    cfg: &RunConfig,
) -> Result<SceneStats> {
    let h = neighborhood_entropies(&scene.opacities(), graph)?;
    let ctx = EntropyContext::compute(scene, graph, views, &cfg.neighborhood.threshold(), false)?;
    let surface_rms = match gt {
        Some(s) => match surface_rms(scene, s, cfg.opacity_threshold) {
            Ok(v) => Some(v),
            Err(GefError::NoDominantPrimitives { .. }) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    Ok(SceneStats {
        surface_rms,
        dominant: scene.primitives.iter().filter(|p| p.opacity() >= cfg.opacity_threshold).count(),
        mean_entropy: h.iter().sum::<f64>() / h.len().max(1) as f64,
        satisfied_fraction: ctx.satisfied_fraction(&h),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub cache_age: Option<usize>,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub seconds: f64,
    pub seconds_per_iteration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub iterations: usize,
    pub refreshes: usize,
    pub final_losses: LossBreakdown,
    pub before: SceneStats,
    pub after: SceneStats,
    pub surface_rms_reduction: Option<f64>,
    pub entropy_reduction: f64,
    pub timing: Timing,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub initial: Scene,
    pub scene: Scene,
    /// Neighborhoods the regularizer used last.
    pub graph: NeighborGraph,
    pub metrics: Vec<MetricRow>,
    pub monitor: Vec<MonitorRow>,
    pub summary: Summary,
}

/// Runs the configured schedule. `on_row` sees each logged metrics row.
pub fn run_optimization(cfg: &RunConfig, mut on_row: impl FnMut(&MetricRow)) -> Result<RunOutcome> {
    cfg.validate()?;
    let problem = build_problem(cfg)?;
    let opt = cfg.optimizer_config();
    let mut scene = problem.scene.clone();
    let mut state = OptimizerState::new(&scene, &opt)?;
    let mut metrics = Vec::new();
    let t = opt.schedule.total_iterations;
    let started = Instant::now();
    if t == 0 {
        let ctx = EntropyContext::compute(&scene, &state.graph, &problem.views, &opt.threshold, opt.image_weights)?;
        let b = evaluate(&scene, &state.graph, &problem.views, &ctx, &opt.losses, opt.schedule.active_terms(0))?;
        let h = neighborhood_entropies(&scene.opacities(), &state.graph)?;
        let row = MetricRow {
            iteration: 0,
            cache_age: None,
            losses: b,
            mean_entropy: h.iter().sum::<f64>() / h.len() as f64,
        };
        on_row(&row);
        metrics.push(row);
    }
    while state.iteration < t {
        let it = state.iteration;
        let b = step(&mut scene, &mut state, &opt, &problem.views)?;
        if it % cfg.optimizer.log_interval == 0 || it + 1 == t {
            let row = MetricRow {
                iteration: it,
                cache_age: state.cache.as_ref().map(|c| it - c.built_at),
                losses: b,
                mean_entropy: state.history.last().map(|m| m.mean_entropy).unwrap_or(0.0),
            };
            on_row(&row);
            metrics.push(row);
        }
    }
    let seconds = started.elapsed().as_secs_f64();

    let final_ctx = EntropyContext::compute(&scene, &state.graph, &problem.views, &opt.threshold, opt.image_weights)?;
    let active = if t == 0 {
        opt.schedule.active_terms(0)
    } else {
        opt.schedule.active_terms(t - 1)
    };
    let final_losses = evaluate(&scene, &state.graph, &problem.views, &final_ctx, &opt.losses, active.intersect(TermSet::all()))?;
    let gt = problem.ground_truth.as_ref();
    let initial_graph = build_knn(&problem.scene, cfg.neighborhood.k)?;
    let before = scene_stats(&problem.scene, &initial_graph, gt, &problem.views, cfg)?;
    let after = scene_stats(&scene, &state.graph, gt, &problem.views, cfg)?;
    let surface_rms_reduction = match (before.surface_rms, after.surface_rms) {
        (Some(b), Some(a)) if b > 0.0 => Some(1.0 - a / b),
        _ => None,
    };
    let entropy_reduction = if before.mean_entropy > 0.0 {
        1.0 - after.mean_entropy / before.mean_entropy
    } else {
        0.0
    };
    let summary = Summary {
        iterations: t,
        refreshes: state.refreshes,
        final_losses,
        before,
        after,
        surface_rms_reduction,
        entropy_reduction,
        timing: Timing {
            seconds,
            seconds_per_iteration: seconds / t.max(1) as f64,
        },
    };
    Ok(RunOutcome {
        initial: problem.scene,
        scene,
        graph: state.graph,
        metrics,
        monitor: state.history,
        summary,
    })
}

/// Output file names inside the run directory.
pub mod files {
    pub const CONFIG: &str = "config.json";
    pub const METRICS: &str = "metrics.jsonl";
    pub const MONITOR: &str = "monitor.jsonl";
    pub const INITIAL_SCENE: &str = "scene_initial.csv";
    pub const FINAL_SCENE: &str = "scene_final.csv";
    pub const STATE: &str = "optimizer_state.json";
    pub const SUMMARY: &str = "summary.json";
}

#[derive(Serialize)]
struct StateSidecar<'a> {
    iterations: usize,
    refreshes: usize,
    learning_rates: &'a LearningRates,
    graph_built_at: usize,
    graph_frozen: bool,
    k: usize,
}

/// Writes every artifact of `outcome` into `dir`, creating it if needed.
pub fn write_outputs(dir: &Path, cfg: &RunConfig, outcome: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GefError::file(dir, e))?;
    write_file(dir.join(files::CONFIG), to_json_pretty(cfg)?.as_bytes())?;
    let mut m = JsonLines::new(Vec::new());
    for row in &outcome.metrics {
        m.write(row)?;
    }
    write_file(dir.join(files::METRICS), &m.into_inner())?;
    let mut mon = JsonLines::new(Vec::new());
    for row in &outcome.monitor {
        mon.write(row)?;
    }
    write_file(dir.join(files::MONITOR), &mon.into_inner())?;
    write_file(dir.join(files::INITIAL_SCENE), write_point_cloud(&outcome.initial).as_bytes())?;
    write_file(dir.join(files::FINAL_SCENE), write_point_cloud(&outcome.scene).as_bytes())?;
    let graph = build_knn(&outcome.scene, cfg.neighborhood.k)?;
    let sidecar = StateSidecar {
        iterations: outcome.summary.iterations,
        refreshes: outcome.summary.refreshes,
        learning_rates: &cfg.optimizer.learning_rates,
        graph_built_at: graph.built_at_iteration,
        graph_frozen: cfg.schedule.total_iterations > 0,
        k: graph.k,
    };
    write_file(dir.join(files::STATE), to_json_pretty(&sidecar)?.as_bytes())?;
    write_file(dir.join(files::SUMMARY), to_json_pretty(&outcome.summary)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            scene: SceneConfig {
                n: 60,
                ..SceneConfig::default()
            },
            views: ViewConfig {
                resolution: 12,
                ..ViewConfig::default()
            },
            schedule: Schedule {
                total_iterations: 9,
                entropy_update_interval: 2,
                ..Schedule::default()
            },
            neighborhood: NeighborhoodConfig {
                k: 8,
                ..NeighborhoodConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_iterations_leave_scene_unchanged() {
        let cfg = RunConfig {
            schedule: Schedule {
                total_iterations: 0,
                ..Schedule::default()
            },
            ..small()
        };
        let out = run_optimization(&cfg, |_| {}).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(write_point_cloud(&out.initial), write_point_cloud(&out.scene));
        assert_eq!(out.summary.before, out.summary.after);
    }

    #[test]
    fn short_run_is_deterministic() {
        let a = run_optimization(&small(), |_| {}).unwrap();
        let b = run_optimization(&small(), |_| {}).unwrap();
        assert_eq!(write_point_cloud(&a.scene), write_point_cloud(&b.scene));
        assert_eq!(a.metrics.len(), 9);
        assert_eq!(a.monitor.len(), 9);
        assert_ne!(write_point_cloud(&a.scene), write_point_cloud(&a.initial));
    }

    #[test]
    fn config_keys_are_checked() {
        let text = to_json_pretty(&RunConfig::default()).unwrap();
        let (cfg, unknown) = RunConfig::from_json(&text).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(unknown.is_empty());
        let (_, unknown) = RunConfig::from_json(r#"{"schedule": {"total_iteration": 5}, "seed": 3}"#).unwrap();
        assert_eq!(unknown, vec!["schedule.total_iteration".to_string()]);
        assert!(RunConfig::from_json(r#"{"pyramid": {"levels": 9}}"#).is_err());
    }

    #[test]
    fn cameras_look_at_the_surface() {
        let cams = surface_cameras(&Vector3::zeros(), &Vector3::z(), 10.0, &ViewConfig::default());
        assert_eq!(cams.len(), 2);
        for c in &cams {
            assert!(c.to_camera(&Vector3::zeros()).z > 0.0);
            let d = c.pixel_direction(16, 16);
            assert!(d.dot(&-c.position().normalize()) > 0.999);
        }
    }
}
