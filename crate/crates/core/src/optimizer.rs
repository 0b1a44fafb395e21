//! Phase-gated gradient descent with a delayed entropy cache, plus the
//! finite-difference gradient checker.
//!
//! Entropy terms (sparsity, align) are evaluated only when the cache is
//! refreshed, every `entropy_update_interval` steps. Between refreshes their
//! cached values and gradients are applied unchanged.

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GefError, Result};
use crate::image_entropy::Raster;
use crate::losses::{
    current_normal_targets, entropy_terms, image_terms, total_loss, EntropyContext, LossBreakdown, LossConfig, Term,
    TermSet, TermValue, View,
};
use crate::neighborhood::{build_knn, neighborhood_entropies, NeighborGraph, ThresholdParams};
use crate::primitive::{axis_angle, Camera, GaussianPrimitive, Scene};
use crate::render::{scene_params, set_scene_params, Gradient, RgbImage, LOGIT, LOG_SCALE, PARAM_NAMES, ROTATION, STRIDE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub total_iterations: usize,
    pub geom_start_fraction: f64,
    pub entropy_start_fraction: f64,
    pub knn_freeze_fraction: f64,
    pub entropy_update_interval: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_iterations: 3000,
            geom_start_fraction: 0.5,
            entropy_start_fraction: 2.0 / 3.0,
            knn_freeze_fraction: 2.0 / 3.0,
            entropy_update_interval: 10,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(GefError::Config {
                field: format!("schedule.{field}"),
                message,
            })
        };
        if !(0.0 <= self.geom_start_fraction
            && self.geom_start_fraction <= self.entropy_start_fraction
            && self.entropy_start_fraction <= 1.0)
        {
            return bad(
                "geom_start_fraction",
                format!(
                    "need 0 <= geom_start ({}) <= entropy_start ({}) <= 1",
                    self.geom_start_fraction, self.entropy_start_fraction
                ),
            );
        }
        if (self.knn_freeze_fraction - self.entropy_start_fraction).abs() > 1e-12 {
            return bad(
                "knn_freeze_fraction",
                format!("must equal entropy_start_fraction ({})", self.entropy_start_fraction),
            );
        }
        if self.entropy_update_interval == 0 {
            return bad("entropy_update_interval", "must be at least 1".into());
        }
        Ok(())
    }

    fn at(&self, fraction: f64) -> usize {
        (fraction * self.total_iterations as f64).round() as usize
    }

    pub fn geom_start(&self) -> usize {
        self.at(self.geom_start_fraction)
    }

    pub fn entropy_start(&self) -> usize {
        self.at(self.entropy_start_fraction)
    }

    pub fn knn_freeze(&self) -> usize {
        self.at(self.knn_freeze_fraction)
    }

    /// Terms whose phase has begun at `iteration`.
    pub fn active_terms(&self, iteration: usize) -> TermSet {
        let mut set = TermSet::only(Term::Photometric);
        if iteration >= self.geom_start() {
            set = set.with(Term::Depth).with(Term::Normal);
        }
        if iteration >= self.entropy_start() {
            set = set.with(Term::Sparsity).with(Term::Align);
        }
        set
    }
}

/// Step sizes per parameter group, in the stored parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub center: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            center: 1e-3,
            scale: 1e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 1e-2,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("center", self.center),
            ("scale", self.scale),
            ("rotation", self.rotation),
            ("opacity", self.opacity),
            ("color", self.color),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(GefError::Config {
                    field: format!("optimizer.learning_rates.{name}"),
                    message: format!("{v} must be a finite nonnegative number"),
                });
            }
        }
        Ok(())
    }

    fn for_slot(&self, slot: usize) -> f64 {
        match slot {
            0..LOG_SCALE => self.center,
            LOG_SCALE..ROTATION => self.scale,
            ROTATION..LOGIT => self.rotation,
            LOGIT => self.opacity,
            _ => self.color,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub schedule: Schedule,
    pub learning_rates: LearningRates,
    pub losses: LossConfig,
    pub threshold: ThresholdParams,
    pub k: usize,
    /// Entropy weight in the monitor value `V_t = loss + beta_v * mean H`.
    pub beta_v: f64,
    pub image_weights: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            learning_rates: LearningRates::default(),
            losses: LossConfig::default(),
            threshold: ThresholdParams::default(),
            k: crate::neighborhood::DEFAULT_K,
            beta_v: 0.1,
            image_weights: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, n_levels: usize) -> Result<()> {
        self.schedule.validate()?;
        self.learning_rates.validate()?;
        self.losses.validate(n_levels)?;
        self.threshold.validate()?;
        if self.k == 0 {
            return Err(GefError::Config {
                field: "neighborhood.k".into(),
                message: "must be at least 1".into(),
            });
        }
        if !self.beta_v.is_finite() {
            return Err(GefError::Config {
                field: "optimizer.beta_v".into(),
                message: "must be finite".into(),
            });
        }
        Ok(())
    }
}

/// Entropy quantities frozen between refreshes.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyCache {
    pub built_at: usize,
    pub context: EntropyContext,
    pub entropies: Vec<f64>,
    pub terms: Vec<(Term, TermValue)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorRow {
    pub iteration: usize,
    pub total: f64,
    pub mean_entropy: f64,
    pub v: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub iteration: usize,
    pub learning_rates: LearningRates,
    pub graph: NeighborGraph,
    pub cache: Option<EntropyCache>,
    pub history: Vec<MonitorRow>,
    pub refreshes: usize,
}

impl OptimizerState {
    pub fn new(scene: &Scene, config: &OptimizerConfig) -> Result<Self> {
        Ok(Self {
            iteration: 0,
            learning_rates: config.learning_rates.clone(),
            graph: build_knn(scene, config.k)?,
            cache: None,
            history: Vec::new(),
            refreshes: 0,
        })
    }

    pub fn cache_age(&self) -> Option<usize> {
        self.cache.as_ref().map(|c| self.iteration - c.built_at)
    }
}

/// Recomputes every cached entropy quantity at the current scene.
pub fn refresh_entropy_cache(
    scene: &Scene,
    views: &[View],
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<()> {
    let context = EntropyContext::compute(scene, &state.graph, views, &config.threshold, config.image_weights)?;
    let entropies = neighborhood_entropies(&scene.opacities(), &state.graph)?;
    let active = TermSet::only(Term::Sparsity).with(Term::Align).intersect(config.losses.enabled());
    let terms = entropy_terms(scene, &state.graph, views, &context, &config.losses, active)?;
    state.cache = Some(EntropyCache {
        built_at: state.iteration,
        context,
        entropies,
        terms,
    });
    state.refreshes += 1;
    Ok(())
}

fn check_finite(b: &LossBreakdown, iteration: usize) -> Result<()> {
    for (t, g) in &b.term_gradients {
        if !b.value(*t).is_finite() {
            return Err(GefError::NonFinite {
                term: t.name(),
                iteration,
                primitive: None,
            });
        }
        if let Some((i, _)) = g.first_non_finite() {
            return Err(GefError::NonFinite {
                term: t.name(),
                iteration,
                primitive: Some(i),
            });
        }
    }
    if !b.total.is_finite() {
        return Err(GefError::NonFinite {
            term: "total",
            iteration,
            primitive: None,
        });
    }
    Ok(())
}

/// Applies `params -= lr * grad` per group, then restores the stored
/// parameterization's constraints.
pub fn apply_update(scene: &mut Scene, grad: &Gradient, lr: &LearningRates) {
    let mut params = scene_params(scene);
    for (idx, (p, g)) in params.iter_mut().zip(&grad.data).enumerate() {
        *p -= lr.for_slot(idx % STRIDE) * g;
    }
    set_scene_params(scene, &params);
    let floor = scene.sigma_min.ln();
    for p in &mut scene.primitives {
        p.log_scale = p.log_scale.map(|v| v.max(floor));
        let n = p.rotation.norm();
        p.rotation = if n > 1e-12 {
            p.rotation / n
        } else {
            Vector4::new(1.0, 0.0, 0.0, 0.0)
        };
        p.opacity_logit = p.opacity_logit.clamp(-50.0, 50.0);
        p.color = p.color.map(|c| c.clamp(0.0, 1.0));
    }
}

/// One optimizer iteration. Returns the loss of the scene before the update.
pub fn step(scene: &mut Scene, state: &mut OptimizerState, config: &OptimizerConfig, views: &[View]) -> Result<LossBreakdown> {
    let sched = &config.schedule;
    let it = state.iteration;
    if it >= sched.total_iterations {
        return Err(GefError::Contract(format!(
            "iteration {it} is past the schedule of {} iterations",
            sched.total_iterations
        )));
    }
    let n_interval = sched.entropy_update_interval;
    if !state.graph.frozen {
        if it >= sched.knn_freeze() {
            state.graph.rebuild(scene, it)?;
            state.graph.freeze();
        } else if it - state.graph.built_at_iteration >= n_interval {
            state.graph.rebuild(scene, it)?;
        }
    }
    let active = sched.active_terms(it).intersect(config.losses.enabled());
    let entropy_active = active.contains(Term::Sparsity) || active.contains(Term::Align);
    if entropy_active && state.cache_age().is_none_or(|age| age >= n_interval) {
        refresh_entropy_cache(scene, views, state, config)?;
    }
    let mut terms = image_terms(scene, views, &config.losses, active, None)?;
    if entropy_active {
        let cache = state.cache.as_ref().expect("refreshed above");
        terms.extend(cache.terms.iter().filter(|(t, _)| active.contains(*t)).cloned());
    }
    let breakdown = total_loss(&terms, &config.losses, scene.len());
    check_finite(&breakdown, it)?;

    let entropies = neighborhood_entropies(&scene.opacities(), &state.graph)?;
    let mean_entropy = entropies.iter().sum::<f64>() / entropies.len() as f64;
    state.history.push(MonitorRow {
        iteration: it,
        total: breakdown.total,
        mean_entropy,
        v: breakdown.total + config.beta_v * mean_entropy,
    });

    apply_update(scene, &breakdown.gradient, &state.learning_rates);
    state.iteration += 1;
    Ok(breakdown)
}

/// Worst relative error of `grad` against central differences of `f`.
///
/// The error of entry `i` is `|fd_i - g_i| / max(|fd_i|, |g_i|, floor)`
/// with `floor = 1e-3 * max_i |g_i|` (at least 1e-12), so entries that are
/// negligible next to the largest component are compared on that scale.
/// Returns the error and the index where it occurs.
pub fn check_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], grad: &[f64], step: f64) -> (f64, usize) {
    let floor = (1e-3 * grad.iter().fold(0.0f64, |m, g| m.max(g.abs()))).max(1e-12);
    let mut worst = (0.0, 0);
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * step);
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(floor);
        if err > worst.0 || !err.is_finite() {
            worst = (err, i);
        }
    }
    worst
}

pub fn term_tolerance(t: Term) -> f64 {
    if t == Term::Align {
        1e-3
    } else {
        1e-4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermCheck {
    pub term: Term,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub primitive: usize,
    pub parameter: &'static str,
    pub value: f64,
    pub passed: bool,
}

/// Scene, views and frozen entropy context for gradient checks.
#[derive(Debug, Clone)]
pub struct GradcheckFixture {
    pub scene: Scene,
    pub graph: NeighborGraph,
    pub views: Vec<View>,
    pub context: EntropyContext,
    pub config: LossConfig,
}

pub const GRADCHECK_STEP: f64 = 1e-5;

/// Randomized fixture: primitives on distinct depth layers seen by a distant
/// narrow-field camera, so fragment order is stable under small
/// perturbations; no culling.
pub fn gradcheck_fixture(seed: u64) -> Result<GradcheckFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(16..=24);
    let mut layers: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        layers.swap(i, rng.random_range(0..=i));
    }
    let prims = (0..n)
        .map(|i| {
            let z = -1.0 + 2.0 * layers[i] as f64 / n as f64;
            GaussianPrimitive::new(
                Vector3::new(rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), z),
                Vector3::new(rng.random_range(0.4..0.9), rng.random_range(0.4..0.9), rng.random_range(0.12..0.3)),
                axis_angle(
                    Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                    rng.random_range(0.05..0.5),
                ),
                rng.random_range(0.2..0.8),
                Vector3::new(rng.random(), rng.random(), rng.random()),
            )
        })
        .collect();
    let scene = Scene::new(prims, 0.05);
    let graph = build_knn(&scene, 6)?;
    let res = 12;
    let dist = 200.0;
    let camera = Camera::look_at(
        Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -dist),
        Vector3::zeros(),
        -Vector3::y(),
        res as f64 * dist / 4.0,
        res,
        res,
    );
    let mut channel = || {
        Raster::from_vec(res, res, (0..res * res).map(|_| rng.random_range(0.0..1.0)).collect())
    };
    let target = RgbImage {
        channels: [channel()?, channel()?, channel()?],
    };
    let views = vec![View::new(camera, target, 2, 6.0)?];
    let config = LossConfig {
        min_density: 0.0,
        ..LossConfig::default()
    };
    let context = EntropyContext::compute(&scene, &graph, &views, &ThresholdParams::default(), true)?;
    Ok(GradcheckFixture {
        scene,
        graph,
        views,
        context,
        config,
    })
}

fn term_value(fx: &GradcheckFixture, scene: &Scene, t: Term, refs: &crate::losses::NormalTargets) -> Result<TermValue> {
    let set = TermSet::only(t);
    let mut v = if t.is_entropy() {
        entropy_terms(scene, &fx.graph, &fx.views, &fx.context, &fx.config, set)?
    } else {
        image_terms(scene, &fx.views, &fx.config, set, Some(refs))?
    };
    Ok(v.remove(0).1)
}

/// Central-difference check of each selected term on `fx`. The entropy
/// context and normal targets are held fixed. `corrupt` perturbs the
/// analytic gradients as a negative control.
pub fn gradcheck(fx: &GradcheckFixture, terms: TermSet, step: f64, corrupt: bool) -> Result<Vec<TermCheck>> {
    let refs = current_normal_targets(&fx.scene, &fx.views, fx.config.min_density);
    let x = scene_params(&fx.scene);
    let mut out = Vec::new();
    for t in terms.iter() {
        let base = term_value(fx, &fx.scene, t, &refs)?;
        let mut grad = base.grad.data.clone();
        if corrupt {
            for (i, g) in grad.iter_mut().enumerate() {
                *g *= if i % 2 == 0 { 1.01 } else { 0.99 };
            }
        }
        let mut scratch = fx.scene.clone();
        let mut failure = None;
        let (err, idx) = check_gradient(
            |p| {
                set_scene_params(&mut scratch, p);
                match term_value(fx, &scratch, t, &refs) {
                    Ok(v) => v.value,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &x,
            &grad,
            step,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let tol = term_tolerance(t);
        out.push(TermCheck {
            term: t,
            max_relative_error: err,
            tolerance: tol,
            primitive: idx / STRIDE,
            parameter: PARAM_NAMES[idx % STRIDE],
            value: base.value,
            passed: err < tol,
        });
    }
    Ok(out)
}

/// Worst case of one term across fixtures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermSummary {
    pub term: Term,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub worst_seed: u64,
    pub primitive: usize,
    pub parameter: &'static str,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub seeds: Vec<u64>,
    pub step: f64,
    pub terms: Vec<TermSummary>,
    pub passed: bool,
}

/// Number of fixtures the `gradcheck` command runs by default.
pub const GRADCHECK_SEEDS: u64 = 20;

/// Gradient check of `terms` on the fixture for one seed.
pub fn gradcheck_seed(seed: u64, terms: TermSet, corrupt: bool) -> Result<Vec<TermCheck>> {
    gradcheck(&gradcheck_fixture(seed)?, terms, GRADCHECK_STEP, corrupt)
}

/// Folds per-seed results into per-term worst cases, keeping term order.
pub fn summarize_gradchecks(per_seed: &[(u64, Vec<TermCheck>)]) -> GradcheckSummary {
    let mut terms: Vec<TermSummary> = Vec::new();
    for (seed, checks) in per_seed {
        for c in checks {
            let slot = match terms.iter_mut().position(|t| t.term == c.term) {
                Some(i) => &mut terms[i],
                None => {
                    terms.push(TermSummary {
                        term: c.term,
                        max_relative_error: f64::NEG_INFINITY,
                        tolerance: c.tolerance,
                        worst_seed: *seed,
                        primitive: c.primitive,
                        parameter: c.parameter,
                        passed: true,
                    });
                    terms.last_mut().unwrap()
                }
            };
            // NaN errors count as worst
            if !(c.max_relative_error <= slot.max_relative_error) {
                slot.max_relative_error = c.max_relative_error;
                slot.worst_seed = *seed;
                slot.primitive = c.primitive;
                slot.parameter = c.parameter;
            }
            slot.passed &= c.passed;
        }
    }
    GradcheckSummary {
        seeds: per_seed.iter().map(|(s, _)| *s).collect(),
        step: GRADCHECK_STEP,
        passed: terms.iter().all(|t| t.passed),
        terms,
    }
}
