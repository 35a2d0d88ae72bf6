//! Seeded synthetic scene pools and a noisy predictor for end-to-end
//! simulation.
//!
//! Every scene draws from its own ChaCha8 stream, derived from the root
//! seed and the scene's index or id, so results do not depend on the number
//! of worker threads.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnchorTable, Box3D, ClassCatalog, Mixture1D, MixtureParams, Scene, ScoredDetection};
use crate::rounds::{Oracle, Predictor};

/// Variance used where the noise model asks for none; mixture variances
/// must stay positive.
pub const MIN_VARIANCE: f64 = 1e-300;

/// Closest an object center may be to the ego origin, in meters.
const MIN_RANGE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSpec {
    pub n_scenes: usize,
    /// Class probabilities in catalog order.
    pub class_mix: Vec<f64>,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Objects are placed with `x` in `[2, extent]` and `|y| <= extent / 2`.
    pub spatial_extent: f64,
    /// Scenes are built as this many clusters of near-duplicates. Unset (or
    /// equal to `n_scenes`) means every scene has its own layout.
    pub redundancy_groups: Option<usize>,
    /// Position jitter (meters, standard deviation) between members of a
    /// cluster.
    pub duplicate_jitter: f64,
    pub rng_seed: u64,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec {
            n_scenes: 1000,
            class_mix: vec![0.9, 0.05, 0.05],
            objects_min: 2,
            objects_max: 12,
            spatial_extent: 40.0,
            redundancy_groups: None,
            duplicate_jitter: 0.3,
            rng_seed: 0,
        }
    }
}

impl PoolSpec {
    pub fn groups(&self) -> usize {
        self.redundancy_groups.unwrap_or(self.n_scenes).max(1)
    }

    pub fn validate(&self, catalog: &ClassCatalog) -> Result<()> {
        if self.class_mix.len() != catalog.len() {
            return Err(Error::invalid(format!(
                "class_mix has {} entries for {} classes",
                self.class_mix.len(),
                catalog.len()
            )));
        }
        if self.class_mix.iter().any(|p| !p.is_finite() || *p < 0.0)
            || (self.class_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid("class_mix must be a probability vector summing to 1"));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::invalid("objects_min exceeds objects_max"));
        }
        if !(self.spatial_extent.is_finite() && self.spatial_extent > MIN_RANGE) {
            return Err(Error::invalid(format!("spatial_extent must exceed {MIN_RANGE} m")));
        }
        if self
            .redundancy_groups
            .is_some_and(|g| g == 0 || g > self.n_scenes.max(1))
        {
            return Err(Error::invalid("redundancy_groups must be in [1, n_scenes]"));
        }
        if !(self.duplicate_jitter.is_finite() && self.duplicate_jitter >= 0.0) {
            return Err(Error::invalid("duplicate_jitter must be >= 0"));
        }
        Ok(())
    }
}

/// Per-scene RNG on its own stream of the root seed.
pub fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Scene id used by generated pools.
pub fn scene_id(index: usize) -> String {
    format!("{index:06}")
}

struct Template {
    objects: Vec<(usize, Box3D)>,
}

fn draw_template(
    spec: &PoolSpec,
    catalog: &ClassCatalog,
    anchors: &AnchorTable,
    rng: &mut ChaCha8Rng,
) -> Result<Template> {
    let classes = WeightedIndex::new(&spec.class_mix).map_err(|e| Error::invalid(format!("class_mix: {e}")))?;
    let n = rng.random_range(spec.objects_min..=spec.objects_max);
    let size_jitter = Normal::<f64>::new(1.0, 0.05).expect("valid normal");
    let objects = (0..n)
        .map(|_| {
            let c = classes.sample(rng);
            let a = anchors
                .get(&catalog.classes[c])
                .ok_or_else(|| Error::Config(format!("no anchor for class `{}`", catalog.classes[c])))?;
            let scale = |v: f64, rng: &mut ChaCha8Rng| v * size_jitter.sample(rng).clamp(0.8, 1.2);
            let bbox = Box3D {
                x: rng.random_range(MIN_RANGE..spec.spatial_extent),
                y: rng.random_range(-spec.spatial_extent / 2.0..=spec.spatial_extent / 2.0),
                z: rng.random_range(-0.5..=0.5),
                w: scale(a.width, rng),
                l: scale(a.length, rng),
                h: scale(a.height, rng),
                theta: rng.random_range(-PI..PI),
            };
            Ok((c, bbox))
        })
        .collect::<Result<_>>()?;
    Ok(Template { objects })
}

/// Ground-truth scenes with ids `000000, 000001, ...`.
///
/// Scene `i` belongs to cluster `i mod redundancy_groups`; members of a
/// cluster share classes, sizes and yaws and differ only by position
/// jitter.
pub fn generate_pool(spec: &PoolSpec, catalog: &ClassCatalog, anchors: &AnchorTable) -> Result<Vec<Scene>> {
    spec.validate(catalog)?;
    anchors.validate(catalog)?;
    let groups = spec.groups();
    let templates: Vec<Template> = (0..groups)
        .into_par_iter()
        .map(|g| draw_template(spec, catalog, anchors, &mut scene_rng(spec.rng_seed, g as u64)))
        .collect::<Result<_>>()?;
    let jitter = Normal::<f64>::new(0.0, spec.duplicate_jitter.max(f64::MIN_POSITIVE)).expect("valid normal");
    Ok((0..spec.n_scenes)
        .into_par_iter()
        .map(|i| {
            let t = &templates[i % groups];
            let mut rng = scene_rng(spec.rng_seed, (groups + i) as u64);
            let detections = t
                .objects
                .iter()
                .map(|(c, b)| {
                    let mut b = *b;
                    if spec.duplicate_jitter > 0.0 {
                        b.x = (b.x + jitter.sample(&mut rng)).max(MIN_RANGE);
                        b.y += jitter.sample(&mut rng);
                    }
                    ScoredDetection::new(catalog.classes[*c].clone(), 1.0, b)
                })
                .collect();
            Scene::new(scene_id(i), detections)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Standard deviation of the confidence logit jitter. Zero gives
    /// confidence exactly 1 for true objects.
    pub confidence_noise: f64,
    /// Position standard deviation at zero range, meters.
    pub position_noise_base: f64,
    /// Growth of the position standard deviation per meter of range.
    pub position_noise_per_meter: f64,
    /// Relative standard deviation of box dimensions.
    pub size_noise: f64,
    /// Yaw standard deviation, radians.
    pub yaw_noise: f64,
    /// Poisson mean of false positives per scene.
    pub false_positive_rate: f64,
    pub misclass_rate: f64,
    pub mixture_components: usize,
    /// Spread of component means in units of the residual standard
    /// deviation; drives EU.
    pub mean_spread: f64,
    /// Log-normal sigma of the per-scene difficulty factor.
    pub difficulty_spread: f64,
    /// When set, noise is divided by `1 + labeled / scale` to imitate a
    /// predictor that improves as labels accumulate.
    pub shrink_scale: Option<f64>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            confidence_noise: 1.0,
            position_noise_base: 0.05,
            position_noise_per_meter: 0.01,
            size_noise: 0.05,
            yaw_noise: 0.05,
            false_positive_rate: 1.0,
            misclass_rate: 0.05,
            mixture_components: 3,
            mean_spread: 0.5,
            difficulty_spread: 0.5,
            shrink_scale: None,
        }
    }
}

impl NoiseModel {
    /// Predictions equal ground truth with full confidence and (near) zero
    /// variance.
    pub fn noiseless() -> Self {
        NoiseModel {
            confidence_noise: 0.0,
            position_noise_base: 0.0,
            position_noise_per_meter: 0.0,
            size_noise: 0.0,
            yaw_noise: 0.0,
            false_positive_rate: 0.0,
            misclass_rate: 0.0,
            mixture_components: 1,
            mean_spread: 0.0,
            difficulty_spread: 0.0,
            shrink_scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let non_neg = [
            ("confidence_noise", self.confidence_noise),
            ("position_noise_base", self.position_noise_base),
            ("position_noise_per_meter", self.position_noise_per_meter),
            ("size_noise", self.size_noise),
            ("yaw_noise", self.yaw_noise),
            ("false_positive_rate", self.false_positive_rate),
            ("mean_spread", self.mean_spread),
            ("difficulty_spread", self.difficulty_spread),
        ];
        for (name, v) in non_neg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("noise.{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.misclass_rate) {
            return Err(Error::invalid(format!(
                "noise.misclass_rate must be in [0, 1], got {}",
                self.misclass_rate
            )));
        }
        if self.mixture_components == 0 {
            return Err(Error::invalid("noise.mixture_components must be at least 1"));
        }
        if let Some(s) = self.shrink_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::invalid("noise.shrink_scale must be > 0"));
            }
        }
        Ok(())
    }

    /// Noise multiplier once `labeled` scenes are labeled.
    pub fn shrink_factor(&self, labeled: usize) -> f64 {
        match self.shrink_scale {
            Some(s) => 1.0 / (1.0 + labeled as f64 / s),
            None => 1.0,
        }
    }

    fn scaled(&self, f: f64) -> NoiseModel {
        NoiseModel {
            confidence_noise: self.confidence_noise * f,
            position_noise_base: self.position_noise_base * f,
            position_noise_per_meter: self.position_noise_per_meter * f,
            size_noise: self.size_noise * f,
            yaw_noise: self.yaw_noise * f,
            false_positive_rate: self.false_positive_rate * f,
            misclass_rate: self.misclass_rate * f,
            ..self.clone()
        }
    }

    /// Position standard deviation at `range` meters, before the scene
    /// difficulty factor.
    pub fn position_std(&self, range: f64) -> f64 {
        self.position_noise_base + self.position_noise_per_meter * range
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Yaw relative to the nearest of the anchor orientations `0, ±pi/2, pi`,
/// in `[-pi/4, pi/4]`.
fn yaw_residual(theta: f64) -> f64 {
    theta - (theta / FRAC_PI_2).round() * FRAC_PI_2
}

/// Residual-space mixtures whose propagated box-space variances equal the
/// physical variances `pos_var` (x, y, z), `size_var` (w, h, l) and
/// `yaw_var`.
fn mixture_for(
    bbox: &Box3D,
    anchor: &crate::model::Anchor,
    pos_var: f64,
    size_var: [f64; 3],
    yaw_var: f64,
    noise: &NoiseModel,
    rng: &mut ChaCha8Rng,
) -> Result<MixtureParams> {
    let d2 = anchor.diagonal().powi(2);
    let h2 = anchor.height.powi(2);
    let ratios = [bbox.w / anchor.width, bbox.h / anchor.height, bbox.l / anchor.length];
    let dyaw = yaw_residual(bbox.theta);
    let means = [0.0, 0.0, 0.0, ratios[0], ratios[1], ratios[2], dyaw];
    let vars = [
        pos_var / d2,
        pos_var / d2,
        pos_var / h2,
        size_var[0] / (ratios[0] * ratios[0]),
        size_var[1] / (ratios[1] * ratios[1]),
        size_var[2] / (ratios[2] * ratios[2]),
        yaw_var * dyaw.cos().powi(2),
    ];
    let k = noise.mixture_components;
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let dims = std::array::from_fn(|d| {
        let var = vars[d].max(MIN_VARIANCE);
        let offsets: Vec<f64> = (0..k).map(|_| if k > 1 { normal(rng) } else { 0.0 }).collect();
        let center: f64 = weights.iter().zip(&offsets).map(|(w, o)| w * o).sum();
        let comp_means = offsets
            .iter()
            .map(|o| means[d] + noise.mean_spread * var.sqrt() * (o - center))
            .collect();
        Mixture1D {
            weights: weights.clone(),
            means: comp_means,
            variances: vec![var; k],
        }
    });
    MixtureParams::new(dims).map_err(|e| Error::invalid(format!("synthetic mixture: {e}")))
}

/// Noisy predictions for one ground-truth scene.
///
/// True objects get a jittered box, a confidence and a mixture whose
/// variance grows with range. Misclassified objects take a uniformly drawn
/// other class. False positives are appended with low confidence.
pub fn simulate_predictions(
    gt: &Scene,
    noise: &NoiseModel,
    catalog: &ClassCatalog,
    anchors: &AnchorTable,
    rng: &mut ChaCha8Rng,
) -> Result<Scene> {
    noise.validate()?;
    let difficulty = if noise.difficulty_spread > 0.0 {
        LogNormal::new(0.0, noise.difficulty_spread)
            .expect("valid lognormal")
            .sample(rng)
    } else {
        1.0
    };
    let c = catalog.len();
    let mut out = Vec::with_capacity(gt.detections.len());
    for d in &gt.detections {
        let mut label = d.class_label.clone();
        if c > 1 && noise.misclass_rate > 0.0 && rng.random_bool(noise.misclass_rate) {
            let own = catalog
                .index_of(&label)
                .ok_or_else(|| Error::UnknownClass { label: label.clone() })?;
            let mut other = rng.random_range(0..c - 1);
            if other >= own {
                other += 1;
            }
            label = catalog.classes[other].clone();
        }
        let confidence = if noise.confidence_noise > 0.0 {
            sigmoid(2.5 + noise.confidence_noise * normal(rng))
        } else {
            1.0
        };
        let anchor = anchors
            .get(&label)
            .ok_or_else(|| Error::UnknownClass { label: label.clone() })?;
        let std = difficulty * noise.position_std(d.bbox.range());
        let rel = difficulty * noise.size_noise;
        let yaw_std = difficulty * noise.yaw_noise;
        let g = &d.bbox;
        let bbox = Box3D {
            x: g.x + std * normal(rng),
            y: g.y + std * normal(rng),
            z: g.z + std * normal(rng),
            w: g.w * (1.0 + rel * normal(rng)).clamp(0.5, 1.5),
            l: g.l * (1.0 + rel * normal(rng)).clamp(0.5, 1.5),
            h: g.h * (1.0 + rel * normal(rng)).clamp(0.5, 1.5),
            theta: g.theta + yaw_std * normal(rng),
        };
        let size_var = [(rel * bbox.w).powi(2), (rel * bbox.h).powi(2), (rel * bbox.l).powi(2)];
        let mixture = mixture_for(&bbox, anchor, std * std, size_var, yaw_std * yaw_std, noise, rng)?;
        out.push(ScoredDetection {
            class_label: label,
            confidence,
            bbox,
            mixture: Some(mixture),
        });
    }

    if noise.false_positive_rate > 0.0 {
        let count = Poisson::new(noise.false_positive_rate)
            .expect("positive rate")
            .sample(rng) as usize;
        for _ in 0..count {
            let label = catalog.classes[rng.random_range(0..c)].clone();
            let anchor = *anchors
                .get(&label)
                .ok_or_else(|| Error::UnknownClass { label: label.clone() })?;
            let bbox = Box3D {
                x: rng.random_range(MIN_RANGE..40.0),
                y: rng.random_range(-20.0..=20.0),
                z: rng.random_range(-0.5..=0.5),
                w: anchor.width,
                l: anchor.length,
                h: anchor.height,
                theta: rng.random_range(-PI..PI),
            };
            let confidence = sigmoid(-1.5 + noise.confidence_noise * normal(rng));
            let std = 3.0 * difficulty * noise.position_std(bbox.range());
            let rel = 3.0 * difficulty * noise.size_noise;
            let size_var = [(rel * bbox.w).powi(2), (rel * bbox.h).powi(2), (rel * bbox.l).powi(2)];
            let yaw_std = 3.0 * difficulty * noise.yaw_noise;
            let mixture = mixture_for(&bbox, &anchor, std * std, size_var, yaw_std * yaw_std, noise, rng)?;
            out.push(ScoredDetection {
                class_label: label,
                confidence,
                bbox,
                mixture: Some(mixture),
            });
        }
    }
    Ok(Scene::new(gt.id.clone(), out))
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Predictor backed by ground truth plus [`NoiseModel`] noise. A scene's
/// prediction depends only on its id, the seed and the shrink factor.
#[derive(Clone, Debug)]
pub struct SimulatedPredictor {
    ground_truth: BTreeMap<String, Scene>,
    noise: NoiseModel,
    catalog: ClassCatalog,
    anchors: AnchorTable,
    seed: u64,
}

impl SimulatedPredictor {
    pub fn new(
        ground_truth: &[Scene],
        noise: NoiseModel,
        catalog: ClassCatalog,
        anchors: AnchorTable,
        seed: u64,
    ) -> Result<Self> {
        noise.validate()?;
        anchors.validate(&catalog)?;
        Ok(SimulatedPredictor {
            ground_truth: ground_truth.iter().map(|s| (s.id.clone(), s.clone())).collect(),
            noise,
            catalog,
            anchors,
            seed,
        })
    }
}

impl Predictor for SimulatedPredictor {
    fn predict(&self, scene_id: &str, labeled_count: usize) -> Result<Scene> {
        let gt = self
            .ground_truth
            .get(scene_id)
            .ok_or_else(|| Error::invalid(format!("no ground truth for scene `{scene_id}`")))?;
        let noise = self.noise.scaled(self.noise.shrink_factor(labeled_count));
        let mut rng = scene_rng(self.seed, fnv1a(scene_id));
        simulate_predictions(gt, &noise, &self.catalog, &self.anchors, &mut rng)
    }
}

/// Oracle that returns stored ground truth.
#[derive(Clone, Debug)]
pub struct GroundTruthOracle {
    scenes: BTreeMap<String, Scene>,
}

impl GroundTruthOracle {
    pub fn new(scenes: &[Scene]) -> Self {
        GroundTruthOracle {
            scenes: scenes.iter().map(|s| (s.id.clone(), s.clone())).collect(),
        }
    }
}

impl Oracle for GroundTruthOracle {
    fn reveal(&self, scene_id: &str) -> Result<Scene> {
        self.scenes
            .get(scene_id)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no ground truth for scene `{scene_id}`")))
    }
}
