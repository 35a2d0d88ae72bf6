//! Category entropy of a scene's confidence-filtered predicted classes.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassCatalog, Scene, ScoredDetection};

/// Confidence threshold `tau` and stability constant `zeta`. Logarithms are
/// natural.
///
/// `tau` is the single confidence filter shared by every metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyConfig {
    pub tau: f64,
    pub zeta: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        EntropyConfig { tau: 0.3, zeta: 1e-12 }
    }
}

impl EntropyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!(
                "entropy.tau must be in [0, 1], got {}",
                self.tau
            )));
        }
        if !(self.zeta.is_finite() && self.zeta > 0.0) {
            return Err(Error::Config(format!("entropy.zeta must be > 0, got {}", self.zeta)));
        }
        Ok(())
    }
}

/// Detections whose confidence reaches `tau`, with their original indices.
pub fn eligible_detections(scene: &Scene, tau: f64) -> impl Iterator<Item = (usize, &ScoredDetection)> {
    scene
        .detections
        .iter()
        .enumerate()
        .filter(move |(_, d)| d.confidence >= tau)
}

/// Per-class counts of detections with `confidence >= tau`, in catalog order.
/// Labels outside the catalog are ignored.
pub fn filtered_class_counts(scene: &Scene, catalog: &ClassCatalog, config: &EntropyConfig) -> Vec<u64> {
    let mut counts = vec![0u64; catalog.len()];
    for (_, d) in eligible_detections(scene, config.tau) {
        if let Some(c) = catalog.index_of(&d.class_label) {
            counts[c] += 1;
        }
    }
    counts
}

/// `-sum_c p_c ln(p_c + zeta)` over the class proportions; zero for scenes
/// with no counted objects.
pub fn entropy_from_counts(counts: &[u64], zeta: f64) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let h: f64 = counts
        .iter()
        .map(|&n| {
            let p = n as f64 / total;
            -p * (p + zeta).ln()
        })
        .sum();
    // a lone class gives -ln(1 + zeta) ~ -zeta
    h.max(0.0)
}

pub fn category_entropy(scene: &Scene, catalog: &ClassCatalog, config: &EntropyConfig) -> f64 {
    entropy_from_counts(&filtered_class_counts(scene, catalog, config), config.zeta)
}

/// Orders `(score, id)` pairs by descending score, then ascending id.
pub(crate) fn descending_then_id(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Top `top_n` scene ids by descending entropy; ties by ascending id.
pub fn rank_by_entropy(
    scenes: &[Scene],
    catalog: &ClassCatalog,
    config: &EntropyConfig,
    top_n: usize,
) -> Result<Vec<String>> {
    if top_n > scenes.len() {
        return Err(Error::InsufficientPool {
            required: top_n,
            available: scenes.len(),
        });
    }
    let scores: Vec<f64> = scenes
        .par_iter()
        .map(|s| category_entropy(s, catalog, config))
        .collect();
    Ok(top_by_score(scenes, &scores, top_n))
}

/// One sort over the whole slice, then truncation.
pub(crate) fn top_by_score(scenes: &[Scene], scores: &[f64], top_n: usize) -> Vec<String> {
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.sort_by(|&a, &b| descending_then_id((scores[a], &scenes[a].id), (scores[b], &scenes[b].id)));
    order.into_iter().take(top_n).map(|i| scenes[i].id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Box3D;

    fn det(class: &str, conf: f64) -> ScoredDetection {
        ScoredDetection::new(
            class,
            conf,
            Box3D {
                x: 5.0,
                y: 0.0,
                z: 0.0,
                w: 1.0,
                l: 1.0,
                h: 1.0,
                theta: 0.0,
            },
        )
    }

    fn scene(id: &str, dets: &[(&str, f64)]) -> Scene {
        Scene::new(id, dets.iter().map(|(c, p)| det(c, *p)).collect())
    }

    #[test]
    fn counts_filter_by_tau() {
        let cat = ClassCatalog::default();
        let cfg = EntropyConfig::default();
        let s = scene("a", &[("Car", 0.9), ("Car", 0.1), ("Pedestrian", 0.5)]);
        assert_eq!(filtered_class_counts(&s, &cat, &cfg), vec![1, 1, 0]);
        assert_eq!(filtered_class_counts(&scene("e", &[]), &cat, &cfg), vec![0, 0, 0]);
        let all = EntropyConfig { tau: 0.0, ..cfg };
        assert_eq!(filtered_class_counts(&s, &cat, &all), vec![2, 1, 0]);
        // boundary: confidence == tau counts
        let edge = scene("b", &[("Cyclist", 0.3)]);
        assert_eq!(filtered_class_counts(&edge, &cat, &cfg), vec![0, 0, 1]);
    }

    #[test]
    fn entropy_examples() {
        let z = 1e-12;
        assert!(entropy_from_counts(&[1, 0, 0], z) <= 1e-12);
        assert!((entropy_from_counts(&[2, 2, 2], z) - 3f64.ln()).abs() < 1e-9);
        let expected = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let got = entropy_from_counts(&[3, 1, 0], z);
        assert!((got - expected).abs() < 1e-9);
        assert!((got - 0.5623).abs() < 1e-4);
        assert_eq!(entropy_from_counts(&[0, 0, 0], z), 0.0);
    }

    #[test]
    fn single_car_with_noise_scores_zero() {
        let cat = ClassCatalog::default();
        let cfg = EntropyConfig::default();
        let s = scene(
            "fig",
            &[
                ("Car", 0.95),
                ("Pedestrian", 0.12),
                ("Cyclist", 0.2),
                ("Pedestrian", 0.29),
                ("Car", 0.05),
            ],
        );
        assert!(category_entropy(&s, &cat, &cfg) <= 1e-9);
        let unfiltered = EntropyConfig { tau: 0.0, ..cfg };
        assert!(category_entropy(&s, &cat, &unfiltered) > 0.9);
    }

    #[test]
    fn ranking_orders_and_breaks_ties() {
        let cat = ClassCatalog::default();
        let cfg = EntropyConfig::default();
        let high = scene("s1", &[("Car", 0.9), ("Pedestrian", 0.9), ("Cyclist", 0.9)]);
        let zero = scene("s2", &[("Car", 0.9)]);
        let mid = scene("s3", &[("Car", 0.9), ("Car", 0.9), ("Car", 0.9), ("Pedestrian", 0.9)]);
        let pool = vec![high, zero, mid];
        assert_eq!(rank_by_entropy(&pool, &cat, &cfg, 2).unwrap(), vec!["s1", "s3"]);
        let mut all = rank_by_entropy(&pool, &cat, &cfg, 3).unwrap();
        all.sort();
        assert_eq!(all, vec!["s1", "s2", "s3"]);
        assert!(rank_by_entropy(&pool, &cat, &cfg, 4).is_err());

        let tie = vec![scene("b", &[("Car", 0.9)]), scene("a", &[("Car", 0.9)])];
        assert_eq!(rank_by_entropy(&tie, &cat, &cfg, 2).unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn config_validation() {
        assert!(EntropyConfig { tau: 1.5, zeta: 1e-12 }.validate().is_err());
        assert!(EntropyConfig { tau: 0.3, zeta: 0.0 }.validate().is_err());
        assert!(EntropyConfig::default().validate().is_ok());
    }
}
