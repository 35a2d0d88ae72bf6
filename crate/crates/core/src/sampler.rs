//! Farthest sampling and the three-stage joint selector.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::{category_entropy, descending_then_id, EntropyConfig};
use crate::error::{Error, Result};
use crate::kernel::{pairwise_similarity_matrix, KernelConfig, SimilarityMatrix};
use crate::model::{AnchorTable, ClassCatalog, Scene};
use crate::uncertainty::{missing_mixtures, ranking_scores, UncertaintyConfig};

/// One selection stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Entropy,
    Similarity,
    Uncertainty,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Entropy => "entropy",
            Stage::Similarity => "similarity",
            Stage::Uncertainty => "uncertainty",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    /// Accepts full names or their initials (`e`, `s`, `u`), any case.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entropy" | "e" => Ok(Stage::Entropy),
            "similarity" | "s" => Ok(Stage::Similarity),
            "uncertainty" | "u" => Ok(Stage::Uncertainty),
            other => Err(Error::invalid(format!(
                "unknown stage `{other}` (expected entropy, similarity or uncertainty)"
            ))),
        }
    }
}

/// Parses a stage order such as `entropy,similarity,uncertainty` or `USE`.
pub fn parse_stage_order(s: &str) -> Result<[Stage; 3]> {
    let parts: Vec<&str> = if s.contains(',') {
        s.split(',').collect()
    } else if s.len() == 3 && s.is_ascii() {
        (0..3).map(|i| &s[i..i + 1]).collect()
    } else {
        vec![s]
    };
    if parts.len() != 3 {
        return Err(Error::invalid(format!("stage order `{s}` must name three stages")));
    }
    let order = [parts[0].parse()?, parts[1].parse()?, parts[2].parse()?];
    check_permutation(&order)?;
    Ok(order)
}

fn check_permutation(order: &[Stage; 3]) -> Result<()> {
    for st in [Stage::Entropy, Stage::Similarity, Stage::Uncertainty] {
        if !order.contains(&st) {
            return Err(Error::invalid(format!(
                "stage order must contain each stage once (missing {st})"
            )));
        }
    }
    Ok(())
}

/// Stage order and sizes: stage one keeps `floor(k1 * n_r)` scenes, stage
/// two `floor(k2 * n_r)`, stage three `n_r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagePlan {
    pub order: [Stage; 3],
    pub k1: f64,
    pub k2: f64,
    pub n_r: usize,
}

impl Default for StagePlan {
    fn default() -> Self {
        StagePlan {
            order: [Stage::Entropy, Stage::Similarity, Stage::Uncertainty],
            k1: 3.0,
            k2: 2.5,
            n_r: 1,
        }
    }
}

/// `floor(k * n)`, tolerant of products that land a hair below an integer.
pub fn stage_size(k: f64, n: usize) -> usize {
    (k * n as f64 + 1e-9).floor() as usize
}

impl StagePlan {
    pub fn new(order: [Stage; 3], k1: f64, k2: f64, n_r: usize) -> Result<Self> {
        let plan = StagePlan { order, k1, k2, n_r };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        check_permutation(&self.order)?;
        if !(self.k1.is_finite() && self.k2.is_finite() && self.k1 >= self.k2 && self.k2 >= 1.0) {
            return Err(Error::invalid(format!(
                "stage multipliers must satisfy k1 >= k2 >= 1 (k1={}, k2={})",
                self.k1, self.k2
            )));
        }
        if self.n_r == 0 {
            return Err(Error::invalid("n_r must be at least 1"));
        }
        Ok(())
    }

    /// Sizes kept after each of the three stages.
    pub fn sizes(&self) -> [usize; 3] {
        [stage_size(self.k1, self.n_r), stage_size(self.k2, self.n_r), self.n_r]
    }

    /// The plan to use on a pool of `pool` scenes.
    ///
    /// When the pool is smaller than the first stage, `k1` is reduced so the
    /// first stage takes the whole pool and `k2` shrinks in proportion
    /// (never below 1). Returns the plan and whether it was reduced.
    pub fn fit_to_pool(&self, pool: usize) -> Result<(StagePlan, bool)> {
        if pool < self.n_r {
            return Err(Error::InsufficientPool {
                required: self.n_r,
                available: pool,
            });
        }
        if pool >= self.sizes()[0] {
            return Ok((*self, false));
        }
        let k1 = pool as f64 / self.n_r as f64;
        let k2 = (self.k2 * k1 / self.k1).max(1.0).min(k1);
        Ok((StagePlan { k1, k2, ..*self }, true))
    }
}

/// Greedy farthest sampling in `1 - S` dissimilarity.
///
/// The first pick is the scene least similar to the hub (the scene with the
/// largest similarity row sum); each further pick maximizes its minimum
/// dissimilarity to the picks so far. Ties go to the smaller id. Returns ids
/// in pick order.
pub fn farthest_sampling(pool_ids: &[String], sim: &SimilarityMatrix, k: usize) -> Result<Vec<String>> {
    let n = pool_ids.len();
    if sim.len() != n {
        return Err(Error::invalid(format!(
            "similarity matrix is {}x{} but the pool has {n} ids",
            sim.len(),
            sim.len()
        )));
    }
    if k > n {
        return Err(Error::InsufficientPool {
            required: k,
            available: n,
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(vec![pool_ids[0].clone()]);
    }
    // true when (score a, id a) beats (score b, id b) for a maximization
    let better = |sa: f64, a: usize, sb: f64, b: usize| sa > sb || (sa == sb && pool_ids[a] < pool_ids[b]);

    let row_sums: Vec<f64> = (0..n).map(|i| sim.row(i).iter().sum()).collect();
    let mut hub = 0;
    for i in 1..n {
        if better(row_sums[i], i, row_sums[hub], hub) {
            hub = i;
        }
    }
    let mut first = usize::MAX;
    for i in (0..n).filter(|&i| i != hub) {
        if first == usize::MAX || better(-sim.get(i, hub), i, -sim.get(first, hub), first) {
            first = i;
        }
    }

    let mut chosen = vec![false; n];
    let mut min_dis = vec![f64::INFINITY; n];
    let mut picks = Vec::with_capacity(k);
    let mut take = |p: usize, chosen: &mut Vec<bool>, min_dis: &mut Vec<f64>| {
        chosen[p] = true;
        picks.push(pool_ids[p].clone());
        for (i, d) in min_dis.iter_mut().enumerate() {
            *d = d.min(1.0 - sim.get(i, p));
        }
    };
    take(first, &mut chosen, &mut min_dis);
    for _ in 1..k {
        let mut best = usize::MAX;
        for i in (0..n).filter(|&i| !chosen[i]) {
            if best == usize::MAX || better(min_dis[i], i, min_dis[best], best) {
                best = i;
            }
        }
        take(best, &mut chosen, &mut min_dis);
    }
    Ok(picks)
}

/// Everything a scoring stage needs besides the scenes themselves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoringContext {
    pub catalog: ClassCatalog,
    pub anchors: AnchorTable,
    pub entropy: EntropyConfig,
    pub kernel: KernelConfig,
    pub uncertainty: UncertaintyConfig,
}

impl ScoringContext {
    /// The shared confidence filter.
    pub fn tau(&self) -> f64 {
        self.entropy.tau
    }
}

/// Instrumentation for one stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub input_size: usize,
    pub output_size: usize,
    /// Marginalized-kernel evaluations (similarity stage only).
    pub kernel_evaluations: usize,
    /// Sorts performed over the stage input (ranking stages only).
    pub sorts: usize,
    /// Comparisons made by those sorts.
    pub comparisons: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionLog {
    pub pool_size: usize,
    pub k1: f64,
    pub k2: f64,
    pub n_r: usize,
    pub degraded: bool,
    pub stages: Vec<StageRecord>,
}

impl SelectionLog {
    pub fn kernel_evaluations(&self) -> usize {
        self.stages.iter().map(|s| s.kernel_evaluations).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub ids: Vec<String>,
    pub log: SelectionLog,
}

/// Runs the three stages of `plan` over `unlabeled` and returns `n_r` ids.
///
/// Requires at least `floor(k1 * n_r)` scenes. When the uncertainty stage is
/// part of the plan, every confident detection in the pool must carry
/// mixture parameters; this is checked before any scoring.
pub fn three_stage_select(unlabeled: &[Scene], plan: &StagePlan, ctx: &ScoringContext) -> Result<Selection> {
    plan.validate()?;
    let sizes = plan.sizes();
    if unlabeled.len() < sizes[0] {
        return Err(Error::InsufficientPool {
            required: sizes[0],
            available: unlabeled.len(),
        });
    }
    if plan.order.contains(&Stage::Uncertainty) {
        if let Some((scene, index)) = missing_mixtures(unlabeled, ctx.tau()).into_iter().next() {
            return Err(Error::MissingMixture { scene, index });
        }
    }

    let mut current: Vec<usize> = (0..unlabeled.len()).collect();
    let mut stages = Vec::with_capacity(3);
    for (&stage, &keep) in plan.order.iter().zip(&sizes) {
        let (next, record) = run_stage(stage, unlabeled, &current, keep, ctx)?;
        log::debug!("stage {stage}: {} -> {}", record.input_size, record.output_size);
        stages.push(record);
        current = next;
    }
    Ok(Selection {
        ids: current.iter().map(|&i| unlabeled[i].id.clone()).collect(),
        log: SelectionLog {
            pool_size: unlabeled.len(),
            k1: plan.k1,
            k2: plan.k2,
            n_r: plan.n_r,
            degraded: false,
            stages,
        },
    })
}

/// Applies one stage to the scenes at `current` and keeps `keep` of them.
pub fn run_stage(
    stage: Stage,
    scenes: &[Scene],
    current: &[usize],
    keep: usize,
    ctx: &ScoringContext,
) -> Result<(Vec<usize>, StageRecord)> {
    let subset: Vec<Scene> = current.iter().map(|&i| scenes[i].clone()).collect();
    let mut record = StageRecord {
        stage,
        input_size: current.len(),
        output_size: keep,
        kernel_evaluations: 0,
        sorts: 0,
        comparisons: 0,
    };
    let kept = match stage {
        Stage::Entropy | Stage::Uncertainty => {
            let scores: Vec<f64> = if stage == Stage::Entropy {
                subset
                    .par_iter()
                    .map(|s| category_entropy(s, &ctx.catalog, &ctx.entropy))
                    .collect()
            } else {
                ranking_scores(&subset, &ctx.anchors, ctx.tau(), &ctx.uncertainty)?
            };
            let ids: Vec<&str> = subset.iter().map(|s| s.id.as_str()).collect();
            let (order, comparisons) = top_k(&scores, &ids, keep);
            record.sorts = 1;
            record.comparisons = comparisons;
            order
        }
        Stage::Similarity => {
            let sim = pairwise_similarity_matrix(&subset, &ctx.catalog, ctx.tau(), &ctx.kernel)?;
            record.kernel_evaluations = sim.kernel_evaluations;
            let ids: Vec<String> = subset.iter().map(|s| s.id.clone()).collect();
            let picked = farthest_sampling(&ids, &sim, keep)?;
            picked
                .iter()
                .map(|id| {
                    ids.iter()
                        .position(|x| x == id)
                        .expect("picked id comes from the subset")
                })
                .collect()
        }
    };
    Ok((kept.into_iter().map(|j| current[j]).collect(), record))
}

/// Indices of the `keep` largest scores (ties by id) from a single sort, plus
/// the number of comparisons it made.
fn top_k(scores: &[f64], ids: &[&str], keep: usize) -> (Vec<usize>, usize) {
    let comparisons = Cell::new(0usize);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        comparisons.set(comparisons.get() + 1);
        descending_then_id((scores[a], ids[a]), (scores[b], ids[b]))
    });
    order.truncate(keep);
    (order, comparisons.get())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i}")).collect()
    }

    #[test]
    fn three_point_example() {
        let sim = SimilarityMatrix::from_values(3, vec![1.0, 0.9, 0.1, 0.9, 1.0, 0.2, 0.1, 0.2, 1.0]).unwrap();
        assert_eq!(farthest_sampling(&ids(3), &sim, 2).unwrap(), vec!["id2", "id0"]);
        assert_eq!(farthest_sampling(&ids(3), &sim, 1).unwrap(), vec!["id2"]);
        let mut all = farthest_sampling(&ids(3), &sim, 3).unwrap();
        all.sort();
        assert_eq!(all, ids(3));
        assert!(farthest_sampling(&ids(3), &sim, 4).is_err());
        assert!(farthest_sampling(&ids(3), &sim, 0).unwrap().is_empty());
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let sim = SimilarityMatrix::from_values(3, vec![1.0; 9]).unwrap();
        let names: Vec<String> = vec!["c".into(), "a".into(), "b".into()];
        // hub is "a" (all row sums equal); first pick is the smallest other id
        assert_eq!(farthest_sampling(&names, &sim, 3).unwrap(), vec!["b", "a", "c"]);
    }

    #[test]
    fn single_scene_pool() {
        let sim = SimilarityMatrix::from_values(1, vec![1.0]).unwrap();
        assert_eq!(farthest_sampling(&ids(1), &sim, 1).unwrap(), vec!["id0"]);
    }

    #[test]
    fn stage_sizes_floor() {
        let p = StagePlan {
            n_r: 2,
            ..StagePlan::default()
        };
        assert_eq!(p.sizes(), [6, 5, 2]);
        let p = StagePlan {
            n_r: 7,
            ..StagePlan::default()
        };
        assert_eq!(p.sizes(), [21, 17, 7]);
        assert_eq!(stage_size(2.3, 10), 23);
    }

    #[test]
    fn plan_validation() {
        let order = [Stage::Entropy, Stage::Similarity, Stage::Uncertainty];
        assert!(StagePlan::new(order, 3.0, 2.5, 1).is_ok());
        assert!(StagePlan::new(order, 2.0, 2.5, 1).is_err());
        assert!(StagePlan::new(order, 3.0, 0.5, 1).is_err());
        assert!(StagePlan::new(order, 3.0, 2.5, 0).is_err());
        assert!(StagePlan::new([Stage::Entropy, Stage::Entropy, Stage::Uncertainty], 3.0, 2.5, 1).is_err());
    }

    #[test]
    fn order_parsing() {
        let def = [Stage::Entropy, Stage::Similarity, Stage::Uncertainty];
        assert_eq!(parse_stage_order("entropy,similarity,uncertainty").unwrap(), def);
        assert_eq!(parse_stage_order("ESU").unwrap(), def);
        assert_eq!(
            parse_stage_order("u,s,e").unwrap(),
            [Stage::Uncertainty, Stage::Similarity, Stage::Entropy]
        );
        assert!(parse_stage_order("EEU").is_err());
        assert!(parse_stage_order("entropy,similarity").is_err());
    }

    #[test]
    fn fit_to_small_pool() {
        let p = StagePlan {
            n_r: 10,
            ..StagePlan::default()
        };
        let (same, degraded) = p.fit_to_pool(30).unwrap();
        assert!(!degraded);
        assert_eq!(same, p);
        let (small, degraded) = p.fit_to_pool(25).unwrap();
        assert!(degraded);
        assert_eq!(small.sizes(), [25, 20, 10]);
        small.validate().unwrap();
        let (tiny, _) = p.fit_to_pool(10).unwrap();
        assert_eq!(tiny.sizes(), [10, 10, 10]);
        assert!(p.fit_to_pool(9).is_err());
    }

    #[test]
    fn top_k_single_sort() {
        let scores = [0.5, 0.9, 0.5, 0.1];
        let names = ["d", "c", "a", "b"];
        let (order, comparisons) = top_k(&scores, &names, 3);
        assert_eq!(order, vec![1, 2, 0]);
        assert!(comparisons > 0);
    }
}
