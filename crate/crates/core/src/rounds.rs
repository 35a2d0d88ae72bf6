//! Multi-round active-learning driver and per-round reports.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diag::{category_kl_to_uniform, class_histogram, discrete_entropy, mean_pairwise_similarity};
use crate::entropy::rank_by_entropy;
use crate::error::{Error, Result};
use crate::kernel::pairwise_similarity_matrix;
use crate::kitti::RoundState;
use crate::model::Scene;
use crate::sampler::{farthest_sampling, three_stage_select, ScoringContext, SelectionLog, StagePlan};
use crate::uncertainty::{rank_by_uncertainty, scene_uncertainty};

/// Produces scored detections for a pool scene.
pub trait Predictor: Sync {
    /// `labeled_count` is the size of the labeled set when the prediction is
    /// requested.
    fn predict(&self, scene_id: &str, labeled_count: usize) -> Result<Scene>;
}

/// Reveals ground truth for a selected scene.
pub trait Oracle: Sync {
    fn reveal(&self, scene_id: &str) -> Result<Scene>;
}

/// Selection strategy for one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Random,
    EntropyOnly,
    FsOnly,
    UncertaintyOnly,
    /// The three-stage joint selector.
    Joint,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Random,
        Strategy::EntropyOnly,
        Strategy::FsOnly,
        Strategy::UncertaintyOnly,
        Strategy::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::EntropyOnly => "entropy-only",
            Strategy::FsOnly => "fs-only",
            Strategy::UncertaintyOnly => "uncertainty-only",
            Strategy::Joint => "joint",
        }
    }

    fn needs_mixtures(self) -> bool {
        matches!(self, Strategy::UncertaintyOnly | Strategy::Joint)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
            Error::invalid(format!("unknown strategy `{s}` (valid: {})", names.join(", ")))
        })
    }
}

/// Metrics of one round's selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub strategy: Strategy,
    /// 1-based round number.
    pub round: usize,
    pub selected: Vec<String>,
    /// Object counts per class in the revealed ground truth, catalog order.
    pub class_counts: Vec<u64>,
    /// Entropy of the class distribution over all revealed objects.
    pub entropy: f64,
    pub category_kl: Option<f64>,
    /// Mean similarity over all pairs of revealed scenes.
    pub similarity_mean: Option<f64>,
    /// Mean predicted scene uncertainty of the selection, when the
    /// predictions carry mixtures.
    pub uncertainty_mean: Option<f64>,
    pub selection_log: Option<SelectionLog>,
}

/// Output of [`run_al_rounds`].
#[derive(Clone, Debug, PartialEq)]
pub struct AlRun {
    pub reports: Vec<RoundReport>,
    /// Ground truth of every selected scene, in selection order.
    pub revealed: Vec<Scene>,
    /// Predictions for every selected scene at the time of selection.
    pub predicted: Vec<Scene>,
}

/// Runs `rounds` selection rounds over the unlabeled part of `state`.
///
/// Each round predicts the unlabeled pool, selects `plan.n_r` scenes with
/// `strategy`, reveals them through `oracle` and moves them to the labeled
/// set. A failing round leaves `state` as it was after the previous round
/// and returns [`Error::RoundAborted`].
pub fn run_al_rounds(
    plan: &StagePlan,
    rounds: usize,
    strategy: Strategy,
    predictor: &dyn Predictor,
    oracle: &dyn Oracle,
    state: &mut RoundState,
    ctx: &ScoringContext,
) -> Result<AlRun> {
    if rounds == 0 {
        return Err(Error::invalid("at least one round is required"));
    }
    plan.validate()?;
    let needed = rounds * plan.n_r;
    if needed > state.remaining_budget() {
        return Err(Error::invalid(format!(
            "{rounds} rounds of {} need {needed} scenes but only {} remain in the budget",
            plan.n_r,
            state.remaining_budget()
        )));
    }
    let mut run = AlRun {
        reports: Vec::new(),
        revealed: Vec::new(),
        predicted: Vec::new(),
    };
    for _ in 0..rounds {
        let round = state.round_index + 1;
        let abort = |e: Error| match e {
            e @ Error::RoundAborted { .. } => e,
            other => Error::RoundAborted {
                round,
                source: Box::new(other),
            },
        };
        let (report, revealed, predicted) = run_round(plan, strategy, predictor, oracle, state, ctx).map_err(abort)?;
        state.record_round(report.selected.clone()).map_err(abort)?;
        log::info!("{strategy} round {round}: selected {}", report.selected.len());
        run.reports.push(report);
        run.revealed.extend(revealed);
        run.predicted.extend(predicted);
    }
    Ok(run)
}

fn run_round(
    plan: &StagePlan,
    strategy: Strategy,
    predictor: &dyn Predictor,
    oracle: &dyn Oracle,
    state: &RoundState,
    ctx: &ScoringContext,
) -> Result<(RoundReport, Vec<Scene>, Vec<Scene>)> {
    let round = state.round_index + 1;
    let labeled = state.labeled_ids.len();
    let unlabeled_ids: Vec<&String> = state.unlabeled_ids.iter().collect();
    let (plan, degraded) = plan.fit_to_pool(unlabeled_ids.len())?;
    if degraded {
        log::warn!(
            "round {round}: pool of {} is below floor(k1 * n_r); using k1={:.4}, k2={:.4}",
            unlabeled_ids.len(),
            plan.k1,
            plan.k2
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(state.rng_seed);
    rng.set_stream(round as u64);

    let predict_all =
        |ids: &[&String]| -> Result<Vec<Scene>> { ids.par_iter().map(|id| predictor.predict(id, labeled)).collect() };
    let n_r = plan.n_r;
    let mut selection_log = None;
    let (selected, predicted): (Vec<String>, Vec<Scene>) = match strategy {
        Strategy::Random => {
            let picks: Vec<&String> = index::sample(&mut rng, unlabeled_ids.len(), n_r)
                .into_iter()
                .map(|i| unlabeled_ids[i])
                .collect();
            let preds = predict_all(&picks)?;
            (picks.into_iter().cloned().collect(), preds)
        }
        Strategy::FsOnly => {
            let m = plan.sizes()[0].min(unlabeled_ids.len());
            let mut cand: Vec<&String> = index::sample(&mut rng, unlabeled_ids.len(), m)
                .into_iter()
                .map(|i| unlabeled_ids[i])
                .collect();
            cand.sort();
            let preds = predict_all(&cand)?;
            let sim = pairwise_similarity_matrix(&preds, &ctx.catalog, ctx.tau(), &ctx.kernel)?;
            let ids: Vec<String> = cand.iter().map(|s| s.to_string()).collect();
            let picked = farthest_sampling(&ids, &sim, n_r)?;
            pick_predictions(picked, preds)
        }
        Strategy::EntropyOnly | Strategy::UncertaintyOnly | Strategy::Joint => {
            let preds = predict_all(&unlabeled_ids)?;
            let picked = match strategy {
                Strategy::EntropyOnly => rank_by_entropy(&preds, &ctx.catalog, &ctx.entropy, n_r)?,
                Strategy::UncertaintyOnly => {
                    rank_by_uncertainty(&preds, &ctx.anchors, ctx.tau(), &ctx.uncertainty, n_r)?
                }
                _ => {
                    let mut sel = three_stage_select(&preds, &plan, ctx)?;
                    sel.log.degraded = degraded;
                    selection_log = Some(sel.log);
                    sel.ids
                }
            };
            pick_predictions(picked, preds)
        }
    };

    let revealed: Vec<Scene> = selected.par_iter().map(|id| oracle.reveal(id)).collect::<Result<_>>()?;
    if let Some(bad) = revealed.iter().zip(&selected).find(|(s, id)| &s.id != *id) {
        return Err(Error::invalid(format!(
            "oracle returned scene `{}` for `{}`",
            bad.0.id, bad.1
        )));
    }
    let mut report = round_metrics(strategy, round, &revealed, &predicted, ctx)?;
    report.selected = selected;
    report.selection_log = selection_log;
    if strategy.needs_mixtures() && report.uncertainty_mean.is_none() {
        return Err(Error::invalid("predictions lack mixture parameters"));
    }
    Ok((report, revealed, predicted))
}

/// Keeps the predictions of `picked`, in pick order.
fn pick_predictions(picked: Vec<String>, preds: Vec<Scene>) -> (Vec<String>, Vec<Scene>) {
    let mut by_id: BTreeMap<String, Scene> = preds.into_iter().map(|s| (s.id.clone(), s)).collect();
    let chosen = picked
        .iter()
        .map(|id| by_id.remove(id).expect("picked from predictions"))
        .collect();
    (picked, chosen)
}

/// Class counts, entropy, KL, similarity and uncertainty of a selection.
/// Ground-truth scenes feed the class and similarity metrics; predictions
/// feed uncertainty.
pub fn round_metrics(
    strategy: Strategy,
    round: usize,
    revealed: &[Scene],
    predicted: &[Scene],
    ctx: &ScoringContext,
) -> Result<RoundReport> {
    let counts = class_histogram(revealed, &ctx.catalog, ctx.tau());
    let total: u64 = counts.iter().sum();
    let uncertainty_mean = if predicted.is_empty() {
        None
    } else {
        predicted
            .par_iter()
            .map(|s| scene_uncertainty(s, &ctx.anchors, ctx.tau(), &ctx.uncertainty))
            .collect::<Result<Vec<f64>>>()
            .ok()
            .map(|u| u.iter().sum::<f64>() / u.len() as f64)
    };
    Ok(RoundReport {
        strategy,
        round,
        selected: revealed.iter().map(|s| s.id.clone()).collect(),
        entropy: discrete_entropy(&counts),
        category_kl: if total > 0 {
            Some(category_kl_to_uniform(&counts, ctx.catalog.len())?)
        } else {
            None
        },
        class_counts: counts,
        similarity_mean: mean_pairwise_similarity(revealed, ctx)?,
        uncertainty_mean,
        selection_log: None,
    })
}

/// Per-round CSV: one row per report.
pub fn reports_csv(reports: &[RoundReport], ctx: &ScoringContext) -> String {
    let mut out = String::from("strategy,round,selected,entropy,category_kl,similarity_mean,uncertainty_mean");
    for c in &ctx.catalog.classes {
        out.push_str(&format!(",count_{c}"));
    }
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.9},{},{},{}",
            r.strategy,
            r.round,
            r.selected.len(),
            r.entropy,
            opt(r.category_kl),
            opt(r.similarity_mean),
            opt(r.uncertainty_mean)
        ));
        for n in &r.class_counts {
            out.push_str(&format!(",{n}"));
        }
        out.push('\n');
    }
    out
}

/// Stage sizes of every logged round: `round,stage,input,output,kernel_evaluations,sorts`.
pub fn stage_log_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from("round,stage,input_size,output_size,kernel_evaluations,sorts,comparisons,degraded\n");
    for r in reports {
        if let Some(log) = &r.selection_log {
            for s in &log.stages {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.round,
                    s.stage,
                    s.input_size,
                    s.output_size,
                    s.kernel_evaluations,
                    s.sorts,
                    s.comparisons,
                    log.degraded
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        let err = "greedy".parse::<Strategy>().unwrap_err().to_string();
        assert!(err.contains("random") && err.contains("joint"), "{err}");
    }
}
