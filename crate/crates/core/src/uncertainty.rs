//! Mixture moments, aleatoric/epistemic uncertainty, residual-to-box
//! propagation and the per-scene uncertainty score.
//!
//! Mixture `variances` are variances throughout. Aleatoric uncertainty (AU)
//! of one residual is the weight-averaged component variance; epistemic
//! uncertainty (EU) is the weighted spread of component means about the
//! mixture mean. Together they are the mixture's total variance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::{descending_then_id, eligible_detections};
use crate::error::{Error, Result};
use crate::model::{Anchor, AnchorTable, Mixture1D, MixtureParams, ResidualDim, Scene};

/// Smallest `|cos|` of the yaw residual mean accepted by propagation.
pub const MIN_COS_YAW: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    /// Weight of EU relative to AU in the scene score.
    pub eta: f64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig { eta: 0.5 }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::Config(format!("uncertainty.eta must be >= 0, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Box-space dimensions, in the order `x, y, z, w, h, l, theta`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxDim {
    X,
    Y,
    Z,
    W,
    H,
    L,
    Theta,
}

impl BoxDim {
    pub const ALL: [BoxDim; 7] = [
        BoxDim::X,
        BoxDim::Y,
        BoxDim::Z,
        BoxDim::W,
        BoxDim::H,
        BoxDim::L,
        BoxDim::Theta,
    ];

    /// The residual this box dimension is regressed through.
    pub fn residual(self) -> ResidualDim {
        ResidualDim::ALL[self as usize]
    }
}

/// Propagated per-dimension uncertainty of one box, indexed by [`BoxDim`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxUncertainty {
    pub au: [f64; 7],
    pub eu: [f64; 7],
}

impl BoxUncertainty {
    pub fn au(&self, d: BoxDim) -> f64 {
        self.au[d as usize]
    }

    pub fn eu(&self, d: BoxDim) -> f64 {
        self.eu[d as usize]
    }
}

/// Which uncertainty a propagation call is carrying.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UncertaintyKind {
    Aleatoric,
    Epistemic,
}

pub fn mixture_mean(m: &Mixture1D) -> f64 {
    m.weights.iter().zip(&m.means).map(|(w, mu)| w * mu).sum()
}

pub fn mixture_au(m: &Mixture1D) -> f64 {
    m.weights.iter().zip(&m.variances).map(|(w, v)| w * v).sum()
}

pub fn mixture_eu(m: &Mixture1D) -> f64 {
    let mean = mixture_mean(m);
    m.weights
        .iter()
        .zip(&m.means)
        .map(|(w, mu)| w * (mu - mean) * (mu - mean))
        .sum()
}

/// Residual-space moments of one detection: `(means, au, eu)`, each indexed
/// by [`ResidualDim`].
pub fn residual_moments(params: &MixtureParams) -> ([f64; 7], [f64; 7], [f64; 7]) {
    let dims = params.dims();
    (
        std::array::from_fn(|i| mixture_mean(&dims[i])),
        std::array::from_fn(|i| mixture_au(&dims[i])),
        std::array::from_fn(|i| mixture_eu(&dims[i])),
    )
}

/// Maps residual variances to box-space variances.
///
/// Position scales by the anchor diagonal squared (`x`, `y`) or the anchor
/// height squared (`z`); size dimensions scale by their residual mean
/// squared; yaw scales by `sec^2` of the yaw residual mean. Returns the
/// seven propagated values in [`BoxDim`] order.
pub fn propagate(residual_var: &[f64; 7], residual_means: &[f64; 7], anchor: &Anchor) -> Result<[f64; 7]> {
    anchor.validate()?;
    if residual_var.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("residual variances must be finite and non-negative"));
    }
    let cos = residual_means[ResidualDim::Dtheta.index()].cos();
    if cos.abs() < MIN_COS_YAW {
        return Err(Error::invalid(format!(
            "near-singular yaw secant, |cos| = {:e}",
            cos.abs()
        )));
    }
    let d2 = {
        let d = anchor.diagonal();
        d * d
    };
    let h2 = anchor.height * anchor.height;
    let sq = |d: ResidualDim| residual_means[d.index()] * residual_means[d.index()];
    Ok([
        d2 * residual_var[ResidualDim::Dx.index()],
        d2 * residual_var[ResidualDim::Dy.index()],
        h2 * residual_var[ResidualDim::Dz.index()],
        sq(ResidualDim::Dw) * residual_var[ResidualDim::Dw.index()],
        sq(ResidualDim::Dh) * residual_var[ResidualDim::Dh.index()],
        sq(ResidualDim::Dl) * residual_var[ResidualDim::Dl.index()],
        residual_var[ResidualDim::Dtheta.index()] / (cos * cos),
    ])
}

/// Propagates one kind of residual uncertainty into box space. AU and EU use
/// identical scale factors; `kind` selects which slot of the result is
/// filled.
pub fn propagate_uncertainty(
    residual_au: &[f64; 7],
    residual_eu: &[f64; 7],
    residual_means: &[f64; 7],
    anchor: &Anchor,
    kind: UncertaintyKind,
) -> Result<BoxUncertainty> {
    let mut out = BoxUncertainty {
        au: [0.0; 7],
        eu: [0.0; 7],
    };
    match kind {
        UncertaintyKind::Aleatoric => out.au = propagate(residual_au, residual_means, anchor)?,
        UncertaintyKind::Epistemic => out.eu = propagate(residual_eu, residual_means, anchor)?,
    }
    Ok(out)
}

/// Both kinds at once.
pub fn box_uncertainty(params: &MixtureParams, anchor: &Anchor) -> Result<BoxUncertainty> {
    let (means, au, eu) = residual_moments(params);
    Ok(BoxUncertainty {
        au: propagate(&au, &means, anchor)?,
        eu: propagate(&eu, &means, anchor)?,
    })
}

/// Propagated uncertainty for every detection with `confidence >= tau`,
/// paired with the detection index.
pub fn detection_uncertainties(scene: &Scene, anchors: &AnchorTable, tau: f64) -> Result<Vec<(usize, BoxUncertainty)>> {
    eligible_detections(scene, tau)
        .map(|(i, d)| {
            let mixture = d.mixture.as_ref().ok_or_else(|| Error::MissingMixture {
                scene: scene.id.clone(),
                index: i,
            })?;
            let anchor = anchors.get(&d.class_label).ok_or_else(|| Error::UnknownClass {
                label: d.class_label.clone(),
            })?;
            let (means, _, _) = residual_moments(mixture);
            let cos = means[ResidualDim::Dtheta.index()].cos();
            if cos.abs() < MIN_COS_YAW {
                return Err(Error::SingularYaw {
                    scene: scene.id.clone(),
                    index: i,
                    cos: cos.abs(),
                });
            }
            Ok((i, box_uncertainty(mixture, anchor)?))
        })
        .collect()
}

/// Mean of `au + eta * eu` over the seven box dimensions of every eligible
/// detection. Zero when no detection passes the filter.
pub fn scene_uncertainty(scene: &Scene, anchors: &AnchorTable, tau: f64, config: &UncertaintyConfig) -> Result<f64> {
    let per_det = detection_uncertainties(scene, anchors, tau)?;
    if per_det.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = per_det
        .iter()
        .map(|(_, u)| (0..7).map(|k| u.au[k] + config.eta * u.eu[k]).sum::<f64>())
        .sum();
    Ok(total / (7 * per_det.len()) as f64)
}

/// Scenes missing mixture parameters on an eligible detection, as
/// `(scene id, detection index)`.
pub fn missing_mixtures(scenes: &[Scene], tau: f64) -> Vec<(String, usize)> {
    scenes
        .iter()
        .filter_map(|s| {
            eligible_detections(s, tau)
                .find(|(_, d)| d.mixture.is_none())
                .map(|(i, _)| (s.id.clone(), i))
        })
        .collect()
}

/// Top `top_n` scene ids by descending uncertainty; ties by ascending id.
///
/// Scenes with a near-singular yaw residual are ranked after all others
/// (logged as a warning); any other scoring error is returned.
pub fn rank_by_uncertainty(
    scenes: &[Scene],
    anchors: &AnchorTable,
    tau: f64,
    config: &UncertaintyConfig,
    top_n: usize,
) -> Result<Vec<String>> {
    if top_n > scenes.len() {
        return Err(Error::InsufficientPool {
            required: top_n,
            available: scenes.len(),
        });
    }
    let scores = ranking_scores(scenes, anchors, tau, config)?;
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.sort_by(|&a, &b| descending_then_id((scores[a], &scenes[a].id), (scores[b], &scenes[b].id)));
    Ok(order.into_iter().take(top_n).map(|i| scenes[i].id.clone()).collect())
}

/// Per-scene uncertainty for ranking. A scene with a near-singular yaw
/// residual scores `-inf` and a warning is logged.
pub fn ranking_scores(
    scenes: &[Scene],
    anchors: &AnchorTable,
    tau: f64,
    config: &UncertaintyConfig,
) -> Result<Vec<f64>> {
    scenes
        .par_iter()
        .map(|s| match scene_uncertainty(s, anchors, tau, config) {
            Ok(u) => Ok(u),
            Err(e @ Error::SingularYaw { .. }) => {
                log::warn!("{e}; scene excluded from uncertainty ranking");
                Ok(f64::NEG_INFINITY)
            }
            Err(e) => Err(e),
        })
        .collect()
}

/// Negative log-likelihood of a residual target under a detection's
/// mixtures, summed over the seven residuals. Evaluated with log-sum-exp.
pub fn mdn_nll(params: &MixtureParams, target: &[f64; 7]) -> f64 {
    params
        .dims()
        .iter()
        .zip(target)
        .map(|(m, &t)| -log_mixture_density(m, t))
        .sum()
}

/// Mean of [`mdn_nll`] over a set of detections.
pub fn mdn_loss(items: &[(&MixtureParams, [f64; 7])]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::invalid("loss over an empty detection set"));
    }
    Ok(items.iter().map(|(p, t)| mdn_nll(p, t)).sum::<f64>() / items.len() as f64)
}

fn log_mixture_density(m: &Mixture1D, x: f64) -> f64 {
    let terms: Vec<f64> = m
        .weights
        .iter()
        .zip(m.means.iter().zip(&m.variances))
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, (mu, var))| {
            let z = x - mu;
            w.ln() - 0.5 * (2.0 * std::f64::consts::PI * var).ln() - z * z / (2.0 * var)
        })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}
