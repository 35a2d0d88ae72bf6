//! Dataset diagnostics: class balance against a uniform target, Gaussian KL
//! between similarity distributions, sampled pair similarities and
//! selection reports.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::eligible_detections;
use crate::error::{Error, Result};
use crate::graph::{build_scene_graph, SceneGraph};
use crate::kernel::{graph_similarity_matrix, marginalized_kernel, KernelConfig};
use crate::model::{ClassCatalog, Scene};
use crate::sampler::ScoringContext;
use crate::uncertainty::detection_uncertainties;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagConfig {
    /// Use `(mu_s - mu_t)^2` in the Gaussian KL. `false` evaluates the
    /// unsquared difference, which can go negative.
    pub squared_mean_term: bool,
    /// Pairs sampled for similarity statistics.
    pub n_pairs: usize,
    pub histogram_bins: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        DiagConfig {
            squared_mean_term: true,
            n_pairs: 1000,
            histogram_bins: 10,
        }
    }
}

impl DiagConfig {
    pub fn validate(&self) -> Result<()> {
        if self.histogram_bins == 0 {
            return Err(Error::Config("diag.histogram_bins must be at least 1".into()));
        }
        Ok(())
    }
}

/// Entropy `-sum p ln p` of a count vector over its nonzero entries; zero
/// for an all-zero vector.
pub fn discrete_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    counts
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// KL divergence of the class distribution from the uniform distribution
/// over `num_classes` classes: `ln C - H`.
pub fn category_kl_to_uniform(counts: &[u64], num_classes: usize) -> Result<f64> {
    if num_classes == 0 || counts.len() > num_classes {
        return Err(Error::invalid(format!(
            "{} class counts for a catalog of {num_classes}",
            counts.len()
        )));
    }
    if counts.iter().sum::<u64>() == 0 {
        return Err(Error::invalid("class distribution of an empty selection is undefined"));
    }
    Ok(((num_classes as f64).ln() - discrete_entropy(counts)).max(0.0))
}

/// KL divergence between two univariate Gaussians given by mean and
/// standard deviation, `KL(source || target)`.
pub fn similarity_gaussian_kl(
    mu_s: f64,
    sigma_s: f64,
    mu_t: f64,
    sigma_t: f64,
    squared_mean_term: bool,
) -> Result<f64> {
    if !(sigma_s > 0.0 && sigma_t > 0.0 && sigma_s.is_finite() && sigma_t.is_finite()) {
        return Err(Error::invalid(format!(
            "standard deviations must be positive (sigma_s={sigma_s}, sigma_t={sigma_t})"
        )));
    }
    let diff = mu_s - mu_t;
    let mean_term = if squared_mean_term { diff * diff } else { diff };
    Ok((sigma_t / sigma_s).ln() + (sigma_s * sigma_s + mean_term) / (2.0 * sigma_t * sigma_t) - 0.5)
}

/// Object counts per class over confident detections, catalog order.
pub fn class_histogram(scenes: &[Scene], catalog: &ClassCatalog, tau: f64) -> Vec<u64> {
    let mut counts = vec![0u64; catalog.len()];
    for s in scenes {
        for (_, d) in eligible_detections(s, tau) {
            if let Some(c) = catalog.index_of(&d.class_label) {
                counts[c] += 1;
            }
        }
    }
    counts
}

/// Decodes a linear index over the `n (n - 1) / 2` unordered pairs.
fn pair_at(mut k: usize, n: usize) -> (usize, usize) {
    for i in 0..n {
        let row = n - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
    }
    unreachable!("pair index out of range")
}

/// Similarities of up to `n_pairs` distinct unordered scene pairs drawn
/// uniformly with `rng_seed`. Returns fewer values when the pool has fewer
/// pairs.
pub fn sample_pair_similarities(
    scenes: &[Scene],
    n_pairs: usize,
    rng_seed: u64,
    catalog: &ClassCatalog,
    tau: f64,
    kernel: &KernelConfig,
) -> Result<Vec<f64>> {
    let n = scenes.len();
    if n < 2 {
        return Err(Error::InsufficientPool {
            required: 2,
            available: n,
        });
    }
    let total = n * (n - 1) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let pairs: Vec<(usize, usize)> = index::sample(&mut rng, total, n_pairs.min(total))
        .into_iter()
        .map(|k| pair_at(k, n))
        .collect();

    let used: BTreeSet<usize> = pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
    let graphs: Vec<Option<(SceneGraph, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !used.contains(&i) {
                return Ok(None);
            }
            let g = build_scene_graph(&scenes[i], catalog, tau, kernel.min_dist)?;
            let k = marginalized_kernel(&g, &g, kernel)?;
            Ok(Some((g, k)))
        })
        .collect::<Result<_>>()?;
    pairs
        .par_iter()
        .map(|&(i, j)| {
            let (gi, ki) = graphs[i].as_ref().expect("graph built for sampled scene");
            let (gj, kj) = graphs[j].as_ref().expect("graph built for sampled scene");
            let kij = marginalized_kernel(gi, gj, kernel)?;
            Ok((kij / (ki * kj).sqrt()).clamp(0.0, 1.0))
        })
        .collect()
}

/// Mean over all unordered pairs of `scenes`; `None` for fewer than two.
pub fn mean_pairwise_similarity(scenes: &[Scene], ctx: &ScoringContext) -> Result<Option<f64>> {
    let n = scenes.len();
    if n < 2 {
        return Ok(None);
    }
    let graphs: Vec<SceneGraph> = scenes
        .par_iter()
        .map(|s| build_scene_graph(s, &ctx.catalog, ctx.tau(), ctx.kernel.min_dist))
        .collect::<Result<_>>()?;
    let sim = graph_similarity_matrix(&graphs, &ctx.kernel)?;
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += sim.get(i, j);
        }
    }
    Ok(Some(sum / (n * (n - 1) / 2) as f64))
}

pub fn mean_and_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Equal-width histogram of per-detection mean AU and EU, shared edges
/// from zero to the largest value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyHistogram {
    pub edges: Vec<f64>,
    pub au_counts: Vec<u64>,
    pub eu_counts: Vec<u64>,
}

fn histogram(au: &[f64], eu: &[f64], bins: usize) -> UncertaintyHistogram {
    let max = au.iter().chain(eu).copied().fold(0.0f64, f64::max);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|i| i as f64 * width).collect();
    let count = |vals: &[f64]| {
        let mut c = vec![0u64; bins];
        for v in vals {
            let b = ((v / width) as usize).min(bins - 1);
            c[b] += 1;
        }
        c
    };
    UncertaintyHistogram {
        edges,
        au_counts: count(au),
        eu_counts: count(eu),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagReport {
    pub selected_count: usize,
    pub pool_count: usize,
    /// `(class, count)` over confident detections of the selection.
    pub class_histogram: Vec<(String, u64)>,
    pub pool_class_histogram: Vec<(String, u64)>,
    pub box_count: u64,
    /// `None` when the selection holds no objects.
    pub category_kl: Option<f64>,
    pub discrete_entropy: f64,
    pub similarity_mean: Option<f64>,
    pub similarity_std: Option<f64>,
    pub pair_sample_count: usize,
    /// Present when every confident selected detection carries mixtures.
    pub uncertainty_histogram: Option<UncertaintyHistogram>,
    pub similarity_samples: Vec<f64>,
}

/// Diagnostics of `selected`, which must be a subset of `pool` by id.
pub fn selection_report(
    selected: &[Scene],
    pool: &[Scene],
    ctx: &ScoringContext,
    diag: &DiagConfig,
    rng_seed: u64,
) -> Result<DiagReport> {
    let pool_ids: BTreeSet<&str> = pool.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = selected.iter().find(|s| !pool_ids.contains(s.id.as_str())) {
        return Err(Error::invalid(format!("selected scene `{}` is not in the pool", s.id)));
    }
    let tau = ctx.tau();
    let counts = class_histogram(selected, &ctx.catalog, tau);
    let pool_counts = class_histogram(pool, &ctx.catalog, tau);
    let named =
        |c: &[u64]| -> Vec<(String, u64)> { ctx.catalog.classes.iter().cloned().zip(c.iter().copied()).collect() };
    let box_count: u64 = counts.iter().sum();

    let samples = if selected.len() >= 2 {
        sample_pair_similarities(selected, diag.n_pairs, rng_seed, &ctx.catalog, tau, &ctx.kernel)?
    } else {
        Vec::new()
    };
    let stats = mean_and_std(&samples);

    let mut au = Vec::new();
    let mut eu = Vec::new();
    let mut complete = true;
    for s in selected {
        match detection_uncertainties(s, &ctx.anchors, tau) {
            Ok(list) => {
                for (_, u) in list {
                    au.push(u.au.iter().sum::<f64>() / 7.0);
                    eu.push(u.eu.iter().sum::<f64>() / 7.0);
                }
            }
            Err(_) => {
                complete = false;
                break;
            }
        }
    }
    let uncertainty_histogram = (complete && !au.is_empty()).then(|| histogram(&au, &eu, diag.histogram_bins));

    Ok(DiagReport {
        selected_count: selected.len(),
        pool_count: pool.len(),
        class_histogram: named(&counts),
        pool_class_histogram: named(&pool_counts),
        box_count,
        category_kl: if box_count > 0 {
            Some(category_kl_to_uniform(&counts, ctx.catalog.len())?)
        } else {
            None
        },
        discrete_entropy: discrete_entropy(&counts),
        similarity_mean: stats.map(|s| s.0),
        similarity_std: stats.map(|s| s.1),
        pair_sample_count: samples.len(),
        uncertainty_histogram,
        similarity_samples: samples,
    })
}

impl DiagReport {
    /// `class,selected,pool`
    pub fn class_histogram_csv(&self) -> String {
        let mut out = String::from("class,selected,pool\n");
        for ((c, n), (_, p)) in self.class_histogram.iter().zip(&self.pool_class_histogram) {
            out.push_str(&format!("{c},{n},{p}\n"));
        }
        out
    }

    /// `bin_low,bin_high,au,eu`; empty body without a histogram.
    pub fn uncertainty_histogram_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,au,eu\n");
        if let Some(h) = &self.uncertainty_histogram {
            for i in 0..h.au_counts.len() {
                out.push_str(&format!(
                    "{:.9},{:.9},{},{}\n",
                    h.edges[i],
                    h.edges[i + 1],
                    h.au_counts[i],
                    h.eu_counts[i]
                ));
            }
        }
        out
    }

    /// One similarity per line, suitable for plotting tools.
    pub fn similarity_samples_dat(&self) -> String {
        self.similarity_samples.iter().map(|v| format!("{v:.9}\n")).collect()
    }
}
