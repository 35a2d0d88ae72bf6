//! Scene scoring and selection for active learning on 3D object detection
//! datasets.
//!
//! Scenes are scored three ways:
//!
//! * [`entropy`]: class balance of the confident predictions in a scene;
//! * [`kernel`]: similarity between scenes as a marginalized random-walk
//!   kernel on [`graph`]s of their objects;
//! * [`uncertainty`]: aleatoric and epistemic uncertainty of mixture-density
//!   box regressions.
//!
//! [`sampler::three_stage_select`] chains the three scores into one
//! selection and [`rounds::run_al_rounds`] repeats it over simulated
//! annotation rounds. [`kitti`] reads and writes label files, mixture
//! sidecars and round state; [`diag`] reports dataset statistics and
//! [`synth`] generates seeded synthetic pools.
//!
//! # Symbols
//!
//! Each quantity has exactly one home:
//!
//! | symbol | meaning | home |
//! |---|---|---|
//! | `C`, `c` | class count, class | [`ClassCatalog::classes`] |
//! | `tau` | confidence threshold shared by all metrics | [`EntropyConfig::tau`] |
//! | `zeta` | entropy stability constant | [`EntropyConfig::zeta`] |
//! | scene, `N` | scene and its detection count | [`Scene`], [`Scene::detections`] |
//! | class, confidence | per-detection prediction | [`ScoredDetection`] |
//! | `pi`, `mu`, `sigma` per residual, `K` | mixture weights, means, variances, components | [`Mixture1D`], [`MixtureParams`] |
//! | residual dimension | `dx .. dtheta` | [`ResidualDim`] |
//! | `h_a`, `d_a` | anchor height and ground diagonal | [`Anchor`], [`Anchor::diagonal`] |
//! | `eta` | EU weight | [`UncertaintyConfig::eta`] |
//! | `sigma` (edges) | edge-kernel bandwidth | [`KernelConfig::sigma`] |
//! | `gamma` | walk termination probability | [`KernelConfig::gamma`] |
//! | `K1`, `K2`, `N_r` | stage multipliers, per-round count | [`StagePlan`] |
//! | `R` | number of rounds | [`config::PlanConfig::rounds`] |
//! | `B` | annotation budget | [`RoundState::budget_total`] |

pub mod config;
pub mod diag;
pub mod entropy;
pub mod error;
pub mod graph;
pub mod kernel;
pub mod kitti;
pub mod model;
pub mod rounds;
pub mod sampler;
pub mod synth;
pub mod uncertainty;

pub use config::Config;
pub use entropy::{category_entropy, filtered_class_counts, rank_by_entropy, EntropyConfig};
pub use error::{Error, Result};
pub use graph::{build_scene_graph, NodeLabel, SceneGraph};
pub use kernel::{
    kernel_brute_force, marginalized_kernel, pairwise_similarity_matrix, similarity, KernelConfig, SimilarityMatrix,
};
pub use kitti::{load_round_state, parse_label_file, save_round_state, serialize_label_file, RoundState};
pub use model::{
    Anchor, AnchorTable, Box3D, ClassCatalog, Mixture1D, MixtureParams, ResidualDim, Scene, ScoredDetection,
};
pub use rounds::{run_al_rounds, Oracle, Predictor, RoundReport, Strategy};
pub use sampler::{farthest_sampling, three_stage_select, ScoringContext, Stage, StagePlan};
pub use uncertainty::{mixture_au, mixture_eu, mixture_mean, scene_uncertainty, BoxUncertainty, UncertaintyConfig};
