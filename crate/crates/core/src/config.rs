//! Engine configuration: one TOML file plus `SCENEAL_*` environment
//! overrides.
//!
//! ```toml
//! [catalog]
//! classes = ["Car", "Pedestrian", "Cyclist"]
//! ego_label = "Ego"
//! mirror_label = "Mirror"
//!
//! [anchors.Car]
//! length = 3.9
//! width = 1.6
//! height = 1.56
//!
//! [entropy]
//! tau = 0.3
//! zeta = 1e-12
//!
//! [kernel]
//! gamma = 0.1
//! sigma = 1.0
//! tol = 1e-8
//! max_iter = 1000
//! min_dist = 0.1
//!
//! [uncertainty]
//! eta = 0.5
//!
//! [plan]
//! order = "entropy,similarity,uncertainty"
//! k1 = 3.0
//! k2 = 2.5
//! n_r = 20
//! rounds = 3
//! budget = 60
//!
//! [diag]
//! squared_mean_term = true
//! n_pairs = 1000
//! histogram_bins = 10
//!
//! [io]
//! unknown_class = "skip"
//!
//! [synth]        # pool generator, see `PoolSpec`
//! [noise]        # simulated predictor, see `NoiseModel`
//! ```
//!
//! Every section and key is optional; missing values take the defaults
//! shown. Unknown keys are rejected. A scalar key `section.key` can be
//! overridden by the environment variable `SCENEAL_SECTION_KEY`, e.g.
//! `SCENEAL_KERNEL_MAX_ITER=500` or `SCENEAL_PLAN_ORDER=USE`. The value is
//! read as a TOML literal and falls back to a plain string.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diag::DiagConfig;
use crate::entropy::EntropyConfig;
use crate::error::{Error, Result};
use crate::kernel::KernelConfig;
use crate::kitti::UnknownClassPolicy;
use crate::model::{AnchorTable, ClassCatalog};
use crate::sampler::{parse_stage_order, ScoringContext, StagePlan};
use crate::synth::{NoiseModel, PoolSpec};
use crate::uncertainty::UncertaintyConfig;

pub const ENV_PREFIX: &str = "SCENEAL_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    /// Comma-separated stage names or initials, e.g. `USE`.
    pub order: String,
    pub k1: f64,
    pub k2: f64,
    pub n_r: usize,
    pub rounds: usize,
    /// Scenes rounds may select in total; defaults to `rounds * n_r`.
    pub budget: Option<usize>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            order: "entropy,similarity,uncertainty".into(),
            k1: 3.0,
            k2: 2.5,
            n_r: 20,
            rounds: 3,
            budget: None,
        }
    }
}

impl PlanConfig {
    pub fn stage_plan(&self) -> Result<StagePlan> {
        StagePlan::new(parse_stage_order(&self.order)?, self.k1, self.k2, self.n_r)
            .map_err(|e| Error::Config(format!("plan: {e}")))
    }

    pub fn budget(&self) -> usize {
        self.budget.unwrap_or(self.rounds * self.n_r)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub unknown_class: UnknownClassPolicy,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub catalog: ClassCatalog,
    pub anchors: AnchorTable,
    pub entropy: EntropyConfig,
    pub kernel: KernelConfig,
    pub uncertainty: UncertaintyConfig,
    pub plan: PlanConfig,
    pub diag: DiagConfig,
    pub io: IoConfig,
    pub synth: PoolSpec,
    pub noise: NoiseModel,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (or starts from defaults), then applies `env`
    /// overrides and validates the result.
    pub fn load<I>(path: Option<&Path>, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?,
            None => String::new(),
        };
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        apply_env(&mut table, env)?;
        let config: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.catalog.validate()?;
        self.anchors.validate(&self.catalog)?;
        self.entropy.validate()?;
        self.kernel.validate()?;
        self.uncertainty.validate()?;
        self.plan.stage_plan()?;
        if self.plan.rounds == 0 {
            return Err(Error::Config("plan.rounds must be at least 1".into()));
        }
        self.diag.validate()?;
        self.noise.validate()?;
        self.synth
            .validate(&self.catalog)
            .map_err(|e| Error::Config(format!("synth: {e}")))?;
        Ok(())
    }

    pub fn scoring(&self) -> ScoringContext {
        ScoringContext {
            catalog: self.catalog.clone(),
            anchors: self.anchors.clone(),
            entropy: self.entropy,
            kernel: self.kernel,
            uncertainty: self.uncertainty,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

const SECTIONS: [&str; 9] = [
    "entropy",
    "kernel",
    "uncertainty",
    "plan",
    "diag",
    "io",
    "synth",
    "noise",
    "catalog",
];

fn apply_env<I>(table: &mut toml::Table, env: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        let (section, key) = SECTIONS
            .iter()
            .find_map(|s| rest.strip_prefix(s).and_then(|k| k.strip_prefix('_')).map(|k| (*s, k)))
            .ok_or_else(|| Error::Config(format!("unknown environment override `{name}`")))?;
        let value = parse_env_value(&raw);
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let sub = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{section}` is not a table")))?;
        sub.insert(key.to_string(), value);
    }
    Ok(())
}

fn parse_env_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_valid() {
        let c = Config::load(None, Vec::new()).unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.entropy.tau, 0.3);
        assert_eq!(c.kernel.gamma, 0.1);
        assert_eq!(c.uncertainty.eta, 0.5);
        let plan = c.plan.stage_plan().unwrap();
        assert_eq!((plan.k1, plan.k2), (3.0, 2.5));
        assert_eq!(c.plan.budget(), 60);
    }

    #[test]
    fn file_values_and_roundtrip() {
        let text = r#"
            [entropy]
            tau = 0.5
            [kernel]
            max_iter = 50
            [plan]
            order = "USE"
            n_r = 7
            [anchors.Car]
            length = 4.0
            width = 1.7
            height = 1.5
            [anchors.Pedestrian]
            length = 0.8
            width = 0.6
            height = 1.73
            [anchors.Cyclist]
            length = 1.76
            width = 0.6
            height = 1.73
        "#;
        let c = Config::from_toml_str(text).unwrap();
        assert_eq!(c.entropy.tau, 0.5);
        assert_eq!(c.entropy.zeta, 1e-12);
        assert_eq!(c.kernel.max_iter, 50);
        assert_eq!(c.anchors.get("Car").unwrap().length, 4.0);
        assert_eq!(c.plan.stage_plan().unwrap().sizes(), [21, 17, 7]);
        let back = Config::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml_str("[kernel]\ngamma_typo = 0.2\n").is_err());
        assert!(Config::from_toml_str("[nonsense]\nx = 1\n").is_err());
        assert!(Config::load(None, env(&[("SCENEAL_WHATEVER", "1")])).is_err());
        assert!(Config::load(None, env(&[("SCENEAL_KERNEL_NOPE", "1")])).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_toml_str("[kernel]\ngamma = 1.5\n").is_err());
        assert!(Config::from_toml_str("[plan]\nk1 = 2.0\n").is_err());
        assert!(
            Config::from_toml_str("[catalog]\nclasses = [\"Car\", \"Tram\"]\n").is_err(),
            "no anchor for Tram"
        );
    }

    #[test]
    fn env_overrides() {
        let c = Config::load(
            None,
            env(&[
                ("SCENEAL_KERNEL_MAX_ITER", "500"),
                ("SCENEAL_ENTROPY_TAU", "0.4"),
                ("SCENEAL_PLAN_ORDER", "USE"),
                ("SCENEAL_IO_UNKNOWN_CLASS", "error"),
                ("PATH", "/usr/bin"),
            ]),
        )
        .unwrap();
        assert_eq!(c.kernel.max_iter, 500);
        assert_eq!(c.entropy.tau, 0.4);
        assert_eq!(c.plan.order, "USE");
        assert_eq!(c.io.unknown_class, UnknownClassPolicy::Error);
    }

    #[test]
    fn env_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[uncertainty]\neta = 2.0\n").unwrap();
        let c = Config::load(Some(&p), env(&[("SCENEAL_UNCERTAINTY_ETA", "0.25")])).unwrap();
        assert_eq!(c.uncertainty.eta, 0.25);
        let c = Config::load(Some(&p), Vec::new()).unwrap();
        assert_eq!(c.uncertainty.eta, 2.0);
    }
}
