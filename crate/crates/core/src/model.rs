//! Shared domain types: class catalog, boxes, mixture parameters, scenes and
//! anchors.
//!
//! Box centers are expressed in the ego sensor frame with the ego vehicle at
//! the origin.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum allowed deviation of a mixture weight vector from the simplex.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Ordered set of object classes plus the two reserved graph labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassCatalog {
    pub classes: Vec<String>,
    pub ego_label: String,
    pub mirror_label: String,
}

impl Default for ClassCatalog {
    fn default() -> Self {
        ClassCatalog {
            classes: vec!["Car".into(), "Pedestrian".into(), "Cyclist".into()],
            ego_label: "Ego".into(),
            mirror_label: "Mirror".into(),
        }
    }
}

impl ClassCatalog {
    pub fn new(classes: Vec<String>, ego_label: &str, mirror_label: &str) -> Result<Self> {
        let catalog = ClassCatalog {
            classes,
            ego_label: ego_label.to_string(),
            mirror_label: mirror_label.to_string(),
        };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::invalid("class catalog must contain at least one class"));
        }
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            if c.is_empty() || c.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid class name `{c}`")));
            }
            if !seen.insert(c.as_str()) {
                return Err(Error::invalid(format!("duplicate class `{c}`")));
            }
        }
        if self.ego_label == self.mirror_label {
            return Err(Error::invalid("ego and mirror labels must differ"));
        }
        for reserved in [&self.ego_label, &self.mirror_label] {
            if seen.contains(reserved.as_str()) {
                return Err(Error::invalid(format!(
                    "reserved label `{reserved}` collides with a class name"
                )));
            }
        }
        Ok(())
    }

    /// Number of classes `C`.
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }
}

/// A 7-DoF box. Centers in meters, dimensions in meters, yaw in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box3D {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.z, self.w, self.l, self.h, self.theta]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("box has non-finite fields"));
        }
        if self.w <= 0.0 || self.l <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!(
                "box dimensions must be positive (w={}, l={}, h={})",
                self.w, self.l, self.h
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Euclidean range from the ego origin.
    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// The seven regression residuals, in the order the mixture head emits them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResidualDim {
    Dx,
    Dy,
    Dz,
    Dw,
    Dh,
    Dl,
    Dtheta,
}

impl ResidualDim {
    pub const ALL: [ResidualDim; 7] = [
        ResidualDim::Dx,
        ResidualDim::Dy,
        ResidualDim::Dz,
        ResidualDim::Dw,
        ResidualDim::Dh,
        ResidualDim::Dl,
        ResidualDim::Dtheta,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ResidualDim::Dx => "dx",
            ResidualDim::Dy => "dy",
            ResidualDim::Dz => "dz",
            ResidualDim::Dw => "dw",
            ResidualDim::Dh => "dh",
            ResidualDim::Dl => "dl",
            ResidualDim::Dtheta => "dtheta",
        }
    }
}

impl fmt::Display for ResidualDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A univariate Gaussian mixture. `variances` are variances, not standard
/// deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mixture1D {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl Mixture1D {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let m = Mixture1D {
            weights,
            means,
            variances,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn single(mean: f64, variance: f64) -> Result<Self> {
        Mixture1D::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if self.means.len() != k || self.variances.len() != k {
            return Err(Error::invalid(format!(
                "mixture component lengths differ: {} weights, {} means, {} variances",
                k,
                self.means.len(),
                self.variances.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("mixture weights must be finite and non-negative"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::invalid(format!(
                "mixture weights sum to {sum}, expected 1 within {WEIGHT_SUM_TOLERANCE:e}"
            )));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("mixture means must be finite"));
        }
        if self.variances.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::invalid("mixture variances must be finite and positive"));
        }
        Ok(())
    }
}

/// Per-residual mixtures for one detection (`K` components on every
/// dimension).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    dims: [Mixture1D; 7],
}

impl MixtureParams {
    pub fn new(dims: [Mixture1D; 7]) -> Result<Self> {
        let k = dims[0].components();
        for (d, m) in ResidualDim::ALL.iter().zip(dims.iter()) {
            m.validate().map_err(|e| Error::invalid(format!("residual {d}: {e}")))?;
            if m.components() != k {
                return Err(Error::invalid(format!(
                    "residual {d} has {} components, expected {k}",
                    m.components()
                )));
            }
        }
        Ok(MixtureParams { dims })
    }

    /// The same mixture on every residual dimension.
    pub fn uniform(mixture: Mixture1D) -> Result<Self> {
        MixtureParams::new(std::array::from_fn(|_| mixture.clone()))
    }

    pub fn components(&self) -> usize {
        self.dims[0].components()
    }

    pub fn dim(&self, d: ResidualDim) -> &Mixture1D {
        &self.dims[d.index()]
    }

    pub fn dims(&self) -> &[Mixture1D; 7] {
        &self.dims
    }
}

/// One predicted (or ground-truth) object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub class_label: String,
    pub confidence: f64,
    pub bbox: Box3D,
    pub mixture: Option<MixtureParams>,
}

impl ScoredDetection {
    pub fn new(class_label: impl Into<String>, confidence: f64, bbox: Box3D) -> Self {
        ScoredDetection {
            class_label: class_label.into(),
            confidence,
            bbox,
            mixture: None,
        }
    }

    pub fn with_mixture(mut self, mixture: MixtureParams) -> Self {
        self.mixture = Some(mixture);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub detections: Vec<ScoredDetection>,
}

impl Scene {
    pub fn new(id: impl Into<String>, detections: Vec<ScoredDetection>) -> Self {
        Scene {
            id: id.into(),
            detections,
        }
    }

    pub fn validate(&self, catalog: &ClassCatalog) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::invalid("scene id must be non-empty"));
        }
        for (i, d) in self.detections.iter().enumerate() {
            if !catalog.contains(&d.class_label) {
                return Err(Error::UnknownClass {
                    label: d.class_label.clone(),
                });
            }
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(Error::invalid(format!(
                    "scene `{}` detection {i}: confidence {} outside [0, 1]",
                    self.id, d.confidence
                )));
            }
            d.bbox
                .validate()
                .map_err(|e| Error::invalid(format!("scene `{}` detection {i}: {e}", self.id)))?;
        }
        Ok(())
    }
}

/// Checks that scene ids within a pool are unique and non-empty.
pub fn validate_pool_ids(scenes: &[Scene]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in scenes {
        if s.id.is_empty() {
            return Err(Error::invalid("scene id must be non-empty"));
        }
        if !seen.insert(s.id.as_str()) {
            return Err(Error::invalid(format!("duplicate scene id `{}`", s.id)));
        }
    }
    Ok(())
}

/// Anchor box dimensions for one class, in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchor {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl Anchor {
    pub fn new(length: f64, width: f64, height: f64) -> Result<Self> {
        let a = Anchor { length, width, height };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("length", self.length), ("width", self.width), ("height", self.height)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("anchor {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Ground-plane diagonal `d_a`.
    pub fn diagonal(&self) -> f64 {
        (self.width * self.width + self.length * self.length).sqrt()
    }
}

/// Ground-plane diagonal of an anchor box.
pub fn anchor_diagonal(width: f64, length: f64) -> Result<f64> {
    if !(width.is_finite() && width > 0.0 && length.is_finite() && length > 0.0) {
        return Err(Error::invalid(format!(
            "anchor dimensions must be positive (w={width}, l={length})"
        )));
    }
    Ok((width * width + length * length).sqrt())
}

/// Per-class anchors, keyed by class name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorTable(pub BTreeMap<String, Anchor>);

impl Default for AnchorTable {
    fn default() -> Self {
        let mut m = BTreeMap::new();
        m.insert(
            "Car".to_string(),
            Anchor {
                length: 3.9,
                width: 1.6,
                height: 1.56,
            },
        );
        m.insert(
            "Pedestrian".to_string(),
            Anchor {
                length: 0.8,
                width: 0.6,
                height: 1.73,
            },
        );
        m.insert(
            "Cyclist".to_string(),
            Anchor {
                length: 1.76,
                width: 0.6,
                height: 1.73,
            },
        );
        AnchorTable(m)
    }
}

impl AnchorTable {
    pub fn get(&self, class: &str) -> Option<&Anchor> {
        self.0.get(class)
    }

    pub fn insert(&mut self, class: impl Into<String>, anchor: Anchor) {
        self.0.insert(class.into(), anchor);
    }

    pub fn validate(&self, catalog: &ClassCatalog) -> Result<()> {
        for a in self.0.values() {
            a.validate()?;
        }
        for c in &catalog.classes {
            if !self.0.contains_key(c) {
                return Err(Error::Config(format!("no anchor for class `{c}`")));
            }
        }
        Ok(())
    }
}
