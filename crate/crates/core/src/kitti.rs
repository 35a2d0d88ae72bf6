//! KITTI label files, `.mdn` mixture sidecars and persisted round state.
//!
//! Label lines follow the KITTI object format:
//!
//! ```text
//! type truncated occluded alpha left top right bottom h w l x y z rotation_y [score]
//! ```
//!
//! `location` is taken as the box center in the ego frame without any
//! calibration transform, and `rotation_y` becomes the box yaw. Columns that
//! the engine does not model (truncation, occlusion, alpha, 2D box) are
//! dropped on parse and written back as fixed placeholders.
//!
//! Sidecars and round state are JSON documents carrying `"version": 1`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Box3D, ClassCatalog, Mixture1D, MixtureParams, Scene, ScoredDetection};

pub const FORMAT_VERSION: u32 = 1;

/// Label type that marks regions to ignore.
pub const DONT_CARE: &str = "DontCare";

/// What to do with a label whose type is not in the catalog.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnknownClassPolicy {
    /// Drop the line and log a warning.
    #[default]
    Skip,
    Error,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KittiLabelLine {
    pub kind: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    pub bbox2d: [f64; 4],
    /// `h, w, l` in meters.
    pub dims: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl KittiLabelLine {
    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 15 && fields.len() != 16 {
            return Err(format!("expected 15 or 16 fields, found {}", fields.len()));
        }
        let num = |i: usize, name: &str| -> std::result::Result<f64, String> {
            let v: f64 = fields[i]
                .parse()
                .map_err(|_| format!("field {} ({name}): `{}` is not a number", i + 1, fields[i]))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("field {} ({name}) is not finite", i + 1))
            }
        };
        let occluded: i32 = fields[2]
            .parse()
            .map_err(|_| format!("field 3 (occluded): `{}` is not an integer", fields[2]))?;
        let parsed = KittiLabelLine {
            kind: fields[0].to_string(),
            truncated: num(1, "truncated")?,
            occluded,
            alpha: num(3, "alpha")?,
            bbox2d: [num(4, "left")?, num(5, "top")?, num(6, "right")?, num(7, "bottom")?],
            dims: [num(8, "height")?, num(9, "width")?, num(10, "length")?],
            location: [num(11, "x")?, num(12, "y")?, num(13, "z")?],
            rotation_y: num(14, "rotation_y")?,
            score: if fields.len() == 16 {
                Some(num(15, "score")?)
            } else {
                None
            },
        };
        if parsed.kind != DONT_CARE {
            if parsed.dims.iter().any(|d| *d <= 0.0) {
                return Err(format!("non-positive dimensions {:?}", parsed.dims));
            }
            if let Some(s) = parsed.score {
                if !(0.0..=1.0).contains(&s) {
                    return Err(format!("score {s} outside [0, 1]"));
                }
            }
        }
        Ok(parsed)
    }

    pub fn to_detection(&self) -> ScoredDetection {
        let [h, w, l] = self.dims;
        let [x, y, z] = self.location;
        ScoredDetection::new(
            self.kind.clone(),
            self.score.unwrap_or(1.0),
            Box3D {
                x,
                y,
                z,
                w,
                l,
                h,
                theta: self.rotation_y,
            },
        )
    }
}

/// Parses label text. `source` only labels error messages.
pub fn parse_label_str(
    text: &str,
    source: &Path,
    catalog: &ClassCatalog,
    policy: UnknownClassPolicy,
) -> Result<Vec<ScoredDetection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = KittiLabelLine::parse(line).map_err(|message| Error::Parse {
            path: source.to_path_buf(),
            line: i + 1,
            message,
        })?;
        if parsed.kind == DONT_CARE {
            continue;
        }
        if !catalog.contains(&parsed.kind) {
            match policy {
                UnknownClassPolicy::Skip => {
                    log::warn!(
                        "{}:{}: skipping unknown class `{}`",
                        source.display(),
                        i + 1,
                        parsed.kind
                    );
                    continue;
                }
                UnknownClassPolicy::Error => {
                    return Err(Error::Parse {
                        path: source.to_path_buf(),
                        line: i + 1,
                        message: format!("unknown class `{}`", parsed.kind),
                    })
                }
            }
        }
        out.push(parsed.to_detection());
    }
    Ok(out)
}

/// Reads one label file; the scene id is the file stem.
pub fn parse_label_file(path: &Path, catalog: &ClassCatalog, policy: UnknownClassPolicy) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let id = scene_id_from_path(path)?;
    Ok(Scene::new(id, parse_label_str(&text, path, catalog, policy)?))
}

fn scene_id_from_path(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .ok_or_else(|| Error::invalid(format!("cannot derive a scene id from {}", path.display())))
}

/// KITTI text for a scene. Every line carries an explicit score column.
pub fn serialize_label_file(scene: &Scene) -> String {
    let mut out = String::new();
    for d in &scene.detections {
        let b = &d.bbox;
        out.push_str(&format!(
            "{} 0.000000 0 -10.000000 0.000000 0.000000 0.000000 0.000000 {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            d.class_label, b.h, b.w, b.l, b.x, b.y, b.z, b.theta, d.confidence
        ));
    }
    out
}

/// Sidecar document for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarFile {
    pub version: u32,
    pub detections: Vec<SidecarEntry>,
}

/// Mixtures of one detection, keyed by its position in the label file
/// (after `DontCare` and skipped lines are removed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarEntry {
    pub index: usize,
    pub dx: Mixture1D,
    pub dy: Mixture1D,
    pub dz: Mixture1D,
    pub dw: Mixture1D,
    pub dh: Mixture1D,
    pub dl: Mixture1D,
    pub dtheta: Mixture1D,
}

impl SidecarEntry {
    pub fn from_params(index: usize, p: &MixtureParams) -> Self {
        let [dx, dy, dz, dw, dh, dl, dtheta] = p.dims().clone();
        SidecarEntry {
            index,
            dx,
            dy,
            dz,
            dw,
            dh,
            dl,
            dtheta,
        }
    }

    pub fn to_params(&self) -> Result<MixtureParams> {
        MixtureParams::new([
            self.dx.clone(),
            self.dy.clone(),
            self.dz.clone(),
            self.dw.clone(),
            self.dh.clone(),
            self.dl.clone(),
            self.dtheta.clone(),
        ])
    }
}

/// Sidecar for every detection of `scene`. Fails if any detection lacks
/// mixture parameters.
pub fn sidecar_for_scene(scene: &Scene) -> Result<SidecarFile> {
    let detections = scene
        .detections
        .iter()
        .enumerate()
        .map(|(i, d)| {
            d.mixture
                .as_ref()
                .map(|p| SidecarEntry::from_params(i, p))
                .ok_or_else(|| Error::MissingMixture {
                    scene: scene.id.clone(),
                    index: i,
                })
        })
        .collect::<Result<_>>()?;
    Ok(SidecarFile {
        version: FORMAT_VERSION,
        detections,
    })
}

/// Attaches sidecar mixtures to `scene`'s detections in file order.
pub fn apply_sidecar(mut scene: Scene, sidecar: &SidecarFile, source: &Path) -> Result<Scene> {
    if sidecar.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: sidecar.version,
            expected: FORMAT_VERSION,
        });
    }
    let bad = |msg: String| Error::invalid(format!("{}: {msg}", source.display()));
    if sidecar.detections.len() != scene.detections.len() {
        return Err(bad(format!(
            "sidecar has {} entries but scene `{}` has {} detections",
            sidecar.detections.len(),
            scene.id,
            scene.detections.len()
        )));
    }
    let mut slots: Vec<Option<MixtureParams>> = vec![None; scene.detections.len()];
    for e in &sidecar.detections {
        let slot = slots
            .get_mut(e.index)
            .ok_or_else(|| bad(format!("entry index {} out of range", e.index)))?;
        if slot.is_some() {
            return Err(bad(format!("duplicate entry index {}", e.index)));
        }
        *slot = Some(e.to_params().map_err(|err| bad(format!("entry {}: {err}", e.index)))?);
    }
    for (d, m) in scene.detections.iter_mut().zip(slots) {
        d.mixture = m;
    }
    Ok(scene)
}

pub fn load_mixture_sidecar(path: &Path, scene: Scene) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let sidecar = read_versioned::<SidecarFile>(&text, path)?;
    apply_sidecar(scene, &sidecar, path)
}

pub fn save_mixture_sidecar(path: &Path, scene: &Scene) -> Result<()> {
    let doc = sidecar_for_scene(scene)?;
    write_atomic(path, to_json(&doc, path)?.as_bytes())
}

/// Sidecar path that belongs to a label file.
pub fn sidecar_path(label_path: &Path) -> PathBuf {
    label_path.with_extension("mdn")
}

/// Whether pool loading attaches sidecars.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SidecarMode {
    Ignore,
    IfPresent,
    Require,
}

/// Loads every `*.txt` label file in `dir`, sorted by file name.
pub fn load_pool_dir(
    dir: &Path,
    catalog: &ClassCatalog,
    policy: UnknownClassPolicy,
    sidecars: SidecarMode,
) -> Result<Vec<Scene>> {
    let files = label_files(dir)?;
    if sidecars == SidecarMode::Require {
        let missing: Vec<PathBuf> = files.iter().map(|f| sidecar_path(f)).filter(|p| !p.is_file()).collect();
        if !missing.is_empty() {
            return Err(Error::MissingSidecars { paths: missing });
        }
    }
    let scenes: Vec<Scene> = files
        .par_iter()
        .map(|f| {
            let scene = parse_label_file(f, catalog, policy)?;
            let side = sidecar_path(f);
            match sidecars {
                SidecarMode::Ignore => Ok(scene),
                SidecarMode::IfPresent if !side.is_file() => Ok(scene),
                _ => load_mixture_sidecar(&side, scene),
            }
        })
        .collect::<Result<_>>()?;
    crate::model::validate_pool_ids(&scenes)?;
    Ok(scenes)
}

pub fn label_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .path();
        if path.is_file() && path.extension().is_some_and(|x| x == "txt") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Writes one label file per scene into `dir`, plus a sidecar per scene
/// when `sidecars` is set (every detection must then carry mixtures).
pub fn write_pool_dir(dir: &Path, scenes: &[Scene], sidecars: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for s in scenes {
        let label = dir.join(format!("{}.txt", s.id));
        write_atomic(&label, serialize_label_file(s).as_bytes())?;
        if sidecars {
            save_mixture_sidecar(&sidecar_path(&label), s)?;
        }
    }
    Ok(())
}

/// Active-learning bookkeeping persisted between rounds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundState {
    pub version: u32,
    pub round_index: usize,
    pub labeled_ids: BTreeSet<String>,
    pub unlabeled_ids: BTreeSet<String>,
    /// Total number of scenes that rounds may select (the initial random
    /// seed set is not charged against it).
    pub budget_total: usize,
    pub per_round_selected: Vec<Vec<String>>,
    pub rng_seed: u64,
    pub initial_labeled: Vec<String>,
}

impl RoundState {
    /// State before any round: `initial` labeled, the rest of `pool_ids`
    /// unlabeled.
    pub fn new(pool_ids: &[String], initial: &[String], budget_total: usize, rng_seed: u64) -> Result<Self> {
        let all: BTreeSet<String> = pool_ids.iter().cloned().collect();
        if all.len() != pool_ids.len() {
            return Err(Error::InvalidState("duplicate ids in pool".into()));
        }
        let labeled: BTreeSet<String> = initial.iter().cloned().collect();
        if labeled.len() != initial.len() {
            return Err(Error::InvalidState("duplicate ids in initial labeled set".into()));
        }
        if let Some(id) = labeled.iter().find(|id| !all.contains(*id)) {
            return Err(Error::InvalidState(format!("initial id `{id}` is not in the pool")));
        }
        let state = RoundState {
            version: FORMAT_VERSION,
            round_index: 0,
            unlabeled_ids: all.difference(&labeled).cloned().collect(),
            labeled_ids: labeled,
            budget_total,
            per_round_selected: Vec::new(),
            rng_seed,
            initial_labeled: initial.to_vec(),
        };
        state.validate()?;
        Ok(state)
    }

    pub fn selected_total(&self) -> usize {
        self.per_round_selected.iter().map(Vec::len).sum()
    }

    pub fn remaining_budget(&self) -> usize {
        self.budget_total.saturating_sub(self.selected_total())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidState(m));
        if self.version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: self.version,
                expected: FORMAT_VERSION,
            });
        }
        if let Some(id) = self.labeled_ids.intersection(&self.unlabeled_ids).next() {
            return fail(format!("id `{id}` is both labeled and unlabeled"));
        }
        if self.per_round_selected.len() != self.round_index {
            return fail(format!(
                "{} per-round selections recorded for round index {}",
                self.per_round_selected.len(),
                self.round_index
            ));
        }
        if self.selected_total() > self.budget_total {
            return fail(format!(
                "{} scenes selected, budget is {}",
                self.selected_total(),
                self.budget_total
            ));
        }
        let mut seen = BTreeSet::new();
        for id in self
            .initial_labeled
            .iter()
            .chain(self.per_round_selected.iter().flatten())
        {
            if !seen.insert(id) {
                return fail(format!("id `{id}` selected more than once"));
            }
            if !self.labeled_ids.contains(id) {
                return fail(format!("selected id `{id}` is not labeled"));
            }
        }
        if seen.len() != self.labeled_ids.len() {
            return fail("labeled ids do not match the initial set plus round selections".into());
        }
        Ok(())
    }

    /// Moves `selected` from unlabeled to labeled as the next round.
    pub fn record_round(&mut self, selected: Vec<String>) -> Result<()> {
        let mut next = self.clone();
        for id in &selected {
            if !next.unlabeled_ids.remove(id) {
                return Err(Error::InvalidState(format!("selected id `{id}` is not unlabeled")));
            }
            next.labeled_ids.insert(id.clone());
        }
        next.per_round_selected.push(selected);
        next.round_index += 1;
        next.validate()?;
        *self = next;
        Ok(())
    }
}

pub fn save_round_state(state: &RoundState, path: &Path) -> Result<()> {
    state.validate()?;
    write_atomic(path, to_json(state, path)?.as_bytes())
}

pub fn load_round_state(path: &Path) -> Result<RoundState> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let state: RoundState = read_versioned(&text, path)?;
    state.validate()?;
    Ok(state)
}

/// Checks the `version` field before decoding the rest of the document.
fn read_versioned<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let json_err = |source| Error::Json {
        context: format!("decoding {}", path.display()),
        source,
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(json_err)?;
    match value.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::VersionMismatch {
                found: u32::try_from(v).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(Error::invalid(format!("{}: missing `version` field", path.display()))),
    }
    serde_json::from_value(value).map_err(json_err)
}

fn to_json<T: Serialize>(value: &T, path: &Path) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        context: format!("encoding {}", path.display()),
        source,
    })?;
    s.push('\n');
    Ok(s)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let ctx = || format!("writing {}", path.display());
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(ctx(), e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(ctx(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(ctx(), e))?;
    tmp.persist(path).map_err(|e| Error::io(ctx(), e.error))?;
    Ok(())
}
