//! Directed scene graphs: one node per confident detection plus the ego
//! vehicle, edges weighted by inverse center distance.

use serde::{Deserialize, Serialize};

use crate::entropy::eligible_detections;
use crate::error::{Error, Result};
use crate::model::{ClassCatalog, Scene};

/// Node label. Object labels index into the [`ClassCatalog`] used to build
/// the graph; ego and mirror nodes carry the catalog's reserved labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeLabel {
    Object(u16),
    Ego,
    Mirror,
}

/// Dense directed graph. `weight(i, j) == 0.0` means "no edge".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    labels: Vec<NodeLabel>,
    weights: Vec<f64>,
}

impl SceneGraph {
    /// Builds a graph from node labels and a row-major `n x n` weight matrix.
    ///
    /// Requires at least two nodes, a zero diagonal, finite non-negative
    /// weights and at least one outgoing edge per node. Graphs from
    /// [`build_scene_graph`] additionally hold exactly one ego node; graphs
    /// assembled here need not.
    pub fn from_parts(labels: Vec<NodeLabel>, weights: Vec<f64>) -> Result<Self> {
        let n = labels.len();
        if n < 2 {
            return Err(Error::invalid("scene graph needs at least two nodes"));
        }
        if weights.len() != n * n {
            return Err(Error::invalid(format!(
                "weight matrix has {} entries, expected {}",
                weights.len(),
                n * n
            )));
        }
        for i in 0..n {
            if weights[i * n + i] != 0.0 {
                return Err(Error::invalid("self loops are not allowed"));
            }
            let row = &weights[i * n..(i + 1) * n];
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::invalid("edge weights must be finite and non-negative"));
            }
            if row.iter().all(|w| *w == 0.0) {
                return Err(Error::invalid(format!("node {i} has no outgoing edge")));
            }
        }
        Ok(SceneGraph { labels, weights })
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[NodeLabel] {
        &self.labels
    }

    /// Row-major `n x n` weight matrix.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, from: usize, to: usize) -> f64 {
        self.weights[from * self.labels.len() + to]
    }

    pub fn out_degree(&self, node: usize) -> usize {
        let n = self.labels.len();
        self.weights[node * n..(node + 1) * n]
            .iter()
            .filter(|w| **w > 0.0)
            .count()
    }

    /// Outgoing `(target, weight)` pairs of `node`.
    pub fn out_edges(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let n = self.labels.len();
        self.weights[node * n..(node + 1) * n]
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, w)| *w > 0.0)
    }

    pub fn ego_index(&self) -> Option<usize> {
        self.labels.iter().position(|l| *l == NodeLabel::Ego)
    }
}

/// Builds the scene graph from detections with `confidence >= tau`.
///
/// The ego node sits at the origin and comes first. Every ordered node pair
/// gets an edge of weight `1 / max(distance, min_dist)`. A scene without
/// confident objects becomes the two-node ego/mirror graph with unit
/// weights.
pub fn build_scene_graph(scene: &Scene, catalog: &ClassCatalog, tau: f64, min_dist: f64) -> Result<SceneGraph> {
    if !(min_dist.is_finite() && min_dist > 0.0) {
        return Err(Error::invalid(format!("min_dist must be positive, got {min_dist}")));
    }
    let mut labels = vec![NodeLabel::Ego];
    let mut centers = vec![[0.0f64; 3]];
    for (_, d) in eligible_detections(scene, tau) {
        let class = catalog.index_of(&d.class_label).ok_or_else(|| Error::UnknownClass {
            label: d.class_label.clone(),
        })?;
        labels.push(NodeLabel::Object(class as u16));
        centers.push(d.bbox.center());
    }

    if labels.len() == 1 {
        return SceneGraph::from_parts(vec![NodeLabel::Ego, NodeLabel::Mirror], vec![0.0, 1.0, 1.0, 0.0]);
    }

    let n = labels.len();
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = distance(&centers[i], &centers[j]);
            let w = 1.0 / dist.max(min_dist);
            weights[i * n + j] = w;
            weights[j * n + i] = w;
        }
    }
    SceneGraph::from_parts(labels, weights)
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Box3D, ScoredDetection};

    fn det(class: &str, conf: f64, x: f64, y: f64, z: f64) -> ScoredDetection {
        ScoredDetection::new(
            class,
            conf,
            Box3D {
                x,
                y,
                z,
                w: 1.0,
                l: 1.0,
                h: 1.0,
                theta: 0.0,
            },
        )
    }

    #[test]
    fn empty_scene_gets_mirror_node() {
        let cat = ClassCatalog::default();
        let s = Scene::new("e", vec![det("Car", 0.1, 3.0, 0.0, 4.0)]);
        let g = build_scene_graph(&s, &cat, 0.3, 0.1).unwrap();
        assert_eq!(g.labels(), &[NodeLabel::Ego, NodeLabel::Mirror]);
        assert_eq!(g.weight(0, 1), 1.0);
        assert_eq!(g.weight(1, 0), 1.0);
    }

    #[test]
    fn single_object_edge_is_inverse_range() {
        let cat = ClassCatalog::default();
        let s = Scene::new("one", vec![det("Car", 0.9, 3.0, 0.0, 4.0)]);
        let g = build_scene_graph(&s, &cat, 0.3, 0.1).unwrap();
        assert_eq!(g.labels(), &[NodeLabel::Ego, NodeLabel::Object(0)]);
        assert!((g.weight(0, 1) - 0.2).abs() < 1e-15);
        assert!((g.weight(1, 0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn coincident_centers_are_clamped() {
        let cat = ClassCatalog::default();
        let s = Scene::new(
            "dup",
            vec![det("Car", 0.9, 5.0, 1.0, 0.0), det("Pedestrian", 0.9, 5.0, 1.0, 0.0)],
        );
        let g = build_scene_graph(&s, &cat, 0.3, 0.1).unwrap();
        assert_eq!(g.node_count(), 3);
        assert!((g.weight(1, 2) - 10.0).abs() < 1e-12);
        for i in 0..3 {
            assert_eq!(g.out_degree(i), 2);
        }
    }

    #[test]
    fn from_parts_validation() {
        assert!(SceneGraph::from_parts(vec![NodeLabel::Ego], vec![0.0]).is_err());
        assert!(SceneGraph::from_parts(vec![NodeLabel::Ego, NodeLabel::Object(0)], vec![1.0, 1.0, 1.0, 0.0]).is_err());
        assert!(SceneGraph::from_parts(vec![NodeLabel::Ego, NodeLabel::Object(0)], vec![0.0, 1.0, 0.0, 0.0]).is_err());
        assert!(SceneGraph::from_parts(vec![NodeLabel::Ego, NodeLabel::Object(0)], vec![0.0, 1.0, 2.0, 0.0]).is_ok());
    }
}
