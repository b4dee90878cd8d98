//! Scene-graph data model: objects with unique identities, relationship
//! triples, validation against a closed vocabulary, fixed-size padding,
//! bounding-box-to-ROI geometry, and the label mutation used by query
//! attacks.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

/// Reserved category for padding sentinels. Never part of a vocabulary.
pub const PAD_CATEGORY: &str = "__pad__";

/// Sentinel bbox extent for padding nodes.
pub const PAD_BBOX_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("duplicate object id {0:?}")]
    DuplicateId(String),
    #[error("edge references absent id {0:?}")]
    DanglingEdge(String),
    #[error("edge with identical subject and object {0:?}")]
    SelfEdge(String),
    #[error("invalid bbox {bbox:?} on node {id:?}")]
    BadBBox { id: String, bbox: [f64; 4] },
    #[error("unknown {kind} label {label:?}")]
    UnknownLabel { kind: &'static str, label: String },
    #[error("graph has {count} nodes, exceeds pad target {target}")]
    TooManyObjects { count: usize, target: usize },
    #[error("bbox {bbox:?} covers less than one pixel at {width}x{height}")]
    DegenerateBox {
        bbox: [f64; 4],
        width: usize,
        height: usize,
    },
    #[error("unknown object id {0:?}")]
    UnknownId(String),
    #[error("scene graph parse error: {0}")]
    ParseError(String),
}

/// Normalized bounding box, all coordinates in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_left: f64,
    pub y_top: f64,
    pub x_right: f64,
    pub y_bottom: f64,
}

impl BBox {
    pub fn new(x_left: f64, y_top: f64, x_right: f64, y_bottom: f64) -> Self {
        Self {
            x_left,
            y_top,
            x_right,
            y_bottom,
        }
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        in_unit(self.x_left)
            && in_unit(self.y_top)
            && in_unit(self.x_right)
            && in_unit(self.y_bottom)
            && self.x_left < self.x_right
            && self.y_top < self.y_bottom
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_left, self.y_top, self.x_right, self.y_bottom]
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_left + self.x_right),
            0.5 * (self.y_top + self.y_bottom),
        )
    }
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.as_array()
    }
}

/// Integer pixel rectangle, right/bottom exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
    pub fn intersects(&self, other: &PixelRect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
    /// Center in continuous pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x0 as f64 + self.x1 as f64),
            0.5 * (self.y0 as f64 + self.y1 as f64),
        )
    }
}

/// One object in a scene. Identity is carried by `id` (and visually by
/// `identity_key`), so two nodes with equal category and attributes but
/// different ids compare unequal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub id: String,
    pub category: String,
    pub attributes: Vec<String>,
    pub identity_key: u64,
    pub bbox: BBox,
}

impl ObjectNode {
    pub fn is_pad(&self) -> bool {
        self.category == PAD_CATEGORY
    }

    fn pad_sentinel(index: usize) -> Self {
        ObjectNode {
            id: format!("__pad_{index}__"),
            category: PAD_CATEGORY.to_string(),
            attributes: Vec::new(),
            identity_key: 0,
            bbox: BBox::new(0.0, 0.0, PAD_BBOX_EPS, PAD_BBOX_EPS),
        }
    }
}

/// Directed relationship triple, subject -> object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationshipTriple {
    pub s: String,
    pub p: String,
    pub o: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub nodes: Vec<ObjectNode>,
    pub edges: Vec<RelationshipTriple>,
    pub pad_count: usize,
}

impl SceneGraph {
    pub fn new(nodes: Vec<ObjectNode>, edges: Vec<RelationshipTriple>) -> Self {
        SceneGraph {
            nodes,
            edges,
            pad_count: 0,
        }
    }

    pub fn non_pad_nodes(&self) -> impl Iterator<Item = &ObjectNode> {
        self.nodes.iter().filter(|n| !n.is_pad())
    }

    pub fn node_by_id(&self, id: &str) -> Option<&ObjectNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Ids of non-pad nodes with no incident edge.
    pub fn isolated_node_ids(&self) -> Vec<&str> {
        self.non_pad_nodes()
            .filter(|n| {
                !self
                    .edges
                    .iter()
                    .any(|e| e.s == n.id || e.o == n.id)
            })
            .map(|n| n.id.as_str())
            .collect()
    }

    /// Undirected hop distance from `from` to every non-pad node (BFS).
    /// Unreachable nodes are absent from the result.
    pub fn hop_distances(&self, from: &str) -> std::collections::HashMap<String, usize> {
        use std::collections::{HashMap, VecDeque};
        let mut dist: HashMap<String, usize> = HashMap::new();
        if self.node_by_id(from).is_none() {
            return dist;
        }
        dist.insert(from.to_string(), 0);
        let mut queue = VecDeque::from([from.to_string()]);
        while let Some(cur) = queue.pop_front() {
            let d = dist[&cur];
            for e in &self.edges {
                for next in [&e.s, &e.o] {
                    let linked = (e.s == cur || e.o == cur) && *next != cur;
                    if linked && !dist.contains_key(next.as_str()) {
                        dist.insert(next.clone(), d + 1);
                        queue.push_back(next.clone());
                    }
                }
            }
        }
        dist
    }
}

/// Closed label vocabulary plus the category generalization used by the
/// fuzzy query attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub categories: Vec<String>,
    pub attributes: Vec<String>,
    pub predicates: Vec<String>,
    pub generalization_map: std::collections::BTreeMap<String, String>,
}

impl Vocabulary {
    pub fn has_category(&self, c: &str) -> bool {
        self.categories.iter().any(|x| x == c)
    }
    pub fn has_attribute(&self, a: &str) -> bool {
        self.attributes.iter().any(|x| x == a)
    }
    pub fn has_predicate(&self, p: &str) -> bool {
        self.predicates.iter().any(|x| x == p)
    }

    pub fn category_index(&self, c: &str) -> Option<usize> {
        self.categories.iter().position(|x| x == c)
    }
    pub fn predicate_index(&self, p: &str) -> Option<usize> {
        self.predicates.iter().position(|x| x == p)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        for (kind, list) in [
            ("category", &self.categories),
            ("attribute", &self.attributes),
            ("predicate", &self.predicates),
        ] {
            let mut seen = HashSet::new();
            for label in list {
                if !seen.insert(label.as_str()) {
                    return Err(GraphError::UnknownLabel {
                        kind,
                        label: format!("{label} (duplicated)"),
                    });
                }
            }
        }
        for (from, to) in &self.generalization_map {
            for label in [from, to] {
                if !self.has_category(label) {
                    return Err(GraphError::UnknownLabel {
                        kind: "category",
                        label: label.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Checks every structural invariant and that every label is in `vocab`.
pub fn validate_graph(g: &SceneGraph, vocab: &Vocabulary) -> Result<(), GraphError> {
    let mut seen = HashSet::new();
    for node in &g.nodes {
        if !seen.insert(node.id.as_str()) {
            return Err(GraphError::DuplicateId(node.id.clone()));
        }
    }

    let real_count = g.nodes.len() - g.pad_count.min(g.nodes.len());
    for (i, node) in g.nodes.iter().enumerate() {
        if i < real_count {
            if node.is_pad() {
                return Err(GraphError::UnknownLabel {
                    kind: "category",
                    label: format!("{PAD_CATEGORY} (before pad tail)"),
                });
            }
            if !node.bbox.is_valid() {
                return Err(GraphError::BadBBox {
                    id: node.id.clone(),
                    bbox: node.bbox.as_array(),
                });
            }
            if !vocab.has_category(&node.category) {
                return Err(GraphError::UnknownLabel {
                    kind: "category",
                    label: node.category.clone(),
                });
            }
            for a in &node.attributes {
                if !vocab.has_attribute(a) {
                    return Err(GraphError::UnknownLabel {
                        kind: "attribute",
                        label: a.clone(),
                    });
                }
            }
        } else if !node.is_pad() {
            return Err(GraphError::UnknownLabel {
                kind: "category",
                label: format!("{} (expected pad sentinel)", node.category),
            });
        }
    }

    let real_ids: HashSet<&str> = g
        .nodes
        .iter()
        .take(real_count)
        .map(|n| n.id.as_str())
        .collect();
    for edge in &g.edges {
        if edge.s == edge.o {
            return Err(GraphError::SelfEdge(edge.s.clone()));
        }
        for id in [&edge.s, &edge.o] {
            if !real_ids.contains(id.as_str()) {
                return Err(GraphError::DanglingEdge(id.clone()));
            }
        }
        if !vocab.has_predicate(&edge.p) {
            return Err(GraphError::UnknownLabel {
                kind: "predicate",
                label: edge.p.clone(),
            });
        }
    }
    Ok(())
}

/// Appends `__pad__` sentinels until the graph has exactly `target_size`
/// nodes. Original nodes and edges are untouched; re-padding an already
/// padded graph keeps its existing sentinels.
pub fn pad_graph(g: &SceneGraph, target_size: usize) -> Result<SceneGraph, GraphError> {
    if g.nodes.len() > target_size {
        return Err(GraphError::TooManyObjects {
            count: g.nodes.len(),
            target: target_size,
        });
    }
    let mut out = g.clone();
    let missing = target_size - out.nodes.len();
    let base = out.pad_count;
    for k in 0..missing {
        out.nodes.push(ObjectNode::pad_sentinel(base + k));
    }
    out.pad_count += missing;
    Ok(out)
}

/// Maps a normalized bbox to an integer pixel rectangle: floor for
/// left/top, ceil for right/bottom, clamped to the image. Boxes covering
/// less than one pixel in either direction at this resolution are
/// rejected as degenerate.
pub fn roi_of(node: &ObjectNode, width: usize, height: usize) -> Result<PixelRect, GraphError> {
    assert!(width >= 1 && height >= 1, "image dims must be positive");
    let b = node.bbox;
    if !b.is_valid() {
        return Err(GraphError::BadBBox {
            id: node.id.clone(),
            bbox: b.as_array(),
        });
    }
    let w = width as f64;
    let h = height as f64;
    if (b.x_right - b.x_left) * w < 1.0 || (b.y_bottom - b.y_top) * h < 1.0 {
        return Err(GraphError::DegenerateBox {
            bbox: b.as_array(),
            width,
            height,
        });
    }
    let x0 = (b.x_left * w).floor().max(0.0) as usize;
    let y0 = (b.y_top * h).floor().max(0.0) as usize;
    let x1 = ((b.x_right * w).ceil() as usize).min(width);
    let y1 = ((b.y_bottom * h).ceil() as usize).min(height);
    let rect = PixelRect { x0, y0, x1, y1 };
    if rect.x1 <= rect.x0 || rect.y1 <= rect.y0 {
        return Err(GraphError::DegenerateBox {
            bbox: b.as_array(),
            width,
            height,
        });
    }
    Ok(rect)
}

/// Returns a copy of `g` with exactly one node's category replaced.
/// Padding sentinels are not addressable.
pub fn mutate_label(
    g: &SceneGraph,
    node_id: &str,
    new_category: &str,
    vocab: &Vocabulary,
) -> Result<SceneGraph, GraphError> {
    if !vocab.has_category(new_category) {
        return Err(GraphError::UnknownLabel {
            kind: "category",
            label: new_category.to_string(),
        });
    }
    let idx = g
        .nodes
        .iter()
        .position(|n| n.id == node_id && !n.is_pad())
        .ok_or_else(|| GraphError::UnknownId(node_id.to_string()))?;
    let mut out = g.clone();
    out.nodes[idx].category = new_category.to_string();
    Ok(out)
}

/// JSON serialization with the documented field order.
pub fn serialize_graph(g: &SceneGraph) -> String {
    serde_json::to_string(g).expect("scene graph serialization cannot fail")
}

pub fn deserialize_graph(text: &str) -> Result<SceneGraph, GraphError> {
    serde_json::from_str(text).map_err(|e| GraphError::ParseError(e.to_string()))
}
