//! Node keys and the canonical dimension tree.
//!
//! A node key fixes one entry per dimension: either a concrete value label
//! or the AGG marker. Leaves are fully concrete; the root is all-AGG. The
//! canonical tree expands dimensions in schema order: a node's children
//! replace its first AGG dimension with each value present among its leaf
//! descendants, so every canonical node is a concrete prefix followed by an
//! AGG suffix.
//!
//! Keys with AGG in arbitrary positions (cross-marginals such as `AGG|US`)
//! are valid lattice nodes: they can be queried against the leaf set
//! ([`DimensionTree::lattice_leaf_descendants`]) and appear in backtracked
//! root-cause sets, but they are not tree nodes.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::schema::{DimensionSchema, AGG};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("leaf key `{0}` is not fully concrete")]
    NotALeaf(NodeKey),
    #[error("key `{key}`: `{label}` is not a value of dimension `{dimension}`")]
    UnknownValue {
        key: NodeKey,
        dimension: String,
        label: String,
    },
    #[error("key `{key}` has {got} entries, schema has {want} dimensions")]
    WrongArity {
        key: NodeKey,
        got: usize,
        want: usize,
    },
    #[error("empty leaf set")]
    EmptyInput,
}

/// One entry per dimension; `None` is the AGG marker.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeKey(Vec<Option<String>>);

impl NodeKey {
    pub fn new(entries: Vec<Option<String>>) -> Self {
        NodeKey(entries)
    }

    pub fn root(num_dims: usize) -> Self {
        NodeKey(vec![None; num_dims])
    }

    pub fn leaf<S: Into<String>>(values: Vec<S>) -> Self {
        NodeKey(values.into_iter().map(|v| Some(v.into())).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entry(&self, dim: usize) -> Option<&str> {
        self.0[dim].as_deref()
    }

    pub fn entries(&self) -> impl Iterator<Item = Option<&str>> {
        self.0.iter().map(|e| e.as_deref())
    }

    /// A key is a leaf iff no entry is AGG.
    pub fn is_leaf(&self) -> bool {
        self.0.iter().all(|e| e.is_some())
    }

    pub fn is_root(&self) -> bool {
        self.0.iter().all(|e| e.is_none())
    }

    /// Number of concrete entries. For canonical nodes this equals the tree
    /// depth; for lattice nodes it is the layer used by backtrack.
    pub fn concrete_count(&self) -> usize {
        self.0.iter().filter(|e| e.is_some()).count()
    }

    /// True when this key's concrete entries all match `other` (so `other`
    /// aggregates into this key). Every key covers itself.
    pub fn covers(&self, other: &NodeKey) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(mine, theirs)| match (mine, theirs) {
                    (None, _) => true,
                    (Some(a), Some(b)) => a == b,
                    (Some(_), None) => false,
                })
    }

    /// Canonical parent: the deepest concrete dimension reset to AGG.
    pub fn canonical_parent(&self) -> Option<NodeKey> {
        let last = self.0.iter().rposition(|e| e.is_some())?;
        let mut entries = self.0.clone();
        entries[last] = None;
        Some(NodeKey(entries))
    }

    /// All lattice parents: each concrete dimension reset to AGG in turn.
    pub fn lattice_parents(&self) -> Vec<NodeKey> {
        let mut out = Vec::new();
        for (i, e) in self.0.iter().enumerate() {
            if e.is_some() {
                let mut entries = self.0.clone();
                entries[i] = None;
                out.push(NodeKey(entries));
            }
        }
        out
    }

    /// Truncate to the canonical form with `depth` leading concrete entries.
    fn canonical_prefix(&self, depth: usize) -> NodeKey {
        let entries = self
            .0
            .iter()
            .enumerate()
            .map(|(i, e)| if i < depth { e.clone() } else { None })
            .collect();
        NodeKey(entries)
    }

    /// Parse `Search|US` / `AGG|US` style text.
    pub fn parse(text: &str) -> NodeKey {
        NodeKey(
            text.split('|')
                .map(|part| {
                    if part == AGG {
                        None
                    } else {
                        Some(part.to_string())
                    }
                })
                .collect(),
        )
    }

    fn check_against(&self, schema: &DimensionSchema) -> Result<(), TreeError> {
        if self.len() != schema.num_dims() {
            return Err(TreeError::WrongArity {
                key: self.clone(),
                got: self.len(),
                want: schema.num_dims(),
            });
        }
        for (dim, entry) in self.0.iter().enumerate() {
            if let Some(label) = entry {
                if !schema.has_value(dim, label) {
                    return Err(TreeError::UnknownValue {
                        key: self.clone(),
                        dimension: schema.dim_names()[dim].clone(),
                        label: label.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "|")?;
            }
            write!(f, "{}", e.as_deref().unwrap_or(AGG))?;
        }
        Ok(())
    }
}

pub type NodeId = usize;

/// The canonical aggregation tree over a set of leaf keys.
///
/// Node ids are assigned in (depth, key) order, so id 0 is always the root
/// and ids are stable for a given leaf set. Immutable after construction.
#[derive(Debug, Clone)]
pub struct DimensionTree {
    schema: DimensionSchema,
    keys: Vec<NodeKey>,
    index: HashMap<NodeKey, NodeId>,
    parent: Vec<Option<NodeId>>,
    children: Vec<Vec<NodeId>>,
    depth: Vec<usize>,
    leaves: Vec<NodeId>,
}

/// Build the canonical tree containing every leaf key and every ancestor
/// obtained by resetting a trailing run of dimensions to AGG.
pub fn build_tree(
    schema: &DimensionSchema,
    leaf_keys: &BTreeSet<NodeKey>,
) -> Result<DimensionTree, TreeError> {
    if leaf_keys.is_empty() {
        return Err(TreeError::EmptyInput);
    }
    let num_dims = schema.num_dims();
    for key in leaf_keys {
        if !key.is_leaf() {
            return Err(TreeError::NotALeaf(key.clone()));
        }
        key.check_against(schema)?;
    }

    let mut all: BTreeSet<(usize, NodeKey)> = BTreeSet::new();
    for leaf in leaf_keys {
        for depth in 0..=num_dims {
            all.insert((depth, leaf.canonical_prefix(depth)));
        }
    }

    let keys: Vec<NodeKey> = all.iter().map(|(_, k)| k.clone()).collect();
    let depth: Vec<usize> = all.iter().map(|(d, _)| *d).collect();
    let index: HashMap<NodeKey, NodeId> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.clone(), i))
        .collect();

    let mut parent = vec![None; keys.len()];
    let mut children = vec![Vec::new(); keys.len()];
    for (id, key) in keys.iter().enumerate() {
        if let Some(p) = key.canonical_parent() {
            let pid = index[&p];
            parent[id] = Some(pid);
            children[pid].push(id);
        }
    }
    let leaves = keys
        .iter()
        .enumerate()
        .filter(|(_, k)| k.is_leaf())
        .map(|(i, _)| i)
        .collect();

    Ok(DimensionTree {
        schema: schema.clone(),
        keys,
        index,
        parent,
        children,
        depth,
        leaves,
    })
}

impl DimensionTree {
    pub fn schema(&self) -> &DimensionSchema {
        &self.schema
    }

    pub fn num_nodes(&self) -> usize {
        self.keys.len()
    }

    pub fn num_dims(&self) -> usize {
        self.schema.num_dims()
    }

    pub fn key(&self, id: NodeId) -> &NodeKey {
        &self.keys[id]
    }

    pub fn node_id(&self, key: &NodeKey) -> Option<NodeId> {
        self.index.get(key).copied()
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.parent[id]
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id]
    }

    pub fn depth(&self, id: NodeId) -> usize {
        self.depth[id]
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.children[id].is_empty()
    }

    /// Leaf node ids in canonical (sorted key) order.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    /// Position of a leaf id within [`Self::leaves`].
    pub fn leaf_position(&self, id: NodeId) -> Option<usize> {
        self.leaves.iter().position(|&l| l == id)
    }

    /// Non-leaf node ids, deepest first, so children are always processed
    /// before their parent during bottom-up passes.
    pub fn internal_bottom_up(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = (0..self.num_nodes())
            .filter(|&id| !self.is_leaf(id))
            .collect();
        ids.sort_by(|&a, &b| self.depth[b].cmp(&self.depth[a]).then(a.cmp(&b)));
        ids
    }

    /// Leaf ids covered by an arbitrary lattice key (AGG anywhere).
    pub fn lattice_leaf_descendants(&self, key: &NodeKey) -> Vec<NodeId> {
        self.leaves
            .iter()
            .copied()
            .filter(|&l| key.covers(&self.keys[l]))
            .collect()
    }

    /// Check that a lattice key has the right arity and known labels.
    pub fn check_lattice_key(&self, key: &NodeKey) -> Result<(), TreeError> {
        key.check_against(&self.schema)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::DimensionSchema;

    pub(crate) fn channel_region_schema() -> DimensionSchema {
        DimensionSchema::new(
            vec!["channel".into(), "region".into()],
            vec![
                vec!["Search".into(), "Social Media".into()],
                vec![
                    "US".into(),
                    "Norway".into(),
                    "Brazil".into(),
                    "Others".into(),
                ],
            ],
        )
        .unwrap()
    }

    pub(crate) fn all_leaves(schema: &DimensionSchema) -> BTreeSet<NodeKey> {
        let mut out = BTreeSet::new();
        for ch in schema.values_of(0) {
            for rg in schema.values_of(1) {
                out.insert(NodeKey::leaf(vec![ch.clone(), rg.clone()]));
            }
        }
        out
    }

    #[test]
    fn snapshot_tree_shape() {
        let schema = channel_region_schema();
        let tree = build_tree(&schema, &all_leaves(&schema)).unwrap();
        assert_eq!(tree.num_nodes(), 1 + 2 + 8);
        assert_eq!(tree.leaves().len(), 8);
        assert!(tree.key(tree.root()).is_root());
        assert_eq!(tree.children(tree.root()).len(), 2);
        let search_agg = tree.node_id(&NodeKey::parse("Search|AGG")).unwrap();
        assert_eq!(tree.children(search_agg).len(), 4);
        assert_eq!(tree.depth(search_agg), 1);
        let leaf = tree.node_id(&NodeKey::parse("Search|US")).unwrap();
        assert_eq!(tree.depth(leaf), 2);
        assert_eq!(tree.parent(leaf), Some(search_agg));
        // cross-marginal AGG|US is a lattice key, not a tree node
        assert!(tree.node_id(&NodeKey::parse("AGG|US")).is_none());
        assert_eq!(
            tree.lattice_leaf_descendants(&NodeKey::parse("AGG|US")).len(),
            2
        );
    }

    #[test]
    fn minimal_tree() {
        let schema =
            DimensionSchema::new(vec!["dim1".into()], vec![vec!["only".into()]]).unwrap();
        let mut leaves = BTreeSet::new();
        leaves.insert(NodeKey::leaf(vec!["only"]));
        let tree = build_tree(&schema, &leaves).unwrap();
        assert_eq!(tree.num_nodes(), 2);
        assert_eq!(tree.depth(tree.leaves()[0]), 1);
    }

    #[test]
    fn partial_leaf_set_prunes_children() {
        // 2 x {2,3} values but only 5 of 6 leaves supplied. Ancestors by
        // hand: root, x1|AGG, x2|AGG, and the 5 leaves -> 8 nodes; the
        // parent missing a child has 2 children.
        let schema = DimensionSchema::new(
            vec!["d1".into(), "d2".into()],
            vec![
                vec!["x1".into(), "x2".into()],
                vec!["y1".into(), "y2".into(), "y3".into()],
            ],
        )
        .unwrap();
        let mut leaves = BTreeSet::new();
        for (a, b) in [
            ("x1", "y1"),
            ("x1", "y2"),
            ("x1", "y3"),
            ("x2", "y1"),
            ("x2", "y3"),
        ] {
            leaves.insert(NodeKey::leaf(vec![a, b]));
        }
        let tree = build_tree(&schema, &leaves).unwrap();
        assert_eq!(tree.leaves().len(), 5);
        assert_eq!(tree.num_nodes(), 8);
        let pruned = tree.node_id(&NodeKey::parse("x2|AGG")).unwrap();
        assert_eq!(tree.children(pruned).len(), 2);
    }

    #[test]
    fn unknown_value_rejected() {
        let schema = channel_region_schema();
        let mut leaves = all_leaves(&schema);
        leaves.insert(NodeKey::leaf(vec!["Search", "Mars"]));
        assert!(matches!(
            build_tree(&schema, &leaves),
            Err(TreeError::UnknownValue { .. })
        ));
    }

    #[test]
    fn empty_leaf_set_rejected() {
        let schema = channel_region_schema();
        assert!(matches!(
            build_tree(&schema, &BTreeSet::new()),
            Err(TreeError::EmptyInput)
        ));
    }

    #[test]
    fn parent_resets_deepest_concrete_dimension() {
        let schema = channel_region_schema();
        let tree = build_tree(&schema, &all_leaves(&schema)).unwrap();
        for id in 0..tree.num_nodes() {
            if let Some(pid) = tree.parent(id) {
                assert_eq!(
                    tree.key(pid),
                    &tree.key(id).canonical_parent().unwrap(),
                    "well-formedness at {}",
                    tree.key(id)
                );
                assert_eq!(tree.depth(pid) + 1, tree.depth(id));
            }
        }
    }

    #[test]
    fn key_display_parse_round_trip() {
        for text in ["Search|US", "AGG|US", "Search|AGG", "AGG|AGG"] {
            assert_eq!(NodeKey::parse(text).to_string(), text);
        }
    }
}
