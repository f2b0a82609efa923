//! Latent Gaussian trees: nodes, edges, layer assignment and the JSON tree
//! document format.
//!
//! Edge magnitudes live on the tree; signs live in [`SignAssignment`]
//! (see [`crate::signs`]). Every variable is zero mean with unit variance, so
//! the correlation between two nodes is the product of edge weights along the
//! path joining them.
//!
//! [`SignAssignment`]: crate::signs::SignAssignment

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magnitudes at or beyond these bounds are rejected.
pub const GAMMA_MIN: f64 = 1e-9;
pub const GAMMA_MAX: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Observable,
    Latent,
    /// Latent node added to break the clique around an internal observable.
    Pseudo,
}

impl NodeKind {
    /// Latent and pseudo nodes both carry a sign variable.
    pub fn is_latent(self) -> bool {
        !matches!(self, NodeKind::Observable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: NodeId,
    pub v: NodeId,
    pub gamma: f64,
    /// Copy edge between a pseudo node and the observable it mirrors
    /// (`gamma` is exactly 1).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub mirror: bool,
}

impl Edge {
    pub fn new(u: u32, v: u32, gamma: f64) -> Self {
        Edge { u: NodeId(u), v: NodeId(v), gamma, mirror: false }
    }

    pub fn other(&self, id: NodeId) -> NodeId {
        if self.u == id {
            self.v
        } else {
            self.u
        }
    }

    pub fn touches(&self, id: NodeId) -> bool {
        self.u == id || self.v == id
    }
}

/// Serialized tree document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

/// A validated tree. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTree {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    index: BTreeMap<NodeId, usize>,
    // adjacency by node position: (neighbor position, edge position), sorted by neighbor id
    adj: Vec<Vec<(usize, usize)>>,
}

impl GaussianTree {
    pub fn new(mut nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::NotATree("no nodes".into()));
        }
        nodes.sort_by_key(|n| n.id);
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id, i).is_some() {
                return Err(Error::DuplicateNode(n.id));
            }
        }
        if !nodes.iter().any(|n| n.kind == NodeKind::Observable) {
            return Err(Error::NoObservables);
        }

        let mut adj = vec![Vec::new(); nodes.len()];
        let mut seen = BTreeSet::new();
        for (e_pos, e) in edges.iter().enumerate() {
            let iu = *index.get(&e.u).ok_or(Error::UnknownNode(e.u))?;
            let iv = *index.get(&e.v).ok_or(Error::UnknownNode(e.v))?;
            if iu == iv {
                return Err(Error::SelfLoop(e.u));
            }
            if !seen.insert((e.u.min(e.v), e.u.max(e.v))) {
                return Err(Error::DuplicateEdge(e.u, e.v));
            }
            if e.mirror {
                let kinds = [nodes[iu].kind, nodes[iv].kind];
                let ok = e.gamma == 1.0
                    && kinds.contains(&NodeKind::Pseudo)
                    && kinds.contains(&NodeKind::Observable);
                if !ok {
                    return Err(Error::InvalidInput(format!(
                        "mirror edge {} - {} must join a pseudo node to an observable with gamma 1",
                        e.u, e.v
                    )));
                }
            } else {
                let g = e.gamma.abs();
                if !(g > GAMMA_MIN && g < GAMMA_MAX) {
                    return Err(Error::GammaOutOfRange { u: e.u, v: e.v, gamma: e.gamma });
                }
            }
            adj[iu].push((iv, e_pos));
            adj[iv].push((iu, e_pos));
        }
        if edges.len() + 1 != nodes.len() {
            return Err(Error::NotATree(format!(
                "{} nodes need {} edges, found {}",
                nodes.len(),
                nodes.len() - 1,
                edges.len()
            )));
        }
        for list in &mut adj {
            list.sort_by_key(|&(nb, _)| nodes[nb].id);
        }
        let tree = GaussianTree { nodes, edges, index, adj };
        let reached = tree.bfs_order(0).len();
        if reached != tree.nodes.len() {
            // n - 1 edges and not connected means there is a cycle somewhere
            return Err(Error::NotATree("edge set is disconnected or cyclic".into()));
        }
        Ok(tree)
    }

    pub fn from_spec(spec: TreeSpec) -> Result<Self> {
        Self::new(spec.nodes, spec.edges)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: TreeSpec =
            serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        Self::from_spec(spec)
    }

    pub fn to_spec(&self) -> TreeSpec {
        TreeSpec { nodes: self.nodes.clone(), edges: self.edges.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_spec()).expect("tree spec serializes")
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub(crate) fn pos(&self, id: NodeId) -> Result<usize> {
        self.position(id).ok_or(Error::UnknownNode(id))
    }

    pub fn kind(&self, id: NodeId) -> Option<NodeKind> {
        self.position(id).map(|i| self.nodes[i].kind)
    }

    pub fn is_latent(&self, id: NodeId) -> bool {
        self.kind(id).is_some_and(NodeKind::is_latent)
    }

    /// Observable ids in increasing order.
    pub fn observables(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Observable).map(|n| n.id).collect()
    }

    /// Latent and pseudo ids in increasing order.
    pub fn latents(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.kind.is_latent()).map(|n| n.id).collect()
    }

    pub fn neighbors(&self, id: NodeId) -> Vec<NodeId> {
        match self.position(id) {
            Some(i) => self.adj[i].iter().map(|&(nb, _)| self.nodes[nb].id).collect(),
            None => Vec::new(),
        }
    }

    /// Incident edges of `id`, ordered by neighbor id.
    pub fn incident(&self, id: NodeId) -> Vec<&Edge> {
        match self.position(id) {
            Some(i) => self.adj[i].iter().map(|&(_, e)| &self.edges[e]).collect(),
            None => Vec::new(),
        }
    }

    pub fn degree(&self, id: NodeId) -> usize {
        self.position(id).map_or(0, |i| self.adj[i].len())
    }

    pub fn edge_between(&self, a: NodeId, b: NodeId) -> Option<&Edge> {
        let i = self.position(a)?;
        let j = self.position(b)?;
        self.adj[i].iter().find(|&&(nb, _)| nb == j).map(|&(_, e)| &self.edges[e])
    }

    pub(crate) fn adjacency(&self, pos: usize) -> &[(usize, usize)] {
        &self.adj[pos]
    }

    /// Positions reachable from `start`, in breadth-first order, with the
    /// parent position and connecting edge position of each.
    pub(crate) fn bfs_tree(&self, start: usize) -> Vec<(usize, Option<(usize, usize)>)> {
        let mut visited = vec![false; self.nodes.len()];
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut queue = VecDeque::new();
        visited[start] = true;
        queue.push_back((start, None));
        while let Some((cur, parent)) = queue.pop_front() {
            out.push((cur, parent));
            for &(nb, e) in &self.adj[cur] {
                if !visited[nb] {
                    visited[nb] = true;
                    queue.push_back((nb, Some((cur, e))));
                }
            }
        }
        out
    }

    fn bfs_order(&self, start: usize) -> Vec<usize> {
        self.bfs_tree(start).into_iter().map(|(p, _)| p).collect()
    }

    /// Node ids on the path from `a` to `b`, both ends included.
    pub fn path(&self, a: NodeId, b: NodeId) -> Result<Vec<NodeId>> {
        let ia = self.pos(a)?;
        let ib = self.pos(b)?;
        let mut parent = vec![usize::MAX; self.nodes.len()];
        for (p, par) in self.bfs_tree(ia) {
            if let Some((pp, _)) = par {
                parent[p] = pp;
            }
        }
        let mut out = vec![self.nodes[ib].id];
        let mut cur = ib;
        while cur != ia {
            cur = parent[cur];
            out.push(self.nodes[cur].id);
        }
        out.reverse();
        Ok(out)
    }

    /// Reasons the tree is not minimal; empty when it is. Pseudo nodes are
    /// exempt from the degree rule, they are transform artefacts.
    pub fn minimality_issues(&self) -> Vec<String> {
        let mut issues = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.kind == NodeKind::Latent && self.adj[i].len() < 3 {
                issues.push(format!("latent node {} has degree {}", n.id, self.adj[i].len()));
            }
        }
        let n_obs = self.observables().len();
        if n_obs < 3 {
            issues.push(format!("only {n_obs} observables"));
        }
        issues
    }

    pub fn is_minimal(&self) -> bool {
        self.minimality_issues().is_empty()
    }

    pub fn max_id(&self) -> NodeId {
        self.nodes.last().expect("tree is nonempty").id
    }
}

/// Layer index of every node. Observables start at layer 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDecomposition {
    layer_of: BTreeMap<NodeId, usize>,
}

impl LayerDecomposition {
    pub fn from_map(layer_of: BTreeMap<NodeId, usize>) -> Self {
        LayerDecomposition { layer_of }
    }

    pub fn layer(&self, id: NodeId) -> Option<usize> {
        self.layer_of.get(&id).copied()
    }

    pub fn as_map(&self) -> &BTreeMap<NodeId, usize> {
        &self.layer_of
    }

    /// Top layer index `L`.
    pub fn top(&self) -> usize {
        self.layer_of.values().copied().max().unwrap_or(0)
    }

    /// Nodes at layer `l`, in id order.
    pub fn nodes_at(&self, l: usize) -> Vec<NodeId> {
        self.layer_of.iter().filter(|&(_, &x)| x == l).map(|(&id, _)| id).collect()
    }

    /// Latent (sign-carrying) nodes at layer `l`, in id order.
    pub fn latents_at(&self, tree: &GaussianTree, l: usize) -> Vec<NodeId> {
        self.nodes_at(l).into_iter().filter(|&id| tree.is_latent(id)).collect()
    }

    /// `k_l`, the number of latent nodes at layer `l`.
    pub fn latent_count(&self, tree: &GaussianTree, l: usize) -> usize {
        self.latents_at(tree, l).len()
    }

    pub(crate) fn set(&mut self, id: NodeId, l: usize) {
        self.layer_of.insert(id, l);
    }

    /// Shift every layer down so the lowest occupied layer is 0 and no
    /// layer in between is empty.
    pub(crate) fn compact(&mut self) {
        let used: BTreeSet<usize> = self.layer_of.values().copied().collect();
        let remap: BTreeMap<usize, usize> =
            used.into_iter().enumerate().map(|(new, old)| (old, new)).collect();
        for l in self.layer_of.values_mut() {
            *l = remap[l];
        }
    }
}

/// Layer of each node = shortest-path distance to the observable set.
pub fn assign_layers(tree: &GaussianTree) -> LayerDecomposition {
    let n = tree.len();
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for (i, node) in tree.nodes().iter().enumerate() {
        if node.kind == NodeKind::Observable {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    while let Some(cur) = queue.pop_front() {
        for &(nb, _) in tree.adjacency(cur) {
            if dist[nb] == usize::MAX {
                dist[nb] = dist[cur] + 1;
                queue.push_back(nb);
            }
        }
    }
    let layer_of = tree.nodes().iter().zip(dist).map(|(node, d)| (node.id, d)).collect();
    LayerDecomposition { layer_of }
}

/// Parse a tree document and assign layers.
pub fn parse_tree(text: &str) -> Result<(GaussianTree, LayerDecomposition)> {
    let tree = GaussianTree::from_json(text)?;
    let layers = assign_layers(&tree);
    Ok((tree, layers))
}
