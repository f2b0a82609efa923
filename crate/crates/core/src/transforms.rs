//! Structural rewrites that bring a layered tree into hyper-chain form:
//! pseudo nodes above internal observables, and layer moves that split
//! intra-layer edges.
//!
//! Both rewrites leave the observable covariance bit-identical. Layer moves
//! only relabel layers; a pseudo node copies the internal observable's
//! latent edges and the observable hangs off it by a unit mirror edge.

use std::collections::{BTreeSet, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{Edge, GaussianTree, LayerDecomposition, Node, NodeId, NodeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    PseudoNode,
    LayerMove,
}

/// One rewrite.
///
/// * `PseudoNode`: `mirrored` is the internal observable, `created` the new
///   pseudo node, `affected` the latents whose edges moved to it, `layer`
///   the pseudo node's layer.
/// * `LayerMove`: `affected` is `[moved, partner]`, the endpoints of the
///   split edge, and `layer` the layer they shared.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub kind: TransformKind,
    pub affected: Vec<NodeId>,
    #[serde(default)]
    pub created: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mirrored: Option<NodeId>,
    pub layer: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransformLog {
    pub records: Vec<TransformRecord>,
}

impl TransformLog {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn count(&self, kind: TransformKind) -> usize {
        self.records.iter().filter(|r| r.kind == kind).count()
    }

    fn extend(&mut self, other: TransformLog) {
        self.records.extend(other.records);
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(TransformLog { records })
    }

    /// Apply the log to the tree it was recorded on.
    pub fn replay(
        &self,
        tree: &GaussianTree,
        layers: &LayerDecomposition,
    ) -> Result<(GaussianTree, LayerDecomposition)> {
        let mut tree = tree.clone();
        let mut layers = layers.clone();
        for r in &self.records {
            match r.kind {
                TransformKind::PseudoNode => {
                    let (x, p) = match (r.mirrored, r.created.as_slice()) {
                        (Some(x), [p]) => (x, *p),
                        _ => return Err(Error::Malformed("pseudo_node record needs mirrored and one created id".into())),
                    };
                    (tree, layers) = add_pseudo(&tree, &layers, x, p, &r.affected, r.layer)?;
                }
                TransformKind::LayerMove => {
                    let [m, u] = r.affected.as_slice() else {
                        return Err(Error::Malformed("layer_move record needs two affected ids".into()));
                    };
                    layers = move_below(&tree, &layers, *m, *u)?;
                }
            }
        }
        Ok((tree, layers))
    }
}

fn check_layers(tree: &GaussianTree, layers: &LayerDecomposition) -> Result<()> {
    match tree.node_ids().into_iter().find(|&id| layers.layer(id).is_none()) {
        Some(id) => Err(Error::InvalidInput(format!("node {id} has no layer"))),
        None => Ok(()),
    }
}

/// Non-mirror neighbours of `id` at layer `l`.
fn neighbors_at(tree: &GaussianTree, layers: &LayerDecomposition, id: NodeId, l: usize) -> Vec<NodeId> {
    tree.incident(id)
        .into_iter()
        .filter(|e| !e.mirror)
        .map(|e| e.other(id))
        .filter(|&nb| layers.layer(nb) == Some(l))
        .collect()
}

/// Observables whose latent neighbours one layer up would form a clique once
/// the observable is peeled off: two or more non-mirror neighbours there.
pub fn internal_observables(tree: &GaussianTree, layers: &LayerDecomposition) -> Vec<NodeId> {
    tree.observables()
        .into_iter()
        .filter(|&x| {
            let l = layers.layer(x).unwrap_or(0);
            neighbors_at(tree, layers, x, l + 1).len() >= 2
        })
        .collect()
}

fn add_pseudo(
    tree: &GaussianTree,
    layers: &LayerDecomposition,
    x: NodeId,
    p: NodeId,
    moved: &[NodeId],
    layer: usize,
) -> Result<(GaussianTree, LayerDecomposition)> {
    if tree.contains(p) {
        return Err(Error::DuplicateNode(p));
    }
    let mut edges = Vec::with_capacity(tree.edges().len() + 1);
    for e in tree.edges() {
        if e.touches(x) && !e.mirror && moved.contains(&e.other(x)) {
            edges.push(Edge { u: p, v: e.other(x), gamma: e.gamma, mirror: false });
        } else {
            edges.push(*e);
        }
    }
    if edges.iter().filter(|e| e.u == p || e.v == p).count() != moved.len() {
        return Err(Error::Malformed(format!("pseudo node {p}: not every listed node is adjacent to {x}")));
    }
    edges.push(Edge { u: p, v: x, gamma: 1.0, mirror: true });
    let mut nodes = tree.nodes().to_vec();
    nodes.push(Node { id: p, kind: NodeKind::Pseudo });
    let out = GaussianTree::new(nodes, edges)?;
    let mut l = layers.clone();
    l.set(p, layer);
    Ok((out, l))
}

/// Add a pseudo node above every internal observable.
pub fn insert_pseudo_nodes(
    tree: &GaussianTree,
    layers: &LayerDecomposition,
) -> Result<(GaussianTree, LayerDecomposition, TransformLog)> {
    check_layers(tree, layers)?;
    let mut t = tree.clone();
    let mut ls = layers.clone();
    let mut log = TransformLog::default();
    for x in internal_observables(tree, layers) {
        let lx = ls.layer(x).expect("checked");
        let moved = neighbors_at(&t, &ls, x, lx + 1);
        let p = NodeId(t.max_id().0 + 1);
        (t, ls) = add_pseudo(&t, &ls, x, p, &moved, lx + 2)?;
        log.records.push(TransformRecord {
            kind: TransformKind::PseudoNode,
            affected: moved,
            created: vec![p],
            mirrored: Some(x),
            layer: lx + 2,
        });
    }
    Ok((t, ls, log))
}

/// Same-layer edges below the top layer, highest layer first.
pub fn intra_layer_edges(tree: &GaussianTree, layers: &LayerDecomposition) -> Vec<(NodeId, NodeId, usize)> {
    let top = layers.top();
    let mut out: Vec<_> = tree
        .edges()
        .iter()
        .filter_map(|e| {
            let (a, b) = (layers.layer(e.u)?, layers.layer(e.v)?);
            (a == b && a < top).then_some((e.u.min(e.v), e.u.max(e.v), a))
        })
        .collect();
    out.sort_by(|x, y| y.2.cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    out
}

/// Hop distance of every node to the top layer.
fn distance_to_top(tree: &GaussianTree, layers: &LayerDecomposition) -> Vec<usize> {
    let mut dist = vec![usize::MAX; tree.len()];
    let mut queue = VecDeque::new();
    for id in layers.nodes_at(layers.top()) {
        let p = tree.position(id).expect("layered node in tree");
        dist[p] = 0;
        queue.push_back(p);
    }
    while let Some(cur) = queue.pop_front() {
        for &(nb, _) in tree.adjacency(cur) {
            if dist[nb] == usize::MAX {
                dist[nb] = dist[cur] + 1;
                queue.push_back(nb);
            }
        }
    }
    dist
}

/// Split the edge `m - u` by putting `m`'s side of it one layer below
/// everything else (implemented by raising the rest, then compacting).
fn move_below(
    tree: &GaussianTree,
    layers: &LayerDecomposition,
    m: NodeId,
    u: NodeId,
) -> Result<LayerDecomposition> {
    if tree.edge_between(m, u).is_none() {
        return Err(Error::Malformed(format!("no edge {m} - {u} to split")));
    }
    let pm = tree.position(m).expect("edge endpoint");
    let pu = tree.position(u).expect("edge endpoint");
    let mut side = vec![false; tree.len()];
    side[pm] = true;
    let mut stack = vec![pm];
    while let Some(cur) = stack.pop() {
        for &(nb, _) in tree.adjacency(cur) {
            if !side[nb] && !(cur == pm && nb == pu) {
                side[nb] = true;
                stack.push(nb);
            }
        }
    }
    let mut out = layers.clone();
    for (i, node) in tree.nodes().iter().enumerate() {
        if !side[i] {
            let l = layers.layer(node.id).expect("layered");
            out.set(node.id, l + 1);
        }
    }
    out.compact();
    Ok(out)
}

/// Split intra-layer edges below the top, highest first, moving the endpoint
/// farther from the top layer (ties: larger id) one layer down.
pub fn reorder_layers(
    tree: &GaussianTree,
    layers: &LayerDecomposition,
) -> Result<(GaussianTree, LayerDecomposition, TransformLog)> {
    check_layers(tree, layers)?;
    let mut ls = layers.clone();
    let mut log = TransformLog::default();
    for _ in 0..=tree.len() {
        let Some(&(a, b, layer)) = intra_layer_edges(tree, &ls).first() else {
            return Ok((tree.clone(), ls, log));
        };
        let dist = distance_to_top(tree, &ls);
        let (da, db) = (dist[tree.position(a).unwrap()], dist[tree.position(b).unwrap()]);
        let (m, u) = if da > db { (a, b) } else { (b, a) };
        ls = move_below(tree, &ls, m, u)?;
        log.records.push(TransformRecord {
            kind: TransformKind::LayerMove,
            affected: vec![m, u],
            created: Vec::new(),
            mirrored: None,
            layer,
        });
    }
    Err(Error::TransformDiverged(tree.len()))
}

/// Alternate [`reorder_layers`] and [`insert_pseudo_nodes`] until neither
/// rewrites anything.
pub fn normalize_for_synthesis(
    tree: &GaussianTree,
    layers: &LayerDecomposition,
) -> Result<(GaussianTree, LayerDecomposition, TransformLog)> {
    let mut t = tree.clone();
    let mut ls = layers.clone();
    let mut log = TransformLog::default();
    let cap = tree.len().max(1);
    for _ in 0..cap {
        let (t1, l1, a) = reorder_layers(&t, &ls)?;
        let (t2, l2, b) = insert_pseudo_nodes(&t1, &l1)?;
        let done = a.is_empty() && b.is_empty();
        log.extend(a);
        log.extend(b);
        t = t2;
        ls = l2;
        if done {
            return Ok((t, ls, log));
        }
    }
    Err(Error::TransformDiverged(cap))
}

/// Reasons `(tree, layers)` is not in hyper-chain form; empty when it is.
///
/// Checked: no same-layer edge below the top layer; every non-mirror edge
/// joins adjacent layers; no internal observable; every node below the top
/// has a neighbour one layer up (a mirrored observable's link is its pseudo
/// node).
pub fn hyper_chain_violations(tree: &GaussianTree, layers: &LayerDecomposition) -> Vec<String> {
    let mut out = Vec::new();
    if let Err(e) = check_layers(tree, layers) {
        return vec![e.to_string()];
    }
    let top = layers.top();
    for (a, b, l) in intra_layer_edges(tree, layers) {
        out.push(format!("edge {a} - {b} inside layer {l}"));
    }
    for e in tree.edges().iter().filter(|e| !e.mirror) {
        let (a, b) = (layers.layer(e.u).unwrap(), layers.layer(e.v).unwrap());
        if a.abs_diff(b) > 1 {
            out.push(format!("edge {} - {} spans layers {a} and {b}", e.u, e.v));
        }
    }
    for x in internal_observables(tree, layers) {
        out.push(format!("observable {x} is internal"));
    }
    let used: BTreeSet<usize> = layers.as_map().values().copied().collect();
    if let Some(gap) = (0..=top).find(|l| !used.contains(l)) {
        out.push(format!("layer {gap} is empty"));
    }
    for id in tree.node_ids() {
        let l = layers.layer(id).unwrap();
        let mirrored = tree.incident(id).iter().any(|e| e.mirror);
        let has_parent = mirrored || tree.neighbors(id).iter().any(|&nb| layers.layer(nb) == Some(l + 1));
        if l < top && !has_parent {
            out.push(format!("node {id} at layer {l} has no neighbour one layer up"));
        }
    }
    out
}

pub fn is_hyper_chain(tree: &GaussianTree, layers: &LayerDecomposition) -> bool {
    hyper_chain_violations(tree, layers).is_empty()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::covariance::observable_covariance;
    use crate::signs::SignAssignment;
    use crate::tree::assign_layers;

    fn sigma_x(tree: &GaussianTree) -> Vec<f64> {
        observable_covariance(tree, &SignAssignment::all_plus(tree)).unwrap().matrix().as_slice().to_vec()
    }

    #[test]
    fn fig7_gets_one_pseudo_node() {
        let tree = catalog::fig7();
        let layers = assign_layers(&tree);
        assert_eq!(internal_observables(&tree, &layers), vec![NodeId(5)]);
        let (t2, l2, log) = insert_pseudo_nodes(&tree, &layers).unwrap();
        assert_eq!(log.len(), 1);
        let rec = &log.records[0];
        assert_eq!(rec.mirrored, Some(NodeId(5)));
        assert_eq!(rec.affected, vec![NodeId(11), NodeId(12), NodeId(13)]);
        let p = rec.created[0];
        assert_eq!(t2.kind(p), Some(NodeKind::Pseudo));
        assert_eq!(l2.nodes_at(2), vec![NodeId(20), p]);
        assert_eq!(sigma_x(&tree), sigma_x(&t2));
        assert!(is_hyper_chain(&t2, &l2), "{:?}", hyper_chain_violations(&t2, &l2));
    }

    #[test]
    fn fig9_reorders_once() {
        let tree = catalog::fig9();
        let layers = assign_layers(&tree);
        assert!(!is_hyper_chain(&tree, &layers));
        let (t2, l2, log) = reorder_layers(&tree, &layers).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.records[0].affected, vec![NodeId(13), NodeId(12)]);
        // X6, X7 stay in layer 0 under Y4; everything else moved up one
        assert_eq!(l2.nodes_at(0), vec![NodeId(5), NodeId(6)]);
        assert_eq!(l2.layer(NodeId(13)), Some(1));
        assert_eq!(l2.layer(NodeId(12)), Some(2));
        assert_eq!(l2.layer(NodeId(0)), Some(1));
        assert_eq!(l2.top(), 3);
        assert_eq!(sigma_x(&tree), sigma_x(&t2));
        assert!(is_hyper_chain(&t2, &l2), "{:?}", hyper_chain_violations(&t2, &l2));
    }

    #[test]
    fn basic_trees_are_fixed_points() {
        for tree in [catalog::star(0.6), catalog::fig1(), catalog::fig2b()] {
            let layers = assign_layers(&tree);
            let (t2, l2, log) = normalize_for_synthesis(&tree, &layers).unwrap();
            assert!(log.is_empty());
            assert_eq!(t2, tree);
            assert_eq!(l2, layers);
        }
    }

    #[test]
    fn normalize_matches_single_passes() {
        let tree = catalog::fig7();
        let (_, _, log) = normalize_for_synthesis(&tree, &assign_layers(&tree)).unwrap();
        assert_eq!(log.count(TransformKind::PseudoNode), 1);
        assert_eq!(log.count(TransformKind::LayerMove), 0);
        let tree = catalog::fig9();
        let (_, _, log) = normalize_for_synthesis(&tree, &assign_layers(&tree)).unwrap();
        assert_eq!(log.count(TransformKind::LayerMove), 1);
        assert_eq!(log.count(TransformKind::PseudoNode), 0);
    }

    #[test]
    fn log_roundtrips_and_replays() {
        for tree in [catalog::fig7(), catalog::fig9()] {
            let layers = assign_layers(&tree);
            let (t2, l2, log) = normalize_for_synthesis(&tree, &layers).unwrap();
            let mut buf = Vec::new();
            log.write_jsonl(&mut buf).unwrap();
            let back = TransformLog::read_jsonl(&buf[..]).unwrap();
            assert_eq!(back, log);
            let (t3, l3) = back.replay(&tree, &layers).unwrap();
            assert_eq!((t3, l3), (t2, l2));
        }
    }

    #[test]
    fn jsonl_shape() {
        let tree = catalog::fig7();
        let (_, _, log) = insert_pseudo_nodes(&tree, &assign_layers(&tree)).unwrap();
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"kind\":\"pseudo_node\",\"affected\":[11,12,13],\"created\":[21],\"mirrored\":5,\"layer\":2}\n"
        );
    }

    #[test]
    fn normalized_trees_plan_with_diagonal_noise() {
        use crate::plan::SynthesisPlan;
        for tree in [catalog::fig7(), catalog::fig9()] {
            let layers = assign_layers(&tree);
            let (t2, l2, _) = normalize_for_synthesis(&tree, &layers).unwrap();
            let plan = SynthesisPlan::new(&t2, &l2).unwrap();
            assert!(plan.noise_is_diagonal(1e-12));
        }
    }
}
