//! Ready-made trees: the worked examples used throughout the tests and the
//! CLI fixtures, plus a random generator of minimal trees.
//!
//! Id conventions: observables `X1, X2, ...` get ids `0, 1, ...`; first-layer
//! latents start at 10, second-layer latents at 20.

use rand::{Rng, RngExt};

use crate::tree::{Edge, GaussianTree, Node, NodeId, NodeKind};

fn obs(id: u32) -> Node {
    Node { id: NodeId(id), kind: NodeKind::Observable }
}

fn lat(id: u32) -> Node {
    Node { id: NodeId(id), kind: NodeKind::Latent }
}

fn build(nodes: Vec<Node>, edges: Vec<Edge>) -> GaussianTree {
    GaussianTree::new(nodes, edges).expect("catalog tree is valid")
}

/// One latent (id 3) with three observable leaves, equal magnitudes.
pub fn star(gamma: f64) -> GaussianTree {
    star_with(&[gamma, gamma, gamma])
}

/// Star with one leaf per entry of `gammas`; the latent gets id `gammas.len()`.
pub fn star_with(gammas: &[f64]) -> GaussianTree {
    let n = gammas.len() as u32;
    let mut nodes: Vec<Node> = (0..n).map(obs).collect();
    nodes.push(lat(n));
    let edges = gammas.iter().enumerate().map(|(i, &g)| Edge::new(i as u32, n, g)).collect();
    build(nodes, edges)
}

/// Two adjacent latents `y1` (10) and `y2` (11), each with two leaves:
/// x1, x2 under y1 and x3, x4 under y2.
pub fn fig2a(gamma_obs: f64, gamma12: f64) -> GaussianTree {
    two_latent_tree([gamma_obs; 4], gamma12)
}

/// Same topology as [`fig2a`] with distinct leaf magnitudes.
pub fn fig1() -> GaussianTree {
    two_latent_tree([0.9, 0.8, 0.7, 0.6], 0.5)
}

fn two_latent_tree(g: [f64; 4], gamma12: f64) -> GaussianTree {
    build(
        vec![obs(0), obs(1), obs(2), obs(3), lat(10), lat(11)],
        vec![
            Edge::new(0, 10, g[0]),
            Edge::new(1, 10, g[1]),
            Edge::new(2, 11, g[2]),
            Edge::new(3, 11, g[3]),
            Edge::new(10, 11, gamma12),
        ],
    )
}

/// Two layers: `Y1(2)` (20) over `Y1(1)`, `Y2(1)` (10, 11); `Y2(2)` (21) over
/// `Y3(1)`, `Y4(1)` (12, 13); `Y1(2) - Y2(2)`; each first-layer latent has
/// two observable leaves, eight in total.
pub fn fig2b() -> GaussianTree {
    let mut nodes: Vec<Node> = (0..8).map(obs).collect();
    nodes.extend([10, 11, 12, 13, 20, 21].map(lat));
    let leaf = [0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55];
    let mut edges: Vec<Edge> =
        (0..8u32).map(|i| Edge::new(i, 10 + i / 2, leaf[i as usize])).collect();
    edges.extend([
        Edge::new(10, 20, 0.8),
        Edge::new(11, 20, 0.7),
        Edge::new(12, 21, 0.75),
        Edge::new(13, 21, 0.65),
        Edge::new(20, 21, 0.6),
    ]);
    build(nodes, edges)
}

/// Tree with an internal observable: X6 (id 5) joins `Y2`, `Y3`, `Y4`
/// (11, 12, 13); `Y1`, `Y2`, `Y5` (10, 11, 14) hang off the second-layer
/// latent 20.
pub fn fig7() -> GaussianTree {
    let mut nodes: Vec<Node> = (0..10).map(obs).collect();
    nodes.extend([10, 11, 12, 13, 14, 20].map(lat));
    let edges = vec![
        Edge::new(0, 10, 0.8),
        Edge::new(1, 10, 0.75),
        Edge::new(10, 20, 0.7),
        Edge::new(2, 11, 0.85),
        Edge::new(5, 11, 0.7),
        Edge::new(11, 20, 0.65),
        Edge::new(3, 12, 0.8),
        Edge::new(4, 12, 0.6),
        Edge::new(5, 12, 0.75),
        Edge::new(6, 13, 0.7),
        Edge::new(7, 13, 0.85),
        Edge::new(5, 13, 0.6),
        Edge::new(8, 14, 0.9),
        Edge::new(9, 14, 0.65),
        Edge::new(14, 20, 0.75),
    ];
    build(nodes, edges)
}

/// Tree with two adjacent first-layer latents: `Y3` (12) carries X5 and
/// `Y4` (13), which carries X6, X7; top latent 20 joins `Y1`, `Y2`, `Y3`.
pub fn fig9() -> GaussianTree {
    let mut nodes: Vec<Node> = (0..7).map(obs).collect();
    nodes.extend([10, 11, 12, 13, 20].map(lat));
    let edges = vec![
        Edge::new(0, 10, 0.8),
        Edge::new(1, 10, 0.7),
        Edge::new(2, 11, 0.75),
        Edge::new(3, 11, 0.85),
        Edge::new(4, 12, 0.6),
        Edge::new(12, 13, 0.7),
        Edge::new(5, 13, 0.8),
        Edge::new(6, 13, 0.65),
        Edge::new(10, 20, 0.75),
        Edge::new(11, 20, 0.7),
        Edge::new(12, 20, 0.8),
    ];
    build(nodes, edges)
}

/// Non-minimal: a latent (2) with only two leaves.
pub fn chain_pair() -> GaussianTree {
    build(vec![obs(0), obs(1), lat(2)], vec![Edge::new(0, 2, 0.6), Edge::new(1, 2, 0.5)])
}

/// Shape and magnitude limits for [`random_minimal_tree`].
#[derive(Debug, Clone, Copy)]
pub struct RandomTreeOptions {
    pub max_latents: usize,
    pub max_observables: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Draw each edge sign uniformly instead of keeping magnitudes positive.
    pub signed: bool,
}

impl Default for RandomTreeOptions {
    fn default() -> Self {
        RandomTreeOptions { max_latents: 4, max_observables: 8, gamma_min: 0.2, gamma_max: 0.9, signed: true }
    }
}

/// Random minimal tree whose observables are all leaves. Latents form a
/// random recursive tree; each latent then receives enough leaves to reach
/// degree 3, and any remaining observable budget is scattered at random.
/// Observables get ids `0..n`, latents `100..100 + k`.
///
/// Panics if `max_observables < 3`.
pub fn random_minimal_tree<R: Rng + ?Sized>(rng: &mut R, opts: &RandomTreeOptions) -> GaussianTree {
    assert!(opts.max_observables >= 3, "a minimal tree needs three observables");
    loop {
        let k = rng.random_range(1..=opts.max_latents.max(1));
        let mut degree = vec![0usize; k];
        let mut latent_edges = Vec::new();
        for j in 1..k {
            let parent = rng.random_range(0..j);
            degree[j] += 1;
            degree[parent] += 1;
            latent_edges.push((parent, j));
        }
        let need: Vec<usize> = degree.iter().map(|&d| 3usize.saturating_sub(d)).collect();
        let min_n: usize = need.iter().sum();
        if min_n > opts.max_observables {
            continue;
        }
        let n = rng.random_range(min_n..=opts.max_observables);
        let mut host: Vec<usize> =
            need.iter().enumerate().flat_map(|(j, &c)| std::iter::repeat_n(j, c)).collect();
        while host.len() < n {
            host.push(rng.random_range(0..k));
        }
        let mut gamma = || {
            let g = rng.random_range(opts.gamma_min..=opts.gamma_max);
            if opts.signed && rng.random_bool(0.5) {
                -g
            } else {
                g
            }
        };
        let lid = |j: usize| 100 + j as u32;
        let mut nodes: Vec<Node> = (0..n as u32).map(obs).collect();
        nodes.extend((0..k).map(|j| lat(lid(j))));
        let mut edges: Vec<Edge> = latent_edges.iter().map(|&(a, b)| Edge::new(lid(a), lid(b), gamma())).collect();
        edges.extend(host.iter().enumerate().map(|(i, &j)| Edge::new(i as u32, lid(j), gamma())));
        return build(nodes, edges);
    }
}

/// Random tree that may need rewriting before synthesis: a
/// [`random_minimal_tree`] in which each latent except one becomes an
/// observable with probability `p_internal`, creating internal observables
/// and, after layering, same-layer latent edges.
pub fn random_general_tree<R: Rng + ?Sized>(rng: &mut R, opts: &RandomTreeOptions, p_internal: f64) -> GaussianTree {
    let base = random_minimal_tree(rng, opts);
    let latents = base.latents();
    let keep = latents[rng.random_range(0..latents.len())];
    let nodes = base
        .nodes()
        .iter()
        .map(|n| match n.kind {
            NodeKind::Latent if n.id != keep && rng.random_bool(p_internal) => obs(n.id.0),
            _ => *n,
        })
        .collect();
    build(nodes, base.edges().to_vec())
}
