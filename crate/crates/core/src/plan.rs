//! Layered channel plan for a tree in hyper-chain form.
//!
//! The plan holds one [`LayerChannel`] per layer boundary plus the joint law
//! of the top layer. Construction verifies that running the channels top-down
//! reproduces the tree covariance over every non-pseudo node; trees that are
//! not yet layered correctly should go through
//! [`normalize_for_synthesis`](crate::transforms::normalize_for_synthesis).

use nalgebra::DMatrix;
use rand::Rng;

use crate::channel::{cholesky_lower, fill_normal, LayerChannel};
use crate::covariance::path_product_matrix;
use crate::error::{Error, Result};
use crate::signs::SignAssignment;
use crate::tree::{GaussianTree, LayerDecomposition, NodeId, NodeKind};

/// Most latents a single layer may hold (each codeword stores `2^k` vectors).
pub const MAX_LAYER_LATENTS: usize = 10;
/// Tolerance of the covariance reproduction check.
pub const PLAN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct SynthesisPlan {
    tree: GaussianTree,
    layers: LayerDecomposition,
    layer_nodes: Vec<Vec<NodeId>>,
    layer_latents: Vec<Vec<NodeId>>,
    channels: Vec<LayerChannel>,
    top_chol: DMatrix<f64>,
    top_signed: Vec<usize>,
    observables: Vec<(NodeId, usize, usize)>,
}

impl SynthesisPlan {
    pub fn new(tree: &GaussianTree, layers: &LayerDecomposition) -> Result<Self> {
        let top = layers.top();
        if top == 0 {
            return Err(Error::InvalidInput("tree has no latent layer to synthesize from".into()));
        }
        for id in tree.node_ids() {
            if layers.layer(id).is_none() {
                return Err(Error::InvalidInput(format!("node {id} has no layer")));
            }
        }
        let layer_nodes: Vec<Vec<NodeId>> = (0..=top).map(|l| layers.nodes_at(l)).collect();
        if let Some(l) = layer_nodes.iter().position(Vec::is_empty) {
            return Err(Error::InvalidInput(format!("layer {l} is empty")));
        }
        let layer_latents: Vec<Vec<NodeId>> = (0..=top).map(|l| layers.latents_at(tree, l)).collect();
        if let Some((l, lat)) = layer_latents.iter().enumerate().find(|(_, v)| v.len() > MAX_LAYER_LATENTS) {
            return Err(Error::ResourceCap(format!(
                "layer {l} has {} latents, cap is {MAX_LAYER_LATENTS}",
                lat.len()
            )));
        }
        let channels: Vec<LayerChannel> = (0..top)
            .map(|l| LayerChannel::between(tree, &layer_nodes[l], &layer_nodes[l + 1]))
            .collect::<Result<_>>()?;
        let top_ids = &layer_nodes[top];
        let top_cov = path_product_matrix(tree, &SignAssignment::all_plus(tree), top_ids)?;
        let top_chol = cholesky_lower(&top_cov)
            .ok_or_else(|| Error::NotPositiveDefinite("top layer covariance".into()))?;
        let top_signed =
            top_ids.iter().enumerate().filter(|(_, &id)| tree.is_latent(id)).map(|(i, _)| i).collect();
        let mut observables = Vec::new();
        for (l, nodes) in layer_nodes.iter().enumerate() {
            for (p, &id) in nodes.iter().enumerate() {
                if tree.kind(id) == Some(NodeKind::Observable) {
                    observables.push((id, l, p));
                }
            }
        }
        observables.sort();
        let plan = SynthesisPlan {
            tree: tree.clone(),
            layers: layers.clone(),
            layer_nodes,
            layer_latents,
            channels,
            top_chol,
            top_signed,
            observables,
        };
        let dev = plan.reproduction_error()?;
        if !(dev <= PLAN_TOLERANCE) {
            return Err(Error::PlanNotExact(dev));
        }
        Ok(plan)
    }

    /// Largest deviation between the covariance generated by the channels and
    /// the tree covariance, over non-pseudo nodes (all signs +1).
    pub fn reproduction_error(&self) -> Result<f64> {
        let top = self.top();
        // generated covariance over nodes ordered from the top layer down
        let mut order: Vec<NodeId> = self.layer_nodes[top].clone();
        let mut gen = self.top_chol.clone() * self.top_chol.transpose();
        let mut hi_start = 0;
        for l in (0..top).rev() {
            let ch = &self.channels[l];
            let nh = self.layer_nodes[l + 1].len();
            let nl = self.layer_nodes[l].len();
            let total = gen.nrows();
            // rows of the upper layer against everything generated so far
            let hi_rows = gen.rows(hi_start, nh).into_owned();
            let cross = ch.base_gain() * &hi_rows; // lower x all
            let hi_block = gen.view((hi_start, hi_start), (nh, nh)).into_owned();
            let lo_block = ch.base_gain() * hi_block * ch.base_gain().transpose() + ch.noise_cov();
            let mut next = DMatrix::zeros(total + nl, total + nl);
            next.view_mut((0, 0), (total, total)).copy_from(&gen);
            next.view_mut((total, 0), (nl, total)).copy_from(&cross);
            next.view_mut((0, total), (total, nl)).copy_from(&cross.transpose());
            next.view_mut((total, total), (nl, nl)).copy_from(&lo_block);
            gen = next;
            hi_start = total;
            order.extend(self.layer_nodes[l].iter().copied());
        }
        let target = path_product_matrix(&self.tree, &SignAssignment::all_plus(&self.tree), &order)?;
        let keep: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(_, &id)| self.tree.kind(id) != Some(NodeKind::Pseudo))
            .map(|(i, _)| i)
            .collect();
        let mut worst: f64 = 0.0;
        for &i in &keep {
            for &j in &keep {
                worst = worst.max((gen[(i, j)] - target[(i, j)]).abs());
            }
        }
        Ok(worst)
    }

    /// True when every channel's noise covariance is diagonal, the form of
    /// the sparse hyper-chain channels.
    pub fn noise_is_diagonal(&self, tol: f64) -> bool {
        self.channels.iter().all(|ch| {
            let z = ch.noise_cov();
            (0..z.nrows()).all(|i| (0..z.ncols()).all(|j| i == j || z[(i, j)].abs() <= tol))
        })
    }

    pub fn tree(&self) -> &GaussianTree {
        &self.tree
    }

    pub fn layers(&self) -> &LayerDecomposition {
        &self.layers
    }

    pub fn top(&self) -> usize {
        self.layer_nodes.len() - 1
    }

    pub fn nodes_at(&self, l: usize) -> &[NodeId] {
        &self.layer_nodes[l]
    }

    pub fn latents_at(&self, l: usize) -> &[NodeId] {
        &self.layer_latents[l]
    }

    /// `2^{k_l}`, the number of sign realizations at layer `l`.
    pub fn realizations(&self, l: usize) -> usize {
        1 << self.layer_latents[l].len()
    }

    pub fn dim(&self, l: usize) -> usize {
        self.layer_nodes[l].len()
    }

    /// Channel generating layer `l` from layer `l + 1`.
    pub fn channel(&self, l: usize) -> &LayerChannel {
        &self.channels[l]
    }

    /// Observables in id order with their layer and position in that layer.
    pub fn observables(&self) -> &[(NodeId, usize, usize)] {
        &self.observables
    }

    pub fn observable_ids(&self) -> Vec<NodeId> {
        self.observables.iter().map(|o| o.0).collect()
    }

    /// Draw the top layer under sign mask `mask`.
    pub fn sample_top<R: Rng + ?Sized>(&self, mask: u64, rng: &mut R, out: &mut [f64]) {
        let n = out.len();
        let mut eps = vec![0.0; n];
        fill_normal(rng, &mut eps);
        for i in 0..n {
            out[i] = (0..=i).map(|k| self.top_chol[(i, k)] * eps[k]).sum();
        }
        for (j, &p) in self.top_signed.iter().enumerate() {
            if mask >> j & 1 == 1 {
                out[p] = -out[p];
            }
        }
    }
}
