//! Per-layer synthesis channels `Y(l) = A_B Y(l+1) + Z`.
//!
//! A channel is stored in "all-plus" coordinates: the gain `A'` and noise
//! covariance `Σ'_Z` come from Gaussian conditioning of the lower layer on the
//! upper layer with every sign set to +1. A sign realization acts by
//! flipping coordinates, `A_b = D_lo A' D_hi`, so one factorization serves all
//! `2^k` realizations. When each lower node has a single upper neighbor this
//! is exactly the sparse connection matrix of edge weights `γ b_i b_j` with
//! noise variances `1 − γ²`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::covariance::path_product_matrix;
use crate::error::{Error, Result};
use crate::signs::SignAssignment;
use crate::tree::{GaussianTree, NodeId};

/// Whether channel noise is drawn or suppressed (test hook).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    #[default]
    Sampled,
    Zero,
}

/// Lower-triangular Cholesky factor, `None` unless positive definite.
pub(crate) fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.unpack())
}

/// Fill `out` with independent standard normal draws.
pub(crate) fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

/// Conditional Gaussian model of `lower` given `upper`.
#[derive(Debug, Clone)]
pub struct LayerChannel {
    lower: Vec<NodeId>,
    upper: Vec<NodeId>,
    lower_signed: Vec<usize>,
    upper_signed: Vec<usize>,
    gain: DMatrix<f64>,
    noise_cov: DMatrix<f64>,
    noise_chol: DMatrix<f64>,
    lower_cov: DMatrix<f64>,
    upper_cov: DMatrix<f64>,
}

impl LayerChannel {
    /// Regression channel of `lower` on `upper` from the tree's all-plus
    /// covariance. Both lists must be disjoint; either may hold observables.
    pub fn between(tree: &GaussianTree, lower: &[NodeId], upper: &[NodeId]) -> Result<Self> {
        let nl = lower.len();
        let nu = upper.len();
        let ids: Vec<NodeId> = lower.iter().chain(upper).copied().collect();
        let joint = path_product_matrix(tree, &SignAssignment::all_plus(tree), &ids)?;
        let lower_cov = joint.view((0, 0), (nl, nl)).into_owned();
        let upper_cov = joint.view((nl, nl), (nu, nu)).into_owned();
        let cross = joint.view((0, nl), (nl, nu)).into_owned();
        let gain = if nu == 0 {
            DMatrix::zeros(nl, 0)
        } else {
            let chol = upper_cov.clone().cholesky().ok_or_else(|| {
                Error::NotPositiveDefinite(format!("covariance of upper layer {upper:?}"))
            })?;
            // A' = Σ_lu Σ_uu^{-1}  <=>  Σ_uu A'^T = Σ_ul
            chol.solve(&cross.transpose()).transpose()
        };
        let mut noise_cov = &lower_cov - &gain * cross.transpose();
        // symmetrize away rounding
        noise_cov = (&noise_cov + noise_cov.transpose()) * 0.5;
        let noise_chol = cholesky_lower(&noise_cov).ok_or_else(|| {
            Error::NotPositiveDefinite(format!("conditional covariance of {lower:?} given {upper:?}"))
        })?;
        let signed = |list: &[NodeId]| {
            list.iter().enumerate().filter(|(_, &id)| tree.is_latent(id)).map(|(i, _)| i).collect()
        };
        Ok(LayerChannel {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
            lower_signed: signed(lower),
            upper_signed: signed(upper),
            gain,
            noise_cov,
            noise_chol,
            lower_cov,
            upper_cov,
        })
    }

    pub fn lower(&self) -> &[NodeId] {
        &self.lower
    }

    pub fn upper(&self) -> &[NodeId] {
        &self.upper
    }

    /// Positions in the lower vector that carry a sign bit, bit `j` ↔ entry `j`.
    pub fn lower_signed(&self) -> &[usize] {
        &self.lower_signed
    }

    pub fn upper_signed(&self) -> &[usize] {
        &self.upper_signed
    }

    /// All-plus gain `A'`.
    pub fn base_gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    /// Sign-invariant noise covariance `Σ_Z`.
    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn noise_chol(&self) -> &DMatrix<f64> {
        &self.noise_chol
    }

    /// All-plus covariance of the lower layer.
    pub fn lower_cov(&self) -> &DMatrix<f64> {
        &self.lower_cov
    }

    pub fn upper_cov(&self) -> &DMatrix<f64> {
        &self.upper_cov
    }

    /// ±1 multipliers of each lower (or upper) coordinate under a mask.
    pub fn lower_flips(&self, mask: u64) -> Vec<f64> {
        flips(self.lower.len(), &self.lower_signed, mask)
    }

    pub fn upper_flips(&self, mask: u64) -> Vec<f64> {
        flips(self.upper.len(), &self.upper_signed, mask)
    }

    /// `A_b = D_lo A' D_hi` for sign masks over the two layers' latents.
    pub fn signed_gain(&self, lower_mask: u64, upper_mask: u64) -> DMatrix<f64> {
        let dl = self.lower_flips(lower_mask);
        let du = self.upper_flips(upper_mask);
        DMatrix::from_fn(self.gain.nrows(), self.gain.ncols(), |i, j| self.gain[(i, j)] * dl[i] * du[j])
    }

    /// One channel use: `out = D_lo (A' D_hi y + L z)`.
    pub fn apply_into<R: Rng + ?Sized>(
        &self,
        lower_mask: u64,
        upper_mask: u64,
        y: &[f64],
        noise: NoiseMode,
        rng: &mut R,
        out: &mut [f64],
    ) {
        let nl = self.lower.len();
        let nu = self.upper.len();
        debug_assert_eq!(y.len(), nu);
        debug_assert_eq!(out.len(), nl);
        let mut yp = y.to_vec();
        for (j, &p) in self.upper_signed.iter().enumerate() {
            if upper_mask >> j & 1 == 1 {
                yp[p] = -yp[p];
            }
        }
        let mut z = vec![0.0; nl];
        if noise == NoiseMode::Sampled {
            fill_normal(rng, &mut z);
        }
        for i in 0..nl {
            let mut acc = 0.0;
            for (j, &v) in yp.iter().enumerate() {
                acc += self.gain[(i, j)] * v;
            }
            for (k, &zk) in z.iter().enumerate().take(i + 1) {
                acc += self.noise_chol[(i, k)] * zk;
            }
            out[i] = acc;
        }
        for (j, &p) in self.lower_signed.iter().enumerate() {
            if lower_mask >> j & 1 == 1 {
                out[p] = -out[p];
            }
        }
    }

    /// `½ ln(|Σ_lo| / |Σ_Z|)`, the mutual information between the layers given
    /// all signs (the same for every realization).
    pub fn information(&self) -> f64 {
        let ld_lo = crate::covariance::log_det_pd(&self.lower_cov).expect("layer covariance is positive definite");
        let ld_z = crate::covariance::log_det_pd(&self.noise_cov).expect("noise covariance is positive definite");
        0.5 * (ld_lo - ld_z)
    }
}

fn flips(n: usize, signed: &[usize], mask: u64) -> Vec<f64> {
    let mut d = vec![1.0; n];
    for (j, &p) in signed.iter().enumerate() {
        if mask >> j & 1 == 1 {
            d[p] = -1.0;
        }
    }
    d
}

/// Sparse connection matrix with entries `γ_ij b_i b_j` for tree edges between
/// `lower` and `upper`, zero elsewhere.
pub fn connection_matrix(
    tree: &GaussianTree,
    lower: &[NodeId],
    upper: &[NodeId],
    sign: &SignAssignment,
) -> DMatrix<f64> {
    DMatrix::from_fn(lower.len(), upper.len(), |i, j| match tree.edge_between(lower[i], upper[j]) {
        Some(e) => e.gamma * sign.value(lower[i]) * sign.value(upper[j]),
        None => 0.0,
    })
}

/// `1 − γ²` for each lower node with exactly one upper neighbor.
pub fn single_parent_noise(tree: &GaussianTree, lower: &[NodeId], upper: &[NodeId]) -> Result<Vec<f64>> {
    lower
        .iter()
        .map(|&l| {
            let parents: Vec<f64> =
                upper.iter().filter_map(|&u| tree.edge_between(l, u).map(|e| e.gamma)).collect();
            match parents.as_slice() {
                [g] => Ok(1.0 - g * g),
                _ => Err(Error::InvalidInput(format!("node {l} has {} parents", parents.len()))),
            }
        })
        .collect()
}

/// `A y + z` with `z ~ N(0, diag(sigma_z))`.
pub fn channel_apply<R: Rng + ?Sized>(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma_z: &DVector<f64>,
    noise: NoiseMode,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if a.ncols() != y.len() {
        return Err(Error::DimensionMismatch { expected: a.ncols(), got: y.len() });
    }
    if a.nrows() != sigma_z.len() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), got: sigma_z.len() });
    }
    if let Some(v) = sigma_z.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidInput(format!("noise variance {v} is negative")));
    }
    let mut out = a * y;
    if noise == NoiseMode::Sampled {
        for (o, &s) in out.iter_mut().zip(sigma_z.iter()) {
            let z: f64 = StandardNormal.sample(rng);
            *o += s.sqrt() * z;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::rng::substream;
    use crate::signs::enumerate_all;
    use crate::tree::assign_layers;

    #[test]
    fn single_edge_noiseless() {
        let a = DMatrix::from_element(1, 1, 0.6);
        let y = DVector::from_element(1, 1.0);
        let s = DVector::from_element(1, 0.64);
        let out = channel_apply(&a, &y, &s, NoiseMode::Zero, &mut substream(0, "t", &[])).unwrap();
        assert_eq!(out[0], 0.6);
        assert!(channel_apply(&a, &DVector::zeros(2), &s, NoiseMode::Zero, &mut substream(0, "t", &[])).is_err());
    }

    #[test]
    fn fig1_connection_matrix_has_one_nonzero_per_row() {
        let tree = catalog::fig1();
        let layers = assign_layers(&tree);
        let (x, y) = (layers.nodes_at(0), layers.nodes_at(1));
        let a = connection_matrix(&tree, &x, &y, &SignAssignment::all_plus(&tree));
        assert_eq!((a.nrows(), a.ncols()), (4, 2));
        for i in 0..4 {
            assert_eq!(a.row(i).iter().filter(|v| **v != 0.0).count(), 1);
        }
        let mut b = SignAssignment::all_plus(&tree);
        b.set(NodeId(11), crate::signs::Sign::Minus);
        let flipped = connection_matrix(&tree, &x, &y, &b);
        assert_eq!(flipped.column(0), a.column(0));
        assert_eq!(flipped.column(1), -a.column(1));
    }

    #[test]
    fn regression_channel_matches_sparse_edges_for_single_parents() {
        let tree = catalog::fig2b();
        let layers = assign_layers(&tree);
        for l in 0..2 {
            let (lo, hi) = (layers.nodes_at(l), layers.nodes_at(l + 1));
            let ch = LayerChannel::between(&tree, &lo, &hi).unwrap();
            let noise = single_parent_noise(&tree, &lo, &hi).unwrap();
            for b in enumerate_all(&tree).unwrap().iter().step_by(5) {
                let lo_lat: Vec<NodeId> = lo.iter().copied().filter(|&id| tree.is_latent(id)).collect();
                let hi_lat: Vec<NodeId> = hi.iter().copied().filter(|&id| tree.is_latent(id)).collect();
                let mask = |ids: &[NodeId]| {
                    ids.iter().enumerate().fold(0u64, |m, (j, &id)| m | (u64::from(b.value(id) < 0.0) << j))
                };
                let got = ch.signed_gain(mask(&lo_lat), mask(&hi_lat));
                let want = connection_matrix(&tree, &lo, &hi, b);
                assert!((got - want).abs().max() < 1e-12);
            }
            for i in 0..lo.len() {
                for j in 0..lo.len() {
                    let want = if i == j { noise[i] } else { 0.0 };
                    assert!((ch.noise_cov()[(i, j)] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_noise_apply_is_signed_gain_times_input() {
        let tree = catalog::fig2b();
        let layers = assign_layers(&tree);
        let ch = LayerChannel::between(&tree, &layers.nodes_at(1), &layers.nodes_at(2)).unwrap();
        let y = [0.3, -1.2];
        let mut out = [0.0; 4];
        let mut rng = substream(0, "t", &[]);
        ch.apply_into(0b0101, 0b10, &y, NoiseMode::Zero, &mut rng, &mut out);
        let want = ch.signed_gain(0b0101, 0b10) * DVector::from_row_slice(&y);
        for i in 0..4 {
            assert!((out[i] - want[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn star_channel_information_is_direct_mi() {
        let tree = catalog::star(0.6);
        let layers = assign_layers(&tree);
        let ch = LayerChannel::between(&tree, &layers.nodes_at(0), &layers.nodes_at(1)).unwrap();
        let sigma = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.36 });
        let want = 0.5 * (sigma.determinant() / 0.64f64.powi(3)).ln();
        assert!((ch.information() - want).abs() < 1e-12);
    }
}
