//! Covariances implied by a tree, and the triplet conditions that a
//! covariance must meet to come from a latent Gaussian tree.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::signs::SignAssignment;
use crate::tree::{GaussianTree, NodeId};

/// Symmetric positive-definite correlation matrix indexed by node ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    ids: Vec<NodeId>,
    matrix: DMatrix<f64>,
}

const DIAG_TOL: f64 = 1e-12;

impl CovarianceMatrix {
    pub fn new(ids: Vec<NodeId>, matrix: DMatrix<f64>) -> Result<Self> {
        let n = ids.len();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: matrix.nrows() });
        }
        let unique: BTreeSet<_> = ids.iter().collect();
        if unique.len() != n {
            return Err(Error::InvalidInput("repeated node id in covariance index".into()));
        }
        for i in 0..n {
            if (matrix[(i, i)] - 1.0).abs() > DIAG_TOL {
                return Err(Error::InvalidInput(format!(
                    "diagonal entry for {} is {}, expected 1",
                    ids[i], matrix[(i, i)]
                )));
            }
            for j in 0..i {
                if matrix[(i, j)] != matrix[(j, i)] {
                    return Err(Error::InvalidInput(format!(
                        "matrix is not symmetric at ({}, {})",
                        ids[i], ids[j]
                    )));
                }
            }
        }
        if matrix.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("Cholesky factorization failed".into()));
        }
        Ok(CovarianceMatrix { ids, matrix })
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.ids.len()
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// Entry by node ids.
    pub fn get(&self, a: NodeId, b: NodeId) -> Option<f64> {
        Some(self.matrix[(self.index_of(a)?, self.index_of(b)?)])
    }

    pub fn submatrix(&self, ids: &[NodeId]) -> Result<CovarianceMatrix> {
        let pos: Vec<usize> =
            ids.iter().map(|&id| self.index_of(id).ok_or(Error::UnknownNode(id))).collect::<Result<_>>()?;
        let m = DMatrix::from_fn(ids.len(), ids.len(), |i, j| self.matrix[(pos[i], pos[j])]);
        Ok(CovarianceMatrix { ids: ids.to_vec(), matrix: m })
    }

    pub fn log_det(&self) -> f64 {
        log_det_pd(&self.matrix).expect("validated positive definite")
    }

    /// CSV with a header row of node ids, then the matrix row by row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.ids.iter().map(|id| id.to_string()))?;
        for i in 0..self.dim() {
            out.write_record((0..self.dim()).map(|j| format!("{:?}", self.matrix[(i, j)])))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let (ids, m) = read_matrix_csv(r)?;
        Self::new(ids, m)
    }
}

/// Read an id-headed square CSV matrix without checking its properties.
pub fn read_matrix_csv<R: Read>(r: R) -> Result<(Vec<NodeId>, DMatrix<f64>)> {
    {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let ids: Vec<NodeId> = rdr
            .headers()?
            .iter()
            .map(|h| h.trim().parse::<u32>().map(NodeId))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Malformed(format!("covariance header: {e}")))?;
        let n = ids.len();
        let mut data = Vec::with_capacity(n * n);
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: rec.len() });
            }
            for field in rec.iter() {
                data.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Malformed(format!("covariance entry: {e}")))?,
                );
            }
        }
        if data.len() != n * n {
            return Err(Error::DimensionMismatch { expected: n, got: data.len() / n.max(1) });
        }
        Ok((ids, DMatrix::from_row_slice(n, n, &data)))
    }
}

/// `ln |M|` through a Cholesky factor, `None` if not positive definite.
pub fn log_det_pd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    let l = chol.l_dirty();
    Some(2.0 * (0..m.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

/// Correlations between every pair in `ids`, without validation. Entry
/// `(i, j)` with `i < j` is the product of signed edge weights walked from
/// `ids[i]` toward `ids[j]`; the matrix is exactly symmetric.
pub fn path_product_matrix(
    tree: &GaussianTree,
    sign: &SignAssignment,
    ids: &[NodeId],
) -> Result<DMatrix<f64>> {
    let pos: Vec<usize> = ids.iter().map(|&id| tree.pos(id)).collect::<Result<_>>()?;
    let n = ids.len();
    let nodes = tree.nodes();
    let edges = tree.edges();
    let mut out = DMatrix::identity(n, n);
    let mut value = vec![0.0; tree.len()];
    for i in 0..n {
        if i + 1 == n {
            break;
        }
        for (p, parent) in tree.bfs_tree(pos[i]) {
            value[p] = match parent {
                None => 1.0,
                Some((pp, e)) => {
                    let edge = &edges[e];
                    let w = edge.gamma * sign.value(nodes[pp].id) * sign.value(nodes[p].id);
                    value[pp] * w
                }
            };
        }
        for j in i + 1..n {
            out[(i, j)] = value[pos[j]];
            out[(j, i)] = value[pos[j]];
        }
    }
    Ok(out)
}

/// Correlation matrix over `subset` under sign realization `sign`.
pub fn marginal_covariance(
    tree: &GaussianTree,
    sign: &SignAssignment,
    subset: &[NodeId],
) -> Result<CovarianceMatrix> {
    let m = path_product_matrix(tree, sign, subset)?;
    CovarianceMatrix::new(subset.to_vec(), m)
}

/// Observable covariance `Σ_X`.
pub fn observable_covariance(tree: &GaussianTree, sign: &SignAssignment) -> Result<CovarianceMatrix> {
    marginal_covariance(tree, sign, &tree.observables())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletCondition {
    /// `|ρ_ij| ≥ |ρ_ik ρ_jk|` fails for the pair `(i, j)`.
    Magnitude,
    /// `ρ_ij ρ_ik ρ_jk > 0` fails.
    Sign,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TripletViolation {
    pub triplet: [NodeId; 3],
    pub condition: TripletCondition,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub valid: bool,
    pub triplets_checked: usize,
    pub violations: Vec<TripletViolation>,
}

/// Slack on the magnitude comparison for rounding in path products.
const TRIPLET_SLACK: f64 = 1e-12;

/// Check both triplet conditions on every triplet of `sigma`.
pub fn validate_correlation_space(sigma: &CovarianceMatrix) -> CorrelationReport {
    validate_correlation_matrix(sigma.ids(), sigma.matrix())
}

/// Triplet check on a raw symmetric matrix that need not be positive
/// definite (for screening arbitrary user input).
pub fn validate_correlation_matrix(ids: &[NodeId], m: &DMatrix<f64>) -> CorrelationReport {
    let n = ids.len();
    let mut violations = Vec::new();
    let mut checked = 0;
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                checked += 1;
                let (rij, rik, rjk) = (m[(i, j)], m[(i, k)], m[(j, k)]);
                // each pair against the product through the third node
                for (a, b, c, r_ab, r_ac, r_bc) in
                    [(i, j, k, rij, rik, rjk), (i, k, j, rik, rij, rjk), (j, k, i, rjk, rij, rik)]
                {
                    if r_ab.abs() + TRIPLET_SLACK < (r_ac * r_bc).abs() {
                        violations.push(TripletViolation {
                            triplet: [ids[a], ids[b], ids[c]],
                            condition: TripletCondition::Magnitude,
                            detail: format!("|{r_ab}| < |{r_ac} * {r_bc}|"),
                        });
                    }
                }
                if !(rij * rik * rjk > 0.0) {
                    violations.push(TripletViolation {
                        triplet: [ids[i], ids[j], ids[k]],
                        condition: TripletCondition::Sign,
                        detail: format!("{rij} * {rik} * {rjk} is not positive"),
                    });
                }
            }
        }
    }
    CorrelationReport { valid: violations.is_empty(), triplets_checked: checked, violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::signs::enumerate_all;

    fn corr3(r12: f64, r13: f64, r23: f64) -> CorrelationReport {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, r12, r13, r12, 1.0, r23, r13, r23, 1.0]);
        validate_correlation_matrix(&[NodeId(0), NodeId(1), NodeId(2)], &m)
    }

    #[test]
    fn star_off_diagonals_are_gamma_squared() {
        let tree = catalog::star(0.6);
        let sigma = observable_covariance(&tree, &SignAssignment::all_plus(&tree)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.6 * 0.6 };
                assert!((sigma.matrix()[(i, j)] - expected).abs() < 1e-15);
            }
        }
        let flipped = observable_covariance(&tree, &SignAssignment::all_plus(&tree).negated()).unwrap();
        assert_eq!(sigma, flipped);
    }

    #[test]
    fn single_node_subset() {
        let tree = catalog::star(0.6);
        let s = marginal_covariance(&tree, &SignAssignment::all_plus(&tree), &[NodeId(3)]).unwrap();
        assert_eq!(s.matrix(), &DMatrix::identity(1, 1));
    }

    #[test]
    fn latent_pair_carries_sign_product() {
        // Fig 1: y1 - y2 correlation is gamma12 b1 b2
        let tree = catalog::fig2a(0.6, 0.5);
        let [y1, y2] = [NodeId(10), NodeId(11)];
        for b in enumerate_all(&tree).unwrap() {
            let s = marginal_covariance(&tree, &b, &[y1, y2]).unwrap();
            assert_eq!(s.get(y1, y2).unwrap(), 0.5 * b.value(y1) * b.value(y2));
        }
    }

    #[test]
    fn global_flip_preserves_latent_and_observable_blocks() {
        let tree = catalog::fig2b();
        let (xs, ys) = (tree.observables(), tree.latents());
        for b in enumerate_all(&tree).unwrap().iter().step_by(7) {
            let nb = b.negated();
            for set in [&xs, &ys] {
                assert_eq!(
                    marginal_covariance(&tree, b, set).unwrap(),
                    marginal_covariance(&tree, &nb, set).unwrap()
                );
            }
            // observables carry no sign, so cross terms change sign
            let joint: Vec<NodeId> = xs.iter().chain(&ys).copied().collect();
            let a = marginal_covariance(&tree, b, &joint).unwrap();
            let c = marginal_covariance(&tree, &nb, &joint).unwrap();
            assert_eq!(a.get(xs[0], ys[0]).unwrap(), -c.get(xs[0], ys[0]).unwrap());
        }
    }

    #[test]
    fn triplet_checks() {
        let tree = catalog::star(0.6);
        let sigma = observable_covariance(&tree, &SignAssignment::all_plus(&tree)).unwrap();
        let report = validate_correlation_space(&sigma);
        assert!(report.valid);
        assert_eq!(report.triplets_checked, 1);

        let bad = corr3(0.9, 0.1, 0.9);
        assert!(!bad.valid);
        assert!(bad
            .violations
            .iter()
            .any(|v| v.condition == TripletCondition::Magnitude && v.triplet[..2] == [NodeId(0), NodeId(2)]));

        let neg = corr3(0.3, 0.3, -0.3);
        assert!(!neg.valid);
        assert!(neg.violations.iter().any(|v| v.condition == TripletCondition::Sign));
    }

    #[test]
    fn csv_round_trip() {
        let tree = catalog::fig2b();
        let sigma = observable_covariance(&tree, &SignAssignment::all_plus(&tree)).unwrap();
        let mut buf = Vec::new();
        sigma.write_csv(&mut buf).unwrap();
        let back = CovarianceMatrix::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, sigma);
    }

    #[test]
    fn rejects_non_pd_and_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(CovarianceMatrix::new(vec![NodeId(0), NodeId(1)], m).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 1.0]);
        assert!(CovarianceMatrix::new(vec![NodeId(0), NodeId(1)], m).is_err());
    }
}
