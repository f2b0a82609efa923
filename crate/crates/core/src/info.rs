//! Mutual-information quantities and per-layer rate bounds.
//!
//! Everything is in nats. Closed forms come from log-determinants of
//! covariances implied by the tree; quantities involving a mixture over sign
//! realizations are estimated by plug-in Monte Carlo with exact densities.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{fill_normal, LayerChannel};
use crate::covariance::{log_det_pd, marginal_covariance, CovarianceMatrix};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::signs::{SignAssignment, SignDistribution};
use crate::tree::{GaussianTree, LayerDecomposition, NodeId};

/// Smallest Monte Carlo budget an estimate will report.
pub const MIN_MC_SAMPLES: usize = 100;
/// Default Monte Carlo budget.
pub const DEFAULT_MC_SAMPLES: usize = 100_000;
/// Fixed number of substreams a Monte Carlo budget is split across.
const MC_CHUNKS: u64 = 64;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClosedForm,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MIEstimate {
    pub value: f64,
    pub stderr: f64,
    pub method: Method,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
}

impl MIEstimate {
    pub fn closed_form(value: f64) -> Self {
        MIEstimate { value, stderr: 0.0, method: Method::ClosedForm, samples: None, seed: None }
    }

    fn monte_carlo(values: &[f64], seed: u64) -> Self {
        let (mean, se) = mean_stderr(values);
        MIEstimate { value: mean, stderr: se, method: Method::MonteCarlo, samples: Some(values.len()), seed: Some(seed) }
    }
}

pub(crate) fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// `ρ_ij ρ_ik / ρ_jk` for positions `i, j, k` of `sigma_x`: the squared
/// correlation between observable `i` and its latent neighbor when `j` and
/// `k` hang off different branches of that neighbor.
pub fn edge_corr_squared(sigma_x: &CovarianceMatrix, i: usize, j: usize, k: usize) -> Result<f64> {
    let n = sigma_x.dim();
    if i >= n || j >= n || k >= n {
        return Err(Error::InvalidInput(format!("index out of range for a {n}x{n} covariance")));
    }
    if i == j || i == k || j == k {
        return Err(Error::InvalidInput("triple indices must be distinct".into()));
    }
    let m = sigma_x.matrix();
    let ids = sigma_x.ids();
    let den = m[(j, k)];
    if den == 0.0 {
        return Err(Error::ZeroCorrelation(ids[j], ids[k]));
    }
    let r = m[(i, j)] * m[(i, k)] / den;
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::NotTreeRepresentable(format!(
            "squared edge correlation {r} for {} via ({}, {}) is outside (0, 1)",
            ids[i], ids[j], ids[k]
        )));
    }
    Ok(r)
}

/// For a leaf observable, the branch of its latent parent that each other
/// observable sits in (keyed by the parent's neighbor on the way).
fn branches_at_parent(tree: &GaussianTree, leaf: NodeId) -> Result<BTreeMap<NodeId, NodeId>> {
    let nbrs = tree.neighbors(leaf);
    if nbrs.len() != 1 {
        return Err(Error::InvalidInput(format!("observable {leaf} is not a leaf")));
    }
    let parent = nbrs[0];
    let mut out = BTreeMap::new();
    for start in tree.neighbors(parent) {
        let mut stack = vec![(start, parent)];
        while let Some((cur, from)) = stack.pop() {
            out.insert(cur, start);
            for nb in tree.neighbors(cur) {
                if nb != from {
                    stack.push((nb, cur));
                }
            }
        }
    }
    Ok(out)
}

/// First valid `(j, k)` in index order for observable position `i`: `i`, `j`,
/// `k` lie in three different branches at the latent parent of `i`.
pub fn first_valid_triple(tree: &GaussianTree, sigma_x: &CovarianceMatrix, i: usize) -> Result<(usize, usize)> {
    valid_triples(tree, sigma_x, i)?.into_iter().next().ok_or(Error::NoValidTriple(sigma_x.ids()[i]))
}

/// Every valid `(j, k)`, `j < k`, for observable position `i`.
pub fn valid_triples(tree: &GaussianTree, sigma_x: &CovarianceMatrix, i: usize) -> Result<Vec<(usize, usize)>> {
    let ids = sigma_x.ids();
    let xi = ids[i];
    let branch = branches_at_parent(tree, xi)?;
    let b = |p: usize| branch.get(&ids[p]).copied().ok_or(Error::UnknownNode(ids[p]));
    let bi = b(i)?;
    let mut out = Vec::new();
    for j in 0..ids.len() {
        if j == i || b(j)? == bi {
            continue;
        }
        for k in j + 1..ids.len() {
            if k == i || b(k)? == bi || b(k)? == b(j)? {
                continue;
            }
            out.push((j, k));
        }
    }
    Ok(out)
}

/// `I(X; Y)` from `Σ_X` alone for a tree whose observables are all leaves:
/// `½ ln(|Σ_X| / ∏ (1 − ρ²_{x_i y}))`, each squared edge correlation taken
/// from the first valid triple.
pub fn mutual_info_leaf(sigma_x: &CovarianceMatrix, tree: &GaussianTree) -> Result<MIEstimate> {
    let mut log_prod = 0.0;
    for i in 0..sigma_x.dim() {
        let (j, k) = first_valid_triple(tree, sigma_x, i)?;
        let r2 = edge_corr_squared(sigma_x, i, j, k)?;
        log_prod += (1.0 - r2).ln();
    }
    Ok(MIEstimate::closed_form(0.5 * (sigma_x.log_det() - log_prod)))
}

/// Gaussian `I(A; B) = ½ ln(|Σ_A| |Σ_B| / |Σ_AB|)` under a sign realization.
pub fn gaussian_mi(tree: &GaussianTree, sign: &SignAssignment, a: &[NodeId], b: &[NodeId]) -> Result<MIEstimate> {
    let joint: Vec<NodeId> = a.iter().chain(b).copied().collect();
    let s_ab = marginal_covariance(tree, sign, &joint)?;
    let s_a = s_ab.submatrix(a)?;
    let s_b = s_ab.submatrix(b)?;
    let v = 0.5 * (s_a.log_det() + s_b.log_det() - s_ab.log_det());
    Ok(MIEstimate::closed_form(v.max(0.0)))
}

/// `I(X; Y)` between all observables and all latents under `sign`.
pub fn mutual_info_direct(tree: &GaussianTree, sign: &SignAssignment) -> Result<MIEstimate> {
    gaussian_mi(tree, sign, &tree.observables(), &tree.latents())
}

/// Monte Carlo estimator of `I(T; C | signs of T)` where `C` is a Gaussian
/// mixture over its own sign realization and `T | C, signs` is Gaussian.
/// Works in all-plus coordinates; see [`LayerChannel`].
struct MixtureEstimator {
    nt: usize,
    nc: usize,
    cond_signed: Vec<usize>,
    gain: DMatrix<f64>,
    cond_chol: DMatrix<f64>,
    cond_logdet: f64,
    resid_chol: DMatrix<f64>,
    resid_logdet: f64,
    target_chol: DMatrix<f64>,
    target_logdet: f64,
    cond_latents: Vec<NodeId>,
}

fn lower_factor(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let l = crate::channel::cholesky_lower(m).ok_or_else(|| Error::NotPositiveDefinite(what.into()))?;
    let ld = 2.0 * (0..m.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
    Ok((l, ld))
}

/// `|L^{-1} v|²` by forward substitution.
fn mahalanobis(l: &DMatrix<f64>, v: &[f64], scratch: &mut [f64]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut s = v[i];
        for k in 0..i {
            s -= l[(i, k)] * scratch[k];
        }
        let w = s / l[(i, i)];
        scratch[i] = w;
        acc += w * w;
    }
    acc
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl MixtureEstimator {
    fn new(tree: &GaussianTree, target: &[NodeId], cond: &[NodeId]) -> Result<Self> {
        let ch = LayerChannel::between(tree, target, cond)?;
        let (cond_chol, cond_logdet) = lower_factor(ch.upper_cov(), "conditioning covariance")?;
        let (resid_chol, resid_logdet) = lower_factor(ch.noise_cov(), "conditional covariance")?;
        let (target_chol, target_logdet) = lower_factor(ch.lower_cov(), "target covariance")?;
        let cond_latents = ch.upper_signed().iter().map(|&p| cond[p]).collect();
        Ok(MixtureEstimator {
            nt: target.len(),
            nc: cond.len(),
            cond_signed: ch.upper_signed().to_vec(),
            gain: ch.base_gain().clone(),
            cond_chol,
            cond_logdet,
            resid_chol,
            resid_logdet,
            target_chol,
            target_logdet,
            cond_latents,
        })
    }

    fn log_density(l: &DMatrix<f64>, logdet: f64, v: &[f64], scratch: &mut [f64]) -> f64 {
        -0.5 * (v.len() as f64 * LN_2PI + logdet + mahalanobis(l, v, scratch))
    }

    /// Per-sample values of `ln p(t | c) − ln p(t)`, in sample order.
    fn samples(&self, pi: &SignDistribution, n: usize, seed: u64, tag: &str) -> Vec<f64> {
        let log_w = pi.mask_log_weights(&self.cond_latents);
        let bounds: Vec<(usize, usize)> = (0..MC_CHUNKS)
            .map(|c| ((c as usize * n) / MC_CHUNKS as usize, ((c as usize + 1) * n) / MC_CHUNKS as usize))
            .collect();
        let chunks: Vec<Vec<f64>> = bounds
            .par_iter()
            .enumerate()
            .map(|(c, &(lo, hi))| {
                let mut rng = substream(seed, tag, &[c as u64]);
                let mut out = Vec::with_capacity(hi - lo);
                let mut eps_c = vec![0.0; self.nc];
                let mut eps_t = vec![0.0; self.nt];
                let mut c_plus = vec![0.0; self.nc];
                let mut t_plus = vec![0.0; self.nt];
                let mut cm = vec![0.0; self.nc];
                let mut resid = vec![0.0; self.nt];
                let mut scratch = vec![0.0; self.nt.max(self.nc)];
                let mut joint_terms = vec![0.0; log_w.len()];
                let mut cond_terms = vec![0.0; log_w.len()];
                for _ in lo..hi {
                    let b = pi.sample_mask(&self.cond_latents, &mut rng);
                    fill_normal(&mut rng, &mut eps_c);
                    fill_normal(&mut rng, &mut eps_t);
                    for i in 0..self.nc {
                        c_plus[i] = (0..=i).map(|k| self.cond_chol[(i, k)] * eps_c[k]).sum();
                    }
                    for i in 0..self.nt {
                        let mean: f64 = (0..self.nc).map(|j| self.gain[(i, j)] * c_plus[j]).sum();
                        let noise: f64 = (0..=i).map(|k| self.resid_chol[(i, k)] * eps_t[k]).sum();
                        t_plus[i] = mean + noise;
                    }
                    // observed c = D_b c'; hypothesis m sees D_m c = D_{m^b} c'
                    for (m, lw) in log_w.iter().enumerate() {
                        if *lw == f64::NEG_INFINITY {
                            joint_terms[m] = f64::NEG_INFINITY;
                            cond_terms[m] = f64::NEG_INFINITY;
                            continue;
                        }
                        let flip = m as u64 ^ b;
                        cm.copy_from_slice(&c_plus);
                        for (j, &p) in self.cond_signed.iter().enumerate() {
                            if flip >> j & 1 == 1 {
                                cm[p] = -cm[p];
                            }
                        }
                        let lc = Self::log_density(&self.cond_chol, self.cond_logdet, &cm, &mut scratch);
                        for i in 0..self.nt {
                            resid[i] = t_plus[i] - (0..self.nc).map(|j| self.gain[(i, j)] * cm[j]).sum::<f64>();
                        }
                        let lr = Self::log_density(&self.resid_chol, self.resid_logdet, &resid, &mut scratch);
                        cond_terms[m] = lw + lc;
                        joint_terms[m] = lw + lc + lr;
                    }
                    let log_cond = log_sum_exp(&joint_terms) - log_sum_exp(&cond_terms);
                    let log_marg = Self::log_density(&self.target_chol, self.target_logdet, &t_plus, &mut scratch);
                    out.push(log_cond - log_marg);
                }
                out
            })
            .collect();
        chunks.concat()
    }
}

fn check_samples(n: usize) -> Result<()> {
    if n < MIN_MC_SAMPLES {
        return Err(Error::TooFewSamples { got: n, min: MIN_MC_SAMPLES });
    }
    Ok(())
}

/// `I(X; Y)` when the latent signs are random with distribution `pi`, so `Y`
/// is a Gaussian mixture. Plug-in Monte Carlo over `(x, y, b)` draws.
pub fn mixture_mi(tree: &GaussianTree, pi: &SignDistribution, mc_samples: usize, seed: u64) -> Result<MIEstimate> {
    check_samples(mc_samples)?;
    let est = MixtureEstimator::new(tree, &tree.observables(), &tree.latents())?;
    Ok(MIEstimate::monte_carlo(&est.samples(pi, mc_samples, seed, "mixture-mi"), seed))
}

/// Lower bounds on the rates of layer `layer + 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateBounds {
    /// Lower layer `l`; the bounds constrain the codebooks of layer `l + 1`.
    pub layer: usize,
    /// Bound on `R_B + R_Y`: `I(Y(l+1), B(l+1); Y(l) | B(l))`, closed form.
    pub sum_bound: f64,
    /// Bound on `R_Y`: `I(Y(l+1); Y(l) | B(l))`, Monte Carlo.
    pub y_bound: f64,
    pub y_bound_stderr: f64,
    pub samples: usize,
    pub seed: u64,
}

/// JSON record of one layer's bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRecord {
    pub layer: usize,
    pub sum_bound_nats: f64,
    pub y_bound_nats: f64,
    pub stderr: f64,
    pub method: Method,
    pub seed: u64,
    pub samples: usize,
}

impl From<&RateBounds> for RateRecord {
    fn from(b: &RateBounds) -> Self {
        RateRecord {
            layer: b.layer,
            sum_bound_nats: b.sum_bound,
            y_bound_nats: b.y_bound,
            stderr: b.y_bound_stderr,
            method: Method::MonteCarlo,
            seed: b.seed,
            samples: b.samples,
        }
    }
}

/// Rate bounds between layer `l` and layer `l + 1`.
pub fn layer_rate_bounds(
    tree: &GaussianTree,
    layers: &LayerDecomposition,
    l: usize,
    pi: &SignDistribution,
    mc_samples: usize,
    seed: u64,
) -> Result<RateBounds> {
    if l >= layers.top() {
        return Err(Error::InvalidInput(format!("layer {l} has no layer above it (top is {})", layers.top())));
    }
    check_samples(mc_samples)?;
    let lower = layers.nodes_at(l);
    let upper = layers.nodes_at(l + 1);
    let sum_bound = LayerChannel::between(tree, &lower, &upper)?.information();
    let est = MixtureEstimator::new(tree, &lower, &upper)?;
    let values = est.samples(pi, mc_samples, seed, &format!("rate-bound-{l}"));
    let (y_bound, se) = mean_stderr(&values);
    Ok(RateBounds { layer: l, sum_bound, y_bound, y_bound_stderr: se, samples: mc_samples, seed })
}

/// Bounds for every layer `0..L`.
pub fn all_rate_bounds(
    tree: &GaussianTree,
    layers: &LayerDecomposition,
    pi: &SignDistribution,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<RateBounds>> {
    (0..layers.top()).map(|l| layer_rate_bounds(tree, layers, l, pi, mc_samples, seed)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub pi: Vec<f64>,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymmetryPair {
    pub pi: Vec<f64>,
    pub mirror: Vec<f64>,
    /// Estimate at `pi` minus estimate at `1 − pi`.
    pub difference: f64,
    /// Standard error of the paired difference.
    pub stderr: f64,
    pub within_two_stderr: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignOptimalityReport {
    pub latents: Vec<NodeId>,
    pub resolution: usize,
    pub samples: usize,
    pub seed: u64,
    pub grid: Vec<GridPoint>,
    pub argmin: GridPoint,
    pub uniform: GridPoint,
    /// Uniform estimate minus grid minimum.
    pub gap: f64,
    /// Standard error of the paired gap.
    pub gap_stderr: f64,
    pub uniform_within_two_stderr: bool,
    pub symmetry: Vec<SymmetryPair>,
}

/// Largest grid the optimality check evaluates.
pub const MAX_GRID_POINTS: usize = 4096;

fn paired(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    mean_stderr(&d)
}

/// Evaluate [`mixture_mi`] on the grid `{1/(r+1), …, r/(r+1)}^k` and compare
/// the uniform point with the grid minimum. All points share one random
/// stream, so differences between points are paired.
pub fn uniform_sign_optimality_check(
    tree: &GaussianTree,
    resolution: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<SignOptimalityReport> {
    check_samples(mc_samples)?;
    let latents = tree.latents();
    let k = latents.len();
    if k == 0 || k > 3 {
        return Err(Error::InvalidInput(format!("grid search needs 1 to 3 latents, tree has {k}")));
    }
    if resolution == 0 {
        return Err(Error::InvalidInput("grid resolution must be positive".into()));
    }
    let points = resolution.checked_pow(k as u32).filter(|&p| p <= MAX_GRID_POINTS).ok_or_else(|| {
        Error::ResourceCap(format!("grid of {resolution}^{k} points exceeds {MAX_GRID_POINTS}"))
    })?;
    let est = MixtureEstimator::new(tree, &tree.observables(), &latents)?;
    let axis: Vec<f64> = (1..=resolution).map(|i| i as f64 / (resolution + 1) as f64).collect();
    let coords = |mut idx: usize| -> Vec<f64> {
        let mut v = vec![0.0; k];
        for slot in v.iter_mut().rev() {
            *slot = axis[idx % resolution];
            idx /= resolution;
        }
        v
    };
    let eval = |pi: &[f64]| -> Result<Vec<f64>> {
        let dist = SignDistribution::new(tree, latents.iter().copied().zip(pi.iter().copied()).collect())?;
        Ok(est.samples(&dist, mc_samples, seed, "mixture-mi"))
    };

    // point i mirrors point points-1-i; evaluate pairs together
    let mut grid: Vec<Option<GridPoint>> = vec![None; points];
    let mut symmetry = Vec::new();
    for i in 0..points.div_ceil(2) {
        let j = points - 1 - i;
        let (pi_i, pi_j) = (coords(i), coords(j));
        let vi = eval(&pi_i)?;
        let (m, s) = mean_stderr(&vi);
        grid[i] = Some(GridPoint { pi: pi_i.clone(), value: m, stderr: s });
        if j != i {
            let vj = eval(&pi_j)?;
            let (mj, sj) = mean_stderr(&vj);
            grid[j] = Some(GridPoint { pi: pi_j.clone(), value: mj, stderr: sj });
            let (d, se) = paired(&vi, &vj);
            symmetry.push(SymmetryPair {
                pi: pi_i,
                mirror: pi_j,
                difference: d,
                stderr: se,
                within_two_stderr: d.abs() <= 2.0 * se,
            });
        }
    }
    let grid: Vec<GridPoint> = grid.into_iter().map(|g| g.expect("every grid point evaluated")).collect();
    let argmin = grid
        .iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .cloned()
        .expect("grid is nonempty");
    let half = vec![0.5; k];
    let v_unif = eval(&half)?;
    let (u_mean, u_se) = mean_stderr(&v_unif);
    let uniform = GridPoint { pi: half, value: u_mean, stderr: u_se };
    let (gap, gap_stderr) = paired(&v_unif, &eval(&argmin.pi)?);
    Ok(SignOptimalityReport {
        latents,
        resolution,
        samples: mc_samples,
        seed,
        grid,
        uniform_within_two_stderr: gap <= 2.0 * gap_stderr,
        argmin,
        uniform,
        gap,
        gap_stderr,
        symmetry,
    })
}

/// Exact `ln |Σ|` helper re-exported for callers holding a raw matrix.
pub fn log_det(m: &DMatrix<f64>) -> Result<f64> {
    log_det_pd(m).ok_or_else(|| Error::NotPositiveDefinite("log-determinant".into()))
}
