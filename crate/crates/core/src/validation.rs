//! Empirical checks of synthesized output: covariance error, binned total
//! variation against the exact Gaussian marginals, a Kolmogorov-Smirnov
//! test for channel residuals, the sign-invariance sweep and the
//! rate/block-length convergence sweep.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::channel::{cholesky_lower, fill_normal};
use crate::codebook::{RateTuple, VirtualCodebooks};
use crate::covariance::observable_covariance;
use crate::error::{Error, Result};
use crate::info::{all_rate_bounds, log_det, mutual_info_direct, RateRecord};
use crate::plan::SynthesisPlan;
use crate::signs::{enumerate_all, SignAssignment, SignDistribution};
use crate::synthesis::synthesize_batch;
use crate::transforms::normalize_for_synthesis;
use crate::tree::{assign_layers, GaussianTree, NodeId};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Rows drawn from `N(0, sigma)`.
pub fn sample_gaussian<R: Rng + ?Sized>(sigma: &DMatrix<f64>, rows: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let l = cholesky_lower(sigma).ok_or_else(|| Error::NotPositiveDefinite("sampling covariance".into()))?;
    let n = sigma.nrows();
    let mut eps = DMatrix::zeros(n, rows);
    fill_normal(rng, eps.as_mut_slice());
    Ok((l * eps).transpose())
}

/// Sample covariance with its errors against a target.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCovariance {
    pub matrix: DMatrix<f64>,
    pub samples: usize,
}

impl EmpiricalCovariance {
    pub fn frobenius_error(&self, target: &DMatrix<f64>) -> f64 {
        (&self.matrix - target).norm()
    }

    pub fn max_abs_error(&self, target: &DMatrix<f64>) -> f64 {
        (&self.matrix - target).amax()
    }
}

/// Unbiased sample covariance of the rows of `samples`.
pub fn empirical_covariance(samples: &DMatrix<f64>) -> Result<EmpiricalCovariance> {
    let rows = samples.nrows();
    if rows < 2 {
        return Err(Error::TooFewSamples { got: rows, min: 2 });
    }
    let mean = samples.row_mean();
    let mut centered = samples.clone();
    for mut r in centered.row_iter_mut() {
        r -= &mean;
    }
    let matrix = centered.tr_mul(&centered) / (rows - 1) as f64;
    Ok(EmpiricalCovariance { matrix, samples: rows })
}

/// Covariance of each block position across draws, averaged over positions.
///
/// `samples` holds `draws` blocks of `block_len` rows each, ordered by
/// `(draw, t)`. Each position is centered on its own mean across draws, so
/// the estimate measures the law a fixed codebook induces on `x_t`; pooling
/// over positions alone would hide a codebook that is too small.
pub fn position_covariance(samples: &DMatrix<f64>, block_len: usize) -> Result<EmpiricalCovariance> {
    if block_len == 0 || !samples.nrows().is_multiple_of(block_len) {
        return Err(Error::InvalidInput(format!(
            "{} rows do not split into blocks of {block_len}",
            samples.nrows()
        )));
    }
    let draws = samples.nrows() / block_len;
    if draws < 2 {
        return Err(Error::TooFewSamples { got: draws, min: 2 });
    }
    let n = samples.ncols();
    let mut acc = DMatrix::zeros(n, n);
    let mut block = DMatrix::zeros(draws, n);
    for t in 0..block_len {
        for d in 0..draws {
            block.row_mut(d).copy_from(&samples.row(d * block_len + t));
        }
        let mean = block.row_mean();
        for mut r in block.row_iter_mut() {
            r -= &mean;
        }
        acc += block.tr_mul(&block);
    }
    let matrix = acc / (block_len * (draws - 1)) as f64;
    Ok(EmpiricalCovariance { matrix, samples: samples.nrows() })
}

/// Equal-width bins over `[lo, hi]` in every histogram dimension; mass
/// outside the range forms one extra cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramSpec {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec { bins: 50, lo: -4.5, hi: 4.5 }
    }
}

impl HistogramSpec {
    fn edge(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / self.bins as f64
    }

    fn cell(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x < self.hi) {
            return None;
        }
        let c = ((x - self.lo) / (self.hi - self.lo) * self.bins as f64) as usize;
        Some(c.min(self.bins - 1))
    }
}

// 8-point Gauss-Legendre rule on [-1, 1]
const GL_NODES: [f64; 4] = [0.183_434_642_495_649_8, 0.525_532_409_916_329, 0.796_666_477_413_626_7, 0.960_289_856_497_536_3];
const GL_WEIGHTS: [f64; 4] = [0.362_683_783_378_362, 0.313_706_645_877_887_3, 0.222_381_034_453_374_5, 0.101_228_536_290_376_3];

/// `P(a1 < X < b1, a2 < Y < b2)` for standard normals with correlation `rho`.
fn bivariate_cell(a1: f64, b1: f64, a2: f64, b2: f64, rho: f64) -> f64 {
    let s = (1.0 - rho * rho).sqrt();
    let half = 0.5 * (b1 - a1);
    let mid = 0.5 * (b1 + a1);
    let f = |x: f64| {
        let dens = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        dens * (normal_cdf((b2 - rho * x) / s) - normal_cdf((a2 - rho * x) / s))
    };
    let mut sum = 0.0;
    for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
        sum += w * (f(mid + half * x) + f(mid - half * x));
    }
    sum * half
}

/// Binned total variation `½ Σ |q̂ − p|` between the empirical distribution
/// of columns `dims` (one or two) of `samples` and the zero-mean Gaussian
/// marginal of `target` on those columns.
pub fn histogram_tv(samples: &DMatrix<f64>, dims: &[usize], target: &DMatrix<f64>, spec: HistogramSpec) -> Result<f64> {
    let rows = samples.nrows();
    if rows == 0 {
        return Err(Error::TooFewSamples { got: 0, min: 1 });
    }
    if spec.bins < 10 {
        return Err(Error::InvalidInput(format!("need at least 10 bins, got {}", spec.bins)));
    }
    if !matches!(dims.len(), 1 | 2) || dims.iter().any(|&d| d >= samples.ncols() || d >= target.nrows()) {
        return Err(Error::InvalidInput(format!("bad histogram dimensions {dims:?}")));
    }
    let sd: Vec<f64> = dims.iter().map(|&d| target[(d, d)].sqrt()).collect();
    if sd.iter().any(|&s| spec.lo > -4.0 * s || spec.hi < 4.0 * s) {
        return Err(Error::InvalidInput("histogram range must cover 4 standard deviations".into()));
    }
    let b = spec.bins;
    let cells = if dims.len() == 1 { b } else { b * b };
    let mut counts = vec![0usize; cells];
    let mut outside = 0usize;
    for r in 0..rows {
        let idx = dims.iter().map(|&d| spec.cell(samples[(r, d)])).collect::<Option<Vec<_>>>();
        match idx {
            Some(ix) => counts[ix.iter().fold(0, |acc, &i| acc * b + i)] += 1,
            None => outside += 1,
        }
    }
    let mut mass = vec![0.0; cells];
    if dims.len() == 1 {
        for (i, m) in mass.iter_mut().enumerate() {
            *m = normal_cdf(spec.edge(i + 1) / sd[0]) - normal_cdf(spec.edge(i) / sd[0]);
        }
    } else {
        let rho = target[(dims[0], dims[1])] / (sd[0] * sd[1]);
        for i in 0..b {
            for j in 0..b {
                mass[i * b + j] = bivariate_cell(
                    spec.edge(i) / sd[0],
                    spec.edge(i + 1) / sd[0],
                    spec.edge(j) / sd[1],
                    spec.edge(j + 1) / sd[1],
                    rho,
                );
            }
        }
    }
    let n = rows as f64;
    let inside: f64 = mass.iter().sum();
    let mut tv = (outside as f64 / n - (1.0 - inside).max(0.0)).abs();
    for (c, p) in counts.iter().zip(&mass) {
        tv += (*c as f64 / n - p).abs();
    }
    Ok((0.5 * tv).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub samples: usize,
}

/// One-sample Kolmogorov-Smirnov test against `N(0, 1)`, asymptotic
/// p-value with the usual small-sample correction.
pub fn ks_standard_normal(values: &[f64]) -> Result<KsResult> {
    if values.is_empty() {
        return Err(Error::TooFewSamples { got: 0, min: 1 });
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    Ok(KsResult { statistic: d, p_value: kolmogorov_q(lambda), samples: v.len() })
}

/// `Q(λ) = 2 Σ (−1)^{k−1} exp(−2 k² λ²)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignInvarianceReport {
    pub latents: usize,
    pub assignments: usize,
    pub max_covariance_deviation: f64,
    pub max_mi_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Tolerance of the sign-invariance comparisons.
pub const SIGN_INVARIANCE_TOLERANCE: f64 = 1e-12;

/// Evaluate `model` (observable covariance and `I(X; Y)`) at every sign
/// assignment of `tree`'s latents and compare against all-plus.
pub fn sign_invariance_with<F>(tree: &GaussianTree, model: F) -> Result<SignInvarianceReport>
where
    F: Fn(&SignAssignment) -> Result<(DMatrix<f64>, f64)> + Sync,
{
    let all = enumerate_all(tree)?;
    let (base_cov, base_mi) = model(&SignAssignment::all_plus(tree))?;
    let devs: Vec<(f64, f64)> = all
        .par_iter()
        .map(|b| {
            let (cov, mi) = model(b)?;
            Ok(((cov - &base_cov).amax(), (mi - base_mi).abs()))
        })
        .collect::<Result<_>>()?;
    let max_cov = devs.iter().map(|d| d.0).fold(0.0, f64::max);
    let max_mi = devs.iter().map(|d| d.1).fold(0.0, f64::max);
    let tol = SIGN_INVARIANCE_TOLERANCE;
    Ok(SignInvarianceReport {
        latents: tree.latents().len(),
        assignments: all.len(),
        max_covariance_deviation: max_cov,
        max_mi_deviation: max_mi,
        tolerance: tol,
        pass: max_cov <= tol && max_mi <= tol,
    })
}

/// Every sign assignment gives the same `Σ_X` and `I(X; Y)`.
pub fn sign_invariance_suite(tree: &GaussianTree) -> Result<SignInvarianceReport> {
    sign_invariance_with(tree, |b| {
        Ok((observable_covariance(tree, b)?.matrix().clone(), mutual_info_direct(tree, b)?.value))
    })
}

/// Gaussian `I(A; B)` from a joint covariance whose first `na` coordinates
/// are `A`.
pub fn joint_mi(joint: &DMatrix<f64>, na: usize) -> Result<f64> {
    let n = joint.nrows();
    let a = joint.view((0, 0), (na, na)).into_owned();
    let b = joint.view((na, na), (n - na, n - na)).into_owned();
    Ok(0.5 * (log_det(&a)? + log_det(&b)? - log_det(joint)?))
}

/// Grid and budget of a convergence sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub rate_multipliers: Vec<f64>,
    pub block_lens: Vec<usize>,
    pub draws: usize,
    pub seed: u64,
    pub mc_samples: usize,
    pub histogram: HistogramSpec,
    /// Uniform sign probability used for bounds and codebooks.
    pub pi: f64,
}

/// Multipliers at or below this form the low-rate contrast arm.
pub const NEGATIVE_ARM_MAX: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub rate_mult: f64,
    pub block_len: usize,
    pub draws: usize,
    pub samples: usize,
    /// `‖Σ̂ − Σ_X‖_F` for the per-position covariance.
    pub frobenius_error: f64,
    pub max_abs_error: f64,
    /// Same error for the covariance pooled over all rows.
    pub pooled_frobenius_error: f64,
    /// One entry per observable, id order.
    pub tv_1d: Vec<f64>,
    /// One entry per consecutive observable pair.
    pub tv_2d: Vec<f64>,
    /// `log2` of the layer codebook sizes `(M_Y, M_B)`, layer order.
    pub codebook_bits: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub observables: Vec<NodeId>,
    pub config: SweepConfig,
    pub rate_bounds: Vec<RateRecord>,
    pub points: Vec<SweepPoint>,
}

impl ConvergenceReport {
    pub fn point(&self, rate_mult: f64, block_len: usize) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.rate_mult == rate_mult && p.block_len == block_len)
    }

    /// Points of one multiplier, in block-length order.
    pub fn arm(&self, rate_mult: f64) -> Vec<&SweepPoint> {
        self.points.iter().filter(|p| p.rate_mult == rate_mult).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Tidy CSV: `rate_mult,block_len,metric,component,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["rate_mult", "block_len", "metric", "component", "value"])?;
        let ids = &self.observables;
        for p in &self.points {
            let mut row = |metric: &str, comp: String, v: f64| {
                out.write_record([p.rate_mult.to_string(), p.block_len.to_string(), metric.into(), comp, format!("{v:?}")])
            };
            row("frobenius_error", String::new(), p.frobenius_error)?;
            row("max_abs_error", String::new(), p.max_abs_error)?;
            row("pooled_frobenius_error", String::new(), p.pooled_frobenius_error)?;
            row("samples", String::new(), p.samples as f64)?;
            for (i, v) in p.tv_1d.iter().enumerate() {
                row("tv_1d", ids[i].to_string(), *v)?;
            }
            for (i, v) in p.tv_2d.iter().enumerate() {
                row("tv_2d", format!("{}-{}", ids[i], ids[i + 1]), *v)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Build codebooks at every `(multiplier, N)` point, synthesize `draws`
/// blocks and measure the output against `Σ_X`. A zero-rate arm is added
/// when no multiplier is at or below [`NEGATIVE_ARM_MAX`].
pub fn convergence_sweep(tree: &GaussianTree, config: &SweepConfig) -> Result<ConvergenceReport> {
    let mut config = config.clone();
    if config.block_lens.is_empty() || config.block_lens.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("block lengths must be nonempty and strictly increasing".into()));
    }
    if config.rate_multipliers.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(Error::InvalidInput("rate multipliers must be finite and nonnegative".into()));
    }
    if config.draws < 2 {
        return Err(Error::TooFewSamples { got: config.draws, min: 2 });
    }
    if !config.rate_multipliers.iter().any(|&m| m <= NEGATIVE_ARM_MAX) {
        config.rate_multipliers.push(0.0);
    }
    config.rate_multipliers.sort_by(f64::total_cmp);
    config.rate_multipliers.dedup();

    let (t2, l2, _) = normalize_for_synthesis(tree, &assign_layers(tree))?;
    let plan = SynthesisPlan::new(&t2, &l2)?;
    let pi = SignDistribution::uniform(&t2, config.pi)?;
    let bounds = all_rate_bounds(&t2, &l2, &pi, config.mc_samples, config.seed)?;
    let target = observable_covariance(tree, &SignAssignment::all_plus(tree))?;
    let target = target.matrix().clone();
    let n_obs = target.nrows();

    let grid: Vec<(f64, usize)> = config
        .rate_multipliers
        .iter()
        .flat_map(|&m| config.block_lens.iter().map(move |&n| (m, n)))
        .collect();
    let points = grid
        .par_iter()
        .map(|&(mult, block_len)| {
            let rates = RateTuple::from_bounds(&bounds, mult)?;
            let source = VirtualCodebooks::new(plan.clone(), block_len, rates.clone(), pi.clone(), config.seed)?;
            let batch = synthesize_batch(&source, config.draws, config.seed)?;
            let per_pos = position_covariance(&batch.pooled, block_len)?;
            let pooled = empirical_covariance(&batch.pooled)?;
            let tv_1d = (0..n_obs)
                .map(|i| histogram_tv(&batch.pooled, &[i], &target, config.histogram))
                .collect::<Result<Vec<_>>>()?;
            let tv_2d = (0..n_obs.saturating_sub(1))
                .map(|i| histogram_tv(&batch.pooled, &[i, i + 1], &target, config.histogram))
                .collect::<Result<Vec<_>>>()?;
            let codebook_bits = (1..=rates.layers())
                .map(|l| {
                    let bits = |r: f64| crate::codebook::size_bits(block_len, r);
                    (bits(rates.y(l)), bits(rates.b(l)))
                })
                .collect();
            Ok(SweepPoint {
                rate_mult: mult,
                block_len,
                draws: config.draws,
                samples: batch.pooled.nrows(),
                frobenius_error: per_pos.frobenius_error(&target),
                max_abs_error: per_pos.max_abs_error(&target),
                pooled_frobenius_error: pooled.frobenius_error(&target),
                tv_1d,
                tv_2d,
                codebook_bits,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceReport {
        observables: plan.observable_ids(),
        config,
        rate_bounds: bounds.iter().map(RateRecord::from).collect(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::rng::substream;

    fn rho_matrix(r: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, r, r, 1.0])
    }

    #[test]
    fn cdf_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-11);
    }

    #[test]
    fn bivariate_cells_sum_to_one_and_match_independence() {
        let spec = HistogramSpec::default();
        let b = spec.bins;
        for rho in [0.0, 0.36, -0.8] {
            let mut total = 0.0;
            for i in 0..b {
                for j in 0..b {
                    total += bivariate_cell(spec.edge(i), spec.edge(i + 1), spec.edge(j), spec.edge(j + 1), rho);
                }
            }
            let inside = normal_cdf(4.5) - normal_cdf(-4.5);
            assert!(total <= 1.0 && total > inside * inside - 1e-9, "{rho}: {total}");
        }
        let p = bivariate_cell(-0.3, 0.5, 0.1, 1.2, 0.0);
        let q = (normal_cdf(0.5) - normal_cdf(-0.3)) * (normal_cdf(1.2) - normal_cdf(0.1));
        assert!((p - q).abs() < 1e-12);
    }

    #[test]
    fn empirical_covariance_calibrates() {
        let sigma = observable_covariance(&catalog::star(0.6), &SignAssignment::all_plus(&catalog::star(0.6)))
            .unwrap()
            .matrix()
            .clone();
        let x = sample_gaussian(&sigma, 200_000, &mut substream(1, "t", &[])).unwrap();
        let est = empirical_covariance(&x).unwrap();
        assert!(est.frobenius_error(&sigma) < 0.02);
        // permuting columns permutes the estimate
        let perm = DMatrix::from_columns(&[x.column(2), x.column(0), x.column(1)]);
        let ep = empirical_covariance(&perm).unwrap();
        assert!((ep.matrix[(0, 1)] - est.matrix[(2, 0)]).abs() < 1e-12);
        assert!(matches!(empirical_covariance(&x.rows(0, 1).into_owned()), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn constant_samples_give_zero_covariance() {
        let x = DMatrix::from_element(10, 3, 0.7);
        let est = empirical_covariance(&x).unwrap();
        assert!(est.matrix.amax() < 1e-24);
        let sigma = DMatrix::identity(3, 3);
        assert!((est.frobenius_error(&sigma) - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn position_covariance_sees_fixed_means() {
        // every draw repeats the same block: zero spread per position
        let block = sample_gaussian(&DMatrix::identity(2, 2), 50, &mut substream(2, "t", &[])).unwrap();
        let mut rows = Vec::new();
        for _ in 0..4 {
            rows.extend(block.row_iter().map(|r| r.into_owned()));
        }
        let x = DMatrix::from_rows(&rows);
        assert!(position_covariance(&x, 50).unwrap().matrix.amax() < 1e-12);
        assert!(empirical_covariance(&x).unwrap().matrix[(0, 0)] > 0.5);
        assert!(position_covariance(&x, 7).is_err());
    }

    #[test]
    fn tv_of_exact_sampler_shrinks() {
        let sigma = rho_matrix(0.36);
        let spec = HistogramSpec::default();
        let mut last = (1.0, 1.0);
        for (i, rows) in [2_000, 20_000, 200_000].into_iter().enumerate() {
            let x = sample_gaussian(&sigma, rows, &mut substream(3, "tv", &[i as u64])).unwrap();
            let t1 = histogram_tv(&x, &[0], &sigma, spec).unwrap();
            let t2 = histogram_tv(&x, &[0, 1], &sigma, spec).unwrap();
            assert!(t1 < last.0 && t2 < last.1, "{rows}: {t1} {t2}");
            last = (t1, t2);
        }
        assert!(last.0 < 0.02);
    }

    #[test]
    fn tv_distinguishes_correlation() {
        // exact TV between N(0, I) and N(0, [[1, .36], [.36, 1]]) by a fine
        // midpoint rule on [-8, 8]^2
        let r: f64 = 0.36;
        let det = 1.0 - r * r;
        let steps = 800;
        let h = 16.0 / steps as f64;
        let mut exact = 0.0;
        for i in 0..steps {
            for j in 0..steps {
                let (x, y) = (-8.0 + (i as f64 + 0.5) * h, -8.0 + (j as f64 + 0.5) * h);
                let p = (-(x * x + y * y) / 2.0).exp() / (2.0 * std::f64::consts::PI);
                let q = (-(x * x - 2.0 * r * x * y + y * y) / (2.0 * det)).exp()
                    / (2.0 * std::f64::consts::PI * det.sqrt());
                exact += (p - q).abs() * h * h;
            }
        }
        exact *= 0.5;
        let x = sample_gaussian(&DMatrix::identity(2, 2), 200_000, &mut substream(4, "t", &[])).unwrap();
        let tv = histogram_tv(&x, &[0, 1], &rho_matrix(r), HistogramSpec::default()).unwrap();
        // binning can only lower the distance; sampling noise adds a little
        assert!(exact > 0.1);
        assert!(tv > 0.7 * exact && tv < exact + 0.03, "binned {tv} exact {exact}");
        let own = histogram_tv(&x, &[0, 1], &DMatrix::identity(2, 2), HistogramSpec::default()).unwrap();
        assert!(own < 0.5 * tv);
    }

    #[test]
    fn histogram_preconditions() {
        let x = DMatrix::zeros(5, 1);
        let s = DMatrix::identity(1, 1);
        assert!(histogram_tv(&x, &[0], &s, HistogramSpec { bins: 5, ..Default::default() }).is_err());
        assert!(histogram_tv(&x, &[0], &s, HistogramSpec { bins: 50, lo: -3.0, hi: 3.0 }).is_err());
        assert!(histogram_tv(&DMatrix::zeros(0, 1), &[0], &s, HistogramSpec::default()).is_err());
    }

    #[test]
    fn ks_accepts_normal_rejects_shifted() {
        let x = sample_gaussian(&DMatrix::identity(1, 1), 10_000, &mut substream(5, "t", &[])).unwrap();
        let v: Vec<f64> = x.column(0).iter().copied().collect();
        assert!(ks_standard_normal(&v).unwrap().p_value > 0.01);
        let shifted: Vec<f64> = v.iter().map(|a| a + 0.1).collect();
        assert!(ks_standard_normal(&shifted).unwrap().p_value < 0.01);
        let scaled: Vec<f64> = v.iter().map(|a| a * 1.1).collect();
        assert!(ks_standard_normal(&scaled).unwrap().p_value < 0.01);
        // Kolmogorov tail at the 1% critical value
        assert!((kolmogorov_q(1.6276) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn sign_invariance_on_examples() {
        let r = sign_invariance_suite(&catalog::fig1()).unwrap();
        assert!(r.pass);
        assert_eq!(r.assignments, 4);
        let r = sign_invariance_suite(&catalog::star(0.6)).unwrap();
        assert!(r.pass);
        assert_eq!(r.assignments, 2);
    }

    /// Covariance model where one edge's weight takes the sign of only one
    /// endpoint: not a valid tree model, so invariance must break.
    fn corrupted_model(tree: &GaussianTree, b: &SignAssignment) -> Result<(DMatrix<f64>, f64)> {
        let obs = tree.observables();
        let all: Vec<NodeId> = obs.iter().chain(&tree.latents()).copied().collect();
        let bad = tree.edges().iter().position(|e| tree.is_latent(e.u) && tree.is_latent(e.v)).unwrap();
        let n = all.len();
        let mut m = DMatrix::identity(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let path = tree.path(all[i], all[j])?;
                let mut v = 1.0;
                for w in path.windows(2) {
                    let e = tree.edge_between(w[0], w[1]).unwrap();
                    let same = std::ptr::eq(e, &tree.edges()[bad]);
                    v *= e.gamma * if same { b.value(e.u) } else { b.value(w[0]) * b.value(w[1]) };
                }
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        let no = obs.len();
        Ok((m.view((0, 0), (no, no)).into_owned(), joint_mi(&m, no)?))
    }

    #[test]
    fn corrupted_model_fails_invariance() {
        let tree = catalog::fig1();
        let r = sign_invariance_with(&tree, |b| corrupted_model(&tree, b)).unwrap();
        assert!(!r.pass);
        assert!(r.max_covariance_deviation > 0.1);
    }

    fn small_sweep(mults: Vec<f64>) -> SweepConfig {
        SweepConfig {
            rate_multipliers: mults,
            block_lens: vec![16, 64],
            draws: 50,
            seed: 7,
            mc_samples: 2_000,
            histogram: HistogramSpec::default(),
            pi: 0.5,
        }
    }

    #[test]
    fn sweep_adds_zero_arm_and_is_deterministic() {
        let tree = catalog::star(0.6);
        let a = convergence_sweep(&tree, &small_sweep(vec![1.2])).unwrap();
        assert_eq!(a.config.rate_multipliers, vec![0.0, 1.2]);
        assert_eq!(a.points.len(), 4);
        let b = convergence_sweep(&tree, &small_sweep(vec![1.2])).unwrap();
        assert_eq!(a, b);
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("rate_mult,block_len,metric,component,value\n"));
        assert_eq!(text.lines().count(), 1 + 4 * (4 + 3 + 2));
    }

    #[test]
    fn zero_rate_arm_matches_conditional_covariance() {
        // one codeword: at fixed t only the channel noise varies, so the
        // per-position covariance is diag(1 − γ²) and the error is ‖γ² 11ᵀ‖_F
        let tree = catalog::star(0.6);
        let r = convergence_sweep(&tree, &small_sweep(vec![0.0, 1.5])).unwrap();
        let oracle = 0.36 * 3.0;
        for p in r.arm(0.0) {
            assert!((p.frobenius_error - oracle).abs() < 0.1, "{}", p.frobenius_error);
        }
        assert!(r.point(1.5, 64).unwrap().frobenius_error < 0.3);
        assert!(convergence_sweep(&tree, &SweepConfig { block_lens: vec![64, 16], ..small_sweep(vec![1.0]) }).is_err());
    }
}
