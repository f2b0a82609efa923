//! Output synthesis: pick first-layer codewords, follow their provenance to
//! the top, and pass the resolved first-layer sequence through the final
//! channel.

use std::io::Write;

use nalgebra::DMatrix;
use num_bigint::BigUint;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::NoiseMode;
use crate::codebook::{decimal, Codeword, CodebookSource};
use crate::error::{Error, Result};
use crate::plan::SynthesisPlan;
use crate::rng::{substream, uniform_below};
use crate::tree::NodeId;

/// Indices picked or resolved at one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChainLink {
    pub layer: usize,
    #[serde(with = "decimal")]
    pub y_index: BigUint,
    #[serde(with = "decimal")]
    pub b_index: BigUint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOutput {
    pub block_len: usize,
    pub observables: Vec<NodeId>,
    /// `x^N`, row-major `N × n`.
    pub x: Vec<f64>,
    /// Layers `1..=L` in order.
    pub chain: Vec<ChainLink>,
    /// Sign masks per `t`, index `l − 1` for layer `l`.
    pub signs: Vec<Vec<u32>>,
    /// `(y(l) | b(l))^N`, row-major `N × dim(l)`, index `l − 1`.
    pub resolved: Vec<Vec<f64>>,
    /// Sign masks of layer-0 latents (empty mask 0 when there are none).
    pub base_signs: Vec<u32>,
    /// Layer-0 sequence, row-major `N × dim(0)`.
    pub base: Vec<f64>,
}

impl SynthesisOutput {
    pub fn x_row(&self, t: usize) -> &[f64] {
        let n = self.observables.len();
        &self.x[t * n..(t + 1) * n]
    }
}

fn resolve_layer(source: &dyn CodebookSource, l: usize, y: &BigUint, b: &BigUint) -> Result<(Codeword, Vec<u32>, Vec<f64>)> {
    let cw = source.codeword(l, y)?.into_owned();
    let signs = source.sign_codeword(l, b)?.into_owned();
    if signs.len() != cw.block_len {
        return Err(Error::BrokenProvenance(format!("sign codeword length mismatch at layer {l}")));
    }
    let seq = cw.resolve(&signs);
    Ok((cw, signs, seq))
}

/// Run the final channel (layer 1 → layer 0) on a resolved first-layer
/// sequence; returns the layer-0 sequence and its sign masks.
pub fn final_channel<R: Rng + ?Sized>(
    plan: &SynthesisPlan,
    pi: &crate::signs::SignDistribution,
    noise: NoiseMode,
    layer1: &[f64],
    signs1: &[u32],
    rng: &mut R,
) -> (Vec<f64>, Vec<u32>) {
    let ch = plan.channel(0);
    let (d0, d1) = (plan.dim(0), plan.dim(1));
    let block_len = signs1.len();
    let mut base = vec![0.0; block_len * d0];
    let mut masks = vec![0u32; block_len];
    let base_latents = plan.latents_at(0);
    for t in 0..block_len {
        let m0 = if base_latents.is_empty() { 0 } else { pi.sample_mask(base_latents, rng) as u32 };
        masks[t] = m0;
        ch.apply_into(
            m0 as u64,
            signs1[t] as u64,
            &layer1[t * d1..(t + 1) * d1],
            noise,
            rng,
            &mut base[t * d0..(t + 1) * d0],
        );
    }
    (base, masks)
}

/// One output block.
pub fn synthesize_one<R: Rng + ?Sized>(source: &dyn CodebookSource, rng: &mut R) -> Result<SynthesisOutput> {
    let plan = source.plan();
    let top = plan.top();
    let block_len = source.block_len();
    let mut y = uniform_below(rng, source.y_size(1));
    let mut b = uniform_below(rng, source.b_size(1));
    let mut chain = Vec::with_capacity(top);
    let mut signs = Vec::with_capacity(top);
    let mut resolved = Vec::with_capacity(top);
    for l in 1..=top {
        let (cw, s, seq) = resolve_layer(source, l, &y, &b)?;
        chain.push(ChainLink { layer: l, y_index: y.clone(), b_index: b.clone() });
        signs.push(s);
        resolved.push(seq);
        if l < top {
            let p = cw
                .provenance
                .ok_or_else(|| Error::BrokenProvenance(format!("codeword {y} at layer {l} has no provenance")))?;
            y = p.y_index;
            b = p.b_index;
        }
    }
    let (base, base_signs) = final_channel(plan, source.pi(), source.noise(), &resolved[0], &signs[0], rng);
    let observables = plan.observable_ids();
    let n = observables.len();
    let mut x = vec![0.0; block_len * n];
    for (k, &(_, l, p)) in plan.observables().iter().enumerate() {
        let (seq, d) = if l == 0 { (&base, plan.dim(0)) } else { (&resolved[l - 1], plan.dim(l)) };
        for t in 0..block_len {
            x[t * n + k] = seq[t * d + p];
        }
    }
    Ok(SynthesisOutput { block_len, observables, x, chain, signs, resolved, base_signs, base })
}

/// Re-resolve the chain of `out` and check every intermediate sequence is
/// bit-identical and every link is the recorded generator of the one below.
pub fn verify_provenance(source: &dyn CodebookSource, out: &SynthesisOutput) -> Result<()> {
    for (i, link) in out.chain.iter().enumerate() {
        let (cw, s, seq) = resolve_layer(source, link.layer, &link.y_index, &link.b_index)?;
        if s != out.signs[i] || seq != out.resolved[i] {
            return Err(Error::BrokenProvenance(format!("layer {} does not re-resolve", link.layer)));
        }
        if let Some(next) = out.chain.get(i + 1) {
            let p = cw.provenance.ok_or_else(|| Error::BrokenProvenance("missing provenance".into()))?;
            if p.y_index != next.y_index || p.b_index != next.b_index {
                return Err(Error::BrokenProvenance(format!("layer {} provenance mismatch", link.layer)));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SynthesisBatch {
    pub outputs: Vec<SynthesisOutput>,
    pub observables: Vec<NodeId>,
    /// Rows ordered by `(draw, t)`, columns by observable id.
    pub pooled: DMatrix<f64>,
}

/// `draws` independent blocks over fixed codebooks; draw `d` uses the
/// substream `(seed, d)`.
pub fn synthesize_batch(source: &dyn CodebookSource, draws: usize, seed: u64) -> Result<SynthesisBatch> {
    if draws == 0 {
        return Err(Error::InvalidInput("draws must be at least 1".into()));
    }
    let outputs: Vec<SynthesisOutput> = (0..draws as u64)
        .into_par_iter()
        .map(|d| synthesize_one(source, &mut substream(seed, "synthesis-draw", &[d])))
        .collect::<Result<_>>()?;
    let observables = source.plan().observable_ids();
    let n = observables.len();
    let rows = draws * source.block_len();
    let flat: Vec<f64> = outputs.iter().flat_map(|o| o.x.iter().copied()).collect();
    let pooled = DMatrix::from_row_slice(rows, n, &flat);
    Ok(SynthesisBatch { outputs, observables, pooled })
}

impl SynthesisBatch {
    /// CSV with a header of observable ids and one row per `(draw, t)`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_samples_csv(w, &self.observables, &self.pooled)
    }

    /// One JSON object per draw and layer.
    pub fn write_chain_log<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            draw: usize,
            #[serde(flatten)]
            link: &'a ChainLink,
        }
        for (draw, o) in self.outputs.iter().enumerate() {
            for link in &o.chain {
                serde_json::to_writer(&mut w, &Line { draw, link })?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

pub fn write_samples_csv<W: Write>(w: W, ids: &[NodeId], m: &DMatrix<f64>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(ids.iter().map(|id| id.to_string()))?;
    let mut rec = Vec::with_capacity(ids.len());
    for i in 0..m.nrows() {
        rec.clear();
        rec.extend((0..m.ncols()).map(|j| format!("{:?}", m[(i, j)])));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Whitened final-channel residuals `L_Z^{-1} (D_0 x_t − A' D_1 y_t)` for a
/// layer-0 block generated from `out`'s first-layer sequence, one vector per
/// component.
pub fn channel_residuals(plan: &SynthesisPlan, layer1: &[f64], signs1: &[u32], base: &[f64], base_signs: &[u32]) -> Vec<Vec<f64>> {
    let ch = plan.channel(0);
    let (d0, d1) = (plan.dim(0), plan.dim(1));
    let l = ch.noise_chol();
    let mut out = vec![Vec::with_capacity(signs1.len()); d0];
    let mut w = vec![0.0; d0];
    for t in 0..signs1.len() {
        let dl = ch.lower_flips(base_signs[t] as u64);
        let du = ch.upper_flips(signs1[t] as u64);
        let y = &layer1[t * d1..(t + 1) * d1];
        let x = &base[t * d0..(t + 1) * d0];
        for i in 0..d0 {
            let mean: f64 = (0..d1).map(|j| ch.base_gain()[(i, j)] * du[j] * y[j]).sum();
            let mut r = dl[i] * x[i] - mean;
            for k in 0..i {
                r -= l[(i, k)] * w[k];
            }
            w[i] = r / l[(i, i)];
            out[i].push(w[i]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::codebook::{build_all_codebooks, RateTuple, VirtualCodebooks};
    use crate::signs::SignDistribution;
    use crate::tree::assign_layers;

    fn plan_of(tree: &crate::tree::GaussianTree) -> SynthesisPlan {
        SynthesisPlan::new(tree, &assign_layers(tree)).unwrap()
    }

    #[test]
    fn single_codeword_star_has_conditional_covariance() {
        let tree = catalog::star(0.6);
        let plan = plan_of(&tree);
        let half = SignDistribution::uniform(&tree, 0.5).unwrap();
        let set = build_all_codebooks(&plan, 64, &RateTuple::zero(1), &half, 1).unwrap();
        let batch = synthesize_batch(&set, 4000, 2).unwrap();
        // every draw uses the same codeword
        assert!(batch.outputs.iter().all(|o| o.chain == batch.outputs[0].chain));
        // x_t − A y_t has covariance diag(1 − γ²) for each t
        let o0 = &batch.outputs[0];
        let (a, y) = (0.6 * if o0.signs[0][7] == 0 { 1.0 } else { -1.0 }, o0.resolved[0][7]);
        let mut s = [[0.0; 3]; 3];
        for o in &batch.outputs {
            let row = o.x_row(7);
            for i in 0..3 {
                for j in 0..3 {
                    s[i][j] += (row[i] - a * y) * (row[j] - a * y);
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.64 } else { 0.0 };
                assert!((s[i][j] / 4000.0 - want).abs() < 0.05, "{i} {j} {}", s[i][j] / 4000.0);
            }
        }
    }

    #[test]
    fn two_layer_chain_and_provenance() {
        let tree = catalog::fig2b();
        let plan = plan_of(&tree);
        let half = SignDistribution::uniform(&tree, 0.5).unwrap();
        let rates = RateTuple::new(vec![0.5, 0.4], vec![0.3, 0.2]).unwrap();
        let set = build_all_codebooks(&plan, 8, &rates, &half, 4).unwrap();
        let out = synthesize_one(&set, &mut substream(1, "t", &[])).unwrap();
        assert_eq!(out.chain.len(), 2);
        assert_eq!(out.chain[0].layer, 1);
        assert_eq!(out.x.len(), 8 * 8);
        verify_provenance(&set, &out).unwrap();
        let virt = VirtualCodebooks::new(plan, 8, rates, half, 4).unwrap();
        verify_provenance(&virt, &out).unwrap();
        // tampering is detected
        let mut bad = out.clone();
        bad.resolved[1][0] += 1.0;
        assert!(verify_provenance(&set, &bad).is_err());
    }

    #[test]
    fn signs_used_match_sign_codeword() {
        let tree = catalog::fig1();
        let plan = plan_of(&tree);
        let half = SignDistribution::uniform(&tree, 0.5).unwrap();
        let set = build_all_codebooks(&plan, 16, &RateTuple::new(vec![0.5], vec![0.5]).unwrap(), &half, 4).unwrap();
        let out = synthesize_one(&set, &mut substream(9, "t", &[])).unwrap();
        let (cb, sb) = set.layer(1);
        let idx: usize = out.chain[0].b_index.clone().try_into().unwrap();
        assert_eq!(out.signs[0], sb.codewords[idx]);
        let yi: usize = out.chain[0].y_index.clone().try_into().unwrap();
        assert_eq!(out.resolved[0], cb.codewords[yi].resolve(&out.signs[0]));
    }

    #[test]
    fn batch_is_reproducible() {
        let tree = catalog::star(0.6);
        let plan = plan_of(&tree);
        let half = SignDistribution::uniform(&tree, 0.5).unwrap();
        let virt = VirtualCodebooks::new(plan, 32, RateTuple::new(vec![1.0], vec![0.5]).unwrap(), half, 4).unwrap();
        let a = synthesize_batch(&virt, 3, 11).unwrap();
        let b = synthesize_batch(&virt, 3, 11).unwrap();
        assert_eq!(a.pooled, b.pooled);
        assert_eq!(a.pooled.nrows(), 96);
        let one = synthesize_batch(&virt, 1, 11).unwrap();
        assert_eq!(one.outputs.len(), 1);
        assert_eq!(one.outputs[0], a.outputs[0]);
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 97);
    }
}
