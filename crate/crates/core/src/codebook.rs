//! Sign codebooks and layered Gaussian codebooks.
//!
//! Every codeword is generated from its own random stream keyed by
//! `(seed, layer, index)`, so codeword `i` is the same whether a whole
//! codebook is materialized in memory or the codeword is regenerated on
//! demand. Materialized codebooks are capped (`N·R ≤ 30` bits per codebook);
//! [`VirtualCodebooks`] lifts the cap by never storing codewords, with
//! arbitrary-precision indices so `M = ⌈2^{N·R/ln 2}⌉` is honoured exactly.

use std::borrow::Cow;
use std::f64::consts::LN_2;
use std::io::{Read, Write};

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::NoiseMode;
use crate::error::{Error, Result};
use crate::info::RateBounds;
use crate::plan::SynthesisPlan;
use crate::rng::{substream_big, uniform_below, StreamRng};
use crate::signs::SignDistribution;
use crate::tree::NodeId;

/// Largest `N·R` (bits) of a materialized codebook.
pub const MAX_MATERIALIZED_BITS: f64 = 30.0;
/// Largest total number of stored floats across a materialized codebook set.
pub const MAX_MATERIALIZED_VALUES: u128 = 1 << 28;
/// Largest `N·R` (bits) of any codebook, stored or not.
pub const MAX_VIRTUAL_BITS: f64 = (1u64 << 24) as f64;

const TAG_CODEWORD: &str = "codeword";
const TAG_SIGN: &str = "sign-codeword";

/// `N·R / ln 2`: the codebook size exponent in bits.
pub fn size_bits(n: usize, rate_nats: f64) -> f64 {
    n as f64 * rate_nats / LN_2
}

/// `M = ⌈2^{N·R/ln 2}⌉` for a rate in nats.
pub fn codebook_size(n: usize, rate_nats: f64) -> Result<BigUint> {
    if !(rate_nats >= 0.0) || !rate_nats.is_finite() {
        return Err(Error::InvalidInput(format!("rate {rate_nats} must be finite and nonnegative")));
    }
    let x = size_bits(n, rate_nats);
    if x > MAX_VIRTUAL_BITS {
        return Err(Error::ResourceCap(format!("codebook of 2^{x:.0} codewords")));
    }
    if x <= 52.0 {
        return Ok(BigUint::from(x.exp2().ceil() as u64));
    }
    // 2^x = 2^{frac} · 2^{floor}; keep a 53-bit mantissa and shift
    let whole = x.floor();
    let mantissa = ((x - whole).exp2() * (1u64 << 52) as f64).ceil() as u64;
    Ok(BigUint::from(mantissa) << (whole as u64 - 52))
}

/// Per-layer rates in nats per symbol, index `l − 1` for layer `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTuple {
    pub r_y: Vec<f64>,
    pub r_b: Vec<f64>,
}

impl RateTuple {
    pub fn new(r_y: Vec<f64>, r_b: Vec<f64>) -> Result<Self> {
        if r_y.len() != r_b.len() {
            return Err(Error::DimensionMismatch { expected: r_y.len(), got: r_b.len() });
        }
        if let Some(r) = r_y.iter().chain(&r_b).find(|r| !(**r >= 0.0 && r.is_finite())) {
            return Err(Error::InvalidInput(format!("rate {r} must be finite and nonnegative")));
        }
        Ok(RateTuple { r_y, r_b })
    }

    pub fn zero(top: usize) -> Self {
        RateTuple { r_y: vec![0.0; top], r_b: vec![0.0; top] }
    }

    /// `R_Y = mult · y_bound`, `R_B = mult · max(sum_bound − y_bound, 0)`,
    /// from bounds ordered by lower layer `0..L`.
    pub fn from_bounds(bounds: &[RateBounds], mult: f64) -> Result<Self> {
        let r_y = bounds.iter().map(|b| mult * b.y_bound.max(0.0)).collect();
        let r_b = bounds.iter().map(|b| mult * (b.sum_bound - b.y_bound).max(0.0)).collect();
        Self::new(r_y, r_b)
    }

    pub fn layers(&self) -> usize {
        self.r_y.len()
    }

    pub fn y(&self, l: usize) -> f64 {
        self.r_y[l - 1]
    }

    pub fn b(&self, l: usize) -> f64 {
        self.r_b[l - 1]
    }
}

/// Upper-layer indices a non-top codeword was generated from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(with = "decimal")]
    pub y_index: BigUint,
    #[serde(with = "decimal")]
    pub b_index: BigUint,
}

/// Arbitrary-precision indices as decimal strings in JSON.
pub mod decimal {
    use num_bigint::BigUint;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(D::Error::custom)
    }
}

/// One Gaussian codeword: for every `t` and every sign realization of its
/// layer, a vector over the layer's nodes. Layout `[t][realization][node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codeword {
    pub layer: usize,
    pub block_len: usize,
    pub realizations: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub provenance: Option<Provenance>,
}

impl Codeword {
    /// Vector at time `t` under sign realization `mask`.
    pub fn at(&self, t: usize, mask: u32) -> &[f64] {
        let start = (t * self.realizations + mask as usize) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// `(y | b)^N`: the sequence picked out by one sign mask per `t`.
    pub fn resolve(&self, signs: &[u32]) -> Vec<f64> {
        signs.iter().enumerate().flat_map(|(t, &m)| self.at(t, m).iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignCodebook {
    pub layer: usize,
    pub block_len: usize,
    pub latents: Vec<NodeId>,
    pub codewords: Vec<Vec<u32>>,
}

impl SignCodebook {
    pub fn size(&self) -> usize {
        self.codewords.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub layer: usize,
    pub block_len: usize,
    pub nodes: Vec<NodeId>,
    pub codewords: Vec<Codeword>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.codewords.len()
    }
}

fn small_size(m: &BigUint, what: &str) -> Result<usize> {
    m.to_usize()
        .filter(|&v| v as f64 <= MAX_MATERIALIZED_BITS.exp2())
        .ok_or_else(|| Error::ResourceCap(format!("{what} of {m} codewords exceeds 2^30")))
}

fn materialized_size(n: usize, rate: f64, what: &str) -> Result<usize> {
    let bits = size_bits(n, rate);
    if bits > MAX_MATERIALIZED_BITS {
        return Err(Error::ResourceCap(format!(
            "{what}: N·R = {bits:.2} bits exceeds the {MAX_MATERIALIZED_BITS}-bit cap"
        )));
    }
    small_size(&codebook_size(n, rate)?, what)
}

/// Sign codeword `index` of layer `layer`.
pub fn sign_codeword_at(
    latents: &[NodeId],
    pi: &SignDistribution,
    block_len: usize,
    seed: u64,
    layer: usize,
    index: &BigUint,
) -> Vec<u32> {
    let mut rng = substream_big(seed, TAG_SIGN, layer, index);
    (0..block_len).map(|_| pi.sample_mask(latents, &mut rng) as u32).collect()
}

/// Top-layer codeword `index`: independent draws from the sign-conditional
/// Gaussian of the top layer for every `t` and realization.
pub fn top_codeword_at(plan: &SynthesisPlan, block_len: usize, seed: u64, index: &BigUint) -> Codeword {
    let l = plan.top();
    let mut rng = substream_big(seed, TAG_CODEWORD, l, index);
    let (reals, dim) = (plan.realizations(l), plan.dim(l));
    let mut values = vec![0.0; block_len * reals * dim];
    for (slot, chunk) in values.chunks_mut(dim).enumerate() {
        plan.sample_top((slot % reals) as u64, &mut rng, chunk);
    }
    Codeword { layer: l, block_len, realizations: reals, dim, values, provenance: None }
}

/// Start generating codeword `index` of layer `l < L`: its stream and the
/// uniformly drawn upper indices.
fn propagation_start(seed: u64, l: usize, index: &BigUint, m_y_up: &BigUint, m_b_up: &BigUint) -> (StreamRng, Provenance) {
    let mut rng = substream_big(seed, TAG_CODEWORD, l, index);
    let y_index = uniform_below(&mut rng, m_y_up);
    let b_index = uniform_below(&mut rng, m_b_up);
    (rng, Provenance { y_index, b_index })
}

/// Finish a layer-`l` codeword from the resolved upper sequence: for every
/// `t` and every realization of layer `l`, one channel use with fresh noise.
fn propagation_finish(
    plan: &SynthesisPlan,
    l: usize,
    mut rng: StreamRng,
    provenance: Provenance,
    upper: &Codeword,
    upper_signs: &[u32],
    noise: NoiseMode,
) -> Codeword {
    let ch = plan.channel(l);
    let block_len = upper.block_len;
    let (reals, dim) = (plan.realizations(l), plan.dim(l));
    let mut values = vec![0.0; block_len * reals * dim];
    for t in 0..block_len {
        let up = upper.at(t, upper_signs[t]);
        for r in 0..reals {
            let start = (t * reals + r) * dim;
            ch.apply_into(r as u64, upper_signs[t] as u64, up, noise, &mut rng, &mut values[start..start + dim]);
        }
    }
    Codeword { layer: l, block_len, realizations: reals, dim, values, provenance: Some(provenance) }
}

/// Materialized sign codebook of layer `l`.
pub fn generate_sign_codebook(
    latents: &[NodeId],
    layer: usize,
    block_len: usize,
    rate_b: f64,
    pi: &SignDistribution,
    seed: u64,
) -> Result<SignCodebook> {
    let m = materialized_size(block_len, rate_b, "sign codebook")?;
    let codewords = (0..m)
        .into_par_iter()
        .map(|i| sign_codeword_at(latents, pi, block_len, seed, layer, &BigUint::from(i)))
        .collect();
    Ok(SignCodebook { layer, block_len, latents: latents.to_vec(), codewords })
}

/// Materialized top-layer codebook.
pub fn generate_top_codebook(plan: &SynthesisPlan, block_len: usize, rate_y: f64, seed: u64) -> Result<Codebook> {
    let l = plan.top();
    let m = materialized_size(block_len, rate_y, "top codebook")?;
    guard_values(m as u128 * (block_len * plan.realizations(l) * plan.dim(l)) as u128)?;
    let codewords =
        (0..m).into_par_iter().map(|i| top_codeword_at(plan, block_len, seed, &BigUint::from(i))).collect();
    Ok(Codebook { layer: l, block_len, nodes: plan.nodes_at(l).to_vec(), codewords })
}

fn guard_values(total: u128) -> Result<()> {
    if total > MAX_MATERIALIZED_VALUES {
        return Err(Error::ResourceCap(format!("{total} stored values exceed {MAX_MATERIALIZED_VALUES}")));
    }
    Ok(())
}

/// Materialized codebook of layer `l` generated through the channel from the
/// layer-`l + 1` codebooks.
pub fn propagate_layer(
    upper: &Codebook,
    upper_signs: &SignCodebook,
    plan: &SynthesisPlan,
    l: usize,
    rate_y: f64,
    seed: u64,
    noise: NoiseMode,
) -> Result<Codebook> {
    if upper.layer != l + 1 {
        return Err(Error::LayerMismatch { expected: l + 1, got: upper.layer });
    }
    if upper_signs.layer != l + 1 {
        return Err(Error::LayerMismatch { expected: l + 1, got: upper_signs.layer });
    }
    if l == 0 || l >= plan.top() {
        return Err(Error::InvalidInput(format!("layer {l} has no codebook below the top")));
    }
    let m = materialized_size(upper.block_len, rate_y, "layer codebook")?;
    guard_values(m as u128 * (upper.block_len * plan.realizations(l) * plan.dim(l)) as u128)?;
    let m_y = BigUint::from(upper.size());
    let m_b = BigUint::from(upper_signs.size());
    let codewords = (0..m)
        .into_par_iter()
        .map(|i| {
            let (rng, prov) = propagation_start(seed, l, &BigUint::from(i), &m_y, &m_b);
            let j = prov.y_index.to_usize().expect("index below a materialized size");
            let k = prov.b_index.to_usize().expect("index below a materialized size");
            propagation_finish(plan, l, rng, prov, &upper.codewords[j], &upper_signs.codewords[k], noise)
        })
        .collect();
    Ok(Codebook { layer: l, block_len: upper.block_len, nodes: plan.nodes_at(l).to_vec(), codewords })
}

/// Read access to codebooks for synthesis, whether stored or regenerated.
pub trait CodebookSource: Sync {
    fn plan(&self) -> &SynthesisPlan;
    fn block_len(&self) -> usize;
    fn pi(&self) -> &SignDistribution;
    fn noise(&self) -> NoiseMode;
    fn y_size(&self, l: usize) -> &BigUint;
    fn b_size(&self, l: usize) -> &BigUint;
    fn codeword(&self, l: usize, index: &BigUint) -> Result<Cow<'_, Codeword>>;
    fn sign_codeword(&self, l: usize, index: &BigUint) -> Result<Cow<'_, [u32]>>;
}

/// Common parameters of a codebook set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodebookConfig {
    pub block_len: usize,
    pub rates: RateTuple,
    pub seed: u64,
}

fn sizes(plan: &SynthesisPlan, block_len: usize, rates: &RateTuple) -> Result<(Vec<BigUint>, Vec<BigUint>)> {
    if rates.layers() != plan.top() {
        return Err(Error::DimensionMismatch { expected: plan.top(), got: rates.layers() });
    }
    if block_len == 0 {
        return Err(Error::InvalidInput("block length must be positive".into()));
    }
    let mut y = vec![BigUint::one()];
    let mut b = vec![BigUint::one()];
    for l in 1..=plan.top() {
        y.push(codebook_size(block_len, rates.y(l))?);
        b.push(codebook_size(block_len, rates.b(l))?);
    }
    Ok((y, b))
}

/// Codebooks that are never stored: codeword `i` is regenerated from its
/// stream when requested.
#[derive(Debug, Clone)]
pub struct VirtualCodebooks {
    plan: SynthesisPlan,
    pi: SignDistribution,
    config: CodebookConfig,
    y_sizes: Vec<BigUint>,
    b_sizes: Vec<BigUint>,
    noise: NoiseMode,
}

impl VirtualCodebooks {
    pub fn new(
        plan: SynthesisPlan,
        block_len: usize,
        rates: RateTuple,
        pi: SignDistribution,
        seed: u64,
    ) -> Result<Self> {
        let (y_sizes, b_sizes) = sizes(&plan, block_len, &rates)?;
        Ok(VirtualCodebooks {
            plan,
            pi,
            config: CodebookConfig { block_len, rates, seed },
            y_sizes,
            b_sizes,
            noise: NoiseMode::Sampled,
        })
    }

    pub fn with_noise(mut self, noise: NoiseMode) -> Self {
        self.noise = noise;
        self
    }

    pub fn config(&self) -> &CodebookConfig {
        &self.config
    }

    fn check(&self, l: usize, index: &BigUint, sizes: &[BigUint]) -> Result<()> {
        if l == 0 || l > self.plan.top() {
            return Err(Error::InvalidInput(format!("no codebook at layer {l}")));
        }
        if index >= &sizes[l] {
            return Err(Error::BrokenProvenance(format!("index {index} out of range at layer {l}")));
        }
        Ok(())
    }
}

impl CodebookSource for VirtualCodebooks {
    fn plan(&self) -> &SynthesisPlan {
        &self.plan
    }

    fn block_len(&self) -> usize {
        self.config.block_len
    }

    fn pi(&self) -> &SignDistribution {
        &self.pi
    }

    fn noise(&self) -> NoiseMode {
        self.noise
    }

    fn y_size(&self, l: usize) -> &BigUint {
        &self.y_sizes[l]
    }

    fn b_size(&self, l: usize) -> &BigUint {
        &self.b_sizes[l]
    }

    fn codeword(&self, l: usize, index: &BigUint) -> Result<Cow<'_, Codeword>> {
        self.check(l, index, &self.y_sizes)?;
        let n = self.config.block_len;
        let seed = self.config.seed;
        if l == self.plan.top() {
            return Ok(Cow::Owned(top_codeword_at(&self.plan, n, seed, index)));
        }
        let (rng, prov) = propagation_start(seed, l, index, &self.y_sizes[l + 1], &self.b_sizes[l + 1]);
        let upper = self.codeword(l + 1, &prov.y_index)?;
        let signs = self.sign_codeword(l + 1, &prov.b_index)?;
        Ok(Cow::Owned(propagation_finish(&self.plan, l, rng, prov, &upper, &signs, self.noise)))
    }

    fn sign_codeword(&self, l: usize, index: &BigUint) -> Result<Cow<'_, [u32]>> {
        self.check(l, index, &self.b_sizes)?;
        let c = &self.config;
        Ok(Cow::Owned(sign_codeword_at(self.plan.latents_at(l), &self.pi, c.block_len, c.seed, l, index)))
    }
}

/// All codebooks of a tree held in memory, top layer last.
#[derive(Debug, Clone)]
pub struct CodebookSet {
    plan: SynthesisPlan,
    pi: SignDistribution,
    config: CodebookConfig,
    y_sizes: Vec<BigUint>,
    b_sizes: Vec<BigUint>,
    /// Index `l − 1` holds layer `l`.
    pub layers: Vec<(Codebook, SignCodebook)>,
    noise: NoiseMode,
}

/// Generate every layer's codebooks top-down.
pub fn build_all_codebooks(
    plan: &SynthesisPlan,
    block_len: usize,
    rates: &RateTuple,
    pi: &SignDistribution,
    seed: u64,
) -> Result<CodebookSet> {
    build_all_codebooks_with(plan, block_len, rates, pi, seed, NoiseMode::Sampled)
}

pub fn build_all_codebooks_with(
    plan: &SynthesisPlan,
    block_len: usize,
    rates: &RateTuple,
    pi: &SignDistribution,
    seed: u64,
    noise: NoiseMode,
) -> Result<CodebookSet> {
    let (y_sizes, b_sizes) = sizes(plan, block_len, rates)?;
    // check every cap before generating anything
    let mut total: u128 = 0;
    for l in 1..=plan.top() {
        let my = materialized_size(block_len, rates.y(l), "codebook")?;
        let mb = materialized_size(block_len, rates.b(l), "sign codebook")?;
        total += my as u128 * (block_len * plan.realizations(l) * plan.dim(l)) as u128 + (mb * block_len) as u128;
    }
    guard_values(total)?;
    let top = plan.top();
    let mut built: Vec<(Codebook, SignCodebook)> = Vec::with_capacity(top);
    let top_cb = generate_top_codebook(plan, block_len, rates.y(top), seed)?;
    let top_sb = generate_sign_codebook(plan.latents_at(top), top, block_len, rates.b(top), pi, seed)?;
    built.push((top_cb, top_sb));
    for l in (1..top).rev() {
        let (up_cb, up_sb) = built.last().expect("upper layer built");
        let cb = propagate_layer(up_cb, up_sb, plan, l, rates.y(l), seed, noise)?;
        let sb = generate_sign_codebook(plan.latents_at(l), l, block_len, rates.b(l), pi, seed)?;
        built.push((cb, sb));
    }
    built.reverse();
    Ok(CodebookSet {
        plan: plan.clone(),
        pi: pi.clone(),
        config: CodebookConfig { block_len, rates: rates.clone(), seed },
        y_sizes,
        b_sizes,
        layers: built,
        noise,
    })
}

/// JSON manifest entry for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer: usize,
    #[serde(rename = "N")]
    pub block_len: usize,
    #[serde(rename = "M_Y")]
    pub m_y: String,
    #[serde(rename = "M_B")]
    pub m_b: String,
    pub seed: u64,
    pub rates: LayerRates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRates {
    pub r_y_nats: f64,
    pub r_b_nats: f64,
}

/// Manifest for codebooks of `plan` at the given rates (stored or virtual).
pub fn manifest(plan: &SynthesisPlan, config: &CodebookConfig) -> Result<Vec<ManifestEntry>> {
    let (y, b) = sizes(plan, config.block_len, &config.rates)?;
    Ok((1..=plan.top())
        .map(|l| ManifestEntry {
            layer: l,
            block_len: config.block_len,
            m_y: y[l].to_string(),
            m_b: b[l].to_string(),
            seed: config.seed,
            rates: LayerRates { r_y_nats: config.rates.y(l), r_b_nats: config.rates.b(l) },
        })
        .collect())
}

const MAGIC: &[u8; 8] = b"GTSYNCB1";

impl CodebookSet {
    pub fn config(&self) -> &CodebookConfig {
        &self.config
    }

    pub fn layer(&self, l: usize) -> &(Codebook, SignCodebook) {
        &self.layers[l - 1]
    }

    /// Binary container: magic, then per layer a header of little-endian
    /// `u64`s (layer, N, M_Y, M_B, realizations, dim, k), the Gaussian values
    /// as little-endian `f64`, the provenance pairs as `u64` (non-top layers),
    /// and the sign masks as `u32`.
    pub fn write_container<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u64(&mut w, self.layers.len() as u64)?;
        for (cb, sb) in &self.layers {
            let first = &cb.codewords[0];
            for v in [
                cb.layer as u64,
                cb.block_len as u64,
                cb.size() as u64,
                sb.size() as u64,
                first.realizations as u64,
                first.dim as u64,
                sb.latents.len() as u64,
            ] {
                put_u64(&mut w, v)?;
            }
            for c in &cb.codewords {
                for v in &c.values {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            for c in &cb.codewords {
                if let Some(p) = &c.provenance {
                    put_u64(&mut w, p.y_index.to_u64().expect("materialized index fits u64"))?;
                    put_u64(&mut w, p.b_index.to_u64().expect("materialized index fits u64"))?;
                }
            }
            for s in &sb.codewords {
                for m in s {
                    w.write_all(&m.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Read a container written by [`write_container`](Self::write_container)
    /// for the same plan, distribution and config.
    pub fn read_container<R: Read>(
        mut r: R,
        plan: &SynthesisPlan,
        pi: &SignDistribution,
        config: &CodebookConfig,
    ) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Malformed("not a codebook container".into()));
        }
        let (y_sizes, b_sizes) = sizes(plan, config.block_len, &config.rates)?;
        let count = get_u64(&mut r)? as usize;
        if count != plan.top() {
            return Err(Error::DimensionMismatch { expected: plan.top(), got: count });
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let mut h = [0usize; 7];
            for x in &mut h {
                *x = get_u64(&mut r)? as usize;
            }
            let [layer, n, my, mb, reals, dim, k] = h;
            if layer == 0 || layer > plan.top() || reals != plan.realizations(layer) || dim != plan.dim(layer) {
                return Err(Error::Malformed(format!("layer header {h:?} does not match the plan")));
            }
            if n != config.block_len || BigUint::from(my) != y_sizes[layer] || BigUint::from(mb) != b_sizes[layer] {
                return Err(Error::Malformed(format!("layer {layer} sizes do not match the config")));
            }
            guard_values((my * n * reals * dim) as u128)?;
            let mut codewords = Vec::with_capacity(my);
            for _ in 0..my {
                let mut values = vec![0.0; n * reals * dim];
                for v in &mut values {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    *v = f64::from_le_bytes(b);
                }
                codewords.push(Codeword { layer, block_len: n, realizations: reals, dim, values, provenance: None });
            }
            if layer < plan.top() {
                for c in &mut codewords {
                    let y_index = BigUint::from(get_u64(&mut r)?);
                    let b_index = BigUint::from(get_u64(&mut r)?);
                    c.provenance = Some(Provenance { y_index, b_index });
                }
            }
            let mut signs = Vec::with_capacity(mb);
            for _ in 0..mb {
                let mut s = vec![0u32; n];
                for m in &mut s {
                    let mut b = [0u8; 4];
                    r.read_exact(&mut b)?;
                    *m = u32::from_le_bytes(b);
                }
                signs.push(s);
            }
            let latents = plan.latents_at(layer).to_vec();
            if latents.len() != k {
                return Err(Error::Malformed(format!("layer {layer} latent count mismatch")));
            }
            layers.push((
                Codebook { layer, block_len: n, nodes: plan.nodes_at(layer).to_vec(), codewords },
                SignCodebook { layer, block_len: n, latents, codewords: signs },
            ));
        }
        layers.sort_by_key(|(cb, _)| cb.layer);
        Ok(CodebookSet {
            plan: plan.clone(),
            pi: pi.clone(),
            config: config.clone(),
            y_sizes,
            b_sizes,
            layers,
            noise: NoiseMode::Sampled,
        })
    }
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl CodebookSource for CodebookSet {
    fn plan(&self) -> &SynthesisPlan {
        &self.plan
    }

    fn block_len(&self) -> usize {
        self.config.block_len
    }

    fn pi(&self) -> &SignDistribution {
        &self.pi
    }

    fn noise(&self) -> NoiseMode {
        self.noise
    }

    fn y_size(&self, l: usize) -> &BigUint {
        &self.y_sizes[l]
    }

    fn b_size(&self, l: usize) -> &BigUint {
        &self.b_sizes[l]
    }

    fn codeword(&self, l: usize, index: &BigUint) -> Result<Cow<'_, Codeword>> {
        let (cb, _) = self
            .layers
            .get(l.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidInput(format!("no codebook at layer {l}")))?;
        index
            .to_usize()
            .and_then(|i| cb.codewords.get(i))
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::BrokenProvenance(format!("codeword {index} missing at layer {l}")))
    }

    fn sign_codeword(&self, l: usize, index: &BigUint) -> Result<Cow<'_, [u32]>> {
        let (_, sb) = self
            .layers
            .get(l.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidInput(format!("no sign codebook at layer {l}")))?;
        index
            .to_usize()
            .and_then(|i| sb.codewords.get(i))
            .map(|s| Cow::Borrowed(s.as_slice()))
            .ok_or_else(|| Error::BrokenProvenance(format!("sign codeword {index} missing at layer {l}")))
    }
}
