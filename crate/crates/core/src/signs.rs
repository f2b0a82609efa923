//! Sign variables of the latent nodes and their Bernoulli distribution.
//!
//! A realization over an ordered list of latents is also encoded as a
//! bitmask: bit `j` set means latent `j` has sign −1, so mask 0 is all +1.

use std::collections::BTreeMap;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{GaussianTree, NodeId};

/// Largest latent count for which all `2^k` assignments are enumerated.
pub const MAX_ENUMERATED_LATENTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    pub fn flip(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }
}

/// One realization `b` of the sign vector, indexed by latent id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignAssignment {
    signs: BTreeMap<NodeId, Sign>,
}

impl SignAssignment {
    /// Checked constructor: the domain must be exactly the tree's latents.
    pub fn new(tree: &GaussianTree, signs: BTreeMap<NodeId, Sign>) -> Result<Self> {
        let latents = tree.latents();
        if signs.len() != latents.len() || latents.iter().any(|id| !signs.contains_key(id)) {
            return Err(Error::InvalidInput(
                "sign assignment domain must be exactly the latent node set".into(),
            ));
        }
        Ok(SignAssignment { signs })
    }

    pub fn all_plus(tree: &GaussianTree) -> Self {
        SignAssignment { signs: tree.latents().into_iter().map(|id| (id, Sign::Plus)).collect() }
    }

    /// Assignment over `latents` from a bitmask (bit set ⇒ −1).
    pub fn from_mask(latents: &[NodeId], mask: u64) -> Self {
        let signs = latents
            .iter()
            .enumerate()
            .map(|(j, &id)| (id, if mask >> j & 1 == 1 { Sign::Minus } else { Sign::Plus }))
            .collect();
        SignAssignment { signs }
    }

    /// Sign of `id` as ±1.0; nodes outside the domain (observables) give +1.
    pub fn value(&self, id: NodeId) -> f64 {
        self.signs.get(&id).map_or(1.0, |s| s.value())
    }

    pub fn get(&self, id: NodeId) -> Option<Sign> {
        self.signs.get(&id).copied()
    }

    pub fn set(&mut self, id: NodeId, sign: Sign) {
        self.signs.insert(id, sign);
    }

    pub fn negated(&self) -> Self {
        SignAssignment { signs: self.signs.iter().map(|(&id, s)| (id, s.flip())).collect() }
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, Sign)> + '_ {
        self.signs.iter().map(|(&id, &s)| (id, s))
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }
}

/// Independent Bernoulli signs, `pi[id] = P(B_id = +1)`.
///
/// Parameters may sit on the closed interval [0, 1]; the endpoints give
/// deterministic signs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignDistribution {
    pi: BTreeMap<NodeId, f64>,
}

impl SignDistribution {
    pub fn new(tree: &GaussianTree, pi: BTreeMap<NodeId, f64>) -> Result<Self> {
        let latents = tree.latents();
        if pi.len() != latents.len() || latents.iter().any(|id| !pi.contains_key(id)) {
            return Err(Error::InvalidInput(
                "sign distribution must cover exactly the latent node set".into(),
            ));
        }
        if let Some((id, p)) = pi.iter().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidInput(format!("pi[{id}] = {p} is not a probability")));
        }
        Ok(SignDistribution { pi })
    }

    /// Same `p` for every latent node.
    pub fn uniform(tree: &GaussianTree, p: f64) -> Result<Self> {
        Self::new(tree, tree.latents().into_iter().map(|id| (id, p)).collect())
    }

    pub fn pi(&self, id: NodeId) -> f64 {
        self.pi.get(&id).copied().unwrap_or(1.0)
    }

    pub fn as_map(&self) -> &BTreeMap<NodeId, f64> {
        &self.pi
    }

    /// `η_b`, the probability of a full assignment.
    pub fn weight(&self, b: &SignAssignment) -> f64 {
        self.pi
            .iter()
            .map(|(&id, &p)| if b.value(id) > 0.0 { p } else { 1.0 - p })
            .product()
    }

    /// Log-probabilities of all `2^k` masks over `latents` (bit set ⇒ −1).
    /// Impossible masks get `-inf`.
    pub fn mask_log_weights(&self, latents: &[NodeId]) -> Vec<f64> {
        let k = latents.len();
        (0..1u64 << k)
            .map(|mask| {
                latents
                    .iter()
                    .enumerate()
                    .map(|(j, &id)| {
                        let p = self.pi(id);
                        if mask >> j & 1 == 1 {
                            (1.0 - p).ln()
                        } else {
                            p.ln()
                        }
                    })
                    .sum()
            })
            .collect()
    }

    /// Draw a mask over `latents`: latent `j` is +1 iff `u_j < pi_j`.
    pub fn sample_mask<R: Rng + ?Sized>(&self, latents: &[NodeId], rng: &mut R) -> u64 {
        let mut mask = 0u64;
        for (j, &id) in latents.iter().enumerate() {
            let u: f64 = rng.random();
            if u >= self.pi(id) {
                mask |= 1 << j;
            }
        }
        mask
    }
}

/// All `2^k` sign assignments of a minimal tree, in mask order over the
/// latents sorted by id.
pub fn enumerate_sign_equivalents(tree: &GaussianTree) -> Result<Vec<SignAssignment>> {
    let issues = tree.minimality_issues();
    if !issues.is_empty() {
        return Err(Error::NotMinimal(issues.join("; ")));
    }
    enumerate_all(tree)
}

/// Same as [`enumerate_sign_equivalents`] without the minimality check.
pub fn enumerate_all(tree: &GaussianTree) -> Result<Vec<SignAssignment>> {
    let latents = tree.latents();
    if latents.len() > MAX_ENUMERATED_LATENTS {
        return Err(Error::ResourceCap(format!(
            "{} latents exceed the enumeration cap of {MAX_ENUMERATED_LATENTS}",
            latents.len()
        )));
    }
    Ok((0..1u64 << latents.len()).map(|m| SignAssignment::from_mask(&latents, m)).collect())
}
