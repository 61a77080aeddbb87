//! Bitwidths, bit ranges and per-layer bitwidth policies.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 8;

/// Inclusive range of admissible bitwidths, `1 ≤ min ≤ max ≤ 8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u8; 2]", into = "[u8; 2]")]
pub struct BitRange {
    min: u8,
    max: u8,
}

impl BitRange {
    pub fn new(min: u8, max: u8) -> Result<Self> {
        if min < MIN_BITS || max > MAX_BITS || min > max {
            return Err(Error::Config(format!(
                "bit range [{min}, {max}] must satisfy {MIN_BITS} ≤ min ≤ max ≤ {MAX_BITS}"
            )));
        }
        Ok(BitRange { min, max })
    }

    pub const fn full() -> Self {
        BitRange { min: MIN_BITS, max: MAX_BITS }
    }

    /// Narrowed search range for a target compression ratio: `[1,8]` up to
    /// 10x, `[1,5]` up to 20x, `[1,3]` beyond.
    pub fn preset_for_ratio(target_ratio: f64) -> Self {
        if target_ratio <= 10.0 + 1e-9 {
            BitRange { min: 1, max: 8 }
        } else if target_ratio <= 20.0 + 1e-9 {
            BitRange { min: 1, max: 5 }
        } else {
            BitRange { min: 1, max: 3 }
        }
    }

    pub fn min(&self) -> u8 {
        self.min
    }

    pub fn max(&self) -> u8 {
        self.max
    }

    pub fn width(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn contains(&self, bits: u8) -> bool {
        (self.min..=self.max).contains(&bits)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u8 {
        rng.random_range(self.min..=self.max)
    }
}

impl TryFrom<[u8; 2]> for BitRange {
    type Error = Error;

    fn try_from([min, max]: [u8; 2]) -> Result<Self> {
        BitRange::new(min, max)
    }
}

impl From<BitRange> for [u8; 2] {
    fn from(r: BitRange) -> Self {
        [r.min, r.max]
    }
}

impl fmt::Display for BitRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.min, self.max)
    }
}

/// One bitwidth per quantizable target layer, in layer order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct BitwidthPolicy(Vec<u8>);

impl BitwidthPolicy {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Policy("policy must cover at least one layer".into()));
        }
        if let Some(&b) = bits.iter().find(|&&b| !(MIN_BITS..=MAX_BITS).contains(&b)) {
            return Err(Error::Policy(format!("bitwidth {b} outside [{MIN_BITS}, {MAX_BITS}]")));
        }
        Ok(BitwidthPolicy(bits))
    }

    pub fn uniform(layers: usize, bits: u8) -> Result<Self> {
        Self::new(vec![bits; layers])
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn within(&self, range: BitRange) -> bool {
        self.0.iter().all(|&b| range.contains(b))
    }

    pub fn check_len(&self, layers: usize) -> Result<()> {
        if self.0.len() != layers {
            return Err(Error::Policy(format!(
                "policy has {} entries but the network has {layers} quantizable layers",
                self.0.len()
            )));
        }
        Ok(())
    }

    /// Bitwidths divided by `q_max`.
    pub fn normalized(&self, q_max: u8) -> Vec<f64> {
        self.0.iter().map(|&b| b as f64 / q_max as f64).collect()
    }

    pub fn random<R: Rng + ?Sized>(layers: usize, range: BitRange, rng: &mut R) -> Self {
        BitwidthPolicy((0..layers).map(|_| range.sample(rng)).collect())
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [u8] {
        &mut self.0
    }
}

impl TryFrom<Vec<u8>> for BitwidthPolicy {
    type Error = Error;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        BitwidthPolicy::new(bits)
    }
}

impl From<BitwidthPolicy> for Vec<u8> {
    fn from(p: BitwidthPolicy) -> Self {
        p.0
    }
}

impl fmt::Display for BitwidthPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|b| b.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}
