use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{Modality, NUM_MODALITIES};
use super::scene::rng_for;
use crate::error::{Error, Result};

/// Which modalities are present for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AvailabilityMask(pub [bool; NUM_MODALITIES]);

impl AvailabilityMask {
    pub const ALL: AvailabilityMask = AvailabilityMask([true; NUM_MODALITIES]);
    pub const NONE: AvailabilityMask = AvailabilityMask([false; NUM_MODALITIES]);

    pub fn only(modalities: &[Modality]) -> Self {
        let mut m = [false; NUM_MODALITIES];
        for x in modalities {
            m[x.index()] = true;
        }
        AvailabilityMask(m)
    }

    /// Subset encoded as a bitmask, bit `i` for modality index `i`.
    pub fn from_bits(bits: u8) -> Self {
        AvailabilityMask(std::array::from_fn(|i| bits >> i & 1 == 1))
    }

    pub fn bits(&self) -> u8 {
        self.0
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| acc | (b as u8) << i)
    }

    pub fn get(&self, m: Modality) -> bool {
        self.0[m.index()]
    }

    pub fn set(&mut self, m: Modality, v: bool) {
        self.0[m.index()] = v;
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &AvailabilityMask) -> AvailabilityMask {
        AvailabilityMask(std::array::from_fn(|i| self.0[i] && other.0[i]))
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        Modality::ALL.into_iter().filter(|m| self.get(*m))
    }

    /// Short label such as `lidar+radar`.
    pub fn label(&self) -> String {
        let names: Vec<&str> = self.modalities().map(Modality::name).collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }

    /// Every non-empty subset of the five modalities, ordered by bitmask.
    pub fn all_subsets() -> Vec<AvailabilityMask> {
        (1u8..1 << NUM_MODALITIES)
            .map(AvailabilityMask::from_bits)
            .collect()
    }
}

pub(crate) fn validate_probs(probs: &[f64; NUM_MODALITIES]) -> Result<()> {
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config(format!(
            "dropout probabilities must lie in [0, 1]: {probs:?}"
        )));
    }
    if probs.iter().all(|&p| p >= 1.0) {
        return Err(Error::Config(
            "every modality has dropout probability 1".into(),
        ));
    }
    Ok(())
}

/// Independent Bernoulli dropout per modality, resampled until at least one
/// modality survives.
pub fn sample_dropout_mask(seed: u64, probs: &[f64; NUM_MODALITIES]) -> Result<AvailabilityMask> {
    validate_probs(probs)?;
    let mut rng = rng_for(seed, 0xD80F);
    Ok(draw_until_nonempty(&mut rng, probs))
}

pub(crate) fn draw_until_nonempty(
    rng: &mut impl Rng,
    probs: &[f64; NUM_MODALITIES],
) -> AvailabilityMask {
    loop {
        let m = AvailabilityMask(std::array::from_fn(|i| rng.random::<f64>() >= probs[i]));
        if m.any() {
            return m;
        }
    }
}
