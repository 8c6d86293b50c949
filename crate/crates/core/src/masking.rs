//! Agent masking: choose which agents to hide and rewrite their current
//! observation/action rows according to the configured strategy.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which agents are masked this sample: exactly `n_masked` ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVector {
    bits: Vec<u8>,
}

impl MaskVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() || bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArg {
                op: "mask_vector",
                why: "entries must be 0 or 1 and non-empty".into(),
            });
        }
        Ok(Self { bits })
    }

    pub fn full(n: usize) -> Self {
        Self { bits: vec![1; n] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn n_masked(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Masked agent indices in increasing order.
    pub fn masked_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
    }
}

/// How a masked agent's current observation is rewritten.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskVariant {
    /// Replace with the observation from `offset` steps earlier.
    PrevStep,
    /// Previous observation plus per-element standard normal noise.
    PrevStepGauss,
    /// Pure standard normal noise.
    FullGauss,
    /// All zeros.
    Zero,
}

impl MaskVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prev" => Ok(Self::PrevStep),
            "prev_gauss" => Ok(Self::PrevStepGauss),
            "full_gauss" => Ok(Self::FullGauss),
            "zero" => Ok(Self::Zero),
            other => Err(Error::Config(format!(
                "unknown mask strategy {other:?}; expected prev, prev_gauss, full_gauss, or zero"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::PrevStep => "prev",
            Self::PrevStepGauss => "prev_gauss",
            Self::FullGauss => "full_gauss",
            Self::Zero => "zero",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskStrategy {
    pub variant: MaskVariant,
    /// Temporal offset k: masked agents see step t-k. Ignored by the noise
    /// and zero variants, but still bounds which samples may be drawn.
    pub offset: usize,
}

impl MaskStrategy {
    pub fn new(variant: MaskVariant, offset: usize) -> Result<Self> {
        if offset == 0 {
            return Err(Error::InvalidArg {
                op: "mask_strategy",
                why: "offset must be at least 1".into(),
            });
        }
        Ok(Self { variant, offset })
    }
}

impl Default for MaskStrategy {
    fn default() -> Self {
        Self {
            variant: MaskVariant::PrevStep,
            offset: 1,
        }
    }
}

/// One auxiliary training example: the joint observation/action at step t
/// together with the step t-k antecedents from the same episode.
#[derive(Clone, Debug)]
pub struct TimestepSample {
    pub obs_t: Tensor,
    pub act_t: Tensor,
    pub obs_prev: Tensor,
    pub act_prev: Tensor,
    pub episode_id: usize,
    pub t: usize,
}

impl TimestepSample {
    pub fn n_agents(&self) -> usize {
        self.obs_t.shape()[0]
    }

    pub fn validate(&self, offset: usize) -> Result<()> {
        let n = self.obs_t.shape()[0];
        let checks = [
            ("obs_t", &self.obs_t),
            ("act_t", &self.act_t),
            ("obs_prev", &self.obs_prev),
            ("act_prev", &self.act_prev),
        ];
        for (name, t) in checks {
            if t.rank() != 2 || t.shape()[0] != n {
                return Err(Error::InvalidShape {
                    op: "timestep_sample",
                    shape: t.shape().to_vec(),
                    why: format!("{name} must be [n_agents, dim]"),
                });
            }
        }
        if self.obs_t.shape() != self.obs_prev.shape()
            || self.act_t.shape() != self.act_prev.shape()
        {
            return Err(Error::InvalidShape {
                op: "timestep_sample",
                shape: self.obs_prev.shape().to_vec(),
                why: "current and previous tensors must match".into(),
            });
        }
        if self.t < offset {
            return Err(Error::Sampling(format!(
                "sample at t={} predates mask offset k={offset}",
                self.t
            )));
        }
        Ok(())
    }
}

/// Draw a mask with exactly `n_mask` ones, uniform over all subsets.
pub fn sample_mask(n_agents: usize, n_mask: usize, rng: &mut impl Rng) -> Result<MaskVector> {
    if n_mask == 0 || n_mask > n_agents {
        return Err(Error::InvalidArg {
            op: "sample_mask",
            why: format!("n_mask {n_mask} outside 1..={n_agents}"),
        });
    }
    let mut bits = vec![0u8; n_agents];
    for idx in rand::seq::index::sample(rng, n_agents, n_mask) {
        bits[idx] = 1;
    }
    Ok(MaskVector { bits })
}

/// Rewrite masked rows of the step-t observation/action pair.
///
/// Unmasked rows pass through bit-identical. Masked action rows always take
/// the previous action, whatever the observation variant does. Noise is
/// drawn per masked row in increasing agent order, element by element, so a
/// fixed rng seed fixes the output.
pub fn apply_mask(
    sample: &TimestepSample,
    mask: &MaskVector,
    strategy: &MaskStrategy,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    sample.validate(strategy.offset)?;
    if mask.len() != sample.n_agents() {
        return Err(Error::InvalidArg {
            op: "apply_mask",
            why: format!(
                "mask length {} does not match {} agents",
                mask.len(),
                sample.n_agents()
            ),
        });
    }
    let mut obs = sample.obs_t.clone();
    let mut act = sample.act_t.clone();
    for i in mask.masked_indices() {
        act.row_mut(i).copy_from_slice(sample.act_prev.row(i));
        let row = obs.row_mut(i);
        match strategy.variant {
            MaskVariant::PrevStep => row.copy_from_slice(sample.obs_prev.row(i)),
            MaskVariant::PrevStepGauss => {
                for (dst, &src) in row.iter_mut().zip(sample.obs_prev.row(i)) {
                    let noise: f64 = StandardNormal.sample(rng);
                    *dst = src + noise;
                }
            }
            MaskVariant::FullGauss => {
                for dst in row.iter_mut() {
                    *dst = StandardNormal.sample(rng);
                }
            }
            MaskVariant::Zero => row.fill(0.0),
        }
    }
    Ok((obs, act))
}
