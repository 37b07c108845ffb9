//! Global per-sample micrograin clamp.
//!
//! Each sample gets a corridor `[ℓ, h]` from two quantiles of all its
//! `C·H·W` values. Values are then either hard-clamped into the corridor
//! (the default) or squashed with the tanh soft clip.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stats::{soft_clip_elem, QuantilePair, SortedSample};
use crate::tensor::LatentTensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ClampMode {
    #[default]
    Hard,
    Tanh,
}

impl std::str::FromStr for ClampMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(ClampMode::Hard),
            "tanh" => Ok(ClampMode::Tanh),
            other => Err(Error::invalid(format!(
                "unknown clamp mode {other:?} (hard|tanh)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MicroClampConfig {
    pub quantiles: QuantilePair,
    pub mode: ClampMode,
    pub alpha: f32,
    pub eps: f32,
}

impl Default for MicroClampConfig {
    fn default() -> Self {
        MicroClampConfig {
            quantiles: QuantilePair::new(0.001, 0.999).expect("static levels"),
            mode: ClampMode::Hard,
            alpha: 2.0,
            eps: 1e-6,
        }
    }
}

impl MicroClampConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Corridor and change count for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleCorridor {
    pub lo: f32,
    pub hi: f32,
    pub modified: usize,
}

/// Clamp result plus the per-sample corridors that produced it.
#[derive(Clone, Debug)]
pub struct MicroClampOutput {
    pub tensor: LatentTensor,
    pub corridors: Vec<SampleCorridor>,
}

impl MicroClampOutput {
    pub fn modified(&self) -> usize {
        self.corridors.iter().map(|c| c.modified).sum()
    }
}

fn clamp_sample(
    input: &[f32],
    output: &mut [f32],
    cfg: &MicroClampConfig,
) -> Result<SampleCorridor> {
    let sorted = SortedSample::new(input)?;
    let lo = sorted.quantile(cfg.quantiles.low())?;
    let hi = sorted.quantile(cfg.quantiles.high())?;
    let mut modified = 0;
    for (out, &x) in output.iter_mut().zip(input) {
        *out = match cfg.mode {
            ClampMode::Hard => x.clamp(lo, hi),
            ClampMode::Tanh => soft_clip_elem(x, lo, hi, cfg.alpha, cfg.eps),
        };
        if out.to_bits() != x.to_bits() {
            modified += 1;
        }
    }
    Ok(SampleCorridor { lo, hi, modified })
}

/// Applies the clamp and reports each sample's corridor.
pub fn micro_clamp_report(x: &LatentTensor, cfg: &MicroClampConfig) -> Result<MicroClampOutput> {
    cfg.validate()?;
    let n = x.shape().sample_len();
    let mut out = vec![0.0f32; x.data().len()];
    let corridors = out
        .par_chunks_mut(n)
        .zip(x.data().par_chunks(n))
        .map(|(dst, src)| clamp_sample(src, dst, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(MicroClampOutput {
        tensor: x.with_data_unchecked(out),
        corridors,
    })
}

pub fn micro_clamp(x: &LatentTensor, cfg: &MicroClampConfig) -> Result<LatentTensor> {
    micro_clamp_report(x, cfg).map(|o| o.tensor)
}

/// True iff clamping the batch equals clamping every sample on its own.
pub fn micro_clamp_batched_independence_check(x: &LatentTensor, cfg: &MicroClampConfig) -> bool {
    let Ok(batched) = micro_clamp(x, cfg) else {
        return false;
    };
    (0..x.shape().batch).all(|b| match micro_clamp(&x.select_sample(b), cfg) {
        Ok(single) => single.data() == batched.sample(b),
        Err(_) => false,
    })
}
