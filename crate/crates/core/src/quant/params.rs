use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

/// Which function of the scale the optimizer sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleTransform {
    #[default]
    Raw,
    Log2,
}

impl std::str::FromStr for ScaleTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "log2" => Ok(Self::Log2),
            other => Err(Error::Config(format!(
                "unknown scale transform `{other}` (expected raw or log2)"
            ))),
        }
    }
}

/// Scale and zero point for one tensor.
///
/// Zero points are kept as `f32` so they can be trained; the forward pass
/// uses the nearest integer clamped to the unsigned grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u32,
    pub symmetric: bool,
    pub granularity: Granularity,
    pub scale: Vec<f32>,
    pub zero_point: Vec<f32>,
    pub transform: ScaleTransform,
}

impl QuantParams {
    pub fn asymmetric(bits: u32, scale: f32, zero_point: f32) -> Result<Self> {
        let qp = Self {
            bits,
            symmetric: false,
            granularity: Granularity::PerTensor,
            scale: vec![scale],
            zero_point: vec![zero_point],
            transform: ScaleTransform::Raw,
        };
        qp.validate()?;
        Ok(qp)
    }

    /// Per-channel symmetric parameters along axis 0.
    pub fn symmetric(bits: u32, scales: Vec<f32>) -> Result<Self> {
        let qp = Self {
            bits,
            symmetric: true,
            granularity: Granularity::PerChannel { axis: 0 },
            zero_point: vec![0.0; scales.len()],
            scale: scales,
            transform: ScaleTransform::Raw,
        };
        qp.validate()?;
        Ok(qp)
    }

    pub fn with_transform(mut self, transform: ScaleTransform) -> Self {
        self.transform = transform;
        self
    }

    /// Integer grid bounds `(q_min, q_max)`.
    pub fn grid(&self) -> (f32, f32) {
        grid(self.bits, self.symmetric)
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Zero point actually applied in the forward pass.
    pub fn effective_zero_point(&self, channel: usize) -> f32 {
        if self.symmetric {
            0.0
        } else {
            let (lo, hi) = self.grid();
            self.zero_point[channel].round().clamp(lo, hi)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return Err(Error::Config(format!(
                "bit width {} outside supported range 2..=16",
                self.bits
            )));
        }
        if self.scale.is_empty() || self.scale.len() != self.zero_point.len() {
            return Err(Error::Config(format!(
                "{} scales but {} zero points",
                self.scale.len(),
                self.zero_point.len()
            )));
        }
        if let Some(s) = self.scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!("non-positive quantization scale {s}")));
        }
        if self.symmetric && self.zero_point.iter().any(|&z| z != 0.0) {
            return Err(Error::Config(
                "symmetric parameters with nonzero zero point".into(),
            ));
        }
        if self.granularity == Granularity::PerTensor && self.scale.len() != 1 {
            return Err(Error::Config(format!(
                "per-tensor parameters carry {} scales",
                self.scale.len()
            )));
        }
        Ok(())
    }
}

pub(crate) fn grid(bits: u32, symmetric: bool) -> (f32, f32) {
    if symmetric {
        let m = ((1u32 << (bits - 1)) - 1) as f32;
        (-m, m)
    } else {
        (0.0, ((1u32 << bits) - 1) as f32)
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::Config(format!(
            "bit width {bits} outside supported range 2..=16"
        )));
    }
    Ok(())
}

/// Asymmetric scale and zero point for the range `[lo, hi]`:
/// `S = (hi − lo)/(2ᵇ − 1)`, `Z = clamp(−round(lo/S), 0, 2ᵇ − 1)`.
pub fn asym_params(lo: f32, hi: f32, bits: u32) -> Result<(f32, f32)> {
    check_bits(bits)?;
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::Contract(format!("invalid range [{lo}, {hi}]")));
    }
    if lo == hi {
        return Err(Error::DegenerateRange { lo, hi });
    }
    let levels = ((1u64 << bits) - 1) as f64;
    let span = hi as f64 - lo as f64;
    let scale = (span / levels) as f32;
    // lo/S evaluated as lo·(2ᵇ−1)/(hi−lo) keeps exact ties exact.
    let zero = (-(lo as f64 * levels / span)).round().clamp(0.0, levels) + 0.0; // maps -0 to +0
    Ok((scale, zero as f32))
}

/// [`asym_params`], falling back to `S = 1` on an empty range.
pub fn asym_params_or_unit(lo: f32, hi: f32, bits: u32) -> Result<(f32, f32)> {
    match asym_params(lo, hi, bits) {
        Err(Error::DegenerateRange { lo, .. }) => {
            let (_, qmax) = grid(bits, false);
            Ok((1.0, (-lo).round().clamp(0.0, qmax) + 0.0)) // maps -0 to +0
        }
        other => other,
    }
}

/// Symmetric scale `max(|lo|, |hi|)/(2^{b−1} − 1)`.
pub fn sym_scale(lo: f32, hi: f32, bits: u32) -> Result<f32> {
    check_bits(bits)?;
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Contract(format!("invalid range [{lo}, {hi}]")));
    }
    let magnitude = lo.abs().max(hi.abs());
    if magnitude == 0.0 {
        return Err(Error::DegenerateRange { lo, hi });
    }
    let (_, qmax) = grid(bits, true);
    Ok((magnitude as f64 / qmax as f64) as f32)
}

/// [`sym_scale`], falling back to `S = 1` for an all-zero channel.
pub fn sym_scale_or_unit(lo: f32, hi: f32, bits: u32) -> Result<f32> {
    match sym_scale(lo, hi, bits) {
        Err(Error::DegenerateRange { .. }) => Ok(1.0),
        other => other,
    }
}
