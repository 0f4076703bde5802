use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Granularity;

/// Running min/max of everything observed, per tensor or per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeObserver {
    granularity: Granularity,
    min: Vec<f32>,
    max: Vec<f32>,
}

impl RangeObserver {
    pub fn new(granularity: Granularity) -> Self {
        Self {
            granularity,
            min: Vec::new(),
            max: Vec::new(),
        }
    }

    pub fn per_tensor() -> Self {
        Self::new(Granularity::PerTensor)
    }

    pub fn per_channel(axis: usize) -> Self {
        Self::new(Granularity::PerChannel { axis })
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }

    /// `(min, max)` per slice, or `None` before the first observation.
    pub fn range(&self) -> Option<(&[f32], &[f32])> {
        (!self.is_empty()).then_some((&self.min, &self.max))
    }

    pub fn observe(&mut self, t: &Tensor) -> Result<()> {
        if t.numel() == 0 {
            return Err(Error::Contract("cannot observe an empty tensor".into()));
        }
        let (channels, inner) = match self.granularity {
            Granularity::PerTensor => (1, t.numel()),
            Granularity::PerChannel { axis } => {
                if axis >= t.ndim() {
                    return Err(Error::Contract(format!(
                        "channel axis {axis} out of range for shape {:?}",
                        t.shape()
                    )));
                }
                (t.shape()[axis], t.shape()[axis + 1..].iter().product())
            }
        };
        if self.is_empty() {
            self.min = vec![f32::INFINITY; channels];
            self.max = vec![f32::NEG_INFINITY; channels];
        } else if self.min.len() != channels {
            return Err(Error::Contract(format!(
                "observer tracks {} channels, tensor has {channels}",
                self.min.len()
            )));
        }
        for (i, &v) in t.data().iter().enumerate() {
            let c = (i / inner) % channels;
            self.min[c] = self.min[c].min(v);
            self.max[c] = self.max[c].max(v);
        }
        Ok(())
    }
}
