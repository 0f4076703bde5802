//! Integer fake quantization.
//!
//! Activations use per-tensor asymmetric parameters, weights per-output-channel
//! symmetric ones. Rounding is round-half-away-from-zero throughout.

mod fake;
mod observer;
mod params;

pub use fake::{
    fake_quant, fake_quant_asym, fake_quant_sym, fake_quant_var, log2_scale_grad, qparam_grads, ste_backward,
    FakeQuantOutput, QParamGrads, Region,
};
pub use observer::RangeObserver;
pub use params::{
    asym_params, asym_params_or_unit, sym_scale, sym_scale_or_unit, Granularity, QuantParams, ScaleTransform,
};

/// Round to nearest, ties away from zero.
#[inline]
pub fn round_half_away(x: f32) -> f32 {
    x.round()
}
