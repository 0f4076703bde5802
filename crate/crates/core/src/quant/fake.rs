use crate::error::{Error, Result};
use crate::tape::{BackwardRule, Tape, Var};
use crate::tensor::Tensor;

use super::{round_half_away, Granularity, QuantParams};

/// Where an element landed relative to the integer grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Low,
    In,
    High,
}

#[derive(Clone, Debug)]
pub struct FakeQuantOutput {
    /// Dequantized values `S·(q − Z)`.
    pub output: Tensor,
    /// Integer codes `q`.
    pub codes: Vec<f32>,
    pub regions: Vec<Region>,
}

fn layout(t: &Tensor, qp: &QuantParams) -> Result<(usize, usize)> {
    match qp.granularity {
        Granularity::PerTensor => Ok((1, t.numel())),
        Granularity::PerChannel { axis } => {
            if axis >= t.ndim() || t.shape()[axis] != qp.channels() {
                return Err(Error::Config(format!(
                    "{} per-channel scales along axis {axis} do not fit tensor shape {:?}",
                    qp.channels(),
                    t.shape()
                )));
            }
            Ok((qp.channels(), t.shape()[axis + 1..].iter().product()))
        }
    }
}

#[inline]
fn quantize_one(x: f32, scale: f32, zero: f32, lo: f32, hi: f32) -> (f32, Region) {
    let v = round_half_away(x / scale) + zero;
    if v < lo {
        (lo, Region::Low)
    } else if v > hi {
        (hi, Region::High)
    } else {
        (v, Region::In)
    }
}

/// Quantize-dequantize under `qp`, whichever symmetry it carries.
pub fn fake_quant(x: &Tensor, qp: &QuantParams) -> Result<FakeQuantOutput> {
    let (channels, inner) = layout(x, qp)?;
    let (lo, hi) = qp.grid();
    let zeros: Vec<f32> = (0..channels).map(|c| qp.effective_zero_point(c)).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut codes = Vec::with_capacity(n);
    let mut regions = Vec::with_capacity(n);
    for (i, &v) in x.data().iter().enumerate() {
        let c = (i / inner) % channels;
        let (s, z) = (qp.scale[c], zeros[c]);
        let (q, region) = quantize_one(v, s, z, lo, hi);
        out.push(s * (q - z));
        codes.push(q);
        regions.push(region);
    }
    Ok(FakeQuantOutput {
        output: Tensor::new(x.shape().to_vec(), out)?,
        codes,
        regions,
    })
}

/// Asymmetric (activation) fake quantization onto `[0, 2ᵇ − 1]`.
pub fn fake_quant_asym(x: &Tensor, qp: &QuantParams) -> Result<FakeQuantOutput> {
    if qp.symmetric {
        return Err(Error::Config("fake_quant_asym given symmetric parameters".into()));
    }
    fake_quant(x, qp)
}

/// Symmetric (weight) fake quantization onto `[−2^{b−1} + 1, 2^{b−1} − 1]`.
pub fn fake_quant_sym(w: &Tensor, qp: &QuantParams) -> Result<FakeQuantOutput> {
    if !qp.symmetric {
        return Err(Error::Config("fake_quant_sym given asymmetric parameters".into()));
    }
    fake_quant(w, qp)
}

/// Straight-through estimate: the upstream gradient passes where the input
/// was inside the grid and is zeroed where it was clamped.
pub fn ste_backward(d_out: &Tensor, regions: &[Region]) -> Tensor {
    let data = d_out
        .data()
        .iter()
        .zip(regions)
        .map(|(&g, &r)| if r == Region::In { g } else { 0.0 })
        .collect();
    Tensor::new(d_out.shape().to_vec(), data).expect("shape preserved")
}

/// Gradients of the loss with respect to the raw scales and zero points.
#[derive(Clone, Debug, PartialEq)]
pub struct QParamGrads {
    pub scale: Vec<f32>,
    pub zero_point: Vec<f32>,
}

/// Scale and zero-point gradients under the straight-through convention.
///
/// Per element: inside the grid `∂x̃/∂S = round(x/S) − x/S` and `∂x̃/∂Z = 0`;
/// clamped low `∂x̃/∂S = q_min − Z`, clamped high `∂x̃/∂S = q_max − Z`, and
/// `∂x̃/∂Z = −S` in both clamped cases. Symmetric parameters get a zero `dZ`.
pub fn qparam_grads(d_out: &Tensor, x: &Tensor, qp: &QuantParams) -> Result<QParamGrads> {
    if d_out.shape() != x.shape() {
        return Err(Error::Dimension {
            op: "qparam_grads",
            lhs: d_out.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let (channels, inner) = layout(x, qp)?;
    let (lo, hi) = qp.grid();
    let mut ds = vec![0.0f64; channels];
    let mut dz = vec![0.0f64; channels];
    for (i, (&v, &g)) in x.data().iter().zip(d_out.data()).enumerate() {
        let c = (i / inner) % channels;
        let (s, z) = (qp.scale[c], qp.effective_zero_point(c));
        let (q, region) = quantize_one(v, s, z, lo, hi);
        let g = g as f64;
        match region {
            Region::In => ds[c] += g * ((q - z) as f64 - v as f64 / s as f64),
            Region::Low | Region::High => {
                ds[c] += g * (q - z) as f64;
                dz[c] -= g * s as f64;
            }
        }
    }
    if qp.symmetric {
        dz.iter_mut().for_each(|d| *d = 0.0);
    }
    Ok(QParamGrads {
        scale: ds.into_iter().map(|d| d as f32).collect(),
        zero_point: dz.into_iter().map(|d| d as f32).collect(),
    })
}

/// Chain rule from `∂L/∂S` to `∂L/∂log₂S`.
pub fn log2_scale_grad(d_scale: f32, scale: f32) -> f32 {
    (d_scale as f64 * scale as f64 * std::f64::consts::LN_2) as f32
}

struct FakeQuantRule {
    qp: QuantParams,
    regions: Vec<Region>,
    has_zero_point: bool,
}

impl BackwardRule for FakeQuantRule {
    fn backward(
        &self,
        grad_out: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let dx = ste_backward(grad_out, &self.regions);
        let g = qparam_grads(grad_out, x, &self.qp)?;
        let shape = inputs[1].shape().to_vec();
        let mut out = vec![Some(dx), Some(Tensor::new(shape.clone(), g.scale)?)];
        if self.has_zero_point {
            out.push(Some(Tensor::new(shape, g.zero_point)?));
        }
        Ok(out)
    }
}

/// Records fake quantization of `x` on the tape. `scale` (and `zero_point`,
/// for asymmetric parameters) are the leaves that receive the
/// quantization-parameter gradients; their values must match `qp`.
pub fn fake_quant_var(
    tape: &mut Tape,
    x: Var,
    scale: Var,
    zero_point: Option<Var>,
    qp: &QuantParams,
) -> Result<Var> {
    if tape.value(scale).data() != qp.scale.as_slice() {
        return Err(Error::Contract(
            "scale leaf does not match the quantization parameters".into(),
        ));
    }
    let fq = fake_quant(tape.value(x), qp)?;
    let mut inputs = vec![x, scale];
    inputs.extend(zero_point);
    let rule = FakeQuantRule {
        qp: qp.clone(),
        regions: fq.regions,
        has_zero_point: zero_point.is_some(),
    };
    Ok(tape.custom(&inputs, fq.output, Box::new(rule)))
}
