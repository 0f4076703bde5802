//! Closed-form backward multiply-accumulate counts.
//!
//! For a linear layer the backward pass costs `m·C_in·C_out` for the input
//! gradient plus `m·C_in·u` for the weight gradient, `u` being the number of
//! unfrozen rows; convolutions scale both terms by `k²·H_out·W_out`. Only the
//! two backward matrix products are counted.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freeze::{unfrozen_budget, FreezeMode};
use crate::net::{NetSpec, WeightedLayer};
use crate::ops::{MacCounter, RowMask};

/// `(weight_macs, input_macs)` for a linear layer at unfrozen ratio `r`.
pub fn ops_linear_bwd(c_in: u64, c_out: u64, m: u64, r: f64) -> (u64, u64) {
    let rows = unfrozen_budget(r, c_out);
    (m * c_in * rows, m * c_in * c_out)
}

/// `(weight_macs, input_macs)` for a `k×k` convolution at unfrozen ratio `r`.
pub fn ops_conv_bwd(c_in: u64, c_out: u64, k: u64, h_out: u64, w_out: u64, n: u64, r: f64) -> (u64, u64) {
    let rows = unfrozen_budget(r, c_out);
    let per_row = n * k * k * c_in * h_out * w_out;
    (per_row * rows, per_row * c_out)
}

fn layer_ops(layer: &WeightedLayer, unfrozen: u64, batch: u64) -> (u64, u64) {
    match *layer {
        WeightedLayer::Linear { c_in, c_out } => {
            let (c_in, c_out) = (c_in as u64, c_out as u64);
            (batch * c_in * unfrozen, batch * c_in * c_out)
        }
        WeightedLayer::Conv {
            c_in,
            c_out,
            kernel,
            h_out,
            w_out,
        } => {
            let per_row = batch * (kernel * kernel * c_in * h_out * w_out) as u64;
            (per_row * unfrozen, per_row * c_out as u64)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOps {
    pub layer: usize,
    pub kind: String,
    pub out_channels: usize,
    pub unfrozen_rows: usize,
    pub input_grad: u64,
    pub weight_grad: u64,
    pub theoretical_total: u64,
    pub measured_total: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpsReport {
    pub mode: Option<FreezeMode>,
    pub ratio: f64,
    pub batch: usize,
    pub layers: Vec<LayerOps>,
    /// Backward MACs with every row unfrozen.
    pub dense_total: u64,
    pub total: u64,
    pub measured_total: Option<u64>,
    /// `dense_total / total`.
    pub speedup: f64,
}

impl OpsReport {
    fn from_rows(
        net: &NetSpec,
        batch: usize,
        mode: Option<FreezeMode>,
        ratio: f64,
        unfrozen: impl Fn(usize, &WeightedLayer) -> Result<usize>,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for (id, wl) in net.weighted_layers()? {
            let u = unfrozen(id, &wl)?;
            let (weight_grad, input_grad) = layer_ops(&wl, u as u64, batch as u64);
            layers.push(LayerOps {
                layer: id,
                kind: match wl {
                    WeightedLayer::Linear { .. } => "linear",
                    WeightedLayer::Conv { .. } => "conv",
                }
                .to_string(),
                out_channels: wl.c_out(),
                unfrozen_rows: u,
                input_grad,
                weight_grad,
                theoretical_total: input_grad + weight_grad,
                measured_total: None,
            });
        }
        let dense_total = layers.iter().map(|l| 2 * l.input_grad).sum();
        let total: u64 = layers.iter().map(|l| l.theoretical_total).sum();
        Ok(Self {
            mode,
            ratio,
            batch,
            layers,
            dense_total,
            total,
            measured_total: None,
            speedup: if total == 0 {
                1.0
            } else {
                dense_total as f64 / total as f64
            },
        })
    }

    /// Attaches measured backward totals from live counters.
    pub fn with_measured(mut self, counter: &MacCounter) -> Self {
        let mut sum = 0;
        for l in &mut self.layers {
            let m = counter.layer(l.layer).backward();
            l.measured_total = Some(m);
            sum += m;
        }
        self.measured_total = Some(sum);
        self
    }
}

/// Report with `⌊r·C_out⌋` unfrozen rows in every quantized layer, all rows in
/// layers left in full precision.
pub fn ratio_report(net: &NetSpec, ratio: f64, batch: usize) -> Result<OpsReport> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("unfrozen ratio {ratio} outside [0, 1]")));
    }
    OpsReport::from_rows(net, batch, None, ratio, |id, wl| {
        Ok(if net.layers[id].is_quantized() {
            unfrozen_budget(ratio, wl.c_out() as u64) as usize
        } else {
            wl.c_out()
        })
    })
}

/// Report for concrete masks, using each mask's actual popcount.
pub fn network_report(
    net: &NetSpec,
    mode: Option<FreezeMode>,
    ratio: f64,
    masks: &[RowMask],
    batch: usize,
) -> Result<OpsReport> {
    let quantized = net.quantized_layers();
    if let Some(m) = masks.iter().find(|m| !quantized.contains(&m.layer)) {
        return Err(Error::Config(format!(
            "plan has a mask for layer {}, which is not a quantized layer",
            m.layer
        )));
    }
    OpsReport::from_rows(net, batch, mode, ratio, |id, wl| {
        if !quantized.contains(&id) {
            return Ok(wl.c_out());
        }
        let mask = masks
            .iter()
            .find(|m| m.layer == id)
            .ok_or_else(|| Error::Config(format!("plan has no mask for quantized layer {id}")))?;
        if mask.len() != wl.c_out() {
            return Err(Error::Config(format!(
                "mask for layer {id} has {} rows, layer has {}",
                mask.len(),
                wl.c_out()
            )));
        }
        Ok(mask.popcount())
    })
}

/// One layer whose live counter disagrees with the closed form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacDiff {
    pub layer: usize,
    pub expected_input_grad: u64,
    pub measured_input_grad: u64,
    pub expected_weight_grad: u64,
    pub measured_weight_grad: u64,
}

impl MacDiff {
    pub fn delta(&self) -> i128 {
        (self.measured_input_grad + self.measured_weight_grad) as i128
            - (self.expected_input_grad + self.expected_weight_grad) as i128
    }
}

/// Per-layer differences between a report and live backward counters.
pub fn mac_diffs(report: &OpsReport, measured: &MacCounter) -> Vec<MacDiff> {
    let mut diffs: Vec<MacDiff> = report
        .layers
        .iter()
        .filter_map(|l| {
            let m = measured.layer(l.layer);
            (m.input_grad != l.input_grad || m.weight_grad != l.weight_grad).then_some(MacDiff {
                layer: l.layer,
                expected_input_grad: l.input_grad,
                measured_input_grad: m.input_grad,
                expected_weight_grad: l.weight_grad,
                measured_weight_grad: m.weight_grad,
            })
        })
        .collect();
    for (id, m) in measured.layers() {
        if m.backward() > 0 && !report.layers.iter().any(|l| l.layer == id) {
            diffs.push(MacDiff {
                layer: id,
                expected_input_grad: 0,
                measured_input_grad: m.input_grad,
                expected_weight_grad: 0,
                measured_weight_grad: m.weight_grad,
            });
        }
    }
    diffs
}

/// Fails with every mismatching layer listed.
pub fn reconcile(report: &OpsReport, measured: &MacCounter) -> Result<()> {
    let diffs = mac_diffs(report, measured);
    if diffs.is_empty() {
        return Ok(());
    }
    let lines: Vec<String> = diffs
        .iter()
        .map(|d| {
            format!(
                "layer {}: input {} vs {}, weight {} vs {} (delta {})",
                d.layer,
                d.expected_input_grad,
                d.measured_input_grad,
                d.expected_weight_grad,
                d.measured_weight_grad,
                d.delta()
            )
        })
        .collect();
    Err(Error::Reconcile(lines.join("; ")))
}

impl fmt::Display for OpsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>6} {:>7} {:>9} {:>14} {:>14} {:>14}",
            "layer", "kind", "unfrozen", "input-grad", "weight-grad", "total"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:>6} {:>7} {:>4}/{:<4} {:>14} {:>14} {:>14}",
                l.layer,
                l.kind,
                l.unfrozen_rows,
                l.out_channels,
                l.input_grad,
                l.weight_grad,
                l.theoretical_total
            )?;
        }
        write!(
            f,
            "backward MACs {} of dense {} (speedup {:.4}x)",
            self.total, self.dense_total, self.speedup
        )
    }
}
