//! Block importance and structured freezing plans.
//!
//! A block's importance is the mean absolute value of its weights. Blocks are
//! output channels (rows) for the channel-wise modes and whole layers for the
//! layer-wise mode. Ranking is by descending importance with ties broken by
//! `(layer, channel)` ascending, so every plan is a deterministic function of
//! the weights.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::RowMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezeMode {
    /// Channel-wise, budget per layer.
    Cwpl,
    /// Channel-wise, budget across the network.
    Cwpn,
    /// Layer-wise, budget across the network.
    Lwpn,
}

impl fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cwpl => "cwpl",
            Self::Cwpn => "cwpn",
            Self::Lwpn => "lwpn",
        })
    }
}

impl std::str::FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cwpl" => Ok(Self::Cwpl),
            "cwpn" => Ok(Self::Cwpn),
            "lwpn" => Ok(Self::Lwpn),
            other => Err(Error::Config(format!("unknown freeze mode `{other}`"))),
        }
    }
}

/// Row-major weights of one freezable layer, `out_channels` rows.
#[derive(Clone, Copy, Debug)]
pub struct LayerWeights<'a> {
    pub layer: usize,
    pub out_channels: usize,
    pub data: &'a [f32],
}

impl<'a> LayerWeights<'a> {
    pub fn new(layer: usize, out_channels: usize, data: &'a [f32]) -> Result<Self> {
        if out_channels == 0 || data.is_empty() || !data.len().is_multiple_of(out_channels) {
            return Err(Error::Config(format!(
                "layer {layer}: {} weights cannot form {out_channels} equal rows",
                data.len()
            )));
        }
        Ok(Self {
            layer,
            out_channels,
            data,
        })
    }

    pub fn row_len(&self) -> usize {
        self.data.len() / self.out_channels
    }

    pub fn row(&self, c: usize) -> &'a [f32] {
        let n = self.row_len();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Mean absolute value of a block.
pub fn block_importance(block: &[f32]) -> Result<f32> {
    if block.is_empty() {
        return Err(Error::Contract("importance of an empty block".into()));
    }
    let sum: f64 = block.iter().map(|w| w.abs() as f64).sum();
    Ok((sum / block.len() as f64) as f32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub layer: usize,
    pub channel: usize,
    pub importance: f32,
    pub size: usize,
}

pub fn channel_importance(layers: &[LayerWeights<'_>]) -> Vec<ImportanceEntry> {
    layers
        .iter()
        .flat_map(|lw| {
            (0..lw.out_channels).map(move |c| ImportanceEntry {
                layer: lw.layer,
                channel: c,
                importance: block_importance(lw.row(c)).expect("rows are nonempty"),
                size: lw.row_len(),
            })
        })
        .collect()
}

fn rank(a: &ImportanceEntry, b: &ImportanceEntry) -> Ordering {
    b.importance
        .total_cmp(&a.importance)
        .then(a.layer.cmp(&b.layer))
        .then(a.channel.cmp(&b.channel))
}

/// `⌊ratio·n⌋`, tolerant of `ratio·n` landing a hair below an integer.
pub fn unfrozen_budget(ratio: f64, n: u64) -> u64 {
    ((ratio * n as f64) + 1e-9).floor().min(n as f64) as u64
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("unfrozen ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

/// Per layer, unfreezes the `⌊r·C_out⌋` most important channels.
pub fn plan_cwpl(layers: &[LayerWeights<'_>], ratio: f64) -> Result<Vec<RowMask>> {
    check_ratio(ratio)?;
    Ok(layers
        .iter()
        .map(|lw| {
            let mut entries = channel_importance(std::slice::from_ref(lw));
            entries.sort_by(rank);
            let k = unfrozen_budget(ratio, lw.out_channels as u64) as usize;
            let chosen: Vec<usize> = entries[..k].iter().map(|e| e.channel).collect();
            RowMask::from_indices(lw.layer, lw.out_channels, &chosen)
        })
        .collect())
}

fn total_params(layers: &[LayerWeights<'_>]) -> u64 {
    layers.iter().map(|lw| lw.data.len() as u64).sum()
}

/// Ranks every channel of every layer together and unfreezes greedily while
/// the unfrozen parameter count stays within `⌊r·total⌋`, stopping at the
/// first channel that would overflow.
pub fn plan_cwpn(layers: &[LayerWeights<'_>], ratio: f64) -> Result<Vec<RowMask>> {
    check_ratio(ratio)?;
    let budget = unfrozen_budget(ratio, total_params(layers));
    let mut entries = channel_importance(layers);
    entries.sort_by(rank);
    let mut masks: Vec<RowMask> = layers
        .iter()
        .map(|lw| RowMask::none(lw.layer, lw.out_channels))
        .collect();
    let mut keep: Vec<Vec<bool>> = masks.iter().map(|m| m.bits().to_vec()).collect();
    let mut used = 0u64;
    for e in &entries {
        if used + e.size as u64 > budget {
            break;
        }
        used += e.size as u64;
        let idx = layers
            .iter()
            .position(|lw| lw.layer == e.layer)
            .expect("entry from layers");
        keep[idx][e.channel] = true;
    }
    for (m, k) in masks.iter_mut().zip(keep) {
        *m = RowMask::new(m.layer, k);
    }
    Ok(masks)
}

/// Ranks whole layers by importance and unfreezes them greedily under the
/// `⌊r·total⌋` parameter budget.
pub fn plan_lwpn(layers: &[LayerWeights<'_>], ratio: f64) -> Result<Vec<RowMask>> {
    check_ratio(ratio)?;
    let budget = unfrozen_budget(ratio, total_params(layers));
    let mut entries: Vec<ImportanceEntry> = layers
        .iter()
        .map(|lw| {
            Ok(ImportanceEntry {
                layer: lw.layer,
                channel: 0,
                importance: block_importance(lw.data)?,
                size: lw.data.len(),
            })
        })
        .collect::<Result<_>>()?;
    entries.sort_by(rank);
    let mut unfrozen = Vec::new();
    let mut used = 0u64;
    for e in &entries {
        if used + e.size as u64 > budget {
            break;
        }
        used += e.size as u64;
        unfrozen.push(e.layer);
    }
    Ok(layers
        .iter()
        .map(|lw| {
            if unfrozen.contains(&lw.layer) {
                RowMask::all(lw.layer, lw.out_channels)
            } else {
                RowMask::none(lw.layer, lw.out_channels)
            }
        })
        .collect())
}

pub fn plan_masks(mode: FreezeMode, layers: &[LayerWeights<'_>], ratio: f64) -> Result<Vec<RowMask>> {
    match mode {
        FreezeMode::Cwpl => plan_cwpl(layers, ratio),
        FreezeMode::Cwpn => plan_cwpn(layers, ratio),
        FreezeMode::Lwpn => plan_lwpn(layers, ratio),
    }
}

/// Current frozen set and the refresh schedule that maintains it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub mode: FreezeMode,
    pub ratio: f64,
    /// Samples between importance recomputations; `None` never refreshes.
    pub refresh_interval: Option<u64>,
    pub samples_since_refresh: u64,
    pub refreshes: u64,
    masks: Vec<RowMask>,
}

impl FreezePlan {
    pub fn build(
        mode: FreezeMode,
        ratio: f64,
        refresh_interval: Option<u64>,
        layers: &[LayerWeights<'_>],
    ) -> Result<Self> {
        if refresh_interval == Some(0) {
            return Err(Error::Config("freeze refresh interval must be at least 1".into()));
        }
        Ok(Self {
            mode,
            ratio,
            refresh_interval,
            samples_since_refresh: 0,
            refreshes: 0,
            masks: plan_masks(mode, layers, ratio)?,
        })
    }

    pub fn masks(&self) -> &[RowMask] {
        &self.masks
    }

    pub fn mask(&self, layer: usize) -> Option<&RowMask> {
        self.masks.iter().find(|m| m.layer == layer)
    }

    /// Counts `batch` more samples; after the count reaches the refresh
    /// interval the masks are rebuilt from `layers` and the count restarts.
    /// Returns whether a refresh happened.
    pub fn maybe_refresh(&mut self, batch: u64, layers: &[LayerWeights<'_>]) -> Result<bool> {
        self.samples_since_refresh += batch;
        match self.refresh_interval {
            Some(f) if self.samples_since_refresh >= f => {
                self.masks = plan_masks(self.mode, layers, self.ratio)?;
                self.samples_since_refresh = 0;
                self.refreshes += 1;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    pub fn summary(&self, layers: &[LayerWeights<'_>]) -> PlanSummary {
        let rows: Vec<LayerPlanSummary> = layers
            .iter()
            .map(|lw| {
                let unfrozen = self.mask(lw.layer).map_or(0, RowMask::popcount);
                LayerPlanSummary {
                    layer: lw.layer,
                    out_channels: lw.out_channels,
                    unfrozen_channels: unfrozen,
                    params: lw.data.len() as u64,
                    unfrozen_params: (unfrozen * lw.row_len()) as u64,
                }
            })
            .collect();
        let total: u64 = rows.iter().map(|r| r.params).sum();
        let unfrozen: u64 = rows.iter().map(|r| r.unfrozen_params).sum();
        PlanSummary {
            mode: self.mode,
            ratio: self.ratio,
            unfrozen_fraction: if total == 0 {
                0.0
            } else {
                unfrozen as f64 / total as f64
            },
            layers: rows,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlanSummary {
    pub layer: usize,
    pub out_channels: usize,
    pub unfrozen_channels: usize,
    pub params: u64,
    pub unfrozen_params: u64,
}

/// Human- and machine-readable view of a plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub mode: FreezeMode,
    pub ratio: f64,
    pub unfrozen_fraction: f64,
    pub layers: Vec<LayerPlanSummary>,
}

impl fmt::Display for PlanSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode {} ratio {}", self.mode, self.ratio)?;
        writeln!(
            f,
            "{:>6} {:>10} {:>10} {:>10}",
            "layer", "channels", "unfrozen", "params"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:>6} {:>10} {:>10} {:>10}",
                l.layer, l.out_channels, l.unfrozen_channels, l.params
            )?;
        }
        write!(f, "unfrozen parameter fraction {:.4}", self.unfrozen_fraction)
    }
}
