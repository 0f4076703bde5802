//! Calibration, quantization-aware training with structured freezing, and
//! evaluation.
//!
//! One training step runs the fake-quantized forward pass, a backward pass
//! that computes every input gradient but only the unfrozen rows of each
//! weight gradient, and then two optimizer updates: momentum SGD for weights,
//! biases and normalization parameters, and Adam for quantization scales and
//! zero points. Weight rows and per-channel weight scales of frozen channels
//! are left untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::network_report;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::freeze::{FreezeMode, FreezePlan};
use crate::net::{forward, ForwardOptions, LayerParams, LayerQuant, Model, Phase, QuantState, NORM_MOMENTUM};
use crate::ops::{MacCounter, RowMask};
use crate::optim::{adam_step, sgd_step, AdamConfig, AdamState, ScaleOptimizer, SgdConfig};
use crate::quant::{asym_params_or_unit, sym_scale_or_unit, QuantParams, RangeObserver, ScaleTransform};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// What a run does with the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TrainMode {
    /// Full precision, no further training.
    Fp,
    /// One more full-precision epoch.
    FpPlus1,
    /// Calibration only.
    Ptq,
    /// Quantization-aware training of every weight.
    Qat,
    /// Quantization-aware training with structured freezing.
    Efqat(FreezeMode),
}

impl TrainMode {
    pub fn is_quantized(self) -> bool {
        !matches!(self, Self::Fp | Self::FpPlus1)
    }

    pub fn trains(self) -> bool {
        !matches!(self, Self::Fp | Self::Ptq)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fp => f.write_str("fp"),
            Self::FpPlus1 => f.write_str("fp+1"),
            Self::Ptq => f.write_str("ptq"),
            Self::Qat => f.write_str("qat"),
            Self::Efqat(m) => write!(f, "efqat-{m}"),
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp" => Ok(Self::Fp),
            "fp+1" => Ok(Self::FpPlus1),
            "ptq" => Ok(Self::Ptq),
            "qat" => Ok(Self::Qat),
            other => match other.strip_prefix("efqat-") {
                Some(m) => Ok(Self::Efqat(m.parse()?)),
                None => Err(Error::Config(format!(
                    "unknown mode `{other}` (expected fp, fp+1, ptq, qat, efqat-cwpl, efqat-cwpn or efqat-lwpn)"
                ))),
            },
        }
    }
}

impl From<TrainMode> for String {
    fn from(m: TrainMode) -> Self {
        m.to_string()
    }
}

impl TryFrom<String> for TrainMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Unfrozen ratio `r`.
    pub ratio: f64,
    /// Samples between freeze-plan refreshes; `None` (written `"never"`)
    /// never refreshes.
    #[serde(with = "freeze_freq_repr")]
    pub freeze_freq: Option<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_opt: SgdConfig,
    pub qparam_opt: AdamConfig,
    pub qparam_transform: ScaleTransform,
    pub calib_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Efqat(FreezeMode::Cwpn),
            ratio: 0.25,
            freeze_freq: Some(4096),
            epochs: 1,
            batch_size: 64,
            weight_opt: SgdConfig {
                lr: 1e-3,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            qparam_opt: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            qparam_transform: ScaleTransform::Raw,
            calib_size: 512,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("ratio {} outside [0, 1]", self.ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.calib_size == 0 {
            return Err(Error::Config("calibration size must be positive".into()));
        }
        if self.freeze_freq == Some(0) {
            return Err(Error::Config("freeze frequency must be at least 1".into()));
        }
        Ok(())
    }

    /// Refresh interval after rounding up to whole batches.
    pub fn effective_freeze_freq(&self) -> Option<u64> {
        let b = self.batch_size as u64;
        self.freeze_freq.map(|f| f.div_ceil(b) * b)
    }
}

mod freeze_freq_repr {
    use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Samples(u64),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(f) => Repr::Samples(*f),
            None => Repr::Word("never".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Samples(f) => Ok(Some(f)),
            Repr::Word(w) if w == "never" => Ok(None),
            Repr::Word(w) => Err(de::Error::custom(format!(
                "freeze_freq must be a sample count or \"never\", got \"{w}\""
            ))),
        }
    }
}

/// Per-step metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub samples_seen: u64,
    pub loss: f32,
    pub eval_accuracy: Option<f64>,
    pub frozen_fraction: f64,
    pub theoretical_bwd_macs: u64,
    pub measured_bwd_macs: u64,
    pub bwd_wall_ns: u64,
    pub refreshed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
}

const EVAL_BATCH: usize = 256;

/// Accuracy and mean loss with the fake-quantized (or full-precision)
/// forward pass and running normalization statistics. Nothing is mutated.
pub fn evaluate(model: &Model, quant: Option<&QuantState>, data: &Dataset) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for idx in data.sequential_batches(EVAL_BATCH) {
        let (x, y) = data.gather(&idx);
        let mut tape = Tape::new();
        let vars = forward(&mut tape, model, x, ForwardOptions::eval(quant))?;
        let logits = tape.value(vars.logits());
        for (row, &label) in logits.rows().zip(&y) {
            if argmax(row) == label {
                correct += 1;
            }
        }
        let loss = tape.cross_entropy(vars.logits(), &y)?;
        loss_sum += tape.value(loss).data()[0] as f64 * y.len() as f64;
    }
    Ok(EvalMetrics {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
        samples: data.len(),
    })
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Post-training quantization parameters: per-channel symmetric weight
/// scales from each row's min/max and per-tensor asymmetric input parameters
/// from the min/max observed over full-precision forward passes on `calib`.
pub fn calibrate(model: &Model, calib: &Dataset) -> Result<QuantState> {
    if calib.is_empty() {
        return Err(Error::Config("calibration set is empty".into()));
    }
    let spec = &model.spec;
    let quantized = spec.quantized_layers();
    let mut observers: BTreeMap<usize, RangeObserver> = quantized
        .iter()
        .map(|&i| (i, RangeObserver::per_tensor()))
        .collect();
    for idx in calib.sequential_batches(EVAL_BATCH) {
        let (x, _) = calib.gather(&idx);
        let mut tape = Tape::new();
        let vars = forward(&mut tape, model, x, ForwardOptions::eval(None))?;
        for (layer, obs) in observers.iter_mut() {
            obs.observe(tape.value(vars.layer_inputs[layer]))?;
        }
    }
    let mut state = QuantState::new();
    for &i in &quantized {
        let w = model.weight(i).expect("quantized layers carry weights");
        let mut wobs = RangeObserver::per_channel(0);
        wobs.observe(w)?;
        let (lo, hi) = wobs.range().expect("observed");
        let scales = lo
            .iter()
            .zip(hi)
            .map(|(&l, &h)| sym_scale_or_unit(l, h, spec.bits_w))
            .collect::<Result<Vec<_>>>()?;
        let (lo, hi) = observers[&i].range().expect("observed");
        let (s, z) = asym_params_or_unit(lo[0], hi[0], spec.bits_a)?;
        state.insert(
            i,
            LayerQuant {
                weight: QuantParams::symmetric(spec.bits_w, scales)?,
                input: QuantParams::asymmetric(spec.bits_a, s, z)?,
            },
        );
    }
    Ok(state)
}

/// The first `n` samples of a seeded permutation of `data`.
pub fn calibration_subset(data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || data.is_empty() {
        return Err(Error::Config("calibration set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCA11_B8A7E);
    let order: Vec<usize> = data.shuffled_batches(data.len(), &mut rng).concat();
    let (x, y) = data.gather(&order[..n.min(data.len())]);
    Dataset::new(x, y, data.classes())
}

#[derive(Clone, Debug)]
struct LayerOptState {
    weight_velocity: Vec<f32>,
    bias_velocity: Vec<f32>,
}

#[derive(Clone, Debug)]
struct QuantOptState {
    weight_scale: ScaleOptimizer,
    input_scale: ScaleOptimizer,
    input_zero_point: AdamState,
    zero_point_grad_steps: u64,
}

/// Mutable training state for one run.
pub struct Trainer {
    pub model: Model,
    pub quant: Option<QuantState>,
    pub plan: Option<FreezePlan>,
    cfg: TrainConfig,
    layer_opt: BTreeMap<usize, LayerOptState>,
    norm_opt: BTreeMap<usize, (Vec<f32>, Vec<f32>)>,
    quant_opt: BTreeMap<usize, QuantOptState>,
    rng: ChaCha8Rng,
    step: usize,
    epoch: usize,
    samples_seen: u64,
    measured: MacCounter,
    theoretical_bwd_macs: u64,
    bwd_wall_ns: u64,
}

impl Trainer {
    /// Quantized modes require `quant`; freezing modes build their initial
    /// plan from the current weights.
    pub fn new(model: Model, quant: Option<QuantState>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode.is_quantized() {
            let q = quant.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "mode {} needs calibrated quantization parameters",
                    cfg.mode
                ))
            })?;
            for i in model.spec.quantized_layers() {
                if !q.contains_key(&i) {
                    return Err(Error::Config(format!(
                        "no quantization parameters for quantized layer {i}"
                    )));
                }
            }
        }
        let plan = match cfg.mode {
            TrainMode::Efqat(mode) => Some(FreezePlan::build(
                mode,
                cfg.ratio,
                cfg.freeze_freq,
                &model.freezable_weights(),
            )?),
            _ => None,
        };
        let mut layer_opt = BTreeMap::new();
        let mut norm_opt = BTreeMap::new();
        for (i, p) in model.params.iter().enumerate() {
            match p {
                LayerParams::Affine { weight, bias } => {
                    layer_opt.insert(
                        i,
                        LayerOptState {
                            weight_velocity: vec![0.0; weight.numel()],
                            bias_velocity: vec![0.0; bias.numel()],
                        },
                    );
                }
                LayerParams::Norm { gamma, beta, .. } => {
                    norm_opt.insert(i, (vec![0.0; gamma.numel()], vec![0.0; beta.numel()]));
                }
                LayerParams::None => {}
            }
        }
        let mut quant_opt = BTreeMap::new();
        let quant = if cfg.mode.is_quantized() { quant } else { None };
        if let Some(q) = &quant {
            for (&i, lq) in q {
                quant_opt.insert(
                    i,
                    QuantOptState {
                        weight_scale: ScaleOptimizer::new(cfg.qparam_transform, &lq.weight.scale),
                        input_scale: ScaleOptimizer::new(cfg.qparam_transform, &lq.input.scale),
                        input_zero_point: AdamState::new(lq.input.zero_point.len()),
                        zero_point_grad_steps: 0,
                    },
                );
            }
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            quant,
            plan,
            cfg,
            layer_opt,
            norm_opt,
            quant_opt,
            rng,
            step: 0,
            epoch: 0,
            samples_seen: 0,
            measured: MacCounter::new(),
            theoretical_bwd_macs: 0,
            bwd_wall_ns: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    /// Cumulative live MAC counters over all steps.
    pub fn measured_macs(&self) -> &MacCounter {
        &self.measured
    }

    pub fn theoretical_bwd_macs(&self) -> u64 {
        self.theoretical_bwd_macs
    }

    pub fn bwd_wall_ns(&self) -> u64 {
        self.bwd_wall_ns
    }

    /// Raw-scale positivity-guard activations so far.
    pub fn scale_clamp_events(&self) -> u64 {
        self.quant_opt
            .values()
            .map(|q| q.weight_scale.clamp_events + q.input_scale.clamp_events)
            .sum()
    }

    /// Per quantized layer, the number of steps in which the input zero point
    /// received a nonzero gradient (only clamped inputs contribute one).
    pub fn zero_point_grad_steps(&self) -> BTreeMap<usize, u64> {
        self.quant_opt
            .iter()
            .map(|(&i, q)| (i, q.zero_point_grad_steps))
            .collect()
    }

    /// Fraction of freezable weight parameters currently frozen.
    pub fn frozen_fraction(&self) -> f64 {
        match &self.plan {
            Some(plan) => 1.0 - plan.summary(&self.model.freezable_weights()).unfrozen_fraction,
            None => 0.0,
        }
    }

    fn current_masks(&self) -> Option<Vec<RowMask>> {
        self.plan.as_ref().map(|p| p.masks().to_vec())
    }

    /// One optimization step on a batch.
    pub fn step(&mut self, x: Tensor, labels: &[usize]) -> Result<StepRecord> {
        let batch = labels.len();
        let masks = self.current_masks();
        let mut tape = Tape::new();
        let vars = forward(
            &mut tape,
            &self.model,
            x,
            ForwardOptions {
                phase: Phase::Train,
                trainable: true,
                quant: self.quant.as_ref(),
                masks: masks.as_deref(),
            },
        )?;
        let loss_var = tape.cross_entropy(vars.logits(), labels)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                loss,
            });
        }

        let forward_macs = tape.macs().clone();
        let started = Instant::now();
        let mut grads = tape.backward(loss_var)?;
        let bwd_ns = started.elapsed().as_nanos() as u64;
        let mut step_macs = grads.macs().clone();
        // Backward counts only: subtract what the forward pass recorded.
        for (id, f) in forward_macs.layers() {
            step_macs.entry(Some(id)).forward -= f.forward;
        }

        let sgd = self.cfg.weight_opt;
        for (i, params) in self.model.params.iter_mut().enumerate() {
            match params {
                LayerParams::Affine { weight, bias } => {
                    let st = self.layer_opt.get_mut(&i).expect("state per affine layer");
                    let gw = grads.take(vars.weights[&i]).expect("weight gradient");
                    let rows = masks
                        .as_ref()
                        .and_then(|ms| ms.iter().find(|m| m.layer == i))
                        .map(|m| (m.bits(), weight.row_len()));
                    sgd_step(weight.data_mut(), gw.data(), &mut st.weight_velocity, &sgd, rows);
                    let gb = grads.take(vars.biases[&i]).expect("bias gradient");
                    sgd_step(bias.data_mut(), gb.data(), &mut st.bias_velocity, &sgd, None);
                }
                LayerParams::Norm { gamma, beta, running } => {
                    let (vg, vb) = self.norm_opt.get_mut(&i).expect("state per norm layer");
                    let gg = grads.take(vars.gammas[&i]).expect("gamma gradient");
                    let gb = grads.take(vars.betas[&i]).expect("beta gradient");
                    sgd_step(gamma.data_mut(), gg.data(), vg, &sgd, None);
                    sgd_step(beta.data_mut(), gb.data(), vb, &sgd, None);
                    if let Some(stats) = vars.batch_stats.get(&i) {
                        let spec_shape = &self.model.spec.shapes()?[i];
                        let count = batch * spec_shape[1..].iter().product::<usize>();
                        let unbias = if count > 1 {
                            count as f32 / (count - 1) as f32
                        } else {
                            1.0
                        };
                        for c in 0..running.mean.len() {
                            running.mean[c] =
                                (1.0 - NORM_MOMENTUM) * running.mean[c] + NORM_MOMENTUM * stats.mean[c];
                            running.var[c] = (1.0 - NORM_MOMENTUM) * running.var[c]
                                + NORM_MOMENTUM * stats.var[c] * unbias;
                        }
                    }
                }
                LayerParams::None => {}
            }
        }

        if let Some(quant) = self.quant.as_mut() {
            let adam = self.cfg.qparam_opt;
            for (&i, lq) in quant.iter_mut() {
                let st = self.quant_opt.get_mut(&i).expect("state per quantized layer");
                let active = masks
                    .as_ref()
                    .and_then(|ms| ms.iter().find(|m| m.layer == i))
                    .map(RowMask::bits);
                let gs = grads.take(vars.weight_scales[&i]).expect("weight scale gradient");
                st.weight_scale
                    .step(&mut lq.weight.scale, gs.data(), &adam, active);

                let gs = grads.take(vars.input_scales[&i]).expect("input scale gradient");
                st.input_scale.step(&mut lq.input.scale, gs.data(), &adam, None);
                let gz = grads
                    .take(vars.input_zero_points[&i])
                    .expect("zero point gradient");
                if gz.data().iter().any(|&g| g != 0.0) {
                    st.zero_point_grad_steps += 1;
                }
                adam_step(
                    &mut lq.input.zero_point,
                    gz.data(),
                    &mut st.input_zero_point,
                    &adam,
                    None,
                );
            }
        }

        let report = network_report(
            &self.model.spec,
            self.plan.as_ref().map(|p| p.mode),
            self.cfg.ratio,
            &masks.clone().unwrap_or_else(|| self.all_rows()),
            batch,
        )?;
        let frozen_fraction = self.frozen_fraction();
        let measured_bwd = step_macs.total().backward();
        self.measured.merge(&step_macs);
        self.theoretical_bwd_macs += report.total;
        self.bwd_wall_ns += bwd_ns;

        self.samples_seen += batch as u64;
        let refreshed = match self.plan.as_mut() {
            Some(plan) => plan.maybe_refresh(batch as u64, &self.model.freezable_weights())?,
            None => false,
        };
        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            samples_seen: self.samples_seen,
            loss,
            eval_accuracy: None,
            frozen_fraction,
            theoretical_bwd_macs: report.total,
            measured_bwd_macs: measured_bwd,
            bwd_wall_ns: bwd_ns,
            refreshed,
        };
        self.step += 1;
        Ok(record)
    }

    fn all_rows(&self) -> Vec<RowMask> {
        self.model
            .freezable_weights()
            .iter()
            .map(|lw| RowMask::all(lw.layer, lw.out_channels))
            .collect()
    }

    /// One pass over `data` in a seeded order.
    pub fn train_epoch(
        &mut self,
        data: &Dataset,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<EpochSummary> {
        let batches = data.shuffled_batches(self.cfg.batch_size, &mut self.rng);
        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;
        for idx in batches {
            let (x, y) = data.gather(&idx);
            let rec = self.step(x, &y)?;
            loss_sum += rec.loss as f64;
            steps += 1;
            on_step(&rec);
        }
        self.epoch += 1;
        Ok(EpochSummary {
            epoch: self.epoch - 1,
            steps,
            mean_loss: loss_sum / steps.max(1) as f64,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

/// Trains a freshly initialized or given model in full precision.
pub fn train_full_precision(
    model: Model,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    opt: SgdConfig,
    seed: u64,
) -> Result<Model> {
    let cfg = TrainConfig {
        mode: TrainMode::FpPlus1,
        epochs,
        batch_size,
        weight_opt: opt,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, None, cfg)?;
    for _ in 0..epochs {
        trainer.train_epoch(data, |_| {})?;
    }
    Ok(trainer.model)
}

/// Outcome of one experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: TrainMode,
    pub ratio: f64,
    pub freeze_freq: Option<u64>,
    pub effective_freeze_freq: Option<u64>,
    pub fp_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ptq_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ptq_loss: Option<f64>,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub mean_train_loss: Option<f64>,
    pub mean_frozen_fraction: f64,
    pub theoretical_bwd_macs: u64,
    pub measured_bwd_macs: u64,
    pub dense_bwd_macs: u64,
    /// Dense over actual backward MACs.
    pub speedup: f64,
    pub bwd_wall_ns: u64,
    pub scale_clamp_events: u64,
    pub refreshes: u64,
}

/// Everything a run produces.
pub struct RunOutput {
    pub summary: RunSummary,
    pub model: Model,
    pub quant: Option<QuantState>,
    pub ptq_quant: Option<QuantState>,
    pub records: Vec<StepRecord>,
}

/// Runs `cfg.mode` starting from a full-precision model: evaluation only
/// (`fp`), one extra epoch (`fp+1`), calibration (`ptq`), or calibration
/// followed by `cfg.epochs` epochs of quantization-aware training.
///
/// Step records reach `on_step` in order; the last record of every epoch
/// carries the evaluation accuracy after that epoch.
pub fn run_experiment(
    fp_model: &Model,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<RunOutput> {
    run_experiment_from(fp_model, None, train, eval, cfg, on_step)
}

/// [`run_experiment`] with optional precomputed post-training quantization
/// parameters; `None` calibrates on a seeded subset of `train`.
pub fn run_experiment_from(
    fp_model: &Model,
    ptq_quant: Option<QuantState>,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<RunOutput> {
    cfg.validate()?;
    let fp = evaluate(fp_model, None, eval)?;
    let (ptq_quant, ptq) = if cfg.mode.is_quantized() {
        let q = match ptq_quant {
            Some(q) => q,
            None => {
                let calib = calibration_subset(train, cfg.calib_size, cfg.seed)?;
                calibrate(fp_model, &calib)?
            }
        };
        let m = evaluate(fp_model, Some(&q), eval)?;
        (Some(q), Some(m))
    } else {
        (None, None)
    };

    let mut records = Vec::new();
    let (model, quant, trainer_stats) = if cfg.mode.trains() {
        let quant = ptq_quant.clone();
        let mut trainer = Trainer::new(fp_model.clone(), quant, cfg.clone())?;
        let epochs = if cfg.mode == TrainMode::FpPlus1 {
            1
        } else {
            cfg.epochs
        };
        for _ in 0..epochs {
            let mut pending: Option<StepRecord> = None;
            trainer.train_epoch(train, |r| {
                if let Some(prev) = pending.replace(r.clone()) {
                    on_step(&prev);
                    records.push(prev);
                }
            })?;
            if let Some(mut last) = pending {
                let m = evaluate(&trainer.model, trainer.quant.as_ref(), eval)?;
                last.eval_accuracy = Some(m.accuracy);
                on_step(&last);
                records.push(last);
            }
        }
        let stats = (
            trainer.theoretical_bwd_macs(),
            trainer.measured_macs().total().backward(),
            trainer.bwd_wall_ns(),
            trainer.scale_clamp_events(),
            trainer.plan.as_ref().map_or(0, |p| p.refreshes),
        );
        (trainer.model, trainer.quant, Some(stats))
    } else {
        (fp_model.clone(), ptq_quant.clone(), None)
    };

    let final_metrics = evaluate(&model, quant.as_ref(), eval)?;
    let per_sample_dense = crate::cost::ratio_report(&model.spec, 1.0, 1)?.dense_total;
    let samples: u64 = records.last().map_or(0, |r| r.samples_seen);
    let dense_bwd_macs = per_sample_dense * samples;
    let (theoretical, measured, wall, clamps, refreshes) = trainer_stats.unwrap_or((0, 0, 0, 0, 0));
    let summary = RunSummary {
        mode: cfg.mode,
        ratio: cfg.ratio,
        freeze_freq: cfg.freeze_freq,
        effective_freeze_freq: cfg.effective_freeze_freq(),
        fp_accuracy: fp.accuracy,
        ptq_accuracy: ptq.map(|m| m.accuracy),
        ptq_loss: ptq.map(|m| m.loss),
        final_accuracy: final_metrics.accuracy,
        final_loss: final_metrics.loss,
        steps: records.len(),
        mean_train_loss: (!records.is_empty())
            .then(|| records.iter().map(|r| r.loss as f64).sum::<f64>() / records.len() as f64),
        mean_frozen_fraction: if records.is_empty() {
            0.0
        } else {
            records.iter().map(|r| r.frozen_fraction).sum::<f64>() / records.len() as f64
        },
        theoretical_bwd_macs: theoretical,
        measured_bwd_macs: measured,
        dense_bwd_macs,
        speedup: if theoretical == 0 {
            1.0
        } else {
            dense_bwd_macs as f64 / theoretical as f64
        },
        bwd_wall_ns: wall,
        scale_clamp_events: clamps,
        refreshes,
    };
    Ok(RunOutput {
        summary,
        model,
        quant,
        ptq_quant,
        records,
    })
}
