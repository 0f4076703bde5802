//! Subcommand implementations.

use std::fs::File;
use std::io::{LineWriter, Write};
use std::path::{Path, PathBuf};

use efqat_core::cost::{network_report, ratio_report, OpsReport};
use efqat_core::freeze::{plan_masks, FreezePlan};
use efqat_core::net::{Model, QuantState};
use efqat_core::trainer::{
    evaluate, run_experiment_from, RunSummary, StepRecord, TrainConfig, TrainMode, Trainer,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{net_mismatch, Checkpoint, CheckpointKind, Metadata};
use crate::config::{Overrides, Resolved};
use crate::error::{CliError, Result};

/// `println!` that ignores a closed stdout, e.g. when piped into `head`.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

/// Unfrozen ratios reported by `cost`.
pub const RATIO_GRID: [f64; 6] = [0.0, 0.05, 0.1, 0.25, 0.5, 1.0];

pub const ACCURACY_HEADER: [&str; 8] = [
    "mode",
    "ratio",
    "freeze_freq",
    "seed",
    "fp_accuracy",
    "ptq_accuracy",
    "final_accuracy",
    "steps",
];

pub const SPEEDUP_HEADER: [&str; 8] = [
    "mode",
    "ratio",
    "seed",
    "speedup",
    "dense_bwd_macs",
    "theoretical_bwd_macs",
    "measured_bwd_macs",
    "bwd_wall_ms",
];

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    #[serde(flatten)]
    pub summary: RunSummary,
    /// Digest of the checkpoint the run wrote.
    pub checkpoint: String,
    /// Digest of the checkpoint the run started from.
    pub parent: String,
}

fn warn(msg: impl std::fmt::Display) {
    eprintln!("warning: {msg}");
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(CliError::io("write", path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("records serialize");
    text.push('\n');
    write_file(path, text)
}

/// Line-delimited JSON step records; the first write error is kept and
/// reported by [`MetricsWriter::finish`].
struct MetricsWriter {
    path: PathBuf,
    out: LineWriter<File>,
    error: Option<std::io::Error>,
}

impl MetricsWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(CliError::io("create", path.clone()))?;
        Ok(Self {
            path,
            out: LineWriter::new(file),
            error: None,
        })
    }

    fn write(&mut self, rec: &StepRecord) {
        if self.error.is_none() {
            let line = serde_json::to_string(rec).expect("records serialize");
            if let Err(e) = writeln!(self.out, "{line}") {
                self.error = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<()> {
        let flushed = self.out.flush();
        match self.error.take().map_or(flushed, Err) {
            Ok(()) => Ok(()),
            Err(e) => Err(CliError::io("write", self.path)(e)),
        }
    }
}

/// Starting point of a run: a loaded checkpoint or a freshly trained
/// full-precision model.
struct Init {
    model: Model,
    quant: Option<QuantState>,
    digest: String,
}

fn load_matching(r: &Resolved, path: &Path) -> Result<(Checkpoint, String)> {
    let (ck, digest) = Checkpoint::load(path)?;
    if let Some(diff) = net_mismatch(r.cfg.net(), &ck.model.spec) {
        return Err(CliError::Checkpoint {
            path: path.into(),
            msg: format!("network does not match the configured one: {diff} (checkpoint vs config)"),
        });
    }
    Ok((ck, digest))
}

fn initial(r: &Resolved, checkpoint: Option<&Path>, out: &Path) -> Result<Init> {
    if let Some(path) = checkpoint {
        let (ck, digest) = load_matching(r, path)?;
        return Ok(Init {
            model: ck.model,
            quant: ck.quant,
            digest,
        });
    }
    let p = &r.cfg.pretrain;
    let seed = r.cfg.train.seed;
    let cfg = TrainConfig {
        mode: TrainMode::FpPlus1,
        epochs: p.epochs,
        batch_size: r.cfg.train.batch_size,
        weight_opt: p.optimizer(),
        seed,
        ..TrainConfig::default()
    };
    eprintln!("training the full-precision model for {} epochs", p.epochs);
    let mut trainer = Trainer::new(Model::init(r.cfg.net().clone(), seed)?, None, cfg.clone())?;
    let mut metrics = MetricsWriter::create(out.join("fp_metrics.jsonl"))?;
    let trained = (0..p.epochs).try_for_each(|_| {
        trainer
            .train_epoch(&r.train, |rec| metrics.write(rec))
            .map(|_| ())
    });
    metrics.finish()?;
    trained?;
    let accuracy = evaluate(&trainer.model, None, &r.eval)?.accuracy;
    let ck = Checkpoint {
        meta: Metadata {
            kind: CheckpointKind::Fp,
            mode: TrainMode::Fp,
            parent: None,
            train: Some(cfg),
            eval_accuracy: Some(accuracy),
        },
        model: trainer.model,
        quant: None,
    };
    let digest = ck.save(&out.join("fp.ckpt"))?;
    Ok(Init {
        model: ck.model,
        quant: None,
        digest,
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn print_summary(s: &RunSummary, out: &Path) {
    say!("mode {} ratio {}", s.mode, s.ratio);
    say!("fp accuracy     {}", pct(s.fp_accuracy));
    if let Some(a) = s.ptq_accuracy {
        say!("ptq accuracy    {}", pct(a));
    }
    say!("final accuracy  {}", pct(s.final_accuracy));
    if s.steps > 0 {
        say!(
            "backward MACs   {} of dense {} (speedup {:.4}x), measured {}",
            s.theoretical_bwd_macs,
            s.dense_bwd_macs,
            s.speedup,
            s.measured_bwd_macs
        );
        say!(
            "backward time   {:.1} ms over {} steps",
            s.bwd_wall_ns as f64 / 1e6,
            s.steps
        );
    }
    say!("outputs in {}", out.display());
}

pub fn calibrate(ov: &Overrides, checkpoint: Option<&Path>) -> Result<()> {
    let mut r = Resolved::new(ov)?;
    r.cfg.train.mode = TrainMode::Ptq;
    let cfg = r.cfg.train.clone();
    if cfg.calib_size == 1 {
        warn("calibration size 1: every activation range comes from a single sample and will be narrow");
    }
    if cfg.calib_size > r.train.len() {
        warn(format!(
            "calibration size {} exceeds the {} training samples; using all of them",
            cfg.calib_size,
            r.train.len()
        ));
    }
    let out = r.prepare_out()?.to_path_buf();
    let init = initial(&r, checkpoint, &out)?;
    let run = run_experiment_from(&init.model, None, &r.train, &r.eval, &cfg, |_| {})?;
    let ck = Checkpoint {
        meta: Metadata {
            kind: CheckpointKind::Ptq,
            mode: TrainMode::Ptq,
            parent: Some(init.digest.clone()),
            train: Some(cfg.clone()),
            eval_accuracy: run.summary.ptq_accuracy,
        },
        model: run.model,
        quant: run.ptq_quant,
    };
    let digest = ck.save(&out.join("ptq.ckpt"))?;
    write_json(
        &out.join("summary.json"),
        &RunRecord {
            seed: cfg.seed,
            summary: run.summary.clone(),
            checkpoint: digest.clone(),
            parent: init.digest,
        },
    )?;
    print_summary(&run.summary, &out);
    say!(
        "ptq checkpoint  {} (sha256 {digest})",
        out.join("ptq.ckpt").display()
    );
    Ok(())
}

pub fn train(ov: &Overrides, checkpoint: Option<&Path>, dump_plan: bool) -> Result<()> {
    let r = Resolved::new(ov)?;
    let cfg = r.cfg.train.clone();
    let out = r.prepare_out()?.to_path_buf();
    let init = initial(&r, checkpoint, &out)?;
    if let (true, TrainMode::Efqat(mode)) = (dump_plan, cfg.mode) {
        let layers = init.model.freezable_weights();
        let plan = FreezePlan::build(mode, cfg.ratio, cfg.effective_freeze_freq(), &layers)?.summary(&layers);
        write_json(&out.join("plan.json"), &plan)?;
        write_file(&out.join("plan.txt"), format!("{plan}\n"))?;
    }
    let given = if cfg.mode.is_quantized() {
        init.quant.clone()
    } else {
        None
    };
    let calibrated_here = cfg.mode.is_quantized() && given.is_none();

    let mut metrics = MetricsWriter::create(out.join("metrics.jsonl"))?;
    let run = run_experiment_from(&init.model, given, &r.train, &r.eval, &cfg, |rec| {
        metrics.write(rec)
    });
    metrics.finish()?;
    let run = run?;

    if calibrated_here {
        let ptq = Checkpoint {
            meta: Metadata {
                kind: CheckpointKind::Ptq,
                mode: TrainMode::Ptq,
                parent: Some(init.digest.clone()),
                train: Some(cfg.clone()),
                eval_accuracy: run.summary.ptq_accuracy,
            },
            model: init.model.clone(),
            quant: run.ptq_quant.clone(),
        };
        ptq.save(&out.join("ptq.ckpt"))?;
    }
    let kind = match cfg.mode {
        m if m.trains() => CheckpointKind::Trained,
        m if m.is_quantized() => CheckpointKind::Ptq,
        _ => CheckpointKind::Fp,
    };
    let ck = Checkpoint {
        meta: Metadata {
            kind,
            mode: cfg.mode,
            parent: Some(init.digest.clone()),
            train: Some(cfg.clone()),
            eval_accuracy: Some(run.summary.final_accuracy),
        },
        model: run.model,
        quant: run.quant,
    };
    let digest = ck.save(&out.join("final.ckpt"))?;
    write_json(
        &out.join("summary.json"),
        &RunRecord {
            seed: cfg.seed,
            summary: run.summary.clone(),
            checkpoint: digest,
            parent: init.digest,
        },
    )?;
    print_summary(&run.summary, &out);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub checkpoint: String,
    pub quantized: bool,
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
}

pub fn eval(ov: &Overrides, checkpoint: &Path) -> Result<()> {
    let r = Resolved::new(ov)?;
    let (ck, digest) = load_matching(&r, checkpoint)?;
    let m = evaluate(&ck.model, ck.quant.as_ref(), &r.eval)?;
    let out = r.prepare_out()?;
    let rec = EvalRecord {
        checkpoint: digest,
        quantized: ck.quant.is_some(),
        accuracy: m.accuracy,
        loss: m.loss,
        samples: m.samples,
    };
    write_json(&out.join("eval.json"), &rec)?;
    say!(
        "accuracy {} loss {:.6} on {} samples",
        pct(m.accuracy),
        m.loss,
        m.samples
    );
    Ok(())
}

pub fn cost(ov: &Overrides, checkpoint: Option<&Path>, dump_plan: bool) -> Result<()> {
    let r = Resolved::new(ov)?;
    let net = r.cfg.net();
    let batch = r.cfg.train.batch_size;
    let model = checkpoint
        .map(|p| load_matching(&r, p).map(|(ck, _)| ck.model))
        .transpose()?;
    let planner = match r.cfg.train.mode {
        TrainMode::Efqat(mode) => Some(mode),
        _ => None,
    };
    let out = r.prepare_out()?;

    let mut reports: Vec<OpsReport> = Vec::new();
    let mut plans = Vec::new();
    for ratio in RATIO_GRID {
        let report = match (planner, &model) {
            (Some(mode), Some(model)) => {
                let layers = model.freezable_weights();
                let masks = plan_masks(mode, &layers, ratio)?;
                if dump_plan {
                    plans.push(FreezePlan::build(mode, ratio, None, &layers)?.summary(&layers));
                }
                network_report(net, Some(mode), ratio, &masks, batch)?
            }
            _ => ratio_report(net, ratio, batch)?,
        };
        reports.push(report);
    }

    match (planner, &model) {
        (Some(mode), Some(_)) => {
            say!("backward MACs per batch of {batch}, {mode} plans from the checkpoint weights")
        }
        _ => say!("backward MACs per batch of {batch}, floor(r * C_out) unfrozen rows per quantized layer"),
    }
    say!(
        "{:>6} {:>16} {:>16} {:>16} {:>9}",
        "ratio",
        "weight-grad",
        "total",
        "dense",
        "speedup"
    );
    for rep in &reports {
        let wg: u64 = rep.layers.iter().map(|l| l.weight_grad).sum();
        say!(
            "{:>6} {:>16} {:>16} {:>16} {:>9.4}",
            rep.ratio,
            wg,
            rep.total,
            rep.dense_total,
            rep.speedup
        );
    }
    for rep in &reports {
        say!("\nratio {}\n{rep}", rep.ratio);
    }

    let mut lines = String::new();
    for rep in &reports {
        lines.push_str(&serde_json::to_string(rep).expect("reports serialize"));
        lines.push('\n');
    }
    write_file(&out.join("cost.jsonl"), lines)?;
    if dump_plan {
        if plans.is_empty() {
            warn("--dump-plan needs --checkpoint and an efqat mode; no plans written");
        } else {
            let text: String = plans
                .iter()
                .map(|p| serde_json::to_string(p).expect("plans serialize") + "\n")
                .collect();
            write_file(&out.join("plans.jsonl"), text)?;
        }
    }
    Ok(())
}

fn read_record(path: &Path) -> Result<RunRecord> {
    let file = if path.is_dir() {
        path.join("summary.json")
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file).map_err(CliError::io("read run summary", file.clone()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Line {
        path: file,
        line: e.line() as u64,
        msg: format!("not a run summary: {e}"),
    })
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(CliError::io("create", path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(w)
}

/// Writes `accuracy_vs_ratio.csv` and `speedup_vs_ratio.csv` from run
/// directories (or their `summary.json` files).
pub fn plot_data(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut records = runs.iter().map(|p| read_record(p)).collect::<Result<Vec<_>>>()?;
    if records.is_empty() {
        warn("no runs given; writing header-only tables");
    }
    records.sort_by(|a, b| {
        (a.summary.mode.to_string(), a.seed)
            .cmp(&(b.summary.mode.to_string(), b.seed))
            .then(a.summary.ratio.total_cmp(&b.summary.ratio))
    });
    std::fs::create_dir_all(out).map_err(CliError::io("create output directory", out))?;
    let acc_path = out.join("accuracy_vs_ratio.csv");
    let speed_path = out.join("speedup_vs_ratio.csv");
    let mut acc = csv_writer(&acc_path, &ACCURACY_HEADER)?;
    let mut speed = csv_writer(&speed_path, &SPEEDUP_HEADER)?;
    let fail = |path: &Path| {
        let path = path.to_path_buf();
        move |e: csv::Error| CliError::Invalid(format!("{}: {e}", path.display()))
    };
    for rec in &records {
        let s = &rec.summary;
        acc.write_record([
            s.mode.to_string(),
            s.ratio.to_string(),
            s.freeze_freq.map_or("never".into(), |f| f.to_string()),
            rec.seed.to_string(),
            s.fp_accuracy.to_string(),
            s.ptq_accuracy.map_or(String::new(), |a| a.to_string()),
            s.final_accuracy.to_string(),
            s.steps.to_string(),
        ])
        .map_err(fail(&acc_path))?;
        speed
            .write_record([
                s.mode.to_string(),
                s.ratio.to_string(),
                rec.seed.to_string(),
                s.speedup.to_string(),
                s.dense_bwd_macs.to_string(),
                s.theoretical_bwd_macs.to_string(),
                s.measured_bwd_macs.to_string(),
                (s.bwd_wall_ns as f64 / 1e6).to_string(),
            ])
            .map_err(fail(&speed_path))?;
    }
    acc.flush().map_err(CliError::io("write", acc_path.clone()))?;
    speed.flush().map_err(CliError::io("write", speed_path.clone()))?;
    say!(
        "{} runs -> {} and {}",
        records.len(),
        acc_path.display(),
        speed_path.display()
    );
    Ok(())
}
