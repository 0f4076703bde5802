use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use efqat_cli::checkpoint::Checkpoint;
use efqat_cli::commands::{RunRecord, ACCURACY_HEADER, SPEEDUP_HEADER};
use efqat_core::cost::OpsReport;
use efqat_core::freeze::PlanSummary;
use efqat_core::trainer::StepRecord;
use tempfile::TempDir;

const SMALL: &str = r#"
[train]
batch_size = 32

[pretrain]
epochs = 1

[dataset]
kind = "synthetic"
classes = 10
shape = [1, 12, 12]
train = 256
eval = 128
seed = 3
"#;

fn efqat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efqat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = efqat(args);
    assert!(
        out.status.success(),
        "efqat {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("small.toml");
    std::fs::write(&p, text).unwrap();
    p
}

/// Config file and full-precision checkpoint shared by most tests.
struct Fixture {
    config: PathBuf,
    fp: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let config = write_config(&dir, SMALL);
        let out = dir.join("fp");
        ok(&["train", "--config", s(&config), "--mode", "fp", "--out", s(&out)]);
        Fixture {
            config,
            fp: out.join("fp.ckpt"),
        }
    })
}

fn record(dir: &Path) -> RunRecord {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn metrics(dir: &Path) -> Vec<StepRecord> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn run(args: &[&str], out: &Path) -> RunRecord {
    let f = fixture();
    let mut all = vec![args[0], "--config", s(&f.config), "--out", s(out)];
    all.extend_from_slice(&args[1..]);
    ok(&all);
    record(out)
}

#[test]
fn calibration_writes_per_channel_weight_scales() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("cal");
    let text = SMALL.replace("train = 256", "train = 640");
    let config = write_config(tmp.path(), &text);
    let o = ok(&["calibrate", "--config", s(&config), "--out", s(&out)]);
    assert!(stdout(&o).contains("ptq accuracy"), "{}", stdout(&o));
    let (ck, _) = Checkpoint::load(&out.join("ptq.ckpt")).unwrap();
    let cfg = ck.meta.train.as_ref().unwrap();
    assert_eq!(cfg.calib_size, 512);
    let quant = ck.quant.unwrap();
    let sizes: Vec<(usize, usize)> = quant.iter().map(|(&l, q)| (l, q.weight.scale.len())).collect();
    assert_eq!(sizes, vec![(0, 32), (4, 64), (9, 64), (11, 10)]);
    assert!(quant.values().all(|q| q.input.scale.len() == 1));
}

#[test]
fn calibration_is_reproducible_and_matches_eval() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "calibrate",
            "--config",
            s(&f.config),
            "--checkpoint",
            s(&f.fp),
            "--out",
            s(out),
        ]);
    }
    let bytes = |d: &Path| std::fs::read(d.join("ptq.ckpt")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let rec = record(&a);
    assert_eq!(rec.checkpoint, record(&b).checkpoint);

    let ev = tmp.path().join("ev");
    ok(&[
        "eval",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&a.join("ptq.ckpt")),
        "--out",
        s(&ev),
    ]);
    let e: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(e["accuracy"].as_f64(), rec.summary.ptq_accuracy);
    assert_eq!(e["checkpoint"].as_str(), Some(rec.checkpoint.as_str()));
}

#[test]
fn single_sample_calibration_warns() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let o = ok(&[
        "calibrate",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&f.fp),
        "--calib-size",
        "1",
        "--out",
        s(tmp.path()),
    ]);
    assert!(
        stderr(&o).contains("warning: calibration size 1"),
        "{}",
        stderr(&o)
    );
    assert!(tmp.path().join("ptq.ckpt").exists());
}

#[test]
fn cwpn_quarter_ratio_freezes_three_quarters() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let rec = run(
        &[
            "train",
            "--checkpoint",
            s(&f.fp),
            "--mode",
            "efqat-cwpn",
            "--ratio",
            "0.25",
            "--freeze-freq",
            "4096",
        ],
        tmp.path(),
    );
    let m = metrics(tmp.path());
    assert_eq!(m.len(), rec.summary.steps);
    assert_eq!(m.len(), 8);
    for (i, r) in m.iter().enumerate() {
        assert_eq!(r.step, i);
        assert!((r.frozen_fraction - 0.75).abs() < 0.01, "{}", r.frozen_fraction);
        assert_eq!(r.theoretical_bwd_macs, r.measured_bwd_macs);
    }
    assert_eq!(m.last().unwrap().eval_accuracy, Some(rec.summary.final_accuracy));
    assert!(m[..7].iter().all(|r| r.eval_accuracy.is_none()));
    assert_eq!(rec.parent, Checkpoint::load(&f.fp).unwrap().1);
    let ev = efqat(&[
        "eval",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&tmp.path().join("final.ckpt")),
        "--out",
        s(&tmp.path().join("ev")),
    ]);
    assert!(stdout(&ev).contains(&format!("{:.2}%", 100.0 * rec.summary.final_accuracy)));
}

#[test]
fn qat_equals_cwpl_at_full_ratio() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let (qat, cwpl) = (tmp.path().join("qat"), tmp.path().join("cwpl"));
    run(&["train", "--checkpoint", s(&f.fp), "--mode", "qat"], &qat);
    run(
        &[
            "train",
            "--checkpoint",
            s(&f.fp),
            "--mode",
            "efqat-cwpl",
            "--ratio",
            "1",
            "--freeze-freq",
            "never",
        ],
        &cwpl,
    );
    let strip = |d: &Path| {
        metrics(d)
            .into_iter()
            .map(|r| StepRecord { bwd_wall_ns: 0, ..r })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&qat), strip(&cwpl));
    let (a, _) = Checkpoint::load(&qat.join("final.ckpt")).unwrap();
    let (b, _) = Checkpoint::load(&cwpl.join("final.ckpt")).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.quant, b.quant);
}

#[test]
fn one_more_full_precision_epoch() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let rec = run(&["train", "--checkpoint", s(&f.fp), "--mode", "fp+1"], tmp.path());
    assert_eq!(rec.summary.steps, 8);
    let text = std::fs::read_to_string(tmp.path().join("summary.json")).unwrap();
    assert!(!text.contains("ptq"), "{text}");
    assert!(!tmp.path().join("ptq.ckpt").exists());
    let (ck, _) = Checkpoint::load(&tmp.path().join("final.ckpt")).unwrap();
    assert!(ck.quant.is_none());
    assert_eq!(
        ck.meta.parent.as_deref(),
        Some(Checkpoint::load(&f.fp).unwrap().1.as_str())
    );
}

#[test]
fn corrupted_checkpoint_is_refused() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let mut bytes = std::fs::read(&f.fp).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let o = efqat(&[
        "eval",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&bad),
        "--out",
        s(tmp.path()),
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("bad.ckpt") && err.contains("hash mismatch"), "{err}");
}

#[test]
fn network_mismatch_is_descriptive() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let o = efqat(&[
        "eval",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&f.fp),
        "--bits-w",
        "8",
        "--out",
        s(tmp.path()),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bit widths W4A8 vs W8A8"), "{}", stderr(&o));
}

#[test]
fn same_config_same_outputs() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = run(
        &[
            "train",
            "--checkpoint",
            s(&f.fp),
            "--mode",
            "efqat-lwpn",
            "--ratio",
            "0.5",
            "--seed",
            "4",
        ],
        &a,
    );
    let resolved = a.join("config.toml");
    ok(&[
        "train",
        "--config",
        s(&resolved),
        "--checkpoint",
        s(&f.fp),
        "--out",
        s(&b),
    ]);
    let rb = record(&b);
    assert_eq!(ra.checkpoint, rb.checkpoint);
    assert_eq!(rb.seed, 4);
    assert_eq!(
        std::fs::read_to_string(&resolved).unwrap().replace(s(&a), ""),
        std::fs::read_to_string(b.join("config.toml"))
            .unwrap()
            .replace(s(&b), "")
    );
}

#[test]
fn unknown_config_keys_fail() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}\n[pretrain.extra]\nx = 1\n"));
    let o = efqat(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("small.toml") && stderr(&o).contains("extra"),
        "{}",
        stderr(&o)
    );
    let o = efqat(&["train", "--config", s(&tmp.path().join("missing.toml"))]);
    assert!(stderr(&o).contains("missing.toml"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_nonzero() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let o = efqat(&[
        "train",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&f.fp),
        "--mode",
        "qat",
        "--lr",
        "1e9",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

fn cost_reports(dir: &Path) -> Vec<OpsReport> {
    std::fs::read_to_string(dir.join("cost.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn cost_grid() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let o = ok(&["cost", "--config", s(&f.config), "--out", s(tmp.path())]);
    let first_row = stdout(&o).lines().nth(2).unwrap().to_string();
    assert!(
        first_row.trim_start().starts_with('0') && first_row.ends_with("2.0000"),
        "{first_row}"
    );
    let reports = cost_reports(tmp.path());
    let ratios: Vec<f64> = reports.iter().map(|r| r.ratio).collect();
    assert_eq!(ratios, vec![0.0, 0.05, 0.1, 0.25, 0.5, 1.0]);
    assert_eq!(reports[0].speedup, 2.0);
    assert_eq!(reports[5].speedup, 1.0);
    assert!(reports.windows(2).all(|w| w[1].speedup < w[0].speedup));
}

#[test]
fn cost_with_checkpoint_uses_plan_popcounts() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    ok(&[
        "cost",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&f.fp),
        "--mode",
        "efqat-cwpn",
        "--dump-plan",
        "--out",
        s(tmp.path()),
    ]);
    let reports = cost_reports(tmp.path());
    let plans: Vec<PlanSummary> = std::fs::read_to_string(tmp.path().join("plans.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(plans.len(), reports.len());
    for (rep, plan) in reports.iter().zip(&plans) {
        assert_eq!(rep.ratio, plan.ratio);
        let from_report: Vec<(usize, usize)> =
            rep.layers.iter().map(|l| (l.layer, l.unfrozen_rows)).collect();
        let from_plan: Vec<(usize, usize)> = plan
            .layers
            .iter()
            .map(|l| (l.layer, l.unfrozen_channels))
            .collect();
        assert_eq!(from_report, from_plan);
    }
    // CWPN spends its budget unevenly, unlike the per-layer floor.
    let mid = &reports[3].layers;
    assert!(
        mid.iter().any(|l| l.unfrozen_rows != l.out_channels / 4),
        "{mid:?}"
    );

    let train_dir = tmp.path().join("train");
    let rec = run(
        &[
            "train",
            "--checkpoint",
            s(&f.fp),
            "--mode",
            "efqat-cwpn",
            "--ratio",
            "0.25",
            "--dump-plan",
        ],
        &train_dir,
    );
    let dumped: PlanSummary =
        serde_json::from_str(&std::fs::read_to_string(train_dir.join("plan.json")).unwrap()).unwrap();
    assert_eq!(dumped, plans[3]);
    assert_eq!(rec.summary.speedup, reports[3].speedup);
}

#[test]
fn plot_tables() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let mut dirs = Vec::new();
    for ratio in ["1", "0", "0.25"] {
        let d = tmp.path().join(format!("r{ratio}"));
        run(
            &[
                "train",
                "--checkpoint",
                s(&f.fp),
                "--mode",
                "efqat-cwpl",
                "--ratio",
                ratio,
            ],
            &d,
        );
        dirs.push(d);
    }
    let cost_dir = tmp.path().join("cost");
    ok(&["cost", "--config", s(&f.config), "--out", s(&cost_dir)]);
    let costs = cost_reports(&cost_dir);

    let plots = tmp.path().join("plots");
    let mut args = vec!["plot-data", "--out", s(&plots)];
    args.extend(dirs.iter().map(|d| s(d)));
    ok(&args);

    let acc = std::fs::read_to_string(plots.join("accuracy_vs_ratio.csv")).unwrap();
    let lines: Vec<&str> = acc.lines().collect();
    assert_eq!(
        lines[0],
        "mode,ratio,freeze_freq,seed,fp_accuracy,ptq_accuracy,final_accuracy,steps"
    );
    assert_eq!(lines[0], ACCURACY_HEADER.join(","));
    assert_eq!(lines.len(), 4);
    let ratios: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(ratios, vec!["0", "0.25", "1"]);

    let speed = std::fs::read_to_string(plots.join("speedup_vs_ratio.csv")).unwrap();
    let lines: Vec<&str> = speed.lines().collect();
    assert_eq!(
        lines[0],
        "mode,ratio,seed,speedup,dense_bwd_macs,theoretical_bwd_macs,measured_bwd_macs,bwd_wall_ms"
    );
    assert_eq!(lines[0], SPEEDUP_HEADER.join(","));
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split(',').collect();
        let ratio: f64 = cells[1].parse().unwrap();
        let speedup: f64 = cells[3].parse().unwrap();
        let expected = costs.iter().find(|c| c.ratio == ratio).unwrap().speedup;
        assert_eq!(speedup, expected, "ratio {ratio}");
    }
}

#[test]
fn empty_plot_input_writes_headers() {
    let tmp = TempDir::new().unwrap();
    let o = ok(&["plot-data", "--out", s(tmp.path())]);
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    let acc = std::fs::read_to_string(tmp.path().join("accuracy_vs_ratio.csv")).unwrap();
    assert_eq!(acc, format!("{}\n", ACCURACY_HEADER.join(",")));
    let speed = std::fs::read_to_string(tmp.path().join("speedup_vs_ratio.csv")).unwrap();
    assert_eq!(speed, format!("{}\n", SPEEDUP_HEADER.join(",")));
}

fn idx_file(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

#[test]
fn idx_dataset_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let n = 40u32;
    // Class 0 is bright on the left half, class 1 on the right half.
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = (i % 2) as u8;
        labels.push(label);
        for _y in 0..8 {
            for x in 0..8 {
                let left = x < 4;
                pixels.push(if left == (label == 0) {
                    200 + (i % 7) as u8
                } else {
                    (i % 5) as u8
                });
            }
        }
    }
    std::fs::write(tmp.path().join("imgs.idx"), idx_file(0x803, &[n, 8, 8], &pixels)).unwrap();
    std::fs::write(tmp.path().join("labels.idx"), idx_file(0x801, &[n], &labels)).unwrap();
    let cfg = write_config(
        tmp.path(),
        "[train]\nbatch_size = 8\n[pretrain]\nepochs = 2\n[dataset]\nkind = \"idx\"\nimages = \"imgs.idx\"\nlabels = \"labels.idx\"\neval_fraction = 0.25\n",
    );
    let out = tmp.path().join("out");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--mode",
        "efqat-cwpn",
        "--calib-size",
        "8",
        "--out",
        s(&out),
    ]);
    let rec = record(&out);
    assert_eq!(rec.summary.steps, 4);
    let resolved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(
        resolved.contains(&format!(
            "images = \"{}",
            tmp.path().canonicalize().unwrap().display()
        )),
        "{resolved}"
    );
    assert!(resolved.contains("input = [1, 8, 8]"), "{resolved}");

    let mut broken = idx_file(0x803, &[n, 8, 8], &pixels);
    broken.truncate(100);
    std::fs::write(tmp.path().join("imgs.idx"), broken).unwrap();
    let o = efqat(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("imgs.idx: byte 100: payload truncated"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn csv_dataset_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let mut text = String::from("x1,x2,x3,label\n");
    for i in 0..60 {
        let label = i % 3;
        let v = |k: usize| {
            if k == label {
                1.0 + (i % 4) as f32 * 0.1
            } else {
                -((i % 5) as f32) * 0.1
            }
        };
        text.push_str(&format!("{},{},{},{label}\n", v(0), v(1), v(2)));
    }
    std::fs::write(tmp.path().join("d.csv"), &text).unwrap();
    let cfg = write_config(
        tmp.path(),
        "[train]\nbatch_size = 16\n[pretrain]\nepochs = 3\n[dataset]\nkind = \"csv\"\npath = \"d.csv\"\n",
    );
    let out = tmp.path().join("out");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--mode",
        "qat",
        "--calib-size",
        "16",
        "--out",
        s(&out),
    ]);
    let (ck, _) = Checkpoint::load(&out.join("final.ckpt")).unwrap();
    assert_eq!(ck.model.spec.input, vec![3]);
    assert_eq!(ck.model.spec.classes().unwrap(), 3);

    std::fs::write(tmp.path().join("d.csv"), text.replacen("\n1,", "\n1x,", 1)).unwrap();
    let o = efqat(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("d.csv: line") && stderr(&o).contains("`1x`"),
        "{}",
        stderr(&o)
    );
}
