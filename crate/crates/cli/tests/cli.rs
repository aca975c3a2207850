use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn evlol() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_evlol"));
    c.env_remove("EVLOL_SEED").env("RUST_LOG", "warn");
    c
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

fn ok(c: &mut Command) -> Output {
    let out = run(c);
    assert!(
        out.status.success(),
        "command failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn toy(dir: &Path, size: usize, frames: usize, train: usize, val: usize) -> PathBuf {
    let out = dir.join("toy");
    ok(evlol().args(["--seed", "3", "synth", "--toy"]).args([
        "--toy-size",
        &size.to_string(),
        "--toy-frames",
        &frames.to_string(),
        "--toy-train",
        &train.to_string(),
        "--toy-val",
        &val.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]));
    out
}

/// Writes `n` normal-light frames and masks of a moving square.
fn raw_frames(dir: &Path, n: usize, masks: usize) -> (PathBuf, PathBuf) {
    let (fd, md) = (dir.join("frames"), dir.join("masks"));
    std::fs::create_dir_all(&fd).unwrap();
    std::fs::create_dir_all(&md).unwrap();
    for k in 0..n {
        let mut img = evlol_core::Image::filled(32, 32, 3, 0.3);
        let mut m = evlol_core::MaskMap::background(32, 32);
        for y in 8..16 {
            for x in (4 + 3 * k)..(12 + 3 * k) {
                for c in 0..3 {
                    img.set(y, x, c, 0.9);
                }
                m.set(y, x, 1);
            }
        }
        img.save_png(&fd.join(format!("{k:03}.png"))).unwrap();
        if k < masks {
            m.save_png(&md.join(format!("{k:03}.png"))).unwrap();
        }
    }
    (fd, md)
}

fn small_config(dir: &Path, dataset: &Path, extra: &str) -> PathBuf {
    let p = dir.join("train.toml");
    std::fs::write(
        &p,
        format!(
            "dataset_path = {:?}\nbatch = 2\ncrop = 32\nT = 3\nwidths = [8, 16, 32]\nmask_dim = 8\nguide_dim = 8\nlr = 0.001\n{extra}",
            dataset.to_str().unwrap()
        ),
    )
    .unwrap();
    p
}

#[test]
fn synth_writes_layout_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (fd, md) = raw_frames(dir.path(), 2, 2);
    let outs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("seq{i}"))).collect();
    for o in &outs {
        ok(evlol().args(["--seed", "9", "synth", "--frames"]).arg(&fd).arg("--masks").arg(&md).arg("--out").arg(o));
    }
    for f in ["meta.json", "events.evt1", "run_manifest.json", "frames_low/00001.png", "frames_normal/00000.png", "masks/00001.png"] {
        assert!(outs[0].join(f).is_file(), "missing {f}");
    }
    let a = std::fs::read(outs[0].join("events.evt1")).unwrap();
    let b = std::fs::read(outs[1].join("events.evt1")).unwrap();
    assert!(a.len() > 16);
    assert_eq!(a, b);
}

#[test]
fn seed_env_is_the_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let (fd, md) = raw_frames(dir.path(), 3, 3);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(evlol().env("EVLOL_SEED", "5").args(["synth", "--id", "s", "--frames"]).arg(&fd).arg("--masks").arg(&md).arg("--out").arg(&a));
    ok(evlol().args(["--seed", "5", "synth", "--id", "s", "--frames"]).arg(&fd).arg("--masks").arg(&md).arg("--out").arg(&b));
    ok(evlol().args(["--seed", "6", "synth", "--id", "s", "--frames"]).arg(&fd).arg("--masks").arg(&md).arg("--out").arg(&c));
    let read = |p: &Path| std::fs::read_to_string(p.join("meta.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn mismatched_counts_exit_2_naming_both() {
    let dir = tempfile::tempdir().unwrap();
    let (fd, md) = raw_frames(dir.path(), 3, 2);
    let out = run(evlol().arg("synth").arg("--frames").arg(&fd).arg("--masks").arg(&md).arg("--out").arg(dir.path().join("o")));
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("3 frames") && msg.contains("2 masks"), "{msg}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(evlol().arg("infer")).status.code(), Some(2));
    assert_eq!(run(evlol().arg("frobnicate")).status.code(), Some(2));
    let bad_env = run(evlol().env("EVLOL_SEED", "abc").args(["report", "--summary", "x"]));
    assert_eq!(bad_env.status.code(), Some(2));
}

#[test]
fn simulate_events_writes_a_stream() {
    let dir = tempfile::tempdir().unwrap();
    let (fd, _) = raw_frames(dir.path(), 3, 3);
    let out = dir.path().join("ev/out.evt1");
    ok(evlol().arg("simulate-events").arg("--frames").arg(&fd).arg("--out").arg(&out));
    let stream = evlol_core::event::read_events_file(&out).unwrap();
    assert!(!stream.is_empty());
    assert_eq!((stream.height(), stream.width()), (32, 32));
}

#[test]
fn train_without_dataset_fails_before_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = run(evlol().arg("train").arg("--out").arg(&out_dir));
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
    let out = run(evlol().arg("train").arg("--dataset").arg(dir.path().join("nope")).arg("--out").arg(&out_dir));
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn smoke_train_of_ten_iterations_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), 64, 6, 2, 0);
    let out_dir = dir.path().join("run");
    let start = Instant::now();
    ok(evlol()
        .args(["train", "--iters", "10", "--dataset"])
        .arg(data.join("train"))
        .arg("--out")
        .arg(&out_dir));
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "10 iterations took {secs:.1}s");
    let csv = std::fs::read_to_string(out_dir.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("iteration,loss,bce,sj\n"));
    assert!(out_dir.join("model.evck").is_file());
    assert!(out_dir.join("run_manifest.json").is_file());
}

#[test]
fn resumed_training_continues_the_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), 32, 5, 2, 0);
    let cfg = small_config(dir.path(), &data.join("train"), "checkpoint_every = 3\n");
    let full = dir.path().join("full");
    ok(evlol().args(["train", "--iters", "6", "--config"]).arg(&cfg).arg("--out").arg(&full));
    let part = dir.path().join("part");
    ok(evlol().args(["train", "--iters", "6", "--config"]).arg(&cfg).arg("--out").arg(&part));
    // truncate the log past the checkpoint to mimic an interrupted run
    let ck = part.join("checkpoints/iter_000003.evck");
    assert!(ck.is_file());
    let log = std::fs::read_to_string(part.join("loss.csv")).unwrap();
    let cut: String = log.lines().take(4).map(|l| format!("{l}\n")).collect();
    std::fs::write(part.join("loss.csv"), cut + "99,1,1,1\n").unwrap();
    ok(evlol().args(["train", "--iters", "6", "--config"]).arg(&cfg).arg("--out").arg(&part).arg("--resume").arg(&ck));
    let a = std::fs::read_to_string(full.join("loss.csv")).unwrap();
    let b = std::fs::read_to_string(part.join("loss.csv")).unwrap();
    assert_eq!(a.lines().count(), 7);
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(full.join("model.evck")).unwrap(),
        std::fs::read(part.join("model.evck")).unwrap()
    );
}

#[test]
fn infer_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), 32, 4, 2, 2);
    let cfg = small_config(dir.path(), &data.join("train"), "");
    let run_dir = dir.path().join("run");
    ok(evlol().args(["train", "--iters", "2", "--config"]).arg(&cfg).arg("--out").arg(&run_dir));
    let ck = run_dir.join("model.evck");

    let pred = dir.path().join("pred");
    ok(evlol().arg("infer").arg("--checkpoint").arg(&ck).arg("--sequence").arg(data.join("val")).arg("--out").arg(&pred));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(pred.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["egmm_blocks"], 3);
    assert_eq!(std::fs::read_dir(pred.join("val_000")).unwrap().count(), 4);

    let ablated = dir.path().join("pred_noevent");
    ok(evlol()
        .args(["infer", "--no-event", "--checkpoint"])
        .arg(&ck)
        .arg("--sequence")
        .arg(data.join("val"))
        .arg("--out")
        .arg(&ablated));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ablated.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["use_event"], false);

    // architecture switches must match the checkpoint
    let mismatch = run(evlol()
        .args(["infer", "--no-acmf", "--checkpoint"])
        .arg(&ck)
        .arg("--sequence")
        .arg(data.join("val"))
        .arg("--out")
        .arg(dir.path().join("x")));
    assert_eq!(mismatch.status.code(), Some(2));

    let ev = dir.path().join("eval");
    ok(evlol().arg("eval").arg("--pred").arg(&pred).arg("--gt").arg(data.join("val")).arg("--out").arg(&ev));
    assert!(ev.join("report.csv").is_file());

    // ground truth copied as predictions scores 1
    let copy = dir.path().join("copy");
    for seq in ["val_000", "val_001"] {
        let dst = copy.join(seq);
        std::fs::create_dir_all(&dst).unwrap();
        for e in std::fs::read_dir(data.join("val").join(seq).join("masks")).unwrap() {
            let p = e.unwrap().path();
            std::fs::copy(&p, dst.join(p.file_name().unwrap())).unwrap();
        }
    }
    let ev2 = dir.path().join("eval2");
    ok(evlol().arg("eval").arg("--pred").arg(&copy).arg("--gt").arg(data.join("val")).arg("--out").arg(&ev2));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev2.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["J&F"], 1.0);

    let out = ok(evlol()
        .arg("report")
        .arg("--summary")
        .arg(format!("copy={}", ev2.join("summary.json").display()))
        .arg("--loss")
        .arg(format!("run={}", run_dir.join("loss.csv").display())));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("| copy | 1.0000 | 1.0000 | 1.0000 |"), "{table}");
    assert!(table.contains("| run | 2 |"), "{table}");
}

#[test]
fn eval_reports_missing_sequences_as_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), 32, 3, 0, 2);
    let copy = dir.path().join("copy/val_000");
    std::fs::create_dir_all(&copy).unwrap();
    for e in std::fs::read_dir(data.join("val/val_000/masks")).unwrap() {
        let p = e.unwrap().path();
        std::fs::copy(&p, copy.join(p.file_name().unwrap())).unwrap();
    }
    let ev = dir.path().join("eval");
    ok(evlol().arg("eval").arg("--pred").arg(dir.path().join("copy")).arg("--gt").arg(data.join("val")).arg("--out").arg(&ev));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["warnings"], 1);
    assert_eq!(summary["J&F"], 1.0);
}
