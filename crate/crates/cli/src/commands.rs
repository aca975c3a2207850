use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use evlol_core::dataset::{load_dataset, sequence_dirs, toy_dataset, write_dataset, ToyConfig};
use evlol_core::eval::{evaluate_dirs, MetricReport};
use evlol_core::event::{simulate_events_with, write_events_file, SimulatorConfig};
use evlol_core::exec;
use evlol_core::lowlight::{build_sequence, interpolate_frames, load_sequence, write_sequence, SynthConfig};
use evlol_core::model::{load_checkpoint, VosModel};
use evlol_core::training::{final_checkpoint_path, loss_csv_path, strip_moments, train as run_training, TrainConfig};
use evlol_core::{ExecPolicy, Image, MaskMap};

use crate::manifest::RunManifest;
use crate::{EvalArgs, InferArgs, ReportArgs, SimulateArgs, SynthArgs, TrainArgs};

pub const SEED_ENV: &str = "EVLOL_SEED";

/// A usage problem detected by the CLI itself (exit code 2).
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// 2 for validation failures anywhere in the chain, 3 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let validation = e.chain().any(|c| {
        c.downcast_ref::<Invalid>().is_some()
            || c.downcast_ref::<evlol_core::Error>().is_some_and(|e| e.is_validation())
    });
    if validation {
        2
    } else {
        3
    }
}

pub struct Context {
    pub seed_flag: Option<u64>,
    pub seed_env: Option<u64>,
    pub policy: ExecPolicy,
}

impl Context {
    pub fn new(seed_flag: Option<u64>, policy: ExecPolicy) -> anyhow::Result<Self> {
        let seed_env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        Ok(Self {
            seed_flag,
            seed_env,
            policy,
        })
    }

    /// Flag, then environment, then 0.
    pub fn seed(&self) -> u64 {
        self.seed_flag.or(self.seed_env).unwrap_or(0)
    }
}

fn pngs(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(invalid(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn load_frames(dir: &Path) -> anyhow::Result<Vec<Image>> {
    Ok(pngs(dir)?.iter().map(|p| Image::load_png(p)).collect::<Result<Vec<_>, _>>()?)
}

pub fn synth(ctx: &Context, a: SynthArgs) -> anyhow::Result<()> {
    let seed = ctx.seed();
    let cfg = SynthConfig {
        frame_interval_us: a.frame_interval_us,
        interp_factor: a.factor,
        bins: a.bins,
        ..SynthConfig::default()
    };
    if a.factor == 0 || a.bins == 0 || a.frame_interval_us == 0 {
        return Err(invalid("factor, bins and frame interval must be positive"));
    }
    if a.toy {
        let toy = ToyConfig {
            height: a.toy_size,
            width: a.toy_size,
            frames: a.toy_frames,
            train: a.toy_train,
            val: a.toy_val,
            ..ToyConfig::default()
        };
        if toy.frames < 2 || toy.height < 16 {
            return Err(invalid("toy sequences need at least 2 frames of at least 16x16"));
        }
        RunManifest::new("synth --toy", seed, serde_json::json!({"toy": toy, "synth": cfg}))
            .output("dataset", &a.out)
            .write(&a.out)?;
        let ds = toy_dataset(&toy, seed, &cfg, ctx.policy)?;
        write_dataset(&ds, &a.out)?;
        log::info!("wrote {} train and {} val sequences to {}", ds.train.len(), ds.val.len(), a.out.display());
        return Ok(());
    }
    let (fdir, mdir) = (a.frames.expect("clap enforces"), a.masks.expect("clap enforces"));
    let (fpaths, mpaths) = (pngs(&fdir)?, pngs(&mdir)?);
    if fpaths.len() != mpaths.len() {
        return Err(invalid(format!(
            "{} has {} frames but {} has {} masks",
            fdir.display(),
            fpaths.len(),
            mdir.display(),
            mpaths.len()
        )));
    }
    let frames = load_frames(&fdir)?;
    let masks = mpaths.iter().map(|p| MaskMap::load_png(p)).collect::<Result<Vec<_>, _>>()?;
    let id = a.id.clone().unwrap_or_else(|| {
        a.out
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into())
    });
    let record = build_sequence(&id, &frames, &masks, seed, &cfg)?;
    RunManifest::new("synth", seed, serde_json::to_value(&cfg)?)
        .input("frames", &fdir)
        .input("masks", &mdir)
        .output("sequence", &a.out)
        .write(&a.out)?;
    write_sequence(&record, &a.out)?;
    log::info!("{}: {} frames, {} events", id, record.len(), record.events.len());
    Ok(())
}

pub fn simulate_events(ctx: &Context, a: SimulateArgs) -> anyhow::Result<()> {
    let sim = SimulatorConfig {
        contrast_threshold_pos: a.threshold_pos,
        contrast_threshold_neg: a.threshold_neg,
        ..SimulatorConfig::default()
    };
    sim.validate()?;
    let frames: Vec<Image> = load_frames(&a.frames)?.iter().map(Image::to_gray).collect();
    if frames.len() < 2 {
        return Err(invalid(format!("{} holds {} frames; at least 2 needed", a.frames.display(), frames.len())));
    }
    let ts: Vec<u64> = (0..frames.len() as u64).map(|k| k * a.frame_interval_us).collect();
    let (dense, dense_ts) = interpolate_frames(&frames, &ts, a.factor)?;
    let stream = simulate_events_with(&dense, &dense_ts, &sim, ctx.policy)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_events_file(&stream, &a.out)?;
    log::info!("wrote {} events to {}", stream.len(), a.out.display());
    Ok(())
}

fn resolve_train_config(ctx: &Context, a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut base = TrainConfig::profile(&a.profile)?;
    if let Some(s) = ctx.seed_env {
        base.seed = s;
    }
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p, &base)?,
        None => base,
    };
    if let Some(s) = ctx.seed_flag {
        cfg.seed = s;
    }
    if let Some(d) = &a.dataset {
        cfg.dataset_path = Some(d.clone());
    }
    if let Some(n) = a.iters {
        cfg.iters = n;
    }
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(ctx: &Context, a: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_train_config(ctx, &a)?;
    let dataset = cfg
        .dataset_path
        .clone()
        .ok_or_else(|| invalid("no dataset path: set dataset_path in the config or pass --dataset"))?;
    if !dataset.is_dir() {
        return Err(invalid(format!("dataset path {} does not exist", dataset.display())));
    }
    if let Some(r) = &a.resume {
        if !r.is_file() {
            return Err(invalid(format!("checkpoint {} does not exist", r.display())));
        }
    }
    let records = load_dataset(&dataset)?;
    let mut manifest = RunManifest::new("train", cfg.seed, serde_json::to_value(&cfg)?)
        .input("dataset", &dataset)
        .output("loss_log", &loss_csv_path(&a.out))
        .output("checkpoint", &final_checkpoint_path(&a.out));
    if let Some(r) = &a.resume {
        manifest = manifest.input("resume", r);
    }
    manifest.write(&a.out)?;
    let every = (cfg.iters / 20).max(1);
    let result = run_training(&cfg, &records, Some(&a.out), a.resume.as_deref(), |r| {
        if r.iteration % every == 0 {
            log::info!("iteration {} loss {:.5} (bce {:.5}, sj {:.5})", r.iteration, r.loss, r.bce, r.sj);
        }
    })?;
    log::info!(
        "trained {} iterations; checkpoint {}",
        result.losses.last().map_or(0, |r| r.iteration),
        final_checkpoint_path(&a.out).display()
    );
    Ok(())
}

pub fn infer(ctx: &Context, a: InferArgs) -> anyhow::Result<()> {
    if !a.checkpoint.is_file() {
        return Err(invalid(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    if a.egmm_blocks == 0 {
        return Err(invalid("--egmm-blocks must be at least 1"));
    }
    let (manifest, store) = load_checkpoint(&a.checkpoint)?;
    let mut cfg = manifest.model.clone();
    cfg.use_acmf = !a.no_acmf;
    cfg.use_egmm = !a.no_egmm;
    cfg.egmm_blocks = a.egmm_blocks;
    let mut model = VosModel::from_params(cfg, strip_moments(&store))?;
    model.set_input_modalities(!a.no_image, !a.no_event);
    let seqs = sequence_dirs(&a.sequence)?;
    if seqs.is_empty() {
        return Err(invalid(format!("no sequences under {}", a.sequence.display())));
    }
    RunManifest::new("infer", manifest.seed, serde_json::to_value(model.config())?)
        .input("checkpoint", &a.checkpoint)
        .input("sequence", &a.sequence)
        .output("predictions", &a.out)
        .write(&a.out)?;
    let results = exec::map(ctx.policy, &seqs, |_, dir| -> anyhow::Result<String> {
        let rec = load_sequence(dir)?;
        let masks = model.segment_sequence(&rec.low, &rec.voxels()?, &rec.masks[0])?;
        let out = a.out.join(rec.id());
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        for (t, m) in masks.iter().enumerate() {
            m.save_png(&out.join(format!("{t:05}.png")))?;
        }
        Ok(rec.id().to_string())
    });
    for r in results {
        log::info!("segmented {}", r?);
    }
    Ok(())
}

pub fn eval(ctx: &Context, a: EvalArgs) -> anyhow::Result<()> {
    for (what, p) in [("predictions", &a.pred), ("ground truth", &a.gt)] {
        if !p.is_dir() {
            return Err(invalid(format!("{what} directory {} does not exist", p.display())));
        }
    }
    let report: MetricReport = evaluate_dirs(&a.pred, &a.gt, ctx.policy)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let csv = a.out.join("report.csv");
    std::fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let json = a.out.join("summary.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report.summary_json())?)
        .with_context(|| format!("writing {}", json.display()))?;
    for (seq, err) in &report.errors {
        log::warn!("{seq}: {err}");
    }
    println!(
        "J {:.4}  F {:.4}  J&F {:.4}  ({} sequences, {} warnings)",
        report.j_mean,
        report.f_mean,
        report.jf_mean,
        report.sequences.len(),
        report.warnings()
    );
    Ok(())
}

fn labelled(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((l, p)) => (l.to_string(), PathBuf::from(p)),
        None => (spec.to_string(), PathBuf::from(spec)),
    }
}

pub fn report(_ctx: &Context, a: ReportArgs) -> anyhow::Result<()> {
    if a.summaries.is_empty() && a.losses.is_empty() {
        return Err(invalid("nothing to report: pass --summary and/or --loss"));
    }
    let mut out = String::new();
    if !a.summaries.is_empty() {
        out.push_str("| run | J | F | J&F |\n|---|---|---|---|\n");
        for spec in &a.summaries {
            let (label, path) = labelled(spec);
            let text = std::fs::read_to_string(&path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            let get = |k: &str| v.get(k).and_then(|x| x.as_f64()).ok_or_else(|| invalid(format!("{}: missing {k}", path.display())));
            out.push_str(&format!("| {label} | {:.4} | {:.4} | {:.4} |\n", get("J")?, get("F")?, get("J&F")?));
        }
    }
    if !a.losses.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str("| run | iterations | first loss | last loss | min loss |\n|---|---|---|---|---|\n");
        for spec in &a.losses {
            let (label, path) = labelled(spec);
            let text = std::fs::read_to_string(&path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            let mut losses = Vec::new();
            for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                let loss: f64 = line
                    .split(',')
                    .nth(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| invalid(format!("{}: malformed line {line:?}", path.display())))?;
                losses.push(loss);
            }
            let (Some(first), Some(last)) = (losses.first(), losses.last()) else {
                bail!(Invalid(format!("{}: empty loss log", path.display())));
            };
            let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
            out.push_str(&format!("| {label} | {} | {first:.5} | {last:.5} | {min:.5} |\n", losses.len()));
        }
    }
    match &a.out {
        Some(p) => std::fs::write(p, &out).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{out}"),
    }
    Ok(())
}
