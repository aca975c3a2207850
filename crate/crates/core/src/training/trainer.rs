use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use super::augment::{augment, TrainClip};
use super::config::TrainConfig;
use super::loss::clip_loss;
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::event::VoxelGrid;
use crate::frame::Image;
use crate::lowlight::SequenceRecord;
use crate::mask::MaskMap;
use crate::model::network::{forward_clip, frame_batch, voxel_batch};
use crate::model::{load_checkpoint, one_hot, save_checkpoint, CheckpointManifest, Ctx, VosModel};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

/// Low-light frames, masks and per-frame voxel grids of one sequence.
#[derive(Debug, Clone)]
pub struct TrainSequence {
    pub id: String,
    pub frames: Vec<Image>,
    pub masks: Vec<MaskMap>,
    pub voxels: Vec<VoxelGrid>,
}

impl TrainSequence {
    pub fn from_record(r: &SequenceRecord) -> Result<Self> {
        Ok(Self {
            id: r.id().to_string(),
            frames: r.low.clone(),
            masks: r.masks.clone(),
            voxels: r.voxels()?,
        })
    }

    /// Clip of `len` frames starting at `start`; its first grid is zeroed.
    pub fn clip(&self, start: usize, len: usize) -> Result<TrainClip> {
        if start + len > self.frames.len() {
            return Err(Error::invalid(format!(
                "clip {start}..{} exceeds sequence {} of length {}",
                start + len,
                self.id,
                self.frames.len()
            )));
        }
        let v0 = &self.voxels[start];
        let mut voxels = vec![VoxelGrid::zeros(v0.bins(), v0.height(), v0.width(), v0.span())];
        voxels.extend_from_slice(&self.voxels[start + 1..start + len]);
        TrainClip::new(
            self.frames[start..start + len].to_vec(),
            self.masks[start..start + len].to_vec(),
            voxels,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: f64,
    pub bce: f64,
    pub sj: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iteration,loss,bce,sj";

    pub fn csv_row(&self) -> String {
        format!("{},{:.9},{:.9},{:.9}", self.iteration, self.loss, self.bce, self.sj)
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    model: VosModel,
    opt: AdamW,
    data: Vec<TrainSequence>,
    iteration: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, records: &[SequenceRecord]) -> Result<Self> {
        cfg.validate()?;
        if records.is_empty() {
            return Err(Error::invalid("training dataset is empty"));
        }
        let data = records.iter().map(TrainSequence::from_record).collect::<Result<Vec<_>>>()?;
        for s in &data {
            if s.frames.len() < cfg.clip_len {
                return Err(Error::invalid(format!(
                    "sequence {} has {} frames, fewer than T = {}",
                    s.id,
                    s.frames.len(),
                    cfg.clip_len
                )));
            }
            if s.voxels[0].bins() != cfg.bins {
                return Err(Error::invalid(format!(
                    "sequence {} uses {} bins, configuration {}",
                    s.id,
                    s.voxels[0].bins(),
                    cfg.bins
                )));
            }
            if s.frames[0].height() < cfg.crop || s.frames[0].width() < cfg.crop {
                return Err(Error::invalid(format!("sequence {} is smaller than the crop {}", s.id, cfg.crop)));
            }
        }
        let model = VosModel::new(cfg.model_config(), cfg.seed)?;
        let opt = AdamW::new(cfg.lr as f32, cfg.weight_decay as f32);
        Ok(Self {
            cfg,
            model,
            opt,
            data,
            iteration: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(cfg: TrainConfig, records: &[SequenceRecord], checkpoint: &Path) -> Result<Self> {
        let mut t = Self::new(cfg, records)?;
        let (manifest, store) = load_checkpoint(checkpoint)?;
        if manifest.model != t.cfg.model_config() || manifest.seed != t.cfg.seed {
            return Err(Error::Config(
                "checkpoint architecture or seed differs from the configuration".into(),
            ));
        }
        t.model = VosModel::from_params(manifest.model.clone(), strip_moments(&store))?;
        t.opt.import(&store, manifest.iteration);
        t.iteration = manifest.iteration;
        Ok(t)
    }

    pub fn model(&self) -> &VosModel {
        &self.model
    }

    pub fn into_model(self) -> VosModel {
        self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Clip `slot` of iteration `iteration`; depends only on the seed and
    /// those indices.
    pub fn sample_clip(&self, iteration: u64, slot: usize) -> Result<TrainClip> {
        let mut rng = derive_rng(self.cfg.seed, &format!("clip/{iteration}/{slot}"));
        let seq = &self.data[rng.random_range(0..self.data.len())];
        let start = rng.random_range(0..=seq.frames.len() - self.cfg.clip_len);
        let clip = seq.clip(start, self.cfg.clip_len)?;
        augment(&clip, &self.cfg.augment(), &mut rng)
    }

    /// One optimizer step on a fresh batch.
    pub fn step(&mut self) -> Result<LossRecord> {
        let it = self.iteration + 1;
        let clips = (0..self.cfg.batch)
            .map(|b| self.sample_clip(it, b))
            .collect::<Result<Vec<_>>>()?;
        let t_len = self.cfg.clip_len;
        let mcfg = self.model.config().clone();
        let frames = (0..t_len)
            .map(|t| frame_batch::<f32>(&clips.iter().map(|c| &c.frames[t]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let voxels = (0..t_len)
            .map(|t| voxel_batch::<f32>(&clips.iter().map(|c| &c.voxels[t]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let identity = Tensor::stack(
            &clips
                .iter()
                .map(|c| one_hot::<f32>(&c.masks[0], mcfg.slots))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let active: Vec<usize> = clips.iter().map(|c| c.masks[0].max_label() as usize).collect();
        let targets: Vec<Vec<&MaskMap>> = (1..t_len).map(|t| clips.iter().map(|c| &c.masks[t]).collect()).collect();

        let mut ctx = Ctx::new(self.model.params(), true);
        let out = forward_clip(&mut ctx, &mcfg, &frames, &voxels, identity, &active)?;
        let (loss, parts) = clip_loss(&mut ctx.g, &out.probs, &targets, &active, &self.cfg.loss_weights())?;
        if !parts.total.is_finite() {
            return Err(Error::Precondition(format!("loss diverged at iteration {it}")));
        }
        let mut grads = ctx.g.backward(loss)?;
        let named = ctx.param_grads(&mut grads);
        drop(ctx);
        self.opt.step(self.model.params_mut(), &named)?;
        self.iteration = it;
        Ok(LossRecord {
            iteration: it,
            loss: parts.total,
            bce: parts.bce,
            sj: parts.sj,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = self.model.params().clone();
        self.opt.export(&mut store);
        let manifest = CheckpointManifest::new(self.model.config(), self.cfg.seed, self.iteration);
        save_checkpoint(path, &manifest, &store)
    }
}

/// Parameters of a checkpoint store without optimizer state.
pub fn strip_moments(store: &crate::model::ParamStore<f32>) -> crate::model::ParamStore<f32> {
    let mut out = crate::model::ParamStore::default();
    for (k, v) in store.iter() {
        if !k.starts_with("opt.") {
            out.insert(k.clone(), v.clone());
        }
    }
    out
}

/// Paths written by [`train`] under its output directory.
pub fn loss_csv_path(out_dir: &Path) -> PathBuf {
    out_dir.join("loss.csv")
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("model.evck")
}

pub fn periodic_checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("iter_{iteration:06}.evck"))
}

#[derive(Debug)]
pub struct TrainResult {
    pub model: VosModel,
    /// Records produced by this call (resumed runs omit earlier ones).
    pub losses: Vec<LossRecord>,
}

/// Keeps the header and rows up to `iteration` of an existing loss log.
fn truncate_log(path: &Path, iteration: u64) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from(LossRecord::CSV_HEADER);
    out.push('\n');
    for line in text.lines().skip(1) {
        let it: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::invalid(format!("malformed loss log line {line:?}")))?;
        if it <= iteration {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Runs `cfg.iters` total iterations (counting those already done by a
/// resumed checkpoint). With `out_dir`, writes `loss.csv`, periodic
/// checkpoints and `model.evck`.
pub fn train(
    cfg: &TrainConfig,
    records: &[SequenceRecord],
    out_dir: Option<&Path>,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainResult> {
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(cfg.clone(), records, ck)?,
        None => Trainer::new(cfg.clone(), records)?,
    };
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
            let path = loss_csv_path(dir);
            let head = if resume.is_some() && path.exists() {
                truncate_log(&path, trainer.iteration())?
            } else {
                format!("{}\n", LossRecord::CSV_HEADER)
            };
            fs::write(&path, head).map_err(|e| Error::io(&path, e))?;
            let f = fs::OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            Some((path, std::io::BufWriter::new(f)))
        }
        None => None,
    };
    let mut losses = Vec::new();
    while trainer.iteration() < cfg.iters {
        let rec = trainer.step()?;
        on_step(&rec);
        if let Some((path, w)) = log.as_mut() {
            writeln!(w, "{}", rec.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
            if rec.iteration % cfg.checkpoint_every == 0 {
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
                trainer.save(&periodic_checkpoint_path(out_dir.expect("log implies dir"), rec.iteration))?;
            }
        }
        losses.push(rec);
    }
    if let (Some(dir), Some((path, mut w))) = (out_dir, log) {
        w.flush().map_err(|e| Error::io(&path, e))?;
        trainer.save(&final_checkpoint_path(dir))?;
    }
    Ok(TrainResult {
        model: trainer.into_model(),
        losses,
    })
}
