use super::acmf::{acmf_forward, concat_fusion_forward};
use super::decoder::decode_mask;
use super::egmm::{block_memory, block_read, MatchEntry};
use super::encoder::{encode_event, encode_image, Features};
use super::id_assign::{id_assign, one_hot};
use super::params::{Ctx, ParamStore};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::event::VoxelGrid;
use crate::frame::Image;
use crate::mask::MaskMap;
use crate::tensor::{Real, Tensor, Var};

/// Fused pyramid plus the raw 1/16 event feature kept for memory.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FrameFeatures {
    pub fused: Features,
    pub event16: Var,
}

pub(crate) fn encode_frame<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    frame: Var,
    voxels: Var,
) -> Result<FrameFeatures> {
    let frame = if cfg.use_image {
        frame
    } else {
        let zeros = Tensor::zeros(ctx.g.shape(frame));
        ctx.g.input(zeros)
    };
    let voxels = if cfg.use_event {
        voxels
    } else {
        let zeros = Tensor::zeros(ctx.g.shape(voxels));
        ctx.g.input(zeros)
    };
    let img = encode_image(ctx, frame, cfg.gn_groups)?;
    let evt = encode_event(ctx, voxels, cfg.gn_groups)?;
    let mut fused = [img.f4, img.f8, img.f16];
    for (s, (fi, fe)) in [(img.f4, evt.f4), (img.f8, evt.f8), (img.f16, evt.f16)]
        .into_iter()
        .enumerate()
    {
        let prefix = format!("fuse{s}");
        fused[s] = if cfg.use_acmf {
            acmf_forward(ctx, &prefix, fi, fe)?.0
        } else {
            concat_fusion_forward(ctx, &prefix, fi, fe)?
        };
    }
    Ok(FrameFeatures {
        fused: Features {
            f4: fused[0],
            f8: fused[1],
            f16: fused[2],
        },
        event16: evt.f16,
    })
}

/// Per-block match entries of one memory frame.
pub(crate) fn memory_entries<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    feature: Var,
    event: Var,
    mask_feature: Var,
) -> Result<Vec<MatchEntry>> {
    (0..cfg.egmm_blocks)
        .map(|l| block_memory(ctx, &format!("egmm{l}"), cfg.use_egmm, feature, event, mask_feature))
        .collect()
}

/// Stacked matching blocks over `memory[entry][block]`, then decoding.
pub(crate) fn predict<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    fused: &Features,
    memory: &[&[MatchEntry]],
) -> Result<Var> {
    let mut x = fused.f16;
    let mut readout: Option<Var> = None;
    for l in 0..cfg.egmm_blocks {
        let entries: Vec<MatchEntry> = memory.iter().map(|e| e[l]).collect();
        let r = block_read(ctx, &format!("egmm{l}"), cfg.use_egmm, x, &entries)?;
        x = ctx.g.add(x, r)?;
        readout = Some(match readout {
            Some(acc) => ctx.g.add(acc, r)?,
            None => r,
        });
    }
    let readout = readout.ok_or_else(|| Error::Config("no matching blocks".into()))?;
    decode_mask(ctx, "dec", readout, fused)
}

/// Outputs of a clip forward pass, one item per predicted frame `1..T`.
pub struct ClipOutputs {
    pub logits: Vec<Var>,
    pub probs: Vec<Var>,
}

/// Additive logit bias that removes slots above each sample's object count
/// from the channel softmax.
pub(crate) const INACTIVE_LOGIT: f64 = -1e4;

fn inactive_bias<T: Real>(slots: usize, active: &[usize]) -> Tensor<T> {
    let c = slots + 1;
    let mut data = vec![T::zero(); active.len() * c];
    for (n, &a) in active.iter().enumerate() {
        for ch in (a + 1)..c {
            data[n * c + ch] = T::of(INACTIVE_LOGIT);
        }
    }
    Tensor::from_vec(&[active.len(), c, 1, 1], data).expect("sizes agree")
}

/// Teacher-free clip unroll used in training: frame 0 and its annotation
/// seed the anchor memory; each later frame is predicted from the anchor and
/// the previous frame, whose (detached) soft prediction becomes the next
/// recent entry. `active[n]` is sample `n`'s object count; probabilities
/// are a softmax over background and those objects only.
pub(crate) fn forward_clip<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    frames: &[Tensor<T>],
    voxels: &[Tensor<T>],
    first_identity: Tensor<T>,
    active: &[usize],
) -> Result<ClipOutputs> {
    if frames.len() != voxels.len() || frames.len() < 2 {
        return Err(Error::invalid(format!(
            "clip needs matching frame/voxel lists of length >= 2, got {} and {}",
            frames.len(),
            voxels.len()
        )));
    }
    if active.len() != frames[0].shape()[0] || active.iter().any(|&a| a > cfg.slots) {
        return Err(Error::invalid(format!(
            "object counts {active:?} do not fit a batch of {} with {} slots",
            frames[0].shape()[0],
            cfg.slots
        )));
    }
    let bias = ctx.g.input(inactive_bias(cfg.slots, active));
    let f0 = ctx.g.input(frames[0].clone());
    let v0 = ctx.g.input(voxels[0].clone());
    let first = encode_frame(ctx, cfg, f0, v0)?;
    let id0 = ctx.g.input(first_identity);
    let mask0 = id_assign(ctx, "id", id0)?;
    let anchor = memory_entries(ctx, cfg, first.fused.f16, first.event16, mask0)?;
    let mut recent: Option<Vec<MatchEntry>> = None;
    let mut out = ClipOutputs {
        logits: Vec::new(),
        probs: Vec::new(),
    };
    for t in 1..frames.len() {
        let f = ctx.g.input(frames[t].clone());
        let v = ctx.g.input(voxels[t].clone());
        let feats = encode_frame(ctx, cfg, f, v)?;
        let mut memory: Vec<&[MatchEntry]> = vec![&anchor];
        if let Some(r) = &recent {
            memory.push(r);
        }
        let logits = predict(ctx, cfg, &feats.fused, &memory)?;
        let masked = ctx.g.add(logits, bias)?;
        let probs = ctx.g.softmax(masked, 1)?;
        if t + 1 < frames.len() {
            let soft = ctx.g.detach(probs);
            let mask_feat = id_assign(ctx, "id", soft)?;
            recent = Some(memory_entries(ctx, cfg, feats.fused.f16, feats.event16, mask_feat)?);
        }
        out.logits.push(logits);
        out.probs.push(probs);
    }
    Ok(out)
}

/// `(slots + 1) × H × W` class scores, channel 0 = background.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl MaskLogits {
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 {
            return Err(Error::invalid("mask logits must hold a single sample"));
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            data: t.data().to_vec(),
        })
    }

    /// Label map over channels `0..=max_label`; ties go to the lowest index.
    pub fn argmax(&self, max_label: usize) -> MaskMap {
        let hw = self.height * self.width;
        let upto = max_label.min(self.channels - 1);
        let labels = (0..hw)
            .map(|p| {
                let mut best = 0;
                let mut best_v = self.data[p];
                for c in 1..=upto {
                    let v = self.data[c * hw + p];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                best as u8
            })
            .collect();
        MaskMap::new(self.height, self.width, labels).expect("sizes agree")
    }

    pub fn scaled(&self, k: f32) -> Self {
        Self {
            data: self.data.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }
}

/// One memory frame, already projected for every matching block.
#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub time: usize,
    pub keys: Vec<Tensor<f32>>,
    pub values: Vec<Tensor<f32>>,
    pub guides: Vec<Tensor<f32>>,
    pub mask_feature: Tensor<f32>,
    pub event_feature: Tensor<f32>,
}

/// Anchor (first frame, never evicted) plus the most recent frame.
#[derive(Debug, Clone, Default)]
pub struct MemoryBank {
    anchor: Option<MemoryEntry>,
    recent: Option<MemoryEntry>,
}

impl MemoryBank {
    pub const CAPACITY: usize = 2;

    pub fn len(&self) -> usize {
        self.anchor.is_some() as usize + self.recent.is_some() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn anchor(&self) -> Option<&MemoryEntry> {
        self.anchor.as_ref()
    }

    pub fn recent(&self) -> Option<&MemoryEntry> {
        self.recent.as_ref()
    }

    /// Entries readable at step `t`, i.e. written before it.
    pub fn read(&self, t: usize) -> Vec<&MemoryEntry> {
        self.anchor
            .iter()
            .chain(self.recent.iter())
            .filter(|e| e.time < t)
            .collect()
    }

    pub fn write(&mut self, entry: MemoryEntry) {
        if self.anchor.is_none() {
            self.anchor = Some(entry);
        } else {
            self.recent = Some(entry);
        }
    }
}

/// Per-sequence inference state.
#[derive(Debug, Clone)]
pub struct SequenceState {
    pub bank: MemoryBank,
    pub max_label: usize,
    pub height: usize,
    pub width: usize,
    /// Index of the next frame to be processed.
    pub next_time: usize,
}

/// Trained segmentation model (f32 parameters).
#[derive(Debug, Clone)]
pub struct VosModel {
    cfg: ModelConfig,
    params: ParamStore<f32>,
}

fn image_tensor<T: Real>(img: &Image) -> Result<Tensor<T>> {
    let data = img.to_chw().into_iter().map(|v| T::of(v as f64)).collect();
    Tensor::from_vec(&[1, img.channels(), img.height(), img.width()], data)
}

fn voxel_tensor<T: Real>(v: &VoxelGrid) -> Result<Tensor<T>> {
    let data = v.data().iter().map(|&x| T::of(x as f64)).collect();
    Tensor::from_vec(&[1, v.bins(), v.height(), v.width()], data)
}

impl VosModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ParamStore::init(&cfg.param_specs(), seed);
        Ok(Self { cfg, params })
    }

    /// Wraps existing parameters; every tensor the configuration needs must
    /// be present with the right shape. Extra tensors are ignored.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        cfg.validate()?;
        for spec in cfg.param_specs() {
            match params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {} has shape {:?}, configuration needs {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => {
                    return Err(Error::Config(format!(
                        "parameter {} missing; the checkpoint was trained with a different architecture",
                        spec.name
                    )))
                }
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    /// Runtime switches that do not change the parameter set.
    pub fn set_input_modalities(&mut self, use_image: bool, use_event: bool) {
        self.cfg.use_image = use_image;
        self.cfg.use_event = use_event;
    }

    fn check_inputs(&self, frame: &Image, voxel: &VoxelGrid) -> Result<()> {
        if frame.channels() != self.cfg.image_channels {
            return Err(Error::invalid(format!(
                "frame has {} channels, model expects {}",
                frame.channels(),
                self.cfg.image_channels
            )));
        }
        if voxel.bins() != self.cfg.bins {
            return Err(Error::invalid(format!(
                "voxel grid has {} bins, model expects {}",
                voxel.bins(),
                self.cfg.bins
            )));
        }
        if voxel.height() != frame.height() || voxel.width() != frame.width() {
            return Err(Error::invalid("voxel grid and frame differ in size"));
        }
        Ok(())
    }

    fn build_entry(
        &self,
        ctx: &mut Ctx<'_, f32>,
        feats: &FrameFeatures,
        identity: Tensor<f32>,
        time: usize,
    ) -> Result<MemoryEntry> {
        let id = ctx.g.input(identity);
        let mask_feat = id_assign(ctx, "id", id)?;
        let entries = memory_entries(ctx, &self.cfg, feats.fused.f16, feats.event16, mask_feat)?;
        Ok(MemoryEntry {
            time,
            keys: entries.iter().map(|e| ctx.g.value(e.key).clone()).collect(),
            values: entries.iter().map(|e| ctx.g.value(e.value).clone()).collect(),
            guides: entries.iter().map(|e| ctx.g.value(e.guide).clone()).collect(),
            mask_feature: ctx.g.value(mask_feat).clone(),
            event_feature: ctx.g.value(feats.event16).clone(),
        })
    }

    /// Initialises a sequence from its first frame and ground-truth
    /// annotation. No matching happens; the annotation is returned as the
    /// first prediction.
    pub fn first_step(
        &self,
        frame: &Image,
        voxel: &VoxelGrid,
        annotation: &MaskMap,
    ) -> Result<(MaskMap, SequenceState)> {
        self.check_inputs(frame, voxel)?;
        if (annotation.height(), annotation.width()) != (frame.height(), frame.width()) {
            return Err(Error::invalid("annotation and frame differ in size"));
        }
        let identity = one_hot::<f32>(annotation, self.cfg.slots)?;
        let mut ctx = Ctx::new(&self.params, false);
        let f = ctx.g.input(image_tensor(frame)?);
        let v = ctx.g.input(voxel_tensor(voxel)?);
        let feats = encode_frame(&mut ctx, &self.cfg, f, v)?;
        let entry = self.build_entry(&mut ctx, &feats, identity, 0)?;
        let mut bank = MemoryBank::default();
        bank.write(entry);
        let state = SequenceState {
            bank,
            max_label: annotation.max_label() as usize,
            height: frame.height(),
            width: frame.width(),
            next_time: 1,
        };
        Ok((annotation.clone(), state))
    }

    /// Segments the next frame and stores it as the recent memory entry.
    pub fn step(&self, state: &mut SequenceState, frame: &Image, voxel: &VoxelGrid) -> Result<MaskLogits> {
        if state.bank.anchor().is_none() {
            return Err(Error::Precondition(
                "sequence state is not initialised; call first_step first".into(),
            ));
        }
        self.check_inputs(frame, voxel)?;
        if (frame.height(), frame.width()) != (state.height, state.width) {
            return Err(Error::invalid("frame size changed within a sequence"));
        }
        let t = state.next_time;
        let mut ctx = Ctx::new(&self.params, false);
        let f = ctx.g.input(image_tensor(frame)?);
        let v = ctx.g.input(voxel_tensor(voxel)?);
        let feats = encode_frame(&mut ctx, &self.cfg, f, v)?;

        let mut memory: Vec<Vec<MatchEntry>> = Vec::new();
        for e in state.bank.read(t) {
            let per_block = (0..self.cfg.egmm_blocks)
                .map(|l| MatchEntry {
                    key: ctx.g.input(e.keys[l].clone()),
                    value: ctx.g.input(e.values[l].clone()),
                    guide: ctx.g.input(e.guides[l].clone()),
                })
                .collect();
            memory.push(per_block);
        }
        let views: Vec<&[MatchEntry]> = memory.iter().map(Vec::as_slice).collect();
        let logits_var = predict(&mut ctx, &self.cfg, &feats.fused, &views)?;
        let logits = MaskLogits::from_tensor(ctx.g.value(logits_var))?;

        let predicted = logits.argmax(state.max_label);
        let identity = one_hot::<f32>(&predicted, self.cfg.slots)?;
        let entry = self.build_entry(&mut ctx, &feats, identity, t)?;
        state.bank.write(entry);
        state.next_time += 1;
        Ok(logits)
    }

    /// Runs a whole sequence: first frame from the annotation, the rest
    /// predicted. `voxels[t]` must hold the events `E_{t−1→t}`.
    pub fn segment_sequence(&self, frames: &[Image], voxels: &[VoxelGrid], annotation: &MaskMap) -> Result<Vec<MaskMap>> {
        if frames.is_empty() || frames.len() != voxels.len() {
            return Err(Error::invalid(format!(
                "{} frames but {} voxel grids",
                frames.len(),
                voxels.len()
            )));
        }
        let (first, mut state) = self.first_step(&frames[0], &voxels[0], annotation)?;
        let mut out = vec![first];
        for (f, v) in frames.iter().zip(voxels).skip(1) {
            let logits = self.step(&mut state, f, v)?;
            out.push(logits.argmax(state.max_label));
        }
        Ok(out)
    }
}

pub(crate) fn frame_batch<T: Real>(frames: &[&Image]) -> Result<Tensor<T>> {
    let parts = frames.iter().map(|f| image_tensor::<T>(f)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

pub(crate) fn voxel_batch<T: Real>(voxels: &[&VoxelGrid]) -> Result<Tensor<T>> {
    let parts = voxels.iter().map(|v| voxel_tensor::<T>(v)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}
