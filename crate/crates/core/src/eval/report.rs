use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::{boundary_f, default_tolerance, jaccard, BinaryMask};
use crate::dataset::sequence_dirs;
use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::mask::MaskMap;

/// Predictions and ground truth of one sequence, frame-aligned.
#[derive(Debug, Clone)]
pub struct SequenceInput {
    pub id: String,
    pub predictions: Vec<MaskMap>,
    pub ground_truth: Vec<MaskMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameScore {
    pub sequence: String,
    pub object: u8,
    pub frame: usize,
    pub j: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceScore {
    pub sequence: String,
    pub j: f64,
    pub f: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<FrameScore>,
    pub sequences: Vec<SequenceScore>,
    /// Sequences that could not be scored, with the reason.
    pub errors: Vec<(String, String)>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
}

impl MetricReport {
    pub fn warnings(&self) -> usize {
        self.errors.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,object,frame,J,F\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.9},{:.9}", r.sequence, r.object, r.frame, r.j, r.f);
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "J": self.j_mean,
            "F": self.f_mean,
            "J&F": self.jf_mean,
            "sequences": self.sequences,
            "errors": self.errors.iter().map(|(s, e)| serde_json::json!({"sequence": s, "error": e})).collect::<Vec<_>>(),
            "warnings": self.warnings(),
        })
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-object rows of one sequence plus its frame-averaged J and F.
fn score_sequence(input: &SequenceInput) -> Result<(Vec<FrameScore>, SequenceScore)> {
    let (np, ng) = (input.predictions.len(), input.ground_truth.len());
    if np != ng {
        return Err(Error::invalid(format!("{np} predicted frames for {ng} ground-truth frames")));
    }
    if ng < 2 {
        return Err(Error::invalid("need at least one frame after the annotated one"));
    }
    let objects = input.ground_truth[0].object_ids();
    let mut rows = Vec::new();
    let (mut js, mut fs) = (Vec::new(), Vec::new());
    for t in 1..ng {
        let (p, g) = (&input.predictions[t], &input.ground_truth[t]);
        if !p.same_size(g) {
            return Err(Error::invalid(format!("frame {t}: prediction and ground truth differ in size")));
        }
        let tol = default_tolerance(g.height(), g.width());
        let (mut fj, mut ff) = (Vec::new(), Vec::new());
        for &o in &objects {
            let (pb, gb) = (BinaryMask::from_labels(p, o), BinaryMask::from_labels(g, o));
            let (j, f) = (jaccard(&pb, &gb)?, boundary_f(&pb, &gb, tol)?);
            rows.push(FrameScore {
                sequence: input.id.clone(),
                object: o,
                frame: t,
                j,
                f,
            });
            fj.push(j);
            ff.push(f);
        }
        if !objects.is_empty() {
            js.push(mean(fj.into_iter()));
            fs.push(mean(ff.into_iter()));
        }
    }
    let score = SequenceScore {
        sequence: input.id.clone(),
        j: mean(js.iter().copied()),
        f: mean(fs.iter().copied()),
        frames: js.len(),
    };
    Ok((rows, score))
}

/// Scores every sequence (first frame excluded), averaging over objects,
/// then frames, then sequences. Sequences that fail are reported in
/// `errors` and left out of the means.
pub fn evaluate(inputs: &[SequenceInput], policy: ExecPolicy) -> MetricReport {
    let results = exec::map(policy, inputs, |_, s| score_sequence(s));
    let mut report = MetricReport {
        rows: Vec::new(),
        sequences: Vec::new(),
        errors: Vec::new(),
        j_mean: 0.0,
        f_mean: 0.0,
        jf_mean: 0.0,
    };
    for (input, r) in inputs.iter().zip(results) {
        match r {
            Ok((rows, score)) if score.frames > 0 => {
                report.rows.extend(rows);
                report.sequences.push(score);
            }
            Ok(_) => report.errors.push((input.id.clone(), "no annotated objects".into())),
            Err(e) => {
                log::warn!("sequence {}: {e}", input.id);
                report.errors.push((input.id.clone(), e.to_string()));
            }
        }
    }
    report.j_mean = mean(report.sequences.iter().map(|s| s.j));
    report.f_mean = mean(report.sequences.iter().map(|s| s.f));
    report.jf_mean = (report.j_mean + report.f_mean) / 2.0;
    report
}

fn load_masks(dir: &Path) -> Result<Vec<MaskMap>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    files.iter().map(|p| MaskMap::load_png(p)).collect()
}

/// Masks directory of a sequence: `<seq>/masks` when present, else `<seq>`.
fn mask_dir(seq: &Path) -> std::path::PathBuf {
    let m = seq.join("masks");
    if m.is_dir() {
        m
    } else {
        seq.to_path_buf()
    }
}

/// Evaluates prediction PNGs against a dataset directory. Each ground-truth
/// sequence `gt_dir/<id>` is matched with `pred_dir/<id>`; missing or
/// unreadable predictions become error entries.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, policy: ExecPolicy) -> Result<MetricReport> {
    let seqs = sequence_dirs(gt_dir)?;
    if seqs.is_empty() {
        return Err(Error::invalid(format!("no ground-truth sequences under {}", gt_dir.display())));
    }
    let mut inputs = Vec::new();
    let mut errors = Vec::new();
    for s in &seqs {
        let id = s.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let gt = load_masks(&mask_dir(s))?;
        let pdir = if seqs.len() == 1 && s == gt_dir && !pred_dir.join(&id).is_dir() {
            pred_dir.to_path_buf()
        } else {
            pred_dir.join(&id)
        };
        match load_masks(&mask_dir(&pdir)) {
            Ok(predictions) => inputs.push(SequenceInput {
                id,
                predictions,
                ground_truth: gt,
            }),
            Err(e) => errors.push((id, e.to_string())),
        }
    }
    let mut report = evaluate(&inputs, policy);
    report.errors.extend(errors);
    report.errors.sort();
    Ok(report)
}
