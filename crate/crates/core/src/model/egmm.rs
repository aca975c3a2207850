//! Event-guided memory matching.
//!
//! Memory keys are gated by the Guide signal of their own entry,
//! `K' = K ⊙ G`; attention `A = softmax(Qᵀ K' / √d)` over all memory
//! positions then reads `R = (G + V) Aᵀ`. With the guide switched off the
//! keys are used as-is and the identity embedding takes the place of `G`
//! in the readout.

use super::guide::{guide, guide_specs};
use super::params::{conv_specs, Ctx, ParamSpec};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

/// One memory frame as seen by one matching block, all `[N, d, P]`.
#[derive(Debug, Clone, Copy)]
pub struct MatchEntry {
    pub key: Var,
    pub value: Var,
    /// Guide signal (or identity embedding when keys are not gated).
    pub guide: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct MatchOutput {
    /// `[N, d, Pq]`
    pub readout: Var,
    /// `[N, Pq, Pm]`, rows sum to one.
    pub attention: Var,
    /// `[N, d, Pm]`
    pub keys: Var,
}

pub fn egmm_match<T: Real>(
    g: &mut Graph<T>,
    query: Var,
    memory: &[MatchEntry],
    gate_keys: bool,
) -> Result<MatchOutput> {
    if memory.is_empty() {
        return Err(Error::Precondition("memory matching needs at least one entry".into()));
    }
    let qs = g.shape(query).to_vec();
    if qs.len() != 3 {
        return Err(Error::invalid(format!("query must be [N, d, P], got {qs:?}")));
    }
    let (n, d) = (qs[0], qs[1]);
    let mut keys = Vec::with_capacity(memory.len());
    let mut payload = Vec::with_capacity(memory.len());
    for e in memory {
        let (ks, vs, gs) = (g.shape(e.key), g.shape(e.value), g.shape(e.guide));
        if ks.len() != 3 || ks[0] != n || ks[1] != d || vs != ks || gs != ks {
            return Err(Error::invalid(format!(
                "memory entry shapes {ks:?}/{vs:?}/{gs:?} do not match query {qs:?}"
            )));
        }
        keys.push(if gate_keys { g.mul(e.key, e.guide)? } else { e.key });
        payload.push(g.add(e.guide, e.value)?);
    }
    let keys = g.concat(&keys, 2)?;
    let payload = g.concat(&payload, 2)?;
    let scores = g.bmm(query, keys, true, false)?;
    let scores = g.affine(scores, T::one() / T::of(d as f64).sqrt(), T::zero());
    let attention = g.softmax(scores, 2)?;
    let readout = g.bmm(payload, attention, false, true)?;
    Ok(MatchOutput {
        readout,
        attention,
        keys,
    })
}

pub(crate) fn block_specs(prefix: &str, cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (c, d) = (cfg.widths[2], cfg.key_dim);
    let mut s = Vec::new();
    for name in ["q", "k", "v"] {
        s.extend(conv_specs(&format!("{prefix}.{name}"), c, d, 1));
    }
    if cfg.use_egmm {
        s.extend(guide_specs(&format!("{prefix}.guide"), c + cfg.mask_dim, cfg.guide_dim, d));
    } else {
        s.extend(conv_specs(&format!("{prefix}.embed"), cfg.mask_dim, d, 1));
    }
    s
}

fn flatten<T: Real>(ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let (n, c, h, w) = ctx.g.value(x).dims4()?;
    ctx.g.reshape(x, &[n, c, h * w])
}

/// Keys, values and guide of one memory frame for block `prefix`.
pub(crate) fn block_memory<T: Real>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    use_egmm: bool,
    feature: Var,
    event: Var,
    mask: Var,
) -> Result<MatchEntry> {
    let k = ctx.conv(&format!("{prefix}.k"), feature, 1)?;
    let v = ctx.conv(&format!("{prefix}.v"), feature, 1)?;
    let gd = if use_egmm {
        guide(ctx, &format!("{prefix}.guide"), event, mask)?
    } else {
        ctx.conv(&format!("{prefix}.embed"), mask, 1)?
    };
    Ok(MatchEntry {
        key: flatten(ctx, k)?,
        value: flatten(ctx, v)?,
        guide: flatten(ctx, gd)?,
    })
}

/// One block: query from `x`, match against memory, return the readout as a
/// `[N, d, h, w]` map.
pub(crate) fn block_read<T: Real>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    use_egmm: bool,
    x: Var,
    memory: &[MatchEntry],
) -> Result<Var> {
    let (n, _, h, w) = ctx.g.value(x).dims4()?;
    let q = ctx.conv(&format!("{prefix}.q"), x, 1)?;
    let q = flatten(ctx, q)?;
    let out = egmm_match(&mut ctx.g, q, memory, use_egmm)?;
    let d = ctx.g.shape(out.readout)[1];
    ctx.g.reshape(out.readout, &[n, d, h, w])
}
