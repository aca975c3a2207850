//! Guide module: multi-kernel integration of memory event and mask features,
//! channel re-weighting, and a sigmoid-bounded gating map for the keys.

use super::params::{conv_specs, Ctx, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

fn ctx_hidden(u: usize) -> usize {
    (u / 4).max(2)
}

pub fn guide_specs(prefix: &str, in_ch: usize, u: usize, out: usize) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    for k in [1, 3, 5] {
        s.extend(conv_specs(&format!("{prefix}.k{k}"), in_ch, u, k));
    }
    s.extend(conv_specs(&format!("{prefix}.ctx1"), u, ctx_hidden(u), 1));
    s.extend(conv_specs(&format!("{prefix}.ctx2"), ctx_hidden(u), u, 1));
    s.extend(conv_specs(&format!("{prefix}.out"), u, out, 3));
    s
}

/// `G = σ(conv3(u ⊙ c))` with `u = conv1(x) + conv3(x) + conv5(x)`,
/// `x = evt ‖ mask`, `c = σ(conv1(relu(conv1(avgpool(u)))))`.
pub fn guide<T: Real>(ctx: &mut Ctx<'_, T>, prefix: &str, evt: Var, mask: Var) -> Result<Var> {
    let (se, sm) = (ctx.g.shape(evt), ctx.g.shape(mask));
    if se.len() != 4 || sm.len() != 4 || se[0] != sm[0] || se[2..] != sm[2..] {
        return Err(Error::invalid(format!(
            "guide inputs are not aligned: {se:?} vs {sm:?}"
        )));
    }
    let x = ctx.g.concat(&[evt, mask], 1)?;
    let u1 = ctx.conv(&format!("{prefix}.k1"), x, 1)?;
    let u3 = ctx.conv(&format!("{prefix}.k3"), x, 1)?;
    let u5 = ctx.conv(&format!("{prefix}.k5"), x, 1)?;
    let u = ctx.g.add(u1, u3)?;
    let u = ctx.g.add(u, u5)?;
    let pooled = ctx.g.mean_hw(u)?;
    let c = ctx.conv(&format!("{prefix}.ctx1"), pooled, 1)?;
    let c = ctx.g.relu(c);
    let c = ctx.conv(&format!("{prefix}.ctx2"), c, 1)?;
    let c = ctx.g.sigmoid(c);
    let uc = ctx.g.mul(u, c)?;
    let out = ctx.conv(&format!("{prefix}.out"), uc, 1)?;
    Ok(ctx.g.sigmoid(out))
}
