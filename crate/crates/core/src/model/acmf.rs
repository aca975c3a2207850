//! Adaptive cross-modal fusion.
//!
//! A gate `g = σ(conv3(img ‖ evt))` splits the two modalities
//! complementarily (`img·g`, `evt·(1−g)`); the event half is refined by
//! squeeze-excitation channel attention followed by 7×7 spatial attention,
//! and each half goes through its own 3×3 conv before they are summed.

use super::params::{conv_specs, Ctx, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

fn se_hidden(c: usize) -> usize {
    (c / 4).max(2)
}

pub fn acmf_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    s.extend(conv_specs(&format!("{prefix}.gate"), 2 * c, c, 3));
    s.extend(conv_specs(&format!("{prefix}.ca1"), c, se_hidden(c), 1));
    s.extend(conv_specs(&format!("{prefix}.ca2"), se_hidden(c), c, 1));
    s.extend(conv_specs(&format!("{prefix}.sa"), 2, 1, 7));
    s.extend(conv_specs(&format!("{prefix}.img_out"), c, c, 3));
    s.extend(conv_specs(&format!("{prefix}.evt_out"), c, c, 3));
    s
}

fn check_pair<T: Real>(ctx: &Ctx<'_, T>, img: Var, evt: Var) -> Result<()> {
    if ctx.g.shape(img) != ctx.g.shape(evt) {
        return Err(Error::invalid(format!(
            "fusion inputs differ in shape: {:?} vs {:?}",
            ctx.g.shape(img),
            ctx.g.shape(evt)
        )));
    }
    Ok(())
}

/// Returns the fused feature and the gate `g`.
pub fn acmf_forward<T: Real>(ctx: &mut Ctx<'_, T>, prefix: &str, img: Var, evt: Var) -> Result<(Var, Var)> {
    check_pair(ctx, img, evt)?;
    let both = ctx.g.concat(&[img, evt], 1)?;
    let gate = ctx.conv(&format!("{prefix}.gate"), both, 1)?;
    let gate = ctx.g.sigmoid(gate);
    let img_sel = ctx.g.mul(img, gate)?;
    let inv_gate = ctx.g.affine(gate, -T::one(), T::one());
    let evt_sel = ctx.g.mul(evt, inv_gate)?;

    // channel attention
    let pooled = ctx.g.mean_hw(evt_sel)?;
    let a = ctx.conv(&format!("{prefix}.ca1"), pooled, 1)?;
    let a = ctx.g.relu(a);
    let a = ctx.conv(&format!("{prefix}.ca2"), a, 1)?;
    let a = ctx.g.sigmoid(a);
    let evt_ca = ctx.g.mul(evt_sel, a)?;

    // spatial attention
    let avg = ctx.g.channel_mean(evt_ca)?;
    let max = ctx.g.channel_max(evt_ca)?;
    let stats = ctx.g.concat(&[avg, max], 1)?;
    let s = ctx.conv(&format!("{prefix}.sa"), stats, 1)?;
    let s = ctx.g.sigmoid(s);
    let evt_sa = ctx.g.mul(evt_ca, s)?;

    let img_out = ctx.conv(&format!("{prefix}.img_out"), img_sel, 1)?;
    let evt_out = ctx.conv(&format!("{prefix}.evt_out"), evt_sa, 1)?;
    Ok((ctx.g.add(img_out, evt_out)?, gate))
}

/// Baseline fusion used when ACMF is switched off.
pub fn concat_fusion_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    conv_specs(&format!("{prefix}.concat"), 2 * c, c, 3)
}

pub fn concat_fusion_forward<T: Real>(ctx: &mut Ctx<'_, T>, prefix: &str, img: Var, evt: Var) -> Result<Var> {
    check_pair(ctx, img, evt)?;
    let both = ctx.g.concat(&[img, evt], 1)?;
    ctx.conv(&format!("{prefix}.concat"), both, 1)
}
