use super::encoder::Features;
use super::params::{conv_specs, Ctx, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

pub fn decoder_specs(prefix: &str, key_dim: usize, widths: [usize; 3], slots: usize) -> Vec<ParamSpec> {
    let [c4, c8, c16] = widths;
    let mut s = Vec::new();
    s.extend(conv_specs(&format!("{prefix}.c16"), key_dim + c16, c8, 3));
    s.extend(conv_specs(&format!("{prefix}.c8"), c8, c4, 3));
    s.extend(conv_specs(&format!("{prefix}.c4"), c4, slots + 1, 3));
    s
}

/// `readout ‖ f16 → conv → ×2 + f8 → conv → ×2 + f4 → conv → ×4` logits.
pub fn decode_mask<T: Real>(ctx: &mut Ctx<'_, T>, prefix: &str, readout: Var, feats: &Features) -> Result<Var> {
    let (rs, s16, s8, s4) = (
        ctx.g.value(readout).dims4()?,
        ctx.g.value(feats.f16).dims4()?,
        ctx.g.value(feats.f8).dims4()?,
        ctx.g.value(feats.f4).dims4()?,
    );
    let aligned = rs.0 == s16.0
        && (rs.2, rs.3) == (s16.2, s16.3)
        && (s8.2, s8.3) == (2 * s16.2, 2 * s16.3)
        && (s4.2, s4.3) == (4 * s16.2, 4 * s16.3);
    if !aligned {
        return Err(Error::invalid(format!(
            "decoder scales mismatch: readout {rs:?}, f16 {s16:?}, f8 {s8:?}, f4 {s4:?}"
        )));
    }
    let x = ctx.g.concat(&[readout, feats.f16], 1)?;
    let x = ctx.conv(&format!("{prefix}.c16"), x, 1)?;
    let x = ctx.g.relu(x);
    let x = ctx.g.upsample(x, 2)?;
    let x = ctx.g.add(x, feats.f8)?;
    let x = ctx.conv(&format!("{prefix}.c8"), x, 1)?;
    let x = ctx.g.relu(x);
    let x = ctx.g.upsample(x, 2)?;
    let x = ctx.g.add(x, feats.f4)?;
    let x = ctx.conv(&format!("{prefix}.c4"), x, 1)?;
    ctx.g.upsample(x, 4)
}
