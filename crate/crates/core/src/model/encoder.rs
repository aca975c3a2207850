use super::params::{conv_specs, gn_specs, Ctx, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

/// Feature pyramid at strides 4, 8 and 16.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    pub f4: Var,
    pub f8: Var,
    pub f16: Var,
}

/// Stride-2 stem to 1/2, then three stride-2 conv + group-norm + relu blocks.
pub fn encoder_specs(prefix: &str, in_ch: usize, widths: [usize; 3]) -> Vec<ParamSpec> {
    let [c4, c8, c16] = widths;
    let mut s = Vec::new();
    s.extend(conv_specs(&format!("{prefix}.stem"), in_ch, c4, 3));
    s.extend(gn_specs(&format!("{prefix}.stem_gn"), c4));
    for (i, (cin, cout)) in [(c4, c4), (c4, c8), (c8, c16)].into_iter().enumerate() {
        s.extend(conv_specs(&format!("{prefix}.b{i}"), cin, cout, 3));
        s.extend(gn_specs(&format!("{prefix}.b{i}_gn"), cout));
    }
    s
}

fn encode<T: Real>(ctx: &mut Ctx<'_, T>, prefix: &str, x: Var, groups: usize) -> Result<Features> {
    let (_, _, h, w) = ctx.g.value(x).dims4()?;
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "input resolution {h}x{w} is not divisible by 16"
        )));
    }
    let block = |ctx: &mut Ctx<'_, T>, name: &str, x: Var| -> Result<Var> {
        let y = ctx.conv(&format!("{prefix}.{name}"), x, 2)?;
        let y = ctx.group_norm(&format!("{prefix}.{name}_gn"), y, groups)?;
        Ok(ctx.g.relu(y))
    };
    let x = block(ctx, "stem", x)?;
    let f4 = block(ctx, "b0", x)?;
    let f8 = block(ctx, "b1", f4)?;
    let f16 = block(ctx, "b2", f8)?;
    Ok(Features { f4, f8, f16 })
}

/// Image branch; `frame` is `[N, C, H, W]`.
pub fn encode_image<T: Real>(ctx: &mut Ctx<'_, T>, frame: Var, groups: usize) -> Result<Features> {
    encode(ctx, "enc_img", frame, groups)
}

/// Event branch; `voxels` is `[N, B, H, W]`.
pub fn encode_event<T: Real>(ctx: &mut Ctx<'_, T>, voxels: Var, groups: usize) -> Result<Features> {
    encode(ctx, "enc_evt", voxels, groups)
}
