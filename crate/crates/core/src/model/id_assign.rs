use super::params::{conv_specs, Ctx, ParamSpec};
use crate::error::{Error, Result};
use crate::mask::MaskMap;
use crate::tensor::{Real, Tensor, Var};

/// Downsampling factor from input resolution to the matching scale.
pub const ID_STRIDE: usize = 16;

pub fn id_assign_specs(prefix: &str, slots: usize, mask_dim: usize) -> Vec<ParamSpec> {
    conv_specs(&format!("{prefix}.proj"), slots + 1, mask_dim, ID_STRIDE)
}

/// `[1, slots + 1, H, W]` one-hot expansion of a label map.
pub fn one_hot<T: Real>(mask: &MaskMap, slots: usize) -> Result<Tensor<T>> {
    let max = mask.max_label() as usize;
    if max > slots {
        return Err(Error::invalid(format!(
            "label {max} exceeds the {slots} identity slots"
        )));
    }
    let hw = mask.height() * mask.width();
    let mut data = vec![T::zero(); (slots + 1) * hw];
    for (p, &l) in mask.labels().iter().enumerate() {
        data[l as usize * hw + p] = T::one();
    }
    Tensor::from_vec(&[1, slots + 1, mask.height(), mask.width()], data)
}

/// Patch embedding of the `[N, slots+1, H, W]` identity map: a
/// `16×16`, stride-16 convolution down to the matching scale.
pub fn id_assign<T: Real>(ctx: &mut Ctx<'_, T>, prefix: &str, identity: Var) -> Result<Var> {
    let (_, _, h, w) = ctx.g.value(identity).dims4()?;
    if h % ID_STRIDE != 0 || w % ID_STRIDE != 0 {
        return Err(Error::invalid(format!(
            "identity map {h}x{w} is not divisible by {ID_STRIDE}"
        )));
    }
    let wt = ctx.p(&format!("{prefix}.proj.w"))?;
    let b = ctx.p(&format!("{prefix}.proj.b"))?;
    ctx.g.conv2d(identity, wt, Some(b), ID_STRIDE, 0)
}
