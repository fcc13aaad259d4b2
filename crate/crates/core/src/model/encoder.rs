use super::{Ctx, ModelConfig, ModelError, Result, F2_SIDE, INPUT_RESOLUTION};
use crate::autodiff::{Tensor, Var};
use crate::virtual_scan::{TsdfVolume, CHANNELS};

/// Encoder outputs for a batch of `B` volumes.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOut {
    /// Coarse grid features in channels-last rows: `[B·8³, C]`, cell
    /// `(x, y, z)` of sample `b` at row `b·512 + (z·8 + y)·8 + x`.
    pub f2: Var,
    /// Flat latent codes `[B, 256]`.
    pub f: Var,
}

/// Stacks volumes into a `[B, 5, 32, 32, 32]` tensor.
pub fn volume_batch(vols: &[&TsdfVolume]) -> Result<Tensor> {
    let n = INPUT_RESOLUTION.pow(3);
    let mut data = Vec::with_capacity(vols.len() * CHANNELS * n);
    for v in vols {
        if v.resolution != INPUT_RESOLUTION || v.data.len() != CHANNELS * n {
            return Err(ModelError::Input {
                expected: CHANNELS,
                resolution: INPUT_RESOLUTION,
                got: format!("{} values at resolution {}", v.data.len(), v.resolution),
            });
        }
        data.extend_from_slice(&v.data);
    }
    let shape = vec![vols.len(), CHANNELS, INPUT_RESOLUTION, INPUT_RESOLUTION, INPUT_RESOLUTION];
    Ok(Tensor::new(shape, data)?)
}

fn conv_relu(ctx: &mut Ctx, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = ctx.param(&format!("{}.w", name))?;
    let b = ctx.param(&format!("{}.b", name))?;
    let y = ctx.tape.conv3d(x, w, Some(b), stride, pad)?;
    Ok(ctx.tape.relu(y))
}

/// Four conv blocks: kernel 4 then 3, 3, 3; the first three stride 2 and
/// each followed by a 1×1×1 conv. Spatial extent 32 → 16 → 8 → 4 → 2.
pub fn encode(ctx: &mut Ctx, cfg: &ModelConfig, input: Var) -> Result<EncoderOut> {
    let shape = ctx.tape.shape(input).to_vec();
    let expect = [CHANNELS, INPUT_RESOLUTION, INPUT_RESOLUTION, INPUT_RESOLUTION];
    if shape.len() != 5 || shape[1..] != expect {
        return Err(ModelError::Input { expected: CHANNELS, resolution: INPUT_RESOLUTION, got: format!("{:?}", shape) });
    }
    let batch = shape[0];
    let x = conv_relu(ctx, "enc.c1", input, 2, 1)?;
    let x = conv_relu(ctx, "enc.c1p", x, 1, 0)?;
    let x = conv_relu(ctx, "enc.c2", x, 2, 1)?;
    let f2 = conv_relu(ctx, "enc.c2p", x, 1, 0)?;
    debug_assert_eq!(ctx.tape.shape(f2)[2..], [F2_SIDE; 3]);
    let x = conv_relu(ctx, "enc.c3", f2, 2, 1)?;
    let x = conv_relu(ctx, "enc.c3p", x, 1, 0)?;
    let x = conv_relu(ctx, "enc.c4", x, 1, 0)?;
    let f = ctx.tape.reshape(x, vec![batch, cfg.latent_dim()])?;
    let f2 = ctx.tape.channels_last(f2)?;
    Ok(EncoderOut { f2, f })
}
