//! Small layer helpers shared by the model modules.

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Conv2dParams, Tape, Var};

/// `conv2d(x, {name}.weight) + {name}.bias`.
pub fn conv(tape: &mut Tape, p: &BoundParams, name: &str, x: Var, params: Conv2dParams) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = tape.conv2d(x, w, params)?;
    tape.add_channel_bias(y, b)
}

pub fn conv_relu(tape: &mut Tape, p: &BoundParams, name: &str, x: Var, params: Conv2dParams) -> Result<Var> {
    let y = conv(tape, p, name, x, params)?;
    tape.relu(y)
}

/// `x · {name}.weight + {name}.bias` over the trailing axis.
pub fn linear(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row_bias(y, b)
}

pub fn layer_norm(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{name}.gain"))?;
    let b = p.get(&format!("{name}.bias"))?;
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

pub const LAYER_NORM_EPS: crate::tensor::Real = 1e-5;

/// `[C, H, W]` map → `[H·W, C]` pixel rows.
pub fn pixels(tape: &mut Tape, x: Var) -> Result<Var> {
    let (c, h, w) = chw(tape, x)?;
    let flat = tape.reshape(x, &[c, h * w])?;
    tape.transpose(flat)
}

/// `[H·W, C]` pixel rows → `[C, H, W]` map.
pub fn unpixels(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let t = tape.transpose(x)?;
    let c = tape.shape(t)[0];
    tape.reshape(t, &[c, h, w])
}

pub fn chw(tape: &Tape, x: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Dimension(format!("expected a [C, H, W] map, got {s:?}"))),
    }
}
