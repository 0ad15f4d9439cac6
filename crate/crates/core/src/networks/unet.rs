//! 2-D U-Net: `depth` encoder stages of two 3×3 conv+ReLU followed by 2×2
//! max pooling, a bottleneck, and a mirrored decoder that upsamples with
//! 2×2 stride-2 transposed convolutions and concatenates the skip features.

use crate::error::{Error, Result};
use crate::networks::{Cursor, Layout, NetworkSpec};
use crate::tensor_core::{Tape, Var};

pub(crate) fn check_extents(h: usize, w: usize, depth: usize) -> Result<()> {
    let f = 1usize << depth;
    if depth == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::shape(format!(
            "U-Net of depth {depth} needs extents divisible by {f}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Channel width of encoder stage `s` (stage `depth` is the bottleneck).
pub(crate) fn width(spec: &NetworkSpec, s: usize) -> usize {
    spec.base_channels << s
}

pub(crate) fn layout(spec: &NetworkSpec, l: &mut Layout) {
    let d = spec.depth;
    let mut cin = 1;
    for s in 0..=d {
        let c = width(spec, s);
        l.conv(&format!("down{s}.conv1"), c, cin, 3, true);
        l.conv(&format!("down{s}.conv2"), c, c, 3, true);
        cin = c;
    }
    for s in (0..d).rev() {
        let c = width(spec, s);
        l.deconv(&format!("up{s}.upsample"), 2 * c, c, 2);
        l.conv(&format!("up{s}.conv1"), c, 2 * c, 3, true);
        l.conv(&format!("up{s}.conv2"), c, c, 3, true);
    }
    l.conv("head", spec.num_classes, width(spec, 0), 1, true);
}

fn double_conv(tape: &mut Tape, x: Var, p: &mut Cursor) -> Result<Var> {
    let (w, b) = p.pair();
    let z = tape.conv2d(x, w, b, 1, 1)?;
    let x = tape.relu(z);
    let (w, b) = p.pair();
    let z = tape.conv2d(x, w, b, 1, 1)?;
    Ok(tape.relu(z))
}

pub(crate) fn forward(spec: &NetworkSpec, tape: &mut Tape, input: Var, p: &mut Cursor) -> Result<Var> {
    let mut skips = Vec::with_capacity(spec.depth);
    let mut x = input;
    for _ in 0..spec.depth {
        let f = double_conv(tape, x, p)?;
        skips.push(f);
        x = tape.maxpool2d(f, 2, 2)?;
    }
    x = double_conv(tape, x, p)?;
    for skip in skips.into_iter().rev() {
        let (w, b) = p.pair();
        let up = tape.transpose_conv2d(x, w, b, 2, 0)?;
        let cat = tape.concat_channels(skip, up)?;
        x = double_conv(tape, cat, p)?;
    }
    let (w, b) = p.pair();
    tape.conv2d(x, w, b, 1, 0)
}
