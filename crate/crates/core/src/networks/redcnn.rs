//! Residual encoder-decoder denoiser: five unpadded 3×3 convolutions, five
//! mirrored transposed convolutions, and shortcuts that add encoder
//! activations into the decoder every second layer.

use crate::error::{Error, Result};
use crate::networks::{Cursor, Layout, NetworkSpec};
use crate::tensor_core::{Tape, Var};

pub(crate) const LAYERS: usize = 5;
const KERNEL: usize = 3;

/// Smallest extent that survives five unpadded 3×3 convolutions.
pub(crate) const MIN_EXTENT: usize = LAYERS * (KERNEL - 1) + 1;

pub(crate) fn check_extents(h: usize, w: usize) -> Result<()> {
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(Error::shape(format!(
            "RED-CNN needs inputs of at least {MIN_EXTENT}x{MIN_EXTENT}, got {h}x{w}"
        )));
    }
    Ok(())
}

pub(crate) fn layout(spec: &NetworkSpec, l: &mut Layout) {
    let c = spec.base_channels;
    for i in 0..LAYERS {
        let cin = if i == 0 { 1 } else { c };
        l.conv(&format!("enc{}", i + 1), c, cin, KERNEL, true);
    }
    for i in 0..LAYERS {
        let cout = if i == LAYERS - 1 { 1 } else { c };
        l.deconv(&format!("dec{}", i + 1), c, cout, KERNEL);
    }
}

pub(crate) fn forward(spec: &NetworkSpec, tape: &mut Tape, input: Var, p: &mut Cursor) -> Result<Var> {
    // enc[0] is the input, enc[i] the i-th encoder activation.
    let mut enc = vec![input];
    for _ in 0..LAYERS {
        let (w, b) = p.pair();
        let z = tape.conv2d(*enc.last().unwrap(), w, b, 1, 0)?;
        enc.push(tape.relu(z));
    }
    let mut x = enc[LAYERS];
    for i in 0..LAYERS {
        let (w, b) = p.pair();
        let mut z = tape.transpose_conv2d(x, w, b, 1, 0)?;
        // decoder layer i restores the extent of enc[LAYERS - 1 - i]
        let mirror = LAYERS - 1 - i;
        let last = i == LAYERS - 1;
        if mirror % 2 == 0 && (mirror > 0 || spec.input_residual) {
            z = tape.add(z, enc[mirror])?;
        }
        x = if last { z } else { tape.relu(z) };
    }
    Ok(x)
}
