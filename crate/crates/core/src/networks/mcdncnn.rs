//! DnCNN-style residual denoiser: conv+ReLU, seven conv+BN+ReLU blocks, and
//! a final conv that predicts the noise, which is subtracted from the input.

use crate::error::Result;
use crate::networks::{Cursor, Layout, NetworkSpec};
use crate::tensor_core::{BnMode, RunningStats, Tape, Tensor, Var};

pub(crate) const BN_BLOCKS: usize = 7;

pub(crate) fn layout(spec: &NetworkSpec, l: &mut Layout) {
    let c = spec.base_channels;
    l.conv("head", c, 1, 3, true);
    for i in 0..BN_BLOCKS {
        // bias is redundant ahead of batch norm
        l.conv(&format!("block{}", i + 1), c, c, 3, false);
        l.batchnorm(&format!("block{}.bn", i + 1), c);
    }
    l.conv("residual", 1, c, 3, true);
}

pub(crate) fn forward(
    _spec: &NetworkSpec,
    tape: &mut Tape,
    input: Var,
    p: &mut Cursor,
    stats: &mut [RunningStats],
    mode: BnMode,
) -> Result<Var> {
    let (w, b) = p.pair();
    let z = tape.conv2d(input, w, b, 1, 1)?;
    let mut x = tape.relu(z);
    for stat in stats.iter_mut().take(BN_BLOCKS) {
        let w = p.take();
        let cout = tape.value(w).shape()[0];
        let zero_bias = tape.constant(Tensor::zeros(&[cout]));
        let z = tape.conv2d(x, w, zero_bias, 1, 1)?;
        let (g, bt) = p.pair();
        let n = tape.batchnorm2d(z, g, bt, stat, mode)?;
        x = tape.relu(n);
    }
    let (w, b) = p.pair();
    let noise = tape.conv2d(x, w, b, 1, 1)?;
    tape.sub(input, noise)
}
