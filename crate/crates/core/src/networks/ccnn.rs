//! Classification CNN: four conv+ReLU+2×2 max-pool stages, then one fully
//! connected layer onto the class logits.

use crate::error::{Error, Result};
use crate::networks::{Cursor, Layout, NetworkSpec};
use crate::tensor_core::{Tape, Var};

pub(crate) const STAGES: usize = 4;

pub(crate) fn check_extents(h: usize, w: usize) -> Result<()> {
    let f = 1 << STAGES;
    if h < f || w < f {
        return Err(Error::shape(format!(
            "classifier needs inputs of at least {f}x{f}, got {h}x{w}"
        )));
    }
    Ok(())
}

pub(crate) fn stage_width(spec: &NetworkSpec, s: usize) -> usize {
    spec.base_channels << s.min(3)
}

/// Flattened feature count after the last pooling stage.
pub(crate) fn feature_len(spec: &NetworkSpec) -> usize {
    let (mut h, mut w) = (spec.height, spec.width);
    for _ in 0..STAGES {
        h /= 2;
        w /= 2;
    }
    stage_width(spec, STAGES - 1) * h * w
}

pub(crate) fn layout(spec: &NetworkSpec, l: &mut Layout) {
    let mut cin = 1;
    for s in 0..STAGES {
        let c = stage_width(spec, s);
        l.conv(&format!("stage{s}"), c, cin, 3, true);
        cin = c;
    }
    l.linear("fc", spec.num_classes, feature_len(spec));
}

pub(crate) fn forward(spec: &NetworkSpec, tape: &mut Tape, input: Var, p: &mut Cursor) -> Result<Var> {
    let mut x = input;
    for _ in 0..STAGES {
        let (w, b) = p.pair();
        let z = tape.conv2d(x, w, b, 1, 1)?;
        let r = tape.relu(z);
        x = tape.maxpool2d(r, 2, 2)?;
    }
    let flat = tape.reshape(x, &[feature_len(spec)])?;
    let (w, b) = p.pair();
    tape.linear(flat, w, b)
}
