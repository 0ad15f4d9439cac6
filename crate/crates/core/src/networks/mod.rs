//! The four network families: two denoisers (RED-CNN, MCDnCNN), a 2-D
//! U-Net segmenter in the No-New-Net style, and a max-pooling classifier.
//!
//! A [`Model`] is a plain value: a spec, an ordered parameter list and any
//! batch-norm running statistics. Each forward call binds the parameters to a
//! fresh [`Tape`], so the same model can be trained or frozen per call.

mod ccnn;
mod checkpoint;
mod mcdncnn;
mod redcnn;
mod unet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Xoshiro256pp};
use crate::tensor_core::{xavier_uniform_init, BnMode, RunningStats, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    RedCnn,
    McDnCnn,
    NoNewNet2d,
    Ccnn,
}

impl NetworkKind {
    pub fn is_denoiser(self) -> bool {
        matches!(self, NetworkKind::RedCnn | NetworkKind::McDnCnn)
    }
}

fn default_depth() -> usize {
    3
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub base_channels: usize,
    /// Classes for the segmentation and classification kinds; ignored by denoisers.
    #[serde(default)]
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Encoder depth of the U-Net.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// RED-CNN: add the input to the final (linear) layer's output.
    #[serde(default = "default_true")]
    pub input_residual: bool,
}

impl NetworkSpec {
    pub fn new(kind: NetworkKind, base_channels: usize, num_classes: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            kind,
            base_channels,
            num_classes,
            height,
            width,
            seed,
            depth: default_depth(),
            input_residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if !self.kind.is_denoiser() && self.num_classes < 2 {
            return Err(Error::Config(format!(
                "{:?} needs at least 2 classes, got {}",
                self.kind, self.num_classes
            )));
        }
        match self.kind {
            NetworkKind::RedCnn => redcnn::check_extents(self.height, self.width),
            NetworkKind::McDnCnn => Ok(()),
            NetworkKind::NoNewNet2d => unet::check_extents(self.height, self.width, self.depth),
            NetworkKind::Ccnn => ccnn::check_extents(self.height, self.width),
        }
    }

    /// Shape of the model output for a `[1, height, width]` input.
    pub fn output_shape(&self) -> Vec<usize> {
        match self.kind {
            NetworkKind::RedCnn | NetworkKind::McDnCnn => vec![1, self.height, self.width],
            NetworkKind::NoNewNet2d => vec![self.num_classes, self.height, self.width],
            NetworkKind::Ccnn => vec![self.num_classes],
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![1, self.height, self.width]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum InitKind {
    Xavier,
    Zeros,
    Ones,
}

/// Ordered parameter declarations collected while describing an architecture.
#[derive(Default)]
pub(crate) struct Layout {
    pub entries: Vec<(String, Vec<usize>, InitKind)>,
    pub bn_channels: Vec<usize>,
}

impl Layout {
    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, bias: bool) {
        self.entries
            .push((format!("{name}.weight"), vec![cout, cin, k, k], InitKind::Xavier));
        if bias {
            self.entries.push((format!("{name}.bias"), vec![cout], InitKind::Zeros));
        }
    }

    /// Transposed conv kernels are stored `[C_in, C_out, k, k]`.
    pub fn deconv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.entries
            .push((format!("{name}.weight"), vec![cin, cout, k, k], InitKind::Xavier));
        self.entries.push((format!("{name}.bias"), vec![cout], InitKind::Zeros));
    }

    pub fn batchnorm(&mut self, name: &str, c: usize) {
        self.entries.push((format!("{name}.gamma"), vec![c], InitKind::Ones));
        self.entries.push((format!("{name}.beta"), vec![c], InitKind::Zeros));
        self.bn_channels.push(c);
    }

    pub fn linear(&mut self, name: &str, out: usize, inp: usize) {
        self.entries
            .push((format!("{name}.weight"), vec![out, inp], InitKind::Xavier));
        self.entries.push((format!("{name}.bias"), vec![out], InitKind::Zeros));
    }
}

/// Sequential reader over bound parameter handles.
pub(crate) struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, next: 0 }
    }

    pub fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }

    pub fn pair(&mut self) -> (Var, Var) {
        (self.take(), self.take())
    }

    pub fn finish(self) {
        debug_assert_eq!(self.next, self.vars.len(), "parameter layout drift");
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub bn_stats: Vec<RunningStats>,
}

fn layout_for(spec: &NetworkSpec) -> Layout {
    let mut l = Layout::default();
    match spec.kind {
        NetworkKind::RedCnn => redcnn::layout(spec, &mut l),
        NetworkKind::McDnCnn => mcdncnn::layout(spec, &mut l),
        NetworkKind::NoNewNet2d => unet::layout(spec, &mut l),
        NetworkKind::Ccnn => ccnn::layout(spec, &mut l),
    }
    l
}

pub fn build_redcnn(spec: &NetworkSpec) -> Result<Model> {
    expect_kind(spec, NetworkKind::RedCnn)?;
    Model::build(spec)
}

pub fn build_mcdncnn(spec: &NetworkSpec) -> Result<Model> {
    expect_kind(spec, NetworkKind::McDnCnn)?;
    Model::build(spec)
}

pub fn build_nonewnet2d(spec: &NetworkSpec) -> Result<Model> {
    expect_kind(spec, NetworkKind::NoNewNet2d)?;
    Model::build(spec)
}

pub fn build_ccnn(spec: &NetworkSpec) -> Result<Model> {
    expect_kind(spec, NetworkKind::Ccnn)?;
    Model::build(spec)
}

fn expect_kind(spec: &NetworkSpec, kind: NetworkKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::Config(format!("expected {kind:?} spec, got {:?}", spec.kind)));
    }
    Ok(())
}

impl Model {
    /// Build any kind; parameters are a pure function of the spec.
    pub fn build(spec: &NetworkSpec) -> Result<Model> {
        spec.validate()?;
        let layout = layout_for(spec);
        let mut names = Vec::with_capacity(layout.entries.len());
        let mut params = Vec::with_capacity(layout.entries.len());
        for (name, shape, init) in layout.entries {
            let t = match init {
                InitKind::Xavier => xavier_uniform_init(&shape, derive_seed(spec.seed, &name)),
                InitKind::Zeros => Tensor::zeros(&shape),
                InitKind::Ones => Tensor::full(&shape, 1.0),
            };
            names.push(name);
            params.push(t);
        }
        Ok(Model {
            spec: spec.clone(),
            names,
            params,
            bn_stats: layout.bn_channels.iter().map(|&c| RunningStats::new(c)).collect(),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Overwrite every parameter with a deterministic pseudo-random value in
    /// `[-scale, scale]`; used for tests that need non-trivial weights everywhere.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut r = Xoshiro256pp::seed_from_u64(seed);
        for p in &mut self.params {
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v = r.uniform(-scale, scale) as f32);
        }
    }

    /// Bind parameters onto `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Record the forward pass of `input` (`[1, m, n]`) onto `tape`.
    pub fn forward(&mut self, tape: &mut Tape, input: Var, params: &[Var], mode: BnMode) -> Result<Var> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::shape(format!(
                "network input must be [1, m, n], got {shape:?}"
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} bound parameters for a model with {}",
                params.len(),
                self.params.len()
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let spec = self.spec.clone();
        let mut cur = Cursor::new(params);
        let out = match spec.kind {
            NetworkKind::RedCnn => {
                redcnn::check_extents(h, w)?;
                redcnn::forward(&spec, tape, input, &mut cur)?
            }
            NetworkKind::McDnCnn => mcdncnn::forward(&spec, tape, input, &mut cur, &mut self.bn_stats, mode)?,
            NetworkKind::NoNewNet2d => {
                unet::check_extents(h, w, spec.depth)?;
                unet::forward(&spec, tape, input, &mut cur)?
            }
            NetworkKind::Ccnn => {
                if (h, w) != (spec.height, spec.width) {
                    return Err(Error::shape(format!(
                        "classifier built for {}x{} got {h}x{w}",
                        spec.height, spec.width
                    )));
                }
                ccnn::forward(&spec, tape, input, &mut cur)?
            }
        };
        cur.finish();
        Ok(out)
    }

    /// Inference without gradients (batch norm in eval mode).
    pub fn infer(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let params = self.bind(&mut tape, false);
        let y = self.forward(&mut tape, x, &params, BnMode::Eval)?;
        Ok(tape.value(y).clone())
    }

    /// Combined checksum of all parameters and running statistics.
    pub fn checksum(&self) -> u64 {
        let mut h = 0u64;
        for p in &self.params {
            h = h.rotate_left(7) ^ p.checksum();
        }
        for s in &self.bn_stats {
            for v in s.mean.iter().chain(&s.var) {
                h = h.rotate_left(3) ^ u64::from(v.to_bits());
            }
        }
        h
    }
}
