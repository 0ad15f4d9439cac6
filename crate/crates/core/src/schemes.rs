//! The four comparison schemes and the loops that train and evaluate them.
//!
//! * **TC**: the application network trained on clean images.
//! * **TD**: the application network trained on dirty images.
//! * **HV**: a denoiser trained with pixel MSE against the clean image, in
//!   front of the TC network.
//! * **NNV**: a denoiser trained through the frozen TC network's task loss.
//!
//! Every network sees intensities divided by 255.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Sample, Target};
use crate::error::{Error, Result};
use crate::metrics::{argmax, fmt_sig, LabelMap, MetricsReport, SampleScores, SegmentationScores};
use crate::networks::{save_checkpoint, Model, NetworkKind, NetworkSpec};
use crate::noise::{NoiseSpec, INTENSITY_MAX};
use crate::par;
use crate::rng::{derive_seed, Xoshiro256pp};
use crate::tensor_core::{adam_step, AdamState, BnMode, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Tc,
    Td,
    Hv,
    Nnv,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [SchemeKind::Tc, SchemeKind::Td, SchemeKind::Hv, SchemeKind::Nnv];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Tc => "tc",
            SchemeKind::Td => "td",
            SchemeKind::Hv => "hv",
            SchemeKind::Nnv => "nnv",
        }
    }

    pub fn has_denoiser(self) -> bool {
        matches!(self, SchemeKind::Hv | SchemeKind::Nnv)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name().to_uppercase())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?} (expected tc, td, hv or nnv)")))
    }
}

/// Which application weights the NNV denoiser is trained through.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Teacher {
    #[default]
    Clean,
    Dirty,
}

/// A fully specified scheme: networks plus train and test noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scheme {
    pub kind: SchemeKind,
    pub application: NetworkSpec,
    pub denoiser: Option<NetworkSpec>,
    pub train_noise: NoiseSpec,
    pub test_noise: NoiseSpec,
}

impl Scheme {
    pub fn validate(&self) -> Result<()> {
        self.application.validate()?;
        if self.application.kind.is_denoiser() {
            return Err(Error::Config(format!(
                "application network cannot be the denoiser kind {:?}",
                self.application.kind
            )));
        }
        match (&self.denoiser, self.kind.has_denoiser()) {
            (None, true) => return Err(Error::Config(format!("{} needs a denoiser spec", self.kind))),
            (Some(_), false) => return Err(Error::Config(format!("{} takes no denoiser", self.kind))),
            (Some(d), true) => {
                d.validate()?;
                if !d.kind.is_denoiser() {
                    return Err(Error::Config(format!("{:?} is not a denoiser", d.kind)));
                }
                check_composition(d, &self.application)?;
            }
            (None, false) => {}
        }
        self.train_noise.validate()?;
        self.test_noise.validate()
    }
}

fn check_composition(denoiser: &NetworkSpec, application: &NetworkSpec) -> Result<()> {
    let (out, inp) = (denoiser.output_shape(), application.input_shape());
    if out != inp {
        return Err(Error::InvalidComposition {
            denoiser: out,
            application: inp,
        });
    }
    Ok(())
}

fn default_lr() -> f64 {
    1e-3
}

fn default_validation() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Save an `epoch_NNNN` checkpoint every this many epochs; 0 keeps only the best.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Trailing share of the training samples held out to pick the best epoch.
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    /// Draw a fresh noise realisation of every training image each epoch.
    /// Held-out samples keep one fixed realisation.
    #[serde(default = "default_resample")]
    pub resample_noise: bool,
}

fn default_resample() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: default_lr(),
            seed: 0,
            checkpoint_every: 0,
            validation_fraction: default_validation(),
            resample_noise: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Loss of the very first optimisation step, before any update.
    pub initial_loss: f64,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.train_loss)
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,validation_loss\n");
        for r in &self.history {
            let v = r.validation_loss.map_or_else(|| "undefined".to_string(), fmt_sig);
            s.push_str(&format!("{},{},{}\n", r.epoch, fmt_sig(r.train_loss), v));
        }
        s
    }
}

/// Supervision for one training input.
#[derive(Clone, Debug, PartialEq)]
pub enum StageTarget {
    Labels(Vec<usize>),
    Class(usize),
    Image(Tensor),
}

impl StageTarget {
    pub fn from_target(t: &Target) -> Self {
        match t {
            Target::Labels(m) => StageTarget::Labels(m.labels().iter().map(|&l| usize::from(l)).collect()),
            Target::Class(c) => StageTarget::Class(*c),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub input: Tensor,
    pub target: StageTarget,
}

/// Intensities in `[0, 255]` to network units.
pub fn to_network(image: &Tensor) -> Tensor {
    image.map(|v| v / INTENSITY_MAX)
}

pub fn from_network(t: &Tensor) -> Tensor {
    t.map(|v| v * INTENSITY_MAX)
}

/// Dirty copies of `samples`, one noise stream per index under `split`.
pub fn corrupt(samples: &[Sample], noise: &NoiseSpec, split: &str) -> Result<Vec<Tensor>> {
    noise.validate()?;
    let idx: Vec<usize> = (0..samples.len()).collect();
    par::try_map(&idx, |&i| noise.derive(&format!("{split}/{i}")).apply(&samples[i].image))
}

/// Task loss of `output` against a label map or a class index.
pub fn task_loss(tape: &mut Tape, output: Var, target: &StageTarget) -> Result<Var> {
    match target {
        StageTarget::Labels(l) => tape.cross_entropy_loss(output, l),
        StageTarget::Class(c) => tape.cross_entropy_loss(output, &[*c]),
        StageTarget::Image(_) => Err(Error::InvalidInput("task loss needs a label target".into())),
    }
}

/// `L_g(g(f(x)), y)` recorded as one expression. `g` is bound as constants.
pub fn composed_loss(
    tape: &mut Tape,
    f: &mut Model,
    f_params: &[Var],
    f_mode: BnMode,
    g: &mut Model,
    x: Var,
    target: &StageTarget,
) -> Result<Var> {
    let z = f.forward(tape, x, f_params, f_mode)?;
    let got = tape.value(z).shape().to_vec();
    if got != g.spec.input_shape() {
        return Err(Error::InvalidComposition {
            denoiser: got,
            application: g.spec.input_shape(),
        });
    }
    let g_params = g.bind(tape, false);
    let out = g.forward(tape, z, &g_params, BnMode::Eval)?;
    task_loss(tape, out, target)
}

/// What a training run minimises.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// Cross-entropy of the model's own output.
    Task,
    /// Pixel MSE against a clean image.
    Restoration,
    /// Task loss through a frozen application network.
    Composed(&'a Model),
}

fn record(
    tape: &mut Tape,
    model: &mut Model,
    frozen: Option<&mut Model>,
    pair: &TrainPair,
    mode: BnMode,
) -> Result<(Var, Vec<Var>)> {
    let x = tape.constant(pair.input.clone());
    let params = model.bind(tape, true);
    let loss = match (frozen, &pair.target) {
        (Some(g), t) => composed_loss(tape, model, &params, mode, g, x, t)?,
        (None, StageTarget::Image(clean)) => {
            let y = model.forward(tape, x, &params, mode)?;
            let c = tape.constant(clean.clone());
            tape.mse_loss(y, c)?
        }
        (None, t) => {
            let y = model.forward(tape, x, &params, mode)?;
            task_loss(tape, y, t)?
        }
    };
    Ok((loss, params))
}

fn eval_loss(model: &Model, frozen: Option<&Model>, pairs: &[TrainPair]) -> Result<f64> {
    let losses = par::try_map(pairs, |p| {
        let mut m = model.clone();
        let mut g = frozen.cloned();
        let mut tape = Tape::new();
        let (loss, _) = record(&mut tape, &mut m, g.as_mut(), p, BnMode::Eval)?;
        Ok::<f64, Error>(f64::from(tape.value(loss).item()))
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Adam with batch size one over shuffled epochs, keeping the best-validation weights.
///
/// With a `checkpoint_dir` the best weights land in `best/` and periodic
/// snapshots in `epoch_NNNN/`.
pub fn fit(
    model: Model,
    pairs: &[TrainPair],
    objective: Objective<'_>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    fit_with(model, pairs, None, objective, cfg, checkpoint_dir)
}

/// Replaces the input of training pair `i` for `epoch`; the first epoch
/// always uses the given pairs.
pub type Redraw<'a> = &'a (dyn Fn(usize, usize) -> Result<Tensor> + Sync);

/// [`fit`] where each epoch's training inputs come from `redraw` when given.
pub fn fit_with(
    mut model: Model,
    pairs: &[TrainPair],
    redraw: Option<Redraw<'_>>,
    objective: Objective<'_>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut frozen = match objective {
        Objective::Composed(g) => {
            check_composition(&model.spec, &g.spec)?;
            Some(g.clone())
        }
        _ => None,
    };
    if matches!(objective, Objective::Restoration) != pairs.iter().all(|p| matches!(p.target, StageTarget::Image(_))) {
        return Err(Error::InvalidInput("targets do not match the training objective".into()));
    }
    let held = (pairs.len() as f64 * cfg.validation_fraction).floor() as usize;
    let held = if held >= pairs.len() { 0 } else { held };
    let (fixed, val) = pairs.split_at(pairs.len() - held);
    let mut train = fixed.to_vec();
    if train.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }

    let mut adam = AdamState::new(&model.params, cfg.learning_rate);
    let mut rng = Xoshiro256pp::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut initial_loss = None;

    for epoch in 1..=cfg.epochs {
        if let Some(redraw) = redraw.filter(|_| epoch > 1) {
            let idx: Vec<usize> = (0..train.len()).collect();
            let inputs = par::try_map(&idx, |&i| redraw(epoch, i))?;
            for (p, x) in train.iter_mut().zip(inputs) {
                p.input = x;
            }
        }
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for &i in &order {
            let mut tape = Tape::new();
            let (loss, params) = record(&mut tape, &mut model, frozen.as_mut(), &train[i], BnMode::Train)?;
            let l = f64::from(tape.value(loss).item());
            if !l.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss: l });
            }
            initial_loss.get_or_insert(l);
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = params.iter().map(|&p| grads.wrt(p)).collect();
            adam_step(&mut model.params, &g, &mut adam)?;
            total += l;
        }
        let train_loss = total / train.len() as f64;
        let validation_loss = if val.is_empty() {
            None
        } else {
            Some(eval_loss(&model, frozen.as_ref(), val)?)
        };
        let score = validation_loss.unwrap_or(train_loss);
        if !score.is_finite() || model.params.iter().any(|p| !p.all_finite()) {
            return Err(Error::TrainingDiverged { epoch, loss: score });
        }
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, epoch, model.clone()));
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(&model, &dir.join(format!("epoch_{epoch:04}")), epoch)?;
            }
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
        });
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&best_model, &dir.join("best"), best_epoch)?;
    }
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
        initial_loss: initial_loss.unwrap_or(f64::NAN),
    })
}

fn check_task(model: &Model, samples: &[Sample]) -> Result<()> {
    let kind = model.spec.kind;
    for s in samples {
        let ok = match &s.target {
            Target::Labels(m) => kind == NetworkKind::NoNewNet2d && usize::from(m.max_label()) < model.spec.num_classes,
            Target::Class(c) => kind == NetworkKind::Ccnn && *c < model.spec.num_classes,
        };
        if !ok {
            return Err(Error::Config(format!(
                "{kind:?} with {} classes cannot learn this dataset's targets",
                model.spec.num_classes
            )));
        }
    }
    Ok(())
}

/// Per-epoch redraw of the training inputs, or `None` when the config keeps
/// one realisation.
fn redraw_for<'a>(
    samples: &'a [Sample],
    noise: &'a NoiseSpec,
    cfg: &TrainConfig,
) -> Option<impl Fn(usize, usize) -> Result<Tensor> + Sync + 'a> {
    (cfg.resample_noise && !noise.is_identity()).then_some(move |epoch: usize, i: usize| {
        Ok(to_network(&noise.derive(&format!("train/{epoch}/{i}")).apply(&samples[i].image)?))
    })
}

fn task_pairs(samples: &[Sample], noise: &NoiseSpec) -> Result<Vec<TrainPair>> {
    Ok(corrupt(samples, noise, "train")?
        .iter()
        .zip(samples)
        .map(|(x, s)| TrainPair {
            input: to_network(x),
            target: StageTarget::from_target(&s.target),
        })
        .collect())
}

/// Train the application network on images corrupted by `noise`
/// (TC passes [`NoiseSpec::clean`]).
pub fn train_application(
    model: Model,
    samples: &[Sample],
    noise: &NoiseSpec,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    check_task(&model, samples)?;
    let redraw = redraw_for(samples, noise, cfg);
    let redraw = redraw.as_ref().map(|r| r as Redraw<'_>);
    fit_with(model, &task_pairs(samples, noise)?, redraw, Objective::Task, cfg, checkpoint_dir)
}

fn expect_denoiser(model: &Model) -> Result<()> {
    if !model.spec.kind.is_denoiser() {
        return Err(Error::Config(format!("{:?} is not a denoiser", model.spec.kind)));
    }
    Ok(())
}

/// Pixel-MSE denoiser training on (dirty, clean) pairs of the same sample.
pub fn train_denoiser_hv(
    model: Model,
    samples: &[Sample],
    noise: &NoiseSpec,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    expect_denoiser(&model)?;
    let pairs: Vec<TrainPair> = corrupt(samples, noise, "train")?
        .iter()
        .zip(samples)
        .map(|(x, s)| TrainPair {
            input: to_network(x),
            target: StageTarget::Image(to_network(&s.image)),
        })
        .collect();
    let redraw = redraw_for(samples, noise, cfg);
    let redraw = redraw.as_ref().map(|r| r as Redraw<'_>);
    fit_with(model, &pairs, redraw, Objective::Restoration, cfg, checkpoint_dir)
}

/// Denoiser training through the frozen application network `g`.
pub fn train_denoiser_nnv(
    model: Model,
    g: &Model,
    samples: &[Sample],
    noise: &NoiseSpec,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    expect_denoiser(&model)?;
    check_composition(&model.spec, &g.spec)?;
    check_task(g, samples)?;
    let redraw = redraw_for(samples, noise, cfg);
    let redraw = redraw.as_ref().map(|r| r as Redraw<'_>);
    fit_with(model, &task_pairs(samples, noise)?, redraw, Objective::Composed(g), cfg, checkpoint_dir)
}

/// Run a denoiser on a `[0, 255]` image, returning `[0, 255]` units (unclamped).
pub fn denoise(denoiser: &Model, image: &Tensor) -> Result<Tensor> {
    Ok(from_network(&denoiser.clone().infer(&to_network(image))?))
}

/// Corrupt the clean test images with `noise`, route them through the
/// optional denoiser and the application network, and score the result.
pub fn evaluate_scheme(
    label: &str,
    application: &Model,
    denoiser: Option<&Model>,
    test: &[Sample],
    noise: &NoiseSpec,
) -> Result<MetricsReport> {
    check_task(application, test)?;
    if let Some(f) = denoiser {
        expect_denoiser(f)?;
        check_composition(&f.spec, &application.spec)?;
    }
    let dirty = corrupt(test, noise, "test")?;
    let idx: Vec<usize> = (0..test.len()).collect();
    let classes = application.spec.num_classes;
    let samples = par::try_map(&idx, |&i| {
        let mut x = to_network(&dirty[i]);
        if let Some(f) = denoiser {
            x = f.clone().infer(&x)?;
        }
        let out = application.clone().infer(&x)?;
        Ok::<SampleScores, Error>(match &test[i].target {
            Target::Labels(truth) => {
                SampleScores::Segmentation(SegmentationScores::compute(&LabelMap::argmax(&out)?, truth, classes)?)
            }
            Target::Class(truth) => SampleScores::Classification {
                predicted: argmax(out.data()),
                truth: *truth,
            },
        })
    })?;
    Ok(MetricsReport {
        label: label.to_string(),
        classes,
        samples,
    })
}
