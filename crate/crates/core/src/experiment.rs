//! Config-driven comparison experiments.
//!
//! One [`ExperimentConfig`] describes a full comparison: dataset, networks,
//! schemes, train noise and a list of test noise levels. All randomness comes
//! from the global seed: replicate `r` uses `derive_seed(seed, "replicate/r")`,
//! and each purpose inside a replicate derives its own stream from that
//! (`dataset`, `noise/train`, `noise/test`, `init/application`,
//! `init/denoiser`, `train/application`, `train/denoiser`).
//!
//! Artifacts under `output_dir`:
//!
//! ```text
//! rep00/dataset/                     generated samples
//! rep00/<scheme>/<role>/best/        checkpoints (role: application | denoiser)
//! rep00/<scheme>/loss.csv            per-epoch loss trace
//! rep00/metrics/<scheme>_<noise>_*.csv
//! compare.csv                        one row per (noise, replicate, scheme)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, DatasetSpec, Task};
use crate::dct::{frequency_gradient, spectrum_sd, DctSpectrum, COMPONENTS};
use crate::error::{Error, Result};
use crate::tensor_core::{BnMode, Tensor};
use crate::metrics::{fmt_sig, MetricsReport};
use crate::networks::{load_checkpoint, Model, NetworkKind, NetworkSpec};
use crate::noise::{NoiseKind, NoiseSpec, DEFAULT_POISSON_SCALE};
use crate::par;
use crate::rng::derive_seed;
use crate::schemes::{
    self, corrupt, denoise, evaluate_scheme, to_network, SchemeKind, Teacher, TrainConfig, TrainOutcome,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub task: Task,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub train_count: usize,
    pub test_count: usize,
}

fn default_depth() -> usize {
    3
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub kind: NetworkKind,
    pub base_channels: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_true")]
    pub input_residual: bool,
}

impl NetworkConfig {
    pub fn spec(&self, classes: usize, height: usize, width: usize, seed: u64) -> NetworkSpec {
        NetworkSpec {
            depth: self.depth,
            input_residual: self.input_residual,
            ..NetworkSpec::new(self.kind, self.base_channels, classes, height, width, seed)
        }
    }
}

fn default_scale() -> f64 {
    DEFAULT_POISSON_SCALE
}

/// A noise model without its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "default_scale")]
    pub poisson_scale: f64,
}

impl NoiseConfig {
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            mu: 0.0,
            sigma,
            poisson_scale: DEFAULT_POISSON_SCALE,
        }
    }

    pub fn spec(&self, seed: u64) -> NoiseSpec {
        NoiseSpec {
            kind: self.kind,
            mu: self.mu,
            sigma: self.sigma,
            poisson_scale: self.poisson_scale,
            seed,
        }
    }

    /// File-name tag such as `gaussian_s70` or `poisson_k0.1`.
    pub fn tag(&self) -> String {
        match self.kind {
            NoiseKind::Gaussian if self.mu == 0.0 => format!("gaussian_s{}", fmt_sig(self.sigma)),
            NoiseKind::Gaussian => format!("gaussian_m{}_s{}", fmt_sig(self.mu), fmt_sig(self.sigma)),
            NoiseKind::Poisson => format!("poisson_k{}", fmt_sig(self.poisson_scale)),
        }
    }
}

fn default_lr() -> f64 {
    1e-3
}

fn default_validation() -> f64 {
    0.1
}

/// Training hyperparameters; the seed comes from the experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    #[serde(default = "default_true")]
    pub resample_noise: bool,
}

impl TrainSettings {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed,
            checkpoint_every: self.checkpoint_every,
            validation_fraction: self.validation_fraction,
            resample_noise: self.resample_noise,
        }
    }
}

/// Evaluate a scheme from existing checkpoint directories instead of its own.
/// A denoising scheme without a `denoiser` entry runs the application alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointOverride {
    pub application: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoiser: Option<PathBuf>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "one")]
    pub replicates: usize,
    pub schemes: Vec<SchemeKind>,
    /// Application weights the NNV denoiser is trained through.
    #[serde(default)]
    pub teacher: Teacher,
    pub dataset: DatasetConfig,
    pub application: NetworkConfig,
    pub denoiser: NetworkConfig,
    pub train_noise: NoiseConfig,
    pub test_noise: Vec<NoiseConfig>,
    pub train: TrainSettings,
    /// Denoiser hyperparameters; `train` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoiser_train: Option<TrainSettings>,
    /// Keyed by scheme name (`tc`, `td`, `hv`, `nnv`).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub checkpoints: BTreeMap<String, CheckpointOverride>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn dataset_spec(&self, seed: u64) -> DatasetSpec {
        let d = &self.dataset;
        DatasetSpec {
            task: d.task,
            height: d.height,
            width: d.width,
            classes: d.classes,
            train_count: d.train_count,
            test_count: d.test_count,
            seed,
        }
    }

    pub fn application_spec(&self, seed: u64) -> NetworkSpec {
        let d = &self.dataset;
        self.application.spec(d.classes, d.height, d.width, seed)
    }

    pub fn denoiser_spec(&self, seed: u64) -> NetworkSpec {
        let d = &self.dataset;
        self.denoiser.spec(0, d.height, d.width, seed)
    }

    pub fn denoiser_settings(&self) -> &TrainSettings {
        self.denoiser_train.as_ref().unwrap_or(&self.train)
    }

    pub fn validate(&self) -> Result<()> {
        if i64::try_from(self.seed).is_err() {
            return Err(Error::Config(format!("seed {} exceeds the TOML integer range", self.seed)));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.schemes.is_empty() {
            return Err(Error::Config("no schemes listed".into()));
        }
        if self.test_noise.is_empty() {
            return Err(Error::Config("no test noise levels listed".into()));
        }
        self.dataset_spec(0).validate()?;
        let app = self.application_spec(0);
        let expected = match self.dataset.task {
            Task::Segmentation => NetworkKind::NoNewNet2d,
            Task::Classification => NetworkKind::Ccnn,
        };
        if app.kind != expected {
            return Err(Error::Config(format!(
                "{:?} data needs a {expected:?} application network, got {:?}",
                self.dataset.task, app.kind
            )));
        }
        for kind in &self.schemes {
            schemes::Scheme {
                kind: *kind,
                application: app.clone(),
                denoiser: kind.has_denoiser().then(|| self.denoiser_spec(0)),
                train_noise: self.train_noise.spec(0),
                test_noise: self.test_noise[0].spec(0),
            }
            .validate()?;
        }
        for n in &self.test_noise {
            n.spec(0).validate()?;
        }
        self.train.config(0).validate()?;
        self.denoiser_settings().config(0).validate()?;
        for (name, o) in &self.checkpoints {
            let kind: SchemeKind = name.parse()?;
            if !kind.has_denoiser() && o.denoiser.is_some() {
                return Err(Error::Config(format!("checkpoint override for {kind} cannot name a denoiser")));
            }
        }
        Ok(())
    }
}

/// Scores of one scheme on one replicate at one test noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub noise: String,
    pub replicate: usize,
    pub scheme: SchemeKind,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

impl Comparison {
    /// Headline metric per replicate, in replicate order.
    pub fn primary(&self, noise: &str, scheme: SchemeKind) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.noise == noise && r.scheme == scheme)
            .filter_map(|r| r.report.primary())
            .collect()
    }

    pub fn median_primary(&self, noise: &str, scheme: SchemeKind) -> Option<f64> {
        median(self.primary(noise, scheme))
    }

    /// Wide table: key columns, then `<metric>_mean,<metric>_sd` per metric.
    pub fn to_csv(&self) -> String {
        let metrics: Vec<String> = self
            .rows
            .first()
            .map(|r| r.report.summary().into_iter().map(|s| s.metric).collect())
            .unwrap_or_default();
        let mut out = String::from("test_noise,replicate,scheme");
        for m in &metrics {
            let _ = write!(out, ",{m}_mean,{m}_sd");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.noise, r.replicate, r.scheme.name());
            let summary = r.report.summary();
            for m in &metrics {
                match summary.iter().find(|s| &s.metric == m) {
                    Some(s) => {
                        let _ = write!(out, ",{},{}", fmt_sig(s.value.mean), fmt_sig(s.value.sd));
                    }
                    None => out.push_str(",undefined,undefined"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A validated config plus the operations that realise it on disk.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn replicate_seed(&self, r: usize) -> u64 {
        derive_seed(self.config.seed, &format!("replicate/{r}"))
    }

    fn seed(&self, r: usize, purpose: &str) -> u64 {
        derive_seed(self.replicate_seed(r), purpose)
    }

    pub fn replicate_dir(&self, r: usize) -> PathBuf {
        self.config.output_dir.join(format!("rep{r:02}"))
    }

    /// Directory holding `best/` for one role of a scheme.
    pub fn checkpoint_dir(&self, r: usize, scheme: SchemeKind, role: &str) -> PathBuf {
        self.replicate_dir(r).join(scheme.name()).join(role)
    }

    pub fn dataset(&self, r: usize) -> Result<Dataset> {
        data::generate(&self.config.dataset_spec(self.seed(r, "dataset")))
    }

    pub fn train_noise(&self, r: usize) -> NoiseSpec {
        self.config.train_noise.spec(self.seed(r, "noise/train"))
    }

    pub fn test_noise(&self, r: usize, noise: &NoiseConfig) -> NoiseSpec {
        noise.spec(self.seed(r, "noise/test"))
    }

    pub fn generate(&self) -> Result<()> {
        for r in 0..self.config.replicates {
            data::save_dataset(&self.dataset(r)?, &self.replicate_dir(r).join("dataset"))?;
        }
        Ok(())
    }

    fn application_model(&self, r: usize) -> Result<Model> {
        Model::build(&self.config.application_spec(self.seed(r, "init/application")))
    }

    fn denoiser_model(&self, r: usize) -> Result<Model> {
        Model::build(&self.config.denoiser_spec(self.seed(r, "init/denoiser")))
    }

    fn teacher_scheme(&self) -> SchemeKind {
        match self.config.teacher {
            Teacher::Clean => SchemeKind::Tc,
            Teacher::Dirty => SchemeKind::Td,
        }
    }

    fn load_best(dir: &Path) -> Result<Model> {
        Ok(load_checkpoint(&dir.join("best"))?.0)
    }

    fn finish(&self, r: usize, scheme: SchemeKind, out: &TrainOutcome) -> Result<()> {
        write(&self.replicate_dir(r).join(scheme.name()).join("loss.csv"), &out.loss_csv())
    }

    /// Train one scheme's own network for replicate `r`. NNV first trains its
    /// teacher when that checkpoint is missing.
    pub fn train(&self, r: usize, scheme: SchemeKind) -> Result<()> {
        let ds = self.dataset(r)?;
        let app_cfg = self.config.train.config(self.seed(r, "train/application"));
        let den_cfg = self.config.denoiser_settings().config(self.seed(r, "train/denoiser"));
        let out = match scheme {
            SchemeKind::Tc | SchemeKind::Td => {
                let noise = if scheme == SchemeKind::Tc {
                    NoiseSpec::clean()
                } else {
                    self.train_noise(r)
                };
                let dir = self.checkpoint_dir(r, scheme, "application");
                schemes::train_application(self.application_model(r)?, &ds.train, &noise, &app_cfg, Some(&dir))?
            }
            SchemeKind::Hv => {
                let dir = self.checkpoint_dir(r, scheme, "denoiser");
                schemes::train_denoiser_hv(self.denoiser_model(r)?, &ds.train, &self.train_noise(r), &den_cfg, Some(&dir))?
            }
            SchemeKind::Nnv => {
                let teacher = self.teacher_scheme();
                let tdir = self.checkpoint_dir(r, teacher, "application");
                if !tdir.join("best/manifest.json").exists() {
                    self.train(r, teacher)?;
                }
                let g = Self::load_best(&tdir)?;
                let dir = self.checkpoint_dir(r, scheme, "denoiser");
                schemes::train_denoiser_nnv(self.denoiser_model(r)?, &g, &ds.train, &self.train_noise(r), &den_cfg, Some(&dir))?
            }
        };
        self.finish(r, scheme, &out)
    }

    /// Train the stages whose `best/` checkpoint is missing.
    pub fn train_missing(&self, r: usize) -> Result<()> {
        let role = |s: SchemeKind| if s.has_denoiser() { "denoiser" } else { "application" };
        let missing: Vec<SchemeKind> = self
            .stages()
            .into_iter()
            .filter(|&s| !self.checkpoint_dir(r, s, role(s)).join("best/manifest.json").exists())
            .collect();
        self.train_stages(r, missing)
    }

    /// Trained (application, denoiser) for a scheme, honouring overrides.
    pub fn components(&self, r: usize, scheme: SchemeKind) -> Result<(Model, Option<Model>)> {
        if let Some(o) = self.config.checkpoints.get(scheme.name()) {
            let app = Self::load_best(&o.application)?;
            let den = o.denoiser.as_deref().map(Self::load_best).transpose()?;
            return Ok((app, den));
        }
        let app_scheme = match scheme {
            SchemeKind::Tc | SchemeKind::Hv => SchemeKind::Tc,
            SchemeKind::Td => SchemeKind::Td,
            SchemeKind::Nnv => self.teacher_scheme(),
        };
        let app = Self::load_best(&self.checkpoint_dir(r, app_scheme, "application"))?;
        let den = if scheme.has_denoiser() {
            Some(Self::load_best(&self.checkpoint_dir(r, scheme, "denoiser"))?)
        } else {
            None
        };
        Ok((app, den))
    }

    /// Evaluate and write `<scheme>_<noise>_{samples,summary}.csv`.
    pub fn evaluate(&self, r: usize, scheme: SchemeKind, noise: &NoiseConfig) -> Result<MetricsReport> {
        let ds = self.dataset(r)?;
        let (app, den) = self.components(r, scheme)?;
        let label = format!("{}_{}", scheme.name(), noise.tag());
        let report = evaluate_scheme(&label, &app, den.as_ref(), &ds.test, &self.test_noise(r, noise))?;
        report.write_csv(&self.replicate_dir(r).join("metrics"))?;
        Ok(report)
    }

    /// Stages a scheme's evaluation depends on, in training order.
    fn stages(&self) -> Vec<SchemeKind> {
        let mut need: Vec<SchemeKind> = Vec::new();
        for s in &self.config.schemes {
            if self.config.checkpoints.contains_key(s.name()) {
                continue;
            }
            let deps: &[SchemeKind] = match s {
                SchemeKind::Tc => &[SchemeKind::Tc],
                SchemeKind::Td => &[SchemeKind::Td],
                SchemeKind::Hv => &[SchemeKind::Tc, SchemeKind::Hv],
                SchemeKind::Nnv => &[SchemeKind::Nnv],
            };
            need.extend(deps);
            if *s == SchemeKind::Nnv {
                need.push(self.teacher_scheme());
            }
        }
        need.sort();
        need.dedup();
        need
    }

    /// Train every stage the listed schemes need for replicate `r`. Stages
    /// without dependencies run concurrently; NNV follows its teacher.
    pub fn train_replicate(&self, r: usize) -> Result<()> {
        self.train_stages(r, self.stages())
    }

    fn train_stages(&self, r: usize, stages: Vec<SchemeKind>) -> Result<()> {
        let (last, first): (Vec<SchemeKind>, Vec<SchemeKind>) =
            stages.into_iter().partition(|s| *s == SchemeKind::Nnv);
        par::try_map(&first, |s| self.train(r, *s))?;
        for s in last {
            self.train(r, s)?;
        }
        Ok(())
    }

    /// Full pipeline: train all replicates, evaluate every scheme at every
    /// test noise level, and write `compare.csv`.
    pub fn run(&self) -> Result<Comparison> {
        let reps: Vec<usize> = (0..self.config.replicates).collect();
        par::try_map(&reps, |&r| self.train_replicate(r))?;
        self.compare()
    }

    /// Like [`run`](Self::run) but reusing checkpoints already on disk.
    pub fn resume(&self) -> Result<Comparison> {
        let reps: Vec<usize> = (0..self.config.replicates).collect();
        par::try_map(&reps, |&r| self.train_missing(r))?;
        self.compare()
    }

    /// Evaluate already trained components and write `compare.csv`.
    pub fn compare(&self) -> Result<Comparison> {
        let mut jobs = Vec::new();
        for n in &self.config.test_noise {
            for r in 0..self.config.replicates {
                for &s in &self.config.schemes {
                    jobs.push((n.clone(), r, s));
                }
            }
        }
        let rows = par::try_map(&jobs, |(n, r, s)| {
            Ok::<ComparisonRow, Error>(ComparisonRow {
                noise: n.tag(),
                replicate: *r,
                scheme: *s,
                report: self.evaluate(*r, *s, n)?,
            })
        })?;
        let cmp = Comparison { rows };
        write(&self.config.output_dir.join("compare.csv"), &cmp.to_csv())?;
        Ok(cmp)
    }

    /// Writes the config actually used next to its artifacts.
    pub fn save_config(&self) -> Result<()> {
        write(&self.config.output_dir.join("config.toml"), &self.config.to_toml())
    }

    /// Mean DCT spectrum of a scheme's denoised test images at one noise level.
    pub fn denoised_spectrum(&self, r: usize, scheme: SchemeKind, noise: &NoiseConfig) -> Result<DctSpectrum> {
        let (_, den) = self.components(r, scheme)?;
        let den = den.ok_or_else(|| Error::Config(format!("{scheme} runs without a denoiser")))?;
        let ds = self.dataset(r)?;
        let dirty = corrupt(&ds.test, &self.test_noise(r, noise), "test")?;
        let spectra = par::try_map(&dirty, |x| spectrum_sd(&denoise(&den, x)?))?;
        let mut values = [0.0; COMPONENTS];
        for s in &spectra {
            for (v, x) in values.iter_mut().zip(&s.values) {
                *v += x / spectra.len() as f64;
            }
        }
        Ok(DctSpectrum {
            values,
            blocks: spectra.iter().map(|s| s.blocks).sum(),
        })
    }
}

/// Gradient of the summed top-class score of `model` with respect to a
/// `[0, 255]` image, resolved into DCT components.
pub fn application_frequency_gradient(model: &Model, image: &Tensor) -> Result<DctSpectrum> {
    let mut m = model.clone();
    let x = to_network(image);
    let scores = model.clone().infer(&x)?;
    let mask = top_class_mask(&scores);
    frequency_gradient(&x, |tape, v| {
        let params = m.bind(tape, false);
        let out = m.forward(tape, v, &params, BnMode::Eval)?;
        tape.dot(out, &mask)
    })
}

/// One-hot over the leading (class) axis at each position's maximum.
fn top_class_mask(scores: &Tensor) -> Tensor {
    let k = scores.shape()[0];
    let n = scores.len() / k;
    let d = scores.data();
    let mut mask = vec![0.0; scores.len()];
    for p in 0..n {
        let best = (0..k).fold(0, |b, c| if d[c * n + p] > d[b * n + p] { c } else { b });
        mask[best * n + p] = 1.0;
    }
    Tensor::new(scores.shape().to_vec(), mask).expect("same shape")
}

#[cfg(test)]
mod tests;
