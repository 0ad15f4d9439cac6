//! Synthetic phantom datasets and their on-disk layout.
//!
//! Segmentation phantoms place smooth ellipses, annuli and bars on a textured
//! background. Each foreground class has its own shape family but the class
//! intensity ranges overlap, so a per-pixel intensity rule cannot separate
//! them. Classification phantoms encode the class in morphology alone: the
//! global mean is re-drawn independently of the class after rendering.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/train/0000.img.tsr1   [1, m, n] intensities in [0, 255]
//! <dir>/train/0000.lbl.tsr1   [m, n] class indices   (segmentation)
//! <dir>/train/0000.cls        "2\n"                   (classification)
//! <dir>/test/...
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::noise::INTENSITY_MAX;
use crate::par;
use crate::rng::{derive_seed, Xoshiro256pp};
use crate::tensor_core::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Segmentation,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task: Task,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn segmentation(height: usize, width: usize, classes: usize, train: usize, test: usize, seed: u64) -> Self {
        Self {
            task: Task::Segmentation,
            height,
            width,
            classes,
            train_count: train,
            test_count: test,
            seed,
        }
    }

    pub fn classification(height: usize, width: usize, classes: usize, train: usize, test: usize, seed: u64) -> Self {
        Self {
            task: Task::Classification,
            ..Self::segmentation(height, width, classes, train, test, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "phantoms need at least 16x16 pixels, got {}x{}",
                self.height, self.width
            )));
        }
        if self.classes < 2 || self.classes > 256 {
            return Err(Error::Config(format!("classes must be in 2..=256, got {}", self.classes)));
        }
        if self.task == Task::Classification && self.classes > 3 {
            return Err(Error::Config(format!(
                "classification phantoms define 2 or 3 morphologies, got {} classes",
                self.classes
            )));
        }
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::Config("train and test counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Labels(LabelMap),
    Class(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, m, n]`, values in `[0, 255]`.
    pub image: Tensor,
    pub target: Target,
}

impl Sample {
    pub fn labels(&self) -> Option<&LabelMap> {
        match &self.target {
            Target::Labels(l) => Some(l),
            Target::Class(_) => None,
        }
    }

    pub fn class(&self) -> Option<usize> {
        match self.target {
            Target::Class(c) => Some(c),
            Target::Labels(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    /// Filled ellipse with semi-axes `a`, `b`.
    Ellipse { a: f64, b: f64 },
    /// Ring between radii `inner` and `outer`.
    Annulus { inner: f64, outer: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Structure {
    class: u8,
    cy: f64,
    cx: f64,
    angle: f64,
    shape: Shape,
    intensity: f64,
}

impl Structure {
    /// Signed distance-like field: negative inside, in pixels near the edge.
    fn field(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match self.shape {
            Shape::Ellipse { a, b } => {
                let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                (r - 1.0) * a.min(b)
            }
            Shape::Annulus { inner, outer } => {
                let r = (u * u + v * v).sqrt();
                let mid = 0.5 * (inner + outer);
                (r - mid).abs() - 0.5 * (outer - inner)
            }
        }
    }

    fn extent(&self) -> f64 {
        match self.shape {
            Shape::Ellipse { a, b } => a.max(b),
            Shape::Annulus { outer, .. } => outer,
        }
    }
}

const EDGE_SOFTNESS: f64 = 0.8;

/// Smooth random field: a sum of a few low-frequency plane waves.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut Xoshiro256pp, h: usize, w: usize, amplitude: f64, max_cycles: f64) -> Self {
        let waves = (0..4)
            .map(|_| {
                let fy = rng.uniform(-max_cycles, max_cycles) / h as f64;
                let fx = rng.uniform(-max_cycles, max_cycles) / w as f64;
                let phase = rng.uniform(0.0, std::f64::consts::TAU);
                (fy, fx, phase, amplitude * rng.uniform(0.5, 1.0) / 2.0)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        self.waves
            .iter()
            .map(|&(fy, fx, p, a)| a * (std::f64::consts::TAU * (fy * y + fx * x) + p).sin())
            .sum()
    }
}

fn shape_for_class(class: u8, rng: &mut Xoshiro256pp, scale: f64) -> Shape {
    match (class - 1) % 3 {
        0 => {
            let r = rng.uniform(7.0, 12.0) * scale;
            Shape::Ellipse {
                a: r,
                b: r * rng.uniform(0.6, 1.0),
            }
        }
        1 => {
            let outer = rng.uniform(8.0, 12.0) * scale;
            Shape::Annulus {
                inner: outer - rng.uniform(3.0, 4.5) * scale,
                outer,
            }
        }
        _ => {
            let a = rng.uniform(9.0, 14.0) * scale;
            Shape::Ellipse {
                a,
                b: rng.uniform(2.5, 3.5) * scale,
            }
        }
    }
}

/// Rejection-sample a centre that keeps the structure inside the image and
/// clear of those already placed; falls back to the last draw.
fn place(rng: &mut Xoshiro256pp, h: usize, w: usize, extent: f64, placed: &[Structure]) -> (f64, f64) {
    let margin = (extent + 1.0).min(h.min(w) as f64 / 2.0 - 1.0);
    let mut best = (h as f64 / 2.0, w as f64 / 2.0);
    for _ in 0..30 {
        let cy = rng.uniform(margin, h as f64 - 1.0 - margin);
        let cx = rng.uniform(margin, w as f64 - 1.0 - margin);
        best = (cy, cx);
        let clear = placed.iter().all(|s| {
            let d = ((s.cy - cy).powi(2) + (s.cx - cx).powi(2)).sqrt();
            d > s.extent() + extent + 2.0
        });
        if clear {
            break;
        }
    }
    best
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Renders structures over a textured background; later structures paint over earlier ones.
fn render(h: usize, w: usize, rng: &mut Xoshiro256pp, structures: &[Structure], background: f64) -> (Tensor, LabelMap) {
    let bg_tex = Texture::new(rng, h, w, 30.0, 3.0);
    let fg_tex: Vec<Texture> = structures
        .iter()
        .map(|_| Texture::new(rng, h, w, 20.0, 5.0))
        .collect();
    let mut labels = LabelMap::filled(h, w, 0);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let mut v = background + bg_tex.at(fy, fx);
            for (s, tex) in structures.iter().zip(&fg_tex) {
                let d = s.field(fy, fx);
                let cover = sigmoid(-d / EDGE_SOFTNESS);
                v = v * (1.0 - cover) + (s.intensity + tex.at(fy, fx)) * cover;
                if d < 0.0 {
                    labels.set(y, x, s.class);
                }
            }
            data.push(v.clamp(0.0, f64::from(INTENSITY_MAX)) as f32);
        }
    }
    (Tensor::new(vec![1, h, w], data).expect("extent"), labels)
}

/// Mean intensity range per foreground class; the ranges overlap.
fn class_intensity(class: u8, rng: &mut Xoshiro256pp) -> f64 {
    match (class - 1) % 3 {
        0 => rng.uniform(120.0, 185.0),
        1 => rng.uniform(110.0, 175.0),
        _ => rng.uniform(125.0, 190.0),
    }
}

fn segmentation_sample(spec: &DatasetSpec, seed: u64, index: usize) -> Sample {
    let mut rng = Xoshiro256pp::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let fg = spec.classes - 1;
    let scale = h.min(w) as f64 / 64.0;
    let count = 1 + rng.below(fg.min(3));
    // every image carries the class `1 + index mod fg`, so each class is frequent
    let mut classes: Vec<u8> = vec![(1 + index % fg) as u8];
    while classes.len() < count {
        classes.push(1 + rng.below(fg) as u8);
    }
    let mut structures = Vec::with_capacity(count);
    for &class in &classes {
        let shape = shape_for_class(class, &mut rng, scale);
        let mut s = Structure {
            class,
            cy: 0.0,
            cx: 0.0,
            angle: rng.uniform(0.0, std::f64::consts::PI),
            shape,
            intensity: class_intensity(class, &mut rng),
        };
        (s.cy, s.cx) = place(&mut rng, h, w, s.extent(), &structures);
        structures.push(s);
    }
    let background = rng.uniform(55.0, 95.0);
    let (image, labels) = render(h, w, &mut rng, &structures, background);
    Sample {
        image,
        target: Target::Labels(labels),
    }
}

fn classification_sample(spec: &DatasetSpec, seed: u64, index: usize) -> Sample {
    let mut rng = Xoshiro256pp::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let scale = h.min(w) as f64 / 64.0;
    let class = index % spec.classes;
    let intensity = rng.uniform(120.0, 180.0);
    let mut structures: Vec<Structure> = Vec::new();
    let add = |rng: &mut Xoshiro256pp, shape: Shape, structures: &mut Vec<Structure>| {
        let mut s = Structure {
            class: 1,
            cy: 0.0,
            cx: 0.0,
            angle: rng.uniform(0.0, std::f64::consts::PI),
            shape,
            intensity: intensity + rng.uniform(-10.0, 10.0),
        };
        (s.cy, s.cx) = place(rng, h, w, s.extent(), structures);
        structures.push(s);
    };
    match class {
        0 => {
            let a = rng.uniform(10.0, 15.0) * scale;
            let shape = Shape::Ellipse {
                a,
                b: a * rng.uniform(0.35, 0.6),
            };
            add(&mut rng, shape, &mut structures);
        }
        1 => {
            let n = 2 + rng.below(2);
            for _ in 0..n {
                let r = rng.uniform(4.0, 6.0) * scale;
                add(&mut rng, Shape::Ellipse { a: r, b: r }, &mut structures);
            }
        }
        _ => {
            let outer = rng.uniform(10.0, 14.0) * scale;
            let shape = Shape::Annulus {
                inner: outer - rng.uniform(3.5, 5.0) * scale,
                outer,
            };
            add(&mut rng, shape, &mut structures);
        }
    }
    let background = rng.uniform(55.0, 95.0);
    let (mut image, _) = render(h, w, &mut rng, &structures, background);
    // re-draw the global mean so it carries no class information
    let target_mean = rng.uniform(80.0, 110.0);
    let shift = (target_mean - image.sum_f64() / image.len() as f64) as f32;
    image
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v + shift).clamp(0.0, INTENSITY_MAX));
    Sample {
        image,
        target: Target::Class(class),
    }
}

fn generate_split(spec: &DatasetSpec, split: &str, count: usize, f: fn(&DatasetSpec, u64, usize) -> Sample) -> Vec<Sample> {
    par::map_indices(count, |i| f(spec, derive_seed(spec.seed, &format!("{split}/{i}")), i))
}

pub fn generate_segmentation_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.task != Task::Segmentation {
        return Err(Error::Config("segmentation generator given a classification spec".into()));
    }
    Ok(Dataset {
        spec: spec.clone(),
        train: generate_split(spec, "train", spec.train_count, segmentation_sample),
        test: generate_split(spec, "test", spec.test_count, segmentation_sample),
    })
}

pub fn generate_classification_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.task != Task::Classification {
        return Err(Error::Config("classification generator given a segmentation spec".into()));
    }
    Ok(Dataset {
        spec: spec.clone(),
        train: generate_split(spec, "train", spec.train_count, classification_sample),
        test: generate_split(spec, "test", spec.test_count, classification_sample),
    })
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.task {
        Task::Segmentation => generate_segmentation_dataset(spec),
        Task::Classification => generate_classification_dataset(spec),
    }
}

/// Which classes occur in at least one sample.
pub fn class_presence(samples: &[Sample], classes: usize) -> Vec<bool> {
    let mut seen = vec![false; classes];
    for s in samples {
        match &s.target {
            Target::Labels(l) => l.labels().iter().for_each(|&c| {
                if (c as usize) < classes {
                    seen[c as usize] = true;
                }
            }),
            Target::Class(c) if *c < classes => seen[*c] = true,
            Target::Class(_) => {}
        }
    }
    seen
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write `<stem>.img.tsr1` plus the label tensor or `.cls` file.
pub fn save_sample(dir: &Path, stem: &str, sample: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    sample.image.save_tsr1(&dir.join(format!("{stem}.img.tsr1")))?;
    match &sample.target {
        Target::Labels(l) => l.to_tensor().save_tsr1(&dir.join(format!("{stem}.lbl.tsr1"))),
        Target::Class(c) => write_text(&dir.join(format!("{stem}.cls")), &format!("{c}\n")),
    }
}

pub fn load_sample(dir: &Path, stem: &str) -> Result<Sample> {
    let image = Tensor::load_tsr1(&dir.join(format!("{stem}.img.tsr1")))?;
    if image.rank() != 3 || image.shape()[0] != 1 {
        return Err(Error::shape(format!("sample image must be [1, m, n], got {:?}", image.shape())));
    }
    let lbl = dir.join(format!("{stem}.lbl.tsr1"));
    let target = if lbl.exists() {
        let labels = LabelMap::from_tensor(&Tensor::load_tsr1(&lbl)?)?;
        if (labels.height(), labels.width()) != (image.shape()[1], image.shape()[2]) {
            return Err(Error::shape(format!("label map of {stem} does not match its image")));
        }
        Target::Labels(labels)
    } else {
        let p = dir.join(format!("{stem}.cls"));
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let class = text.trim().parse().map_err(|_| Error::Format {
            path: p.clone(),
            offset: 0,
            reason: format!("not a class index: {:?}", text.trim()),
        })?;
        Target::Class(class)
    };
    Ok(Sample { image, target })
}

fn stem(i: usize) -> String {
    format!("{i:04}")
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(&dataset.spec).expect("spec serialises");
    write_text(&dir.join("manifest.json"), &(manifest + "\n"))?;
    for (split, samples) in [("train", &dataset.train), ("test", &dataset.test)] {
        let d = dir.join(split);
        for (i, s) in samples.iter().enumerate() {
            save_sample(&d, &stem(i), s)?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let spec: DatasetSpec = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: mpath.clone(),
        offset: 0,
        reason: e.to_string(),
    })?;
    let load = |split: &str, n: usize| -> Result<Vec<Sample>> {
        (0..n).map(|i| load_sample(&dir.join(split), &stem(i))).collect()
    };
    Ok(Dataset {
        train: load("train", spec.train_count)?,
        test: load("test", spec.test_count)?,
        spec,
    })
}

/// Binary 8-bit PGM of a `[1, m, n]` or `[m, n]` tensor, scaled from `[lo, hi]`.
pub fn write_pgm(path: &Path, image: &Tensor, lo: f32, hi: f32) -> Result<()> {
    let s = image.shape();
    let (h, w) = match s {
        [1, h, w] | [h, w] => (*h, *w),
        _ => return Err(Error::shape(format!("pgm export needs a single plane, got {s:?}"))),
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        image
            .data()
            .iter()
            .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
