//! Segmentation and classification metrics.
//!
//! Boundary Hausdorff distances use an exact squared Euclidean distance
//! transform, so they agree bit-for-bit with pairwise enumeration while
//! staying linear in the number of pixels.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

/// Integer label image, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}x{width} given {} labels",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, label: u8) {
        self.labels[r * self.width + c] = label;
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn contains(&self, class: u8) -> bool {
        self.labels.contains(&class)
    }

    /// Per-pixel argmax over a `[k, m, n]` score tensor; ties go to the lower class.
    pub fn argmax(scores: &Tensor) -> Result<Self> {
        let s = scores.shape();
        if s.len() != 3 || s[0] > 256 {
            return Err(Error::shape(format!("argmax expects [k<=256, m, n], got {s:?}")));
        }
        let (k, plane) = (s[0], s[1] * s[2]);
        let d = scores.data();
        let labels = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if d[c * plane + p] > d[best * plane + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Self::new(s[1], s[2], labels)
    }

    /// Labels stored as a `[m, n]` f32 tensor (the on-disk form).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.labels.iter().map(|&l| f32::from(l)).collect(),
        )
        .expect("label map extents are valid")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("label tensor must be [m, n], got {s:?}")));
        }
        let mut labels = Vec::with_capacity(t.len());
        for (i, &v) in t.data().iter().enumerate() {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::InvalidInput(format!("label {v} at index {i} is not a class index")));
            }
            labels.push(v as u8);
        }
        Self::new(s[0], s[1], labels)
    }

    fn check_same_extent(&self, other: &LabelMap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(format!(
                "label maps differ in extent: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Class pixels with a 4-neighbour of another class, or on the image edge.
    pub fn boundary(&self, class: u8) -> Vec<bool> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![false; h * w];
        for r in 0..h {
            for c in 0..w {
                if self.get(r, c) != class {
                    continue;
                }
                out[r * w + c] = r == 0
                    || c == 0
                    || r == h - 1
                    || c == w - 1
                    || self.get(r - 1, c) != class
                    || self.get(r + 1, c) != class
                    || self.get(r, c - 1) != class
                    || self.get(r, c + 1) != class;
            }
        }
        out
    }
}

struct Confusion {
    tp: u64,
    fp: u64,
    fn_: u64,
    tn: u64,
}

fn confusion(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<Confusion> {
    pred.check_same_extent(truth)?;
    let mut c = Confusion { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        match (p == class, t == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2|A∩B| / (|A|+|B|)`; 1 when the class is absent from both maps.
pub fn dice(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<f64> {
    let c = confusion(pred, truth, class)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return Ok(1.0);
    }
    Ok((2 * c.tp) as f64 / denom as f64)
}

/// `TP / (TP + FN)`; 1 when the class is absent from the truth.
pub fn sensitivity(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<f64> {
    let c = confusion(pred, truth, class)?;
    Ok(ratio_or_one(c.tp, c.tp + c.fn_))
}

/// `TN / (TN + FP)`; 1 when every truth pixel is of `class`.
pub fn specificity(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<f64> {
    let c = confusion(pred, truth, class)?;
    Ok(ratio_or_one(c.tn, c.tn + c.fp))
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// 1-D lower envelope pass of the Felzenszwalb–Huttenlocher transform.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    // infinite samples (no site) never enter the envelope
    match f.iter().position(|x| x.is_finite()) {
        Some(q) => v[0] = q,
        None => {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
    }
    for q in v[0] + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` site.
fn squared_distance_transform(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0f64; n + 1]);
    let mut col = vec![0f64; h];
    let mut tmp = vec![0f64; n];
    let mut grid: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    for c in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + c];
        }
        edt_1d(&col, &mut tmp[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = tmp[r];
        }
    }
    let mut row = vec![0f64; w];
    for r in 0..h {
        row.copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&row, &mut tmp[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&tmp[..w]);
    }
    grid
}

fn directed(from: &[bool], to_dt: &[f64]) -> f64 {
    from.iter()
        .zip(to_dt)
        .filter(|(&b, _)| b)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance in pixels between the class boundaries of
/// `pred` and `truth`. `None` when the class is absent from either map.
pub fn hausdorff(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<Option<f64>> {
    pred.check_same_extent(truth)?;
    if !pred.contains(class) || !truth.contains(class) {
        return Ok(None);
    }
    let (h, w) = (pred.height, pred.width);
    let bp = pred.boundary(class);
    let bt = truth.boundary(class);
    let dp = squared_distance_transform(&bp, h, w);
    let dt = squared_distance_transform(&bt, h, w);
    Ok(Some(directed(&bp, &dt).max(directed(&bt, &dp)).sqrt()))
}

pub fn top1_accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
    pub count: usize,
}

/// Two-pass mean and population SD.
pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::InvalidInput("aggregate of no values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(Aggregate {
        mean,
        sd: var.sqrt(),
        count: values.len(),
    })
}

/// Metrics of one segmentation sample, indexed by foreground class `1..k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub dice: Vec<f64>,
    pub hausdorff: Vec<Option<f64>>,
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
}

impl SegmentationScores {
    pub fn compute(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<Self> {
        let mut s = SegmentationScores {
            dice: Vec::new(),
            hausdorff: Vec::new(),
            sensitivity: Vec::new(),
            specificity: Vec::new(),
        };
        for c in 1..classes {
            let c = c as u8;
            s.dice.push(dice(pred, truth, c)?);
            s.hausdorff.push(hausdorff(pred, truth, c)?);
            s.sensitivity.push(sensitivity(pred, truth, c)?);
            s.specificity.push(specificity(pred, truth, c)?);
        }
        Ok(s)
    }

    /// Mean Dice over foreground classes.
    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SampleScores {
    Segmentation(SegmentationScores),
    Classification { predicted: usize, truth: usize },
}

/// Per-sample scores of one evaluation, with table-style aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub classes: usize,
    pub samples: Vec<SampleScores>,
}

/// One row of the aggregate table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub metric: String,
    pub value: Aggregate,
    /// Samples for which the metric was undefined.
    pub undefined: usize,
}

impl MetricsReport {
    pub fn new(label: impl Into<String>, classes: usize) -> Self {
        Self {
            label: label.into(),
            classes,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn seg(&self) -> impl Iterator<Item = &SegmentationScores> {
        self.samples.iter().filter_map(|s| match s {
            SampleScores::Segmentation(x) => Some(x),
            _ => None,
        })
    }

    pub fn mean_dice_values(&self) -> Vec<f64> {
        self.seg().map(SegmentationScores::mean_dice).collect()
    }

    pub fn mean_dice(&self) -> Option<f64> {
        aggregate(&self.mean_dice_values()).ok().map(|a| a.mean)
    }

    pub fn top1_accuracy(&self) -> Option<f64> {
        let (p, t): (Vec<usize>, Vec<usize>) = self
            .samples
            .iter()
            .filter_map(|s| match s {
                SampleScores::Classification { predicted, truth } => Some((*predicted, *truth)),
                _ => None,
            })
            .unzip();
        top1_accuracy(&p, &t).ok()
    }

    /// The headline number: mean Dice for segmentation, top-1 for classification.
    pub fn primary(&self) -> Option<f64> {
        self.mean_dice().or_else(|| self.top1_accuracy())
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rows = Vec::new();
        if let Some(acc) = self.top1_accuracy() {
            let hits: Vec<f64> = self
                .samples
                .iter()
                .filter_map(|s| match s {
                    SampleScores::Classification { predicted, truth } => Some(f64::from(u8::from(predicted == truth))),
                    _ => None,
                })
                .collect();
            let mut a = aggregate(&hits).expect("non-empty");
            a.mean = acc;
            rows.push(SummaryRow {
                metric: "top1_accuracy".into(),
                value: a,
                undefined: 0,
            });
            return rows;
        }
        let seg: Vec<&SegmentationScores> = self.seg().collect();
        if seg.is_empty() {
            return rows;
        }
        let mut push = |metric: String, vals: Vec<Option<f64>>| {
            let defined: Vec<f64> = vals.iter().flatten().copied().collect();
            if let Ok(value) = aggregate(&defined) {
                rows.push(SummaryRow {
                    metric,
                    value,
                    undefined: vals.len() - defined.len(),
                });
            }
        };
        push("mean_dice".into(), seg.iter().map(|s| Some(s.mean_dice())).collect());
        for c in 1..self.classes {
            let i = c - 1;
            push(format!("dice_c{c}"), seg.iter().map(|s| Some(s.dice[i])).collect());
            push(format!("hausdorff_c{c}"), seg.iter().map(|s| s.hausdorff[i]).collect());
            push(format!("sensitivity_c{c}"), seg.iter().map(|s| Some(s.sensitivity[i])).collect());
            push(format!("specificity_c{c}"), seg.iter().map(|s| Some(s.specificity[i])).collect());
        }
        rows
    }

    /// Long-format CSV: one row per (sample, class, metric).
    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("sample,class,metric,value\n");
        for (i, s) in self.samples.iter().enumerate() {
            match s {
                SampleScores::Segmentation(x) => {
                    for c in 1..self.classes {
                        let j = c - 1;
                        let cells = [
                            ("dice", Some(x.dice[j])),
                            ("hausdorff", x.hausdorff[j]),
                            ("sensitivity", Some(x.sensitivity[j])),
                            ("specificity", Some(x.specificity[j])),
                        ];
                        for (m, v) in cells {
                            let v = v.map_or_else(|| "undefined".to_string(), fmt_sig);
                            let _ = writeln!(out, "{i},{c},{m},{v}");
                        }
                    }
                }
                SampleScores::Classification { predicted, truth } => {
                    let _ = writeln!(out, "{i},{truth},predicted,{predicted}");
                    let _ = writeln!(out, "{i},{truth},correct,{}", u8::from(predicted == truth));
                }
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,mean,sd,count,undefined\n");
        for r in self.summary() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.metric,
                fmt_sig(r.value.mean),
                fmt_sig(r.value.sd),
                r.value.count,
                r.undefined
            );
        }
        out
    }

    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            (format!("{}_samples.csv", self.label), self.per_sample_csv()),
            (format!("{}_summary.csv", self.label), self.summary_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// `%g`-style formatting with 6 significant digits.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    // rounding can carry into the next decade
    let rounded: f64 = format!("{x:.5e}").parse().expect("float");
    let exp = if rounded.abs() >= 10f64.powi(exp + 1) { exp + 1 } else { exp };
    let s = if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.5e}")
    };
    trim_zeros(&s)
}

fn trim_zeros(s: &str) -> String {
    let (mantissa, exp) = match s.find('e') {
        Some(i) => (&s[..i], &s[i..]),
        None => (s, ""),
    };
    let mantissa = if mantissa.contains('.') {
        mantissa.trim_end_matches('0').trim_end_matches('.')
    } else {
        mantissa
    };
    format!("{mantissa}{exp}")
}
