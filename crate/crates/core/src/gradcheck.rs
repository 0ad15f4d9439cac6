//! Central finite-difference checking of tape gradients.
//!
//! The checker never calls the backward pass to form its reference: it
//! perturbs each checked input entry by ±h, re-runs the forward closure and
//! reduces the output with fixed random weights in `f64`.

use crate::error::Result;
use crate::rng::Xoshiro256pp;
use crate::tensor_core::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f32,
    /// Denominator floor for the relative error, as a fraction of the
    /// largest analytic gradient magnitude of the same input tensor.
    ///
    /// With `f32` storage, rounding of the forward outputs puts a noise
    /// floor of roughly `ulp(output) / h` on every central difference, so
    /// entries much smaller than the tensor's largest gradient are compared
    /// against that scale rather than against their own magnitude.
    pub relative_floor: f64,
    /// Second floor, as a fraction of the largest analytic gradient over all
    /// input tensors; covers tensors whose every entry is near the noise floor.
    pub global_floor: f64,
    /// Entries compared per input tensor (seeded sample).
    pub max_entries: usize,
    /// A probe that flipped a switch keeps its central quotient when the error
    /// is below this. Otherwise the one-sided quotient on the unflipped side is
    /// tried, then both again at smaller steps; the probe is counted in
    /// `skipped_kinks` if every attempt fails.
    pub kink_tolerance: f64,
    /// Times a kinked probe is retried with the step divided by four.
    pub kink_retries: u32,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            relative_floor: 1.0,
            global_floor: 1e-2,
            max_entries: 64,
            kink_tolerance: 1e-3,
            kink_retries: 2,
            seed: 0x6772_6164,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
    /// Entries whose ±h probe flipped a ReLU or max-pool switch somewhere on
    /// the tape and whose difference quotient was unusable as a result.
    pub skipped_kinks: usize,
    /// Largest analytic gradient magnitude over all inputs.
    pub gradient_scale: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&EntryCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

struct Probe {
    plus: f64,
    minus: f64,
    plus_pattern: u64,
    minus_pattern: u64,
    width: f64,
    right: f64,
    left: f64,
}

/// Compare analytic and central-difference gradients of `build` (which maps
/// the tape-bound `inputs` to any output) for every input tensor.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, out, vars))
    };

    let (tape, out, vars) = eval(inputs)?;
    let mut wrng = Xoshiro256pp::seed_from_u64(opts.seed);
    let out_shape = tape.value(out).shape().to_vec();
    // Projection weights are exact f32 values so both routes see the same reduction.
    let weights = Tensor::from_fn(&out_shape, |_| wrng.uniform(-1.0, 1.0) as f32);
    let reduce = |t: &Tensor| t.dot_f64(&weights);
    let grads = tape.backward_with(out, weights.clone())?;
    let base = reduce(tape.value(out));
    let pattern = tape.switch_pattern();
    drop(tape);

    let probe = |ti: usize, idx: usize, step: f32| -> Result<Probe> {
        let x0 = inputs[ti].data()[idx];
        let (xp, xm) = (x0 + step, x0 - step);
        let mut perturbed = inputs.to_vec();
        perturbed[ti].data_mut()[idx] = xp;
        let (tp, op, _) = eval(&perturbed)?;
        perturbed[ti].data_mut()[idx] = xm;
        let (tm, om, _) = eval(&perturbed)?;
        Ok(Probe {
            plus: reduce(tp.value(op)),
            minus: reduce(tm.value(om)),
            plus_pattern: tp.switch_pattern(),
            minus_pattern: tm.switch_pattern(),
            width: f64::from(xp) - f64::from(xm),
            right: f64::from(xp) - f64::from(x0),
            left: f64::from(x0) - f64::from(xm),
        })
    };

    let mut report = GradCheckReport::default();
    let mut pick = Xoshiro256pp::seed_from_u64(opts.seed ^ 0x5eed);
    let analytics: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let max_abs = |t: &Tensor| t.data().iter().map(|g| f64::from(g.abs())).fold(0.0, f64::max);
    let global = analytics.iter().map(max_abs).fold(0.0, f64::max);
    report.gradient_scale = global;
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = &analytics[ti];
        let floor = (opts.relative_floor * max_abs(analytic))
            .max(opts.global_floor * global)
            .max(1e-12);
        // Candidates in seeded random order; a kinked probe is replaced by the
        // next candidate until the quota is met or the attempt budget runs out.
        let mut order: Vec<usize> = (0..input.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, pick.below(i + 1));
        }
        let quota = opts.max_entries.min(input.len());
        let mut compared = 0;
        for idx in order.into_iter().take(4 * quota) {
            if compared == quota {
                break;
            }
            let a = f64::from(analytic.data()[idx]);
            let rel = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);
            let mut verdict = None;
            for shrink in 0..=opts.kink_retries {
                let step = opts.step / 4f32.powi(shrink as i32);
                let p = probe(ti, idx, step)?;
                let central = (p.plus - p.minus) / p.width;
                let (flip_p, flip_m) = (p.plus_pattern != pattern, p.minus_pattern != pattern);
                if !(flip_p || flip_m) || rel(central) < opts.kink_tolerance {
                    verdict = Some(central);
                    break;
                }
                // one-sided quotient on the side that stayed on the base piece
                let one_sided = match (flip_p, flip_m) {
                    (false, true) => Some((p.plus - base) / p.right),
                    (true, false) => Some((base - p.minus) / p.left),
                    _ => None,
                };
                if let Some(n) = one_sided.filter(|&n| rel(n) < opts.kink_tolerance) {
                    verdict = Some(n);
                    break;
                }
            }
            let Some(numeric) = verdict else {
                report.skipped_kinks += 1;
                continue;
            };
            let rel_err = rel(numeric);
            report.entries.push(EntryCheck {
                input: ti,
                index: idx,
                analytic: a,
                numeric,
                rel_err,
            });
            compared += 1;
        }
    }
    Ok(report)
}
