//! 8×8 block DCT analysis: per-frequency spread of coefficients across the
//! blocks of an image, and frequency-resolved input gradients.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use crate::data::write_pgm;
use crate::error::{Error, Result};
use crate::metrics::fmt_sig;
use crate::tensor_core::{Tape, Tensor, Var};

pub const BLOCK: usize = 8;
pub const COMPONENTS: usize = BLOCK * BLOCK;

/// `basis()[u * 8 + x]` is the orthonormal type-II DCT matrix entry.
fn basis() -> &'static [f64; COMPONENTS] {
    static C: OnceLock<[f64; COMPONENTS]> = OnceLock::new();
    C.get_or_init(|| {
        let mut c = [0.0; COMPONENTS];
        for u in 0..BLOCK {
            let a = if u == 0 { (1.0 / 8.0f64).sqrt() } else { 0.5 };
            for x in 0..BLOCK {
                c[u * BLOCK + x] = a * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        c
    })
}

/// `C · X · Cᵀ` for `transpose = false`, `Cᵀ · X · C` otherwise.
fn separable(x: &[f64; COMPONENTS], transpose: bool) -> [f64; COMPONENTS] {
    let c = basis();
    let m = |a: usize, b: usize| if transpose { c[b * BLOCK + a] } else { c[a * BLOCK + b] };
    let mut tmp = [0.0; COMPONENTS];
    for u in 0..BLOCK {
        for col in 0..BLOCK {
            tmp[u * BLOCK + col] = (0..BLOCK).map(|r| m(u, r) * x[r * BLOCK + col]).sum();
        }
    }
    let mut out = [0.0; COMPONENTS];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            out[u * BLOCK + v] = (0..BLOCK).map(|col| tmp[u * BLOCK + col] * m(v, col)).sum();
        }
    }
    out
}

pub fn dct8_forward_f64(block: &[f64; COMPONENTS]) -> [f64; COMPONENTS] {
    separable(block, false)
}

pub fn dct8_inverse_f64(coeffs: &[f64; COMPONENTS]) -> [f64; COMPONENTS] {
    separable(coeffs, true)
}

fn as_block(t: &Tensor) -> Result<[f64; COMPONENTS]> {
    match t.shape() {
        [8, 8] | [1, 8, 8] => {
            let mut b = [0.0; COMPONENTS];
            for (d, &s) in b.iter_mut().zip(t.data()) {
                *d = f64::from(s);
            }
            Ok(b)
        }
        s => Err(Error::shape(format!("DCT block must be 8x8, got {s:?}"))),
    }
}

fn to_tensor(b: &[f64; COMPONENTS]) -> Tensor {
    Tensor::new(vec![BLOCK, BLOCK], b.iter().map(|&v| v as f32).collect()).expect("64 values")
}

/// Orthonormal type-II DCT of an `[8, 8]` block.
pub fn dct8_forward(block: &Tensor) -> Result<Tensor> {
    Ok(to_tensor(&dct8_forward_f64(&as_block(block)?)))
}

/// Type-III inverse of [`dct8_forward`].
pub fn dct8_inverse(coeffs: &Tensor) -> Result<Tensor> {
    Ok(to_tensor(&dct8_inverse_f64(&as_block(coeffs)?)))
}

/// The orthonormal basis image of component `(i, j)`.
pub fn basis_block(i: usize, j: usize) -> [f64; COMPONENTS] {
    let c = basis();
    let mut b = [0.0; COMPONENTS];
    for r in 0..BLOCK {
        for col in 0..BLOCK {
            b[r * BLOCK + col] = c[i * BLOCK + r] * c[j * BLOCK + col];
        }
    }
    b
}

/// One statistic per frequency component, row-major in `(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DctSpectrum {
    pub values: [f64; COMPONENTS],
    pub blocks: usize,
}

impl DctSpectrum {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * BLOCK + j]
    }

    /// Mean over the `count` highest-frequency components (see [`high_frequency_components`]).
    pub fn high_frequency_mean(&self, count: usize) -> f64 {
        let comps = high_frequency_components(count);
        comps.iter().map(|&(i, j)| self.get(i, j)).sum::<f64>() / comps.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,j,value\n");
        for i in 0..BLOCK {
            for j in 0..BLOCK {
                let _ = writeln!(s, "{i},{j},{}", fmt_sig(self.get(i, j)));
            }
        }
        s
    }
}

/// Components ordered by radial frequency `i² + j²`, highest first, ties
/// broken by larger `i`; the first `count` are returned.
pub fn high_frequency_components(count: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..BLOCK).flat_map(|i| (0..BLOCK).map(move |j| (i, j))).collect();
    all.sort_by_key(|&(i, j)| std::cmp::Reverse((i * i + j * j, i)));
    all.truncate(count.min(COMPONENTS));
    all
}

fn plane(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [1, h, w] | [h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(Error::shape(format!("expected a single-plane image, got {s:?}"))),
    }
}

/// Coefficients of every block, with the image padded to a multiple of 8 by
/// edge replication.
pub fn block_coefficients(image: &Tensor) -> Result<Vec<[f64; COMPONENTS]>> {
    let (h, w) = plane(image)?;
    let (bh, bw) = (h.div_ceil(BLOCK), w.div_ceil(BLOCK));
    let px = |r: usize, c: usize| f64::from(image.data()[r.min(h - 1) * w + c.min(w - 1)]);
    let mut out = Vec::with_capacity(bh * bw);
    for by in 0..bh {
        for bx in 0..bw {
            let mut b = [0.0; COMPONENTS];
            for r in 0..BLOCK {
                for c in 0..BLOCK {
                    b[r * BLOCK + c] = px(by * BLOCK + r, bx * BLOCK + c);
                }
            }
            out.push(dct8_forward_f64(&b));
        }
    }
    Ok(out)
}

/// Population SD of each component across the image's 8×8 blocks.
pub fn spectrum_sd(image: &Tensor) -> Result<DctSpectrum> {
    let blocks = block_coefficients(image)?;
    let n = blocks.len() as f64;
    let mut values = [0.0; COMPONENTS];
    for (k, v) in values.iter_mut().enumerate() {
        let mean = blocks.iter().map(|b| b[k]).sum::<f64>() / n;
        *v = (blocks.iter().map(|b| (b[k] - mean).powi(2)).sum::<f64>() / n).sqrt();
    }
    Ok(DctSpectrum {
        values,
        blocks: blocks.len(),
    })
}

/// Per-component mean of `|∂F/∂x_k · c_(k,i,j)|` over pixels `k`, where
/// `c_(k,i,j)` is coefficient `(i, j)` of the block holding pixel `k`.
///
/// The image extents must be multiples of 8.
pub fn frequency_gradient_from(image: &Tensor, pixel_grad: &Tensor) -> Result<DctSpectrum> {
    let (h, w) = plane(image)?;
    if h % BLOCK != 0 || w % BLOCK != 0 {
        return Err(Error::shape(format!("frequency gradient needs extents divisible by 8, got {h}x{w}")));
    }
    if pixel_grad.len() != image.len() {
        return Err(Error::shape(format!(
            "gradient {:?} does not match image {:?}",
            pixel_grad.shape(),
            image.shape()
        )));
    }
    let blocks = block_coefficients(image)?;
    let bw = w / BLOCK;
    let mut values = [0.0; COMPONENTS];
    for (k, &g) in pixel_grad.data().iter().enumerate() {
        let b = &blocks[(k / w / BLOCK) * bw + (k % w) / BLOCK];
        let g = f64::from(g).abs();
        for (v, c) in values.iter_mut().zip(b) {
            *v += g * c.abs();
        }
    }
    let n = image.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Ok(DctSpectrum {
        values,
        blocks: blocks.len(),
    })
}

/// [`frequency_gradient_from`] with the pixel gradient of the scalar `head`
/// taken by one reverse sweep.
pub fn frequency_gradient<F>(image: &Tensor, head: F) -> Result<DctSpectrum>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(image.clone());
    let out = head(&mut tape, x)?;
    let grads = tape.backward(out)?;
    frequency_gradient_from(image, &grads.wrt(x))
}

/// Writes `<path>.csv` (64 rows) and `<path>.pgm` (8×8, scaled to the max entry).
pub fn export_heatmap(spectrum: &DctSpectrum, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let csv = path.with_extension("csv");
    std::fs::write(&csv, spectrum.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let max = spectrum.values.iter().copied().fold(0.0, f64::max) as f32;
    let img = Tensor::new(vec![BLOCK, BLOCK], spectrum.values.iter().map(|&v| v as f32).collect())?;
    write_pgm(&path.with_extension("pgm"), &img, 0.0, max)
}

#[cfg(test)]
mod tests;
