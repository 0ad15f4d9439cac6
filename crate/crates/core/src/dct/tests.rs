use super::*;
use crate::rng::Xoshiro256pp;

fn random_block(r: &mut Xoshiro256pp) -> [f64; COMPONENTS] {
    let mut b = [0.0; COMPONENTS];
    b.iter_mut().for_each(|v| *v = r.uniform(-128.0, 128.0));
    b
}

/// Direct double sum over the cosine definition, one coefficient at a time.
fn naive_dct(x: &[f64; COMPONENTS]) -> [f64; COMPONENTS] {
    let alpha = |u: usize| if u == 0 { (0.125f64).sqrt() } else { (0.25f64).sqrt() };
    let mut out = [0.0; COMPONENTS];
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for r in 0..8 {
                for c in 0..8 {
                    acc += x[r * 8 + c]
                        * (PI * (2 * r + 1) as f64 * u as f64 / 16.0).cos()
                        * (PI * (2 * c + 1) as f64 * v as f64 / 16.0).cos();
                }
            }
            out[u * 8 + v] = alpha(u) * alpha(v) * acc;
        }
    }
    out
}

#[test]
fn constant_block_is_dc_only() {
    let t = dct8_forward(&Tensor::full(&[8, 8], 3.5)).unwrap();
    assert!((t.data()[0] - 28.0).abs() < 1e-6);
    assert!(t.data()[1..].iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn round_trip_and_parseval() {
    let mut r = Xoshiro256pp::seed_from_u64(1);
    for _ in 0..100 {
        let b = random_block(&mut r);
        let x = Tensor::new(vec![8, 8], b.iter().map(|&v| v as f32).collect()).unwrap();
        let back = dct8_inverse(&dct8_forward(&x).unwrap()).unwrap();
        let err = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-4, "round trip {err}");
        let c = dct8_forward_f64(&b);
        let (e0, e1): (f64, f64) = (b.iter().map(|v| v * v).sum(), c.iter().map(|v| v * v).sum());
        assert!(((e0 - e1) / e0).abs() < 1e-5);
    }
}

#[test]
fn matches_direct_summation() {
    let mut r = Xoshiro256pp::seed_from_u64(2);
    for _ in 0..20 {
        let b = random_block(&mut r);
        for (a, e) in dct8_forward_f64(&b).iter().zip(naive_dct(&b)) {
            assert!((a - e).abs() < 1e-5);
        }
    }
}

#[test]
fn basis_is_orthonormal() {
    let blocks: Vec<_> = (0..64).map(|k| basis_block(k / 8, k % 8)).collect();
    for (a, ba) in blocks.iter().enumerate() {
        for (b, bb) in blocks.iter().enumerate() {
            let g: f64 = ba.iter().zip(bb).map(|(x, y)| x * y).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-6, "gram[{a}][{b}] = {g}");
        }
    }
}

#[test]
fn rejects_non_block_shapes() {
    for shape in [vec![8, 7], vec![64], vec![2, 8, 8]] {
        let t = Tensor::zeros(&shape);
        assert!(matches!(dct8_forward(&t), Err(Error::InvalidShape(_))));
        assert!(matches!(dct8_inverse(&t), Err(Error::InvalidShape(_))));
    }
}

fn noise_image(n: usize, sigma: f64, seed: u64) -> Tensor {
    let mut r = Xoshiro256pp::seed_from_u64(seed);
    Tensor::from_fn(&[1, n, n], |_| r.normal(0.0, sigma) as f32)
}

fn box_blur(img: &Tensor) -> Tensor {
    let n = img.shape()[1];
    let d = img.data();
    Tensor::from_fn(&[1, n, n], |k| {
        let (y, x) = ((k / n) as isize, (k % n) as isize);
        let mut s = 0.0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (yy, xx) = ((y + dy).clamp(0, n as isize - 1), (x + dx).clamp(0, n as isize - 1));
                s += d[yy as usize * n + xx as usize];
            }
        }
        s / 9.0
    })
}

#[test]
fn constant_image_has_zero_spectrum() {
    let s = spectrum_sd(&Tensor::full(&[1, 32, 40], 90.0)).unwrap();
    assert_eq!(s.blocks, 20);
    assert!(s.values.iter().all(|&v| v < 1e-9));
}

#[test]
fn white_noise_spreads_evenly() {
    let s = spectrum_sd(&noise_image(512, 10.0, 3)).unwrap();
    assert_eq!(s.blocks, 4096);
    for (k, v) in s.values.iter().enumerate() {
        assert!((v / 10.0 - 1.0).abs() < 0.05, "component {k}: {v}");
    }
}

#[test]
fn low_pass_lowers_high_frequencies() {
    let img = noise_image(128, 20.0, 4);
    let (raw, smooth) = (spectrum_sd(&img).unwrap(), spectrum_sd(&box_blur(&img)).unwrap());
    for i in 0..8 {
        for j in 0..8 {
            if i >= 2 || j >= 2 {
                assert!(smooth.get(i, j) < raw.get(i, j), "({i},{j})");
            }
        }
    }
}

#[test]
fn offset_invariance_and_linear_scaling() {
    let img = noise_image(64, 15.0, 5);
    let base = spectrum_sd(&img).unwrap();
    let shifted = spectrum_sd(&img.map(|v| v + 40.0)).unwrap();
    let scaled = spectrum_sd(&img.map(|v| v * 2.5)).unwrap();
    for k in 0..COMPONENTS {
        assert!((shifted.values[k] - base.values[k]).abs() < 1e-4 * base.values[k].max(1.0));
        assert!((scaled.values[k] - 2.5 * base.values[k]).abs() < 1e-5 * base.values[k].max(1.0));
    }
}

#[test]
fn odd_extents_pad_by_replication() {
    let img = Tensor::from_fn(&[12, 12], |k| ((k % 12) * 10) as f32);
    let blocks = block_coefficients(&img).unwrap();
    assert_eq!(blocks.len(), 4);
    // The bottom-right block repeats the last row and column.
    let mut expect_dc = 0.0;
    for r in 0..8 {
        for c in 0..8 {
            let (y, x) = ((8 + r).min(11), (8 + c).min(11));
            expect_dc += img.data()[y * 12 + x] as f64 / 8.0;
        }
    }
    assert!((blocks[3][0] - expect_dc).abs() < 1e-9);
}

#[test]
fn high_frequency_selection_orders_by_radius() {
    let comps = high_frequency_components(32);
    assert_eq!(comps.len(), 32);
    assert_eq!(comps[0], (7, 7));
    let cutoff = comps.iter().map(|&(i, j)| i * i + j * j).min().unwrap();
    for i in 0..8 {
        for j in 0..8 {
            if !comps.contains(&(i, j)) {
                assert!(i * i + j * j <= cutoff);
            }
        }
    }
    assert!(!comps.contains(&(0, 0)));
}

#[test]
fn zero_gradient_gives_zero_grid() {
    let img = noise_image(16, 30.0, 6);
    let grid = frequency_gradient(&img, |t, x| {
        let s = t.sum(x);
        Ok(t.scale(s, 0.0))
    })
    .unwrap();
    assert!(grid.values.iter().all(|&v| v == 0.0));
}

#[test]
fn sum_head_gives_mean_absolute_coefficients() {
    let img = noise_image(24, 30.0, 7);
    let grid = frequency_gradient(&img, |t, x| Ok(t.sum(x))).unwrap();
    let blocks = block_coefficients(&img).unwrap();
    for k in 0..COMPONENTS {
        let want = blocks.iter().map(|b| b[k].abs()).sum::<f64>() / blocks.len() as f64;
        assert!((grid.values[k] - want).abs() < 1e-9 * want.max(1.0), "{k}");
    }
}

#[test]
fn matches_basis_amplitude_perturbation() {
    let mut r = Xoshiro256pp::seed_from_u64(8);
    let img = Tensor::from_fn(&[1, 8, 8], |_| r.uniform(-1.0, 1.0) as f32);
    let weights = Tensor::from_fn(&[1, 8, 8], |_| r.uniform(-1.0, 1.0) as f32);
    let head = |t: &mut Tape, x: Var| {
        let s = t.sigmoid(x);
        t.dot(s, &weights)
    };
    let f = |x: &[f64; COMPONENTS]| {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(vec![1, 8, 8], x.iter().map(|&v| v as f32).collect()).unwrap());
        let y = head(&mut t, v).unwrap();
        f64::from(t.value(y).item())
    };
    let x0: [f64; COMPONENTS] = std::array::from_fn(|k| f64::from(img.data()[k]));
    // Finite differences in each basis amplitude, then synthesis back to pixels.
    let eps = 1e-2;
    let mut pixel = [0.0; COMPONENTS];
    for comp in 0..COMPONENTS {
        let b = basis_block(comp / 8, comp % 8);
        let plus: [f64; COMPONENTS] = std::array::from_fn(|k| x0[k] + eps * b[k]);
        let minus: [f64; COMPONENTS] = std::array::from_fn(|k| x0[k] - eps * b[k]);
        let d = (f(&plus) - f(&minus)) / (2.0 * eps);
        for k in 0..COMPONENTS {
            pixel[k] += d * b[k];
        }
    }
    let coeffs = dct8_forward_f64(&x0);
    let mean_g = pixel.iter().map(|g| g.abs()).sum::<f64>() / 64.0;
    let grid = frequency_gradient(&img, head).unwrap();
    let scale = grid.values.iter().copied().fold(0.0, f64::max);
    for k in 0..COMPONENTS {
        let want = mean_g * coeffs[k].abs();
        assert!((grid.values[k] - want).abs() < 1e-2 * scale, "{k}: {} vs {want}", grid.values[k]);
    }
}

#[test]
fn frequency_gradient_requires_whole_blocks() {
    let img = Tensor::zeros(&[1, 12, 16]);
    assert!(matches!(
        frequency_gradient(&img, |t, x| Ok(t.sum(x))),
        Err(Error::InvalidShape(_))
    ));
}

#[test]
fn heatmap_export_writes_csv_and_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let mut values = [0.0; COMPONENTS];
    values.iter_mut().enumerate().for_each(|(k, v)| *v = k as f64);
    let s = DctSpectrum { values, blocks: 1 };
    let path = dir.path().join("heat");
    export_heatmap(&s, &path).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("heat.csv")).unwrap();
    assert_eq!(csv.lines().count(), 65);
    assert_eq!(csv.lines().nth(10).unwrap(), "1,1,9");
    let pgm = std::fs::read(dir.path().join("heat.pgm")).unwrap();
    let header = b"P5\n8 8\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 64);
    assert_eq!(pgm[header.len()], 0);
    assert_eq!(*pgm.last().unwrap(), 255);
}
