//! Undecimated tight-frame transform built from a three-filter UEP bank.
//!
//! The 1-D bank is a low-pass `m0 = (1/3)[1, 1, 1]` and two high-pass filters
//! `m1 = (sqrt6/6)[1, 0, -1]`, `m2 = (3 sqrt2/18)[1, -2, 1]`, which satisfy the
//! unitary extension principle `sum_p |m_p^(xi)|^2 = 1`. 2-D kernels are the
//! tensor products `W_{p,q}` (p horizontal factor, q vertical factor), applied
//! as periodic correlation with no decimation and no dilation across levels.
//! Synthesis uses the flipped kernels, which are the exact adjoints under
//! periodicity, so decompose -> reconstruct is an identity up to rounding.

use ndarray::Array2;

use crate::error::{CqcdError, Result};
use crate::imaging::Image;

/// Number of filters in the bank (r = 2 high-pass plus one low-pass).
pub const BANK_SIZE: usize = 3;

/// Subband planes per channel for a level-`levels` decomposition.
pub fn planes_per_channel(levels: usize) -> usize {
    1 + levels * (BANK_SIZE * BANK_SIZE - 1)
}

/// The 1-D analysis filters and their tensor-product 2-D kernels.
#[derive(Debug, Clone)]
pub struct FilterBank {
    filters: [[f64; 3]; BANK_SIZE],
}

/// The paper's r = 2 bank. The UEP identity holds exactly:
/// with c = cos xi, (1+2c)^2/9 + (2/3)(1-c^2) + (2/9)(c-1)^2 = 1.
pub fn build_filter_bank() -> FilterBank {
    let s6 = 6.0f64.sqrt();
    let s2 = 2.0f64.sqrt();
    FilterBank {
        filters: [
            [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            [s6 / 6.0, 0.0, -s6 / 6.0],
            [3.0 * s2 / 18.0, -2.0 * 3.0 * s2 / 18.0, 3.0 * s2 / 18.0],
        ],
    }
}

impl FilterBank {
    pub fn filter(&self, p: usize) -> &[f64; 3] {
        &self.filters[p]
    }

    /// 2-D kernel `W_{p,q}[i][j] = m_p[j] * m_q[i]` (rows vary with q,
    /// columns with p).
    pub fn kernel_2d(&self, p: usize, q: usize) -> Array2<f64> {
        Array2::from_shape_fn((3, 3), |(i, j)| self.filters[p][j] * self.filters[q][i])
    }

    /// `sup_xi |sum_p |m_p^(xi)|^2 - 1|` over `samples` frequencies in [0, 2pi).
    pub fn uep_residual(&self, samples: usize) -> f64 {
        let mut worst = 0.0f64;
        for s in 0..samples {
            let xi = 2.0 * std::f64::consts::PI * s as f64 / samples as f64;
            let mut total = 0.0;
            for m in &self.filters {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, &c) in m.iter().enumerate() {
                    let phase = -(j as f64 - 1.0) * xi;
                    re += c * phase.cos();
                    im += c * phase.sin();
                }
                total += re * re + im * im;
            }
            worst = worst.max((total - 1.0).abs());
        }
        worst
    }
}

/// Correlates one axis with a centered 3-tap filter under periodic boundary:
/// `out[i] = sum_j m[j] * in[(i + j - 1) mod n]`.
fn correlate_axis(plane: &Array2<f64>, m: &[f64; 3], along_x: bool) -> Array2<f64> {
    let (h, w) = plane.dim();
    let mut out = Array2::zeros((h, w));
    if along_x {
        for y in 0..h {
            for x in 0..w {
                let xm = if x == 0 { w - 1 } else { x - 1 };
                let xp = if x + 1 == w { 0 } else { x + 1 };
                out[(y, x)] = m[0] * plane[(y, xm)] + m[1] * plane[(y, x)] + m[2] * plane[(y, xp)];
            }
        }
    } else {
        for y in 0..h {
            let ym = if y == 0 { h - 1 } else { y - 1 };
            let yp = if y + 1 == h { 0 } else { y + 1 };
            for x in 0..w {
                out[(y, x)] = m[0] * plane[(ym, x)] + m[1] * plane[(y, x)] + m[2] * plane[(yp, x)];
            }
        }
    }
    out
}

fn flipped(m: &[f64; 3]) -> [f64; 3] {
    [m[2], m[1], m[0]]
}

/// Analysis: separable periodic correlation with `W_{p,q}`.
fn analyze(plane: &Array2<f64>, bank: &FilterBank, p: usize, q: usize) -> Array2<f64> {
    let rows = correlate_axis(plane, bank.filter(p), true);
    correlate_axis(&rows, bank.filter(q), false)
}

/// Synthesis: the adjoint of [`analyze`] (flipped kernels, same boundary).
fn synthesize(plane: &Array2<f64>, bank: &FilterBank, p: usize, q: usize) -> Array2<f64> {
    let rows = correlate_axis(plane, &flipped(bank.filter(p)), true);
    correlate_axis(&rows, &flipped(bank.filter(q)), false)
}

/// Level-L stationary decomposition: `C^L` plus all `H^l_{p,q}`.
///
/// High-pass planes are stored by ascending level, then row-major (p, q)
/// skipping (0, 0). Every plane keeps the source dimensions.
#[derive(Debug, Clone)]
pub struct TightFramePyramid {
    pub levels: usize,
    pub lowpass: Array2<f64>,
    pub highpass: Vec<Array2<f64>>,
}

impl TightFramePyramid {
    pub fn subband_count(&self) -> usize {
        1 + self.highpass.len()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.lowpass.dim()
    }
}

fn check_plane(plane: &Array2<f64>, levels: usize) -> Result<()> {
    if levels < 1 {
        return Err(CqcdError::InvalidArgument("level count must be >= 1".into()));
    }
    let (h, w) = plane.dim();
    if h < 3 || w < 3 {
        return Err(CqcdError::InvalidArgument(format!(
            "plane {h}x{w} smaller than the 3x3 kernel support"
        )));
    }
    Ok(())
}

/// Undecimated decomposition of a single plane. `C^l` chains repeated
/// low-pass correlation; `H^l_{p,q} = W_{p,q}(C^{l-1})`.
pub fn decompose(plane: &Array2<f64>, levels: usize, bank: &FilterBank) -> Result<TightFramePyramid> {
    check_plane(plane, levels)?;
    let mut highpass = Vec::with_capacity(levels * (BANK_SIZE * BANK_SIZE - 1));
    let mut carry = plane.clone();
    for _ in 0..levels {
        for p in 0..BANK_SIZE {
            for q in 0..BANK_SIZE {
                if (p, q) == (0, 0) {
                    continue;
                }
                highpass.push(analyze(&carry, bank, p, q));
            }
        }
        carry = analyze(&carry, bank, 0, 0);
    }
    Ok(TightFramePyramid {
        levels,
        lowpass: carry,
        highpass,
    })
}

/// Exact inverse of [`decompose`] for a pyramid built with the same bank:
/// the low-pass chain is undone by `levels` adjoint applications and each
/// level's high-pass planes re-enter through `l - 1` of them.
pub fn reconstruct(pyr: &TightFramePyramid, bank: &FilterBank) -> Result<Array2<f64>> {
    let per_level = BANK_SIZE * BANK_SIZE - 1;
    if pyr.levels < 1 || pyr.highpass.len() != pyr.levels * per_level {
        return Err(CqcdError::DimensionMismatch(format!(
            "pyramid holds {} high-pass planes, expected {}",
            pyr.highpass.len(),
            pyr.levels * per_level
        )));
    }
    let dim = pyr.lowpass.dim();
    if pyr.highpass.iter().any(|p| p.dim() != dim) {
        return Err(CqcdError::DimensionMismatch(
            "pyramid planes disagree on extents".into(),
        ));
    }

    let mut rec = pyr.lowpass.clone();
    for _ in 0..pyr.levels {
        rec = synthesize(&rec, bank, 0, 0);
    }
    for level in 1..=pyr.levels {
        let mut sum: Array2<f64> = Array2::zeros(dim);
        let mut idx = (level - 1) * per_level;
        for p in 0..BANK_SIZE {
            for q in 0..BANK_SIZE {
                if (p, q) == (0, 0) {
                    continue;
                }
                sum += &synthesize(&pyr.highpass[idx], bank, p, q);
                idx += 1;
            }
        }
        for _ in 0..level - 1 {
            sum = synthesize(&sum, bank, 0, 0);
        }
        rec += &sum;
    }
    Ok(rec)
}

/// Ordered feature planes for one image: per channel (channel-major), the
/// low-pass plane first, then high-pass planes by ascending level and
/// row-major (p, q). Deterministic: identical inputs give identical planes.
pub fn feature_stack(img: &Image, levels: usize, bank: &FilterBank) -> Result<Vec<Array2<f64>>> {
    let mut planes = Vec::with_capacity(img.channels() * planes_per_channel(levels));
    for c in 0..img.channels() {
        let pyr = decompose(&img.channel_plane(c), levels, bank)?;
        planes.push(pyr.lowpass);
        planes.extend(pyr.highpass);
    }
    Ok(planes)
}

/// Feature stacks for every frame of a sequence, frame order preserved.
pub fn feature_stack_seq(
    seq: &crate::imaging::FrameSequence,
    levels: usize,
    bank: &FilterBank,
) -> Result<Vec<Vec<Array2<f64>>>> {
    seq.frames().iter().map(|f| feature_stack(f, levels, bank)).collect()
}

/// Adjoint of [`feature_stack`]: maps cotangents of the feature planes back
/// to per-channel image-plane cotangents. Because the frame is tight with
/// constant 1, this is exactly the reconstruction formula applied per channel.
pub fn feature_stack_adjoint(
    planes: &[Array2<f64>],
    levels: usize,
    channels: usize,
    bank: &FilterBank,
) -> Result<Vec<Array2<f64>>> {
    let per_channel = planes_per_channel(levels);
    if planes.len() != channels * per_channel {
        return Err(CqcdError::DimensionMismatch(format!(
            "{} cotangent planes for {} channels x {} subbands",
            planes.len(),
            channels,
            per_channel
        )));
    }
    let mut out = Vec::with_capacity(channels);
    for c in 0..channels {
        let group = &planes[c * per_channel..(c + 1) * per_channel];
        let pyr = TightFramePyramid {
            levels,
            lowpass: group[0].clone(),
            highpass: group[1..].to_vec(),
        };
        out.push(reconstruct(&pyr, bank)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_plane(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random::<f64>())
    }

    #[test]
    fn filter_coefficients_match_the_bank_definition() {
        let bank = build_filter_bank();
        for &c in bank.filter(0) {
            assert!((c - 1.0 / 3.0).abs() < 1e-15);
        }
        let s6 = 6.0f64.sqrt();
        assert!((bank.filter(1)[0] - s6 / 6.0).abs() < 1e-15);
        assert_eq!(bank.filter(1)[1], 0.0);
        assert!((bank.filter(1)[2] + s6 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn kernel_w10_matches_the_printed_matrix() {
        let bank = build_filter_bank();
        let k = bank.kernel_2d(1, 0);
        let c = 6.0f64.sqrt() / 18.0;
        for i in 0..3 {
            assert!((k[(i, 0)] - c).abs() < 1e-15);
            assert!(k[(i, 1)].abs() < 1e-15);
            assert!((k[(i, 2)] + c).abs() < 1e-15);
        }
        // and W01 is its transpose layout (rows vary)
        let k01 = bank.kernel_2d(0, 1);
        for j in 0..3 {
            assert!((k01[(0, j)] - c).abs() < 1e-15);
            assert!((k01[(2, j)] + c).abs() < 1e-15);
        }
    }

    #[test]
    fn uep_holds_at_analytic_sample_points() {
        let bank = build_filter_bank();
        // (1+2c)^2/9 + (2/3)(1-c^2) + (2/9)(c-1)^2 == 1 at any xi
        for &xi in &[0.0, std::f64::consts::PI / 3.0, std::f64::consts::PI] {
            let c = xi.cos();
            let total = (1.0 + 2.0 * c).powi(2) / 9.0
                + (2.0 / 3.0) * (1.0 - c * c)
                + (2.0 / 9.0) * (c - 1.0).powi(2);
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!(bank.uep_residual(1024) <= 1e-12);
    }

    #[test]
    fn constant_images_have_vanishing_highpass() {
        let bank = build_filter_bank();
        let plane = Array2::from_elem((16, 16), 0.37);
        for levels in 1..=3 {
            let pyr = decompose(&plane, levels, &bank).unwrap();
            assert!(pyr.lowpass.iter().all(|&v| (v - 0.37).abs() < 1e-13));
            for h in &pyr.highpass {
                assert!(h.iter().all(|&v| v.abs() < 1e-14));
            }
        }
    }

    #[test]
    fn horizontal_ramp_h10_interior_value() {
        let bank = build_filter_bank();
        let (h, w) = (16usize, 16usize);
        let plane = Array2::from_shape_fn((h, w), |(_, x)| x as f64);
        let pyr = decompose(&plane, 1, &bank).unwrap();
        // order: (0,1) (0,2) (1,0) ... -> H_{1,0} is index 2
        let h10 = &pyr.highpass[2];
        let expect = -(6.0f64.sqrt()) / 3.0;
        for y in 0..h {
            for x in 1..w - 1 {
                assert!((h10[(y, x)] - expect).abs() < 1e-12, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn subband_counts() {
        let bank = build_filter_bank();
        let plane = random_plane(32, 32, 9);
        let pyr = decompose(&plane, 2, &bank).unwrap();
        assert_eq!(pyr.subband_count(), 17);
        assert_eq!(planes_per_channel(2), 17);
    }

    #[test]
    fn perfect_reconstruction_on_seeded_images() {
        let bank = build_filter_bank();
        for (i, &(h, w)) in [(16, 16), (33, 17), (64, 64), (24, 40)].iter().enumerate() {
            for levels in 1..=3 {
                let plane = random_plane(h, w, 100 + i as u64);
                let pyr = decompose(&plane, levels, &bank).unwrap();
                let rec = reconstruct(&pyr, &bank).unwrap();
                let err = (&rec - &plane).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!(err <= 1e-10 * levels as f64, "L={levels} err={err}");
            }
        }
    }

    #[test]
    fn zero_pyramid_reconstructs_to_zero() {
        let bank = build_filter_bank();
        let pyr = TightFramePyramid {
            levels: 2,
            lowpass: Array2::zeros((12, 12)),
            highpass: vec![Array2::zeros((12, 12)); 16],
        };
        let rec = reconstruct(&pyr, &bank).unwrap();
        assert!(rec.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn level1_energy_is_preserved() {
        let bank = build_filter_bank();
        let plane = random_plane(32, 48, 11);
        let pyr = decompose(&plane, 1, &bank).unwrap();
        let mut energy = pyr.lowpass.iter().map(|v| v * v).sum::<f64>();
        for h in &pyr.highpass {
            energy += h.iter().map(|v| v * v).sum::<f64>();
        }
        let source = plane.iter().map(|v| v * v).sum::<f64>();
        assert!((energy - source).abs() <= 1e-9 * source.max(1.0));
    }

    #[test]
    fn analysis_adjoint_pairs_with_synthesis() {
        let bank = build_filter_bank();
        let u = random_plane(13, 21, 3);
        let v = random_plane(13, 21, 4);
        for p in 0..3 {
            for q in 0..3 {
                let au_v = analyze(&u, &bank, p, q)
                    .iter()
                    .zip(v.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
                let u_atv = u
                    .iter()
                    .zip(synthesize(&v, &bank, p, q).iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
                assert!((au_v - u_atv).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn directional_sensitivity_of_h10_to_horizontal_shift() {
        let bank = build_filter_bank();
        let (h, w) = (32usize, 32usize);
        // vertical stripes plus a faint diagonal so both subbands respond
        let img = |shift: usize| {
            Array2::from_shape_fn((h, w), |(y, x)| {
                let xs = (x + shift) % w;
                let stripe = if (xs / 2) % 2 == 0 { 0.8 } else { 0.2 };
                stripe + 0.01 * ((x + 2 * y) as f64 / (w + 2 * h) as f64)
            })
        };
        let a = decompose(&img(0), 1, &bank).unwrap();
        let b = decompose(&img(1), 1, &bank).unwrap();
        let l1 = |p: &Array2<f64>, q: &Array2<f64>| {
            p.iter().zip(q.iter()).map(|(u, v)| (u - v).abs()).sum::<f64>()
        };
        let change_h01 = l1(&a.highpass[0], &b.highpass[0]);
        let change_h10 = l1(&a.highpass[2], &b.highpass[2]);
        assert!(
            change_h10 >= 5.0 * change_h01,
            "h10 {change_h10} vs h01 {change_h01}"
        );
    }

    #[test]
    fn feature_stack_counts_and_determinism() {
        let bank = build_filter_bank();
        let gray = Image::from_fn_gray(16, 16, |x, y| ((x ^ y) & 7) as f64 / 7.0).unwrap();
        let planes = feature_stack(&gray, 1, &bank).unwrap();
        assert_eq!(planes.len(), 9);
        let again = feature_stack(&gray, 1, &bank).unwrap();
        for (a, b) in planes.iter().zip(again.iter()) {
            assert_eq!(a, b);
        }

        let rgb = Image::constant(16, 16, 3, 0.5).unwrap();
        assert_eq!(feature_stack(&rgb, 2, &bank).unwrap().len(), 51);
    }

    #[test]
    fn rejects_bad_levels_and_tiny_planes() {
        let bank = build_filter_bank();
        let plane = Array2::zeros((8, 8));
        assert!(decompose(&plane, 0, &bank).is_err());
        let tiny = Array2::zeros((2, 8));
        assert!(decompose(&tiny, 1, &bank).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn decomposition_is_linear(seed_a in 0u64..1000, seed_b in 0u64..1000,
                                   alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let bank = build_filter_bank();
            let a = random_plane(12, 12, seed_a);
            let b = random_plane(12, 12, seed_b);
            let mixed = alpha * &a + beta * &b;
            let pa = decompose(&a, 2, &bank).unwrap();
            let pb = decompose(&b, 2, &bank).unwrap();
            let pm = decompose(&mixed, 2, &bank).unwrap();
            let combined_low = alpha * &pa.lowpass + beta * &pb.lowpass;
            let low_err = (&pm.lowpass - &combined_low).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(low_err <= 1e-12);
            for ((ha, hb), hm) in pa.highpass.iter().zip(pb.highpass.iter()).zip(pm.highpass.iter()) {
                let combined = alpha * ha + beta * hb;
                let err = (hm - &combined).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                prop_assert!(err <= 1e-12);
            }
        }
    }
}
