//! Reconstruction and re-distortion fidelity losses and the warp adjoints
//! used by backpropagation.
//!
//! Both losses are per-frame means of the pixel-mean absolute difference, so
//! their scale is independent of resolution, channel count, and T.

use ndarray::Array3;

use super::linalg::kahan_sum;
use crate::error::{CqcdError, Result};
use crate::field::DisplacementField;
use crate::imaging::{FrameSequence, Image};

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l1_mean(a: &Image, b: &Image) -> f64 {
    let n = a.data().len() as f64;
    kahan_sum(
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(&u, &v)| (u - v).abs()),
    ) / n
}

/// `(1/T) sum_t mean |I* - warped_t|`.
pub fn loss_rec(istar: &Image, warped: &FrameSequence) -> Result<f64> {
    if istar.dim() != warped.frame_dim() {
        return Err(CqcdError::DimensionMismatch(format!(
            "restored {:?} vs frames {:?}",
            istar.dim(),
            warped.frame_dim()
        )));
    }
    let t = warped.len() as f64;
    Ok(kahan_sum(warped.frames().iter().map(|f| l1_mean(istar, f))) / t)
}

/// [`loss_rec`] plus its gradients with respect to the restored image and
/// each warped frame.
pub fn loss_rec_with_grads(
    istar: &Image,
    warped: &FrameSequence,
) -> Result<(f64, Array3<f64>, Vec<Array3<f64>>)> {
    let value = loss_rec(istar, warped)?;
    let t = warped.len() as f64;
    let n = istar.data().len() as f64;
    let scale = 1.0 / (t * n);
    let mut d_istar = Array3::zeros(istar.data().dim());
    let mut d_warped = Vec::with_capacity(warped.len());
    for frame in warped.frames() {
        let mut d_frame = Array3::zeros(istar.data().dim());
        for ((di, df), (&a, &b)) in d_istar
            .iter_mut()
            .zip(d_frame.iter_mut())
            .zip(istar.data().iter().zip(frame.data().iter()))
        {
            let s = scale * sign(a - b);
            *di += s;
            *df -= s;
        }
        d_warped.push(d_frame);
    }
    Ok((value, d_istar, d_warped))
}

/// `(1/T) sum_t mean |original_t - redistorted_t|`.
pub fn loss_dist(originals: &FrameSequence, redistorted: &FrameSequence) -> Result<f64> {
    if originals.len() != redistorted.len() {
        return Err(CqcdError::DimensionMismatch(format!(
            "{} originals vs {} redistorted",
            originals.len(),
            redistorted.len()
        )));
    }
    if originals.frame_dim() != redistorted.frame_dim() {
        return Err(CqcdError::DimensionMismatch(
            "frame shapes disagree".into(),
        ));
    }
    let t = originals.len() as f64;
    Ok(kahan_sum(
        originals
            .frames()
            .iter()
            .zip(redistorted.frames().iter())
            .map(|(a, b)| l1_mean(a, b)),
    ) / t)
}

/// [`loss_dist`] plus its gradient with respect to each redistorted frame.
pub fn loss_dist_with_grad(
    originals: &FrameSequence,
    redistorted: &FrameSequence,
) -> Result<(f64, Vec<Array3<f64>>)> {
    let value = loss_dist(originals, redistorted)?;
    let t = originals.len() as f64;
    let n = originals.frame(0).data().len() as f64;
    let scale = 1.0 / (t * n);
    let grads = originals
        .frames()
        .iter()
        .zip(redistorted.frames().iter())
        .map(|(orig, re)| {
            let mut g = Array3::zeros(orig.data().dim());
            for (d, (&a, &b)) in g.iter_mut().zip(orig.data().iter().zip(re.data().iter())) {
                *d = scale * sign(b - a);
            }
            g
        })
        .collect();
    Ok((value, grads))
}

/// Gradient of `warp(src, field)` with respect to the field, given the
/// cotangent of the warped output. Out-of-domain samples are clamped in the
/// forward pass, so their coordinate derivative is zero.
pub fn warp_backward_field(
    src: &Image,
    field: &DisplacementField,
    dout: &Array3<f64>,
) -> DisplacementField {
    let (h, w, c) = src.dim();
    let data = src.data();
    let mut grad = DisplacementField::zeros(h, w);
    let (wm1, hm1) = ((w - 1) as f64, (h - 1) as f64);
    for y in 0..h {
        for x in 0..w {
            let raw_x = x as f64 + field.dx[(y, x)];
            let raw_y = y as f64 + field.dy[(y, x)];
            let sx = raw_x.clamp(0.0, wm1);
            let sy = raw_y.clamp(0.0, hm1);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let x_active = (0.0..=wm1).contains(&raw_x);
            let y_active = (0.0..=hm1).contains(&raw_y);
            let (mut gx, mut gy) = (0.0, 0.0);
            for ch in 0..c {
                let g = dout[(y, x, ch)];
                if g == 0.0 {
                    continue;
                }
                let v00 = data[(y0, x0, ch)];
                let v01 = data[(y0, x1, ch)];
                let v10 = data[(y1, x0, ch)];
                let v11 = data[(y1, x1, ch)];
                if x_active {
                    gx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                }
                if y_active {
                    gy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
            }
            grad.dx[(y, x)] = gx;
            grad.dy[(y, x)] = gy;
        }
    }
    grad
}

/// Adjoint of `warp(src, field)` with respect to the source image: scatters
/// the cotangent through the bilinear weights.
pub fn warp_backward_image(field: &DisplacementField, dout: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = dout.dim();
    let mut grad = Array3::zeros((h, w, c));
    let (wm1, hm1) = ((w - 1) as f64, (h - 1) as f64);
    for y in 0..h {
        for x in 0..w {
            let sx = (x as f64 + field.dx[(y, x)]).clamp(0.0, wm1);
            let sy = (y as f64 + field.dy[(y, x)]).clamp(0.0, hm1);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for ch in 0..c {
                let g = dout[(y, x, ch)];
                if g == 0.0 {
                    continue;
                }
                grad[(y0, x0, ch)] += g * (1.0 - fx) * (1.0 - fy);
                grad[(y0, x1, ch)] += g * fx * (1.0 - fy);
                grad[(y1, x0, ch)] += g * (1.0 - fx) * fy;
                grad[(y1, x1, ch)] += g * fx * fy;
            }
        }
    }
    grad
}

/// Per-pixel interpolation cell of `warp(src, field)` packed with the clamp
/// state; finite-difference checks compare these to detect kink crossings.
pub fn warp_cells(dims: (usize, usize), field: &DisplacementField) -> Vec<u32> {
    let (h, w) = dims;
    let (wm1, hm1) = ((w - 1) as f64, (h - 1) as f64);
    let mut cells = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let raw_x = x as f64 + field.dx[(y, x)];
            let raw_y = y as f64 + field.dy[(y, x)];
            let cx = raw_x.clamp(0.0, wm1).floor() as u32;
            let cy = raw_y.clamp(0.0, hm1).floor() as u32;
            let flags = (!(0.0..=wm1).contains(&raw_x) as u32)
                | ((!(0.0..=hm1).contains(&raw_y) as u32) << 1);
            cells.push((cy << 14) | (cx << 2) | flags);
        }
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::warp;
    use crate::simulator::default_scene;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn loss_rec_hand_values() {
        let istar = Image::constant(8, 8, 1, 0.5).unwrap();
        let seq = FrameSequence::new(vec![istar.clone(), istar.clone()]).unwrap();
        assert_eq!(loss_rec(&istar, &seq).unwrap(), 0.0);

        let lo = Image::constant(8, 8, 1, 0.4).unwrap();
        let hi = Image::constant(8, 8, 1, 0.6).unwrap();
        let seq = FrameSequence::new(vec![lo, hi]).unwrap();
        assert!((loss_rec(&istar, &seq).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn loss_dist_hand_values() {
        let scene = default_scene(8, 8, 1);
        let seq = FrameSequence::new(vec![scene.clone(), scene.clone()]).unwrap();
        assert_eq!(loss_dist(&seq, &seq).unwrap(), 0.0);

        let offset =
            Image::new(scene.data().mapv(|v| (v + 0.2).min(1.2))).unwrap();
        let shifted = FrameSequence::new(vec![offset.clone(), offset]).unwrap();
        assert!((loss_dist(&seq, &shifted).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn median_minimizes_loss_rec_per_pixel() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let frames: Vec<Image> = (0..5)
            .map(|_| {
                Image::new(Array3::from_shape_fn((4, 4, 1), |_| rng.random::<f64>())).unwrap()
            })
            .collect();
        let seq = FrameSequence::new(frames.clone()).unwrap();
        // pixel-wise median
        let median = Image::new(Array3::from_shape_fn((4, 4, 1), |(y, x, c)| {
            let mut vals: Vec<f64> = frames.iter().map(|f| f.data()[(y, x, c)]).collect();
            vals.sort_by(f64::total_cmp);
            vals[2]
        }))
        .unwrap();
        let median_loss = loss_rec(&median, &seq).unwrap();
        // brute force: only frame values can be per-pixel minimizers of an L1 sum
        let mut best = f64::INFINITY;
        let brute: Vec<Vec<f64>> = (0..16)
            .map(|i| {
                let (y, x) = (i / 4, i % 4);
                frames.iter().map(|f| f.data()[(y, x, 0)]).collect()
            })
            .collect();
        let mut total = 0.0;
        for cell in &brute {
            let mut cell_best = f64::INFINITY;
            for cand in cell {
                let cost: f64 = cell.iter().map(|v| (v - cand).abs()).sum();
                cell_best = cell_best.min(cost);
            }
            total += cell_best;
        }
        best = best.min(total / (5.0 * 16.0));
        assert!((median_loss - best).abs() <= 1e-12, "{median_loss} vs {best}");
    }

    #[test]
    fn warp_field_gradient_matches_finite_differences() {
        let src = default_scene(12, 12, 1);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut field = DisplacementField::zeros(12, 12);
        for v in field.dx.iter_mut().chain(field.dy.iter_mut()) {
            *v = rng.random_range(-1.3..1.3) + 0.37; // keep samples off-integer
        }
        let dout = Array3::from_shape_fn((12, 12, 1), |_| rng.random_range(-1.0..1.0));
        let grad = warp_backward_field(&src, &field, &dout);
        let loss = |f: &DisplacementField| {
            let out = warp(&src, f).unwrap();
            out.data()
                .iter()
                .zip(dout.iter())
                .map(|(&o, &g)| o * g)
                .sum::<f64>()
        };
        let step = 1e-6;
        for &(y, x) in &[(2usize, 3usize), (7, 7), (10, 1), (5, 9)] {
            for on_dx in [true, false] {
                let mut plus = field.clone();
                let mut minus = field.clone();
                if on_dx {
                    plus.dx[(y, x)] += step;
                    minus.dx[(y, x)] -= step;
                } else {
                    plus.dy[(y, x)] += step;
                    minus.dy[(y, x)] -= step;
                }
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
                let an = if on_dx { grad.dx[(y, x)] } else { grad.dy[(y, x)] };
                assert!(
                    (an - fd).abs() <= 1e-6 * an.abs().max(fd.abs()).max(1.0),
                    "({x},{y}) dx={on_dx}: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn warp_image_adjoint_is_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut field = DisplacementField::zeros(10, 10);
        for v in field.dx.iter_mut().chain(field.dy.iter_mut()) {
            *v = rng.random_range(-2.0..2.0);
        }
        let u = Image::new(Array3::from_shape_fn((10, 10, 1), |_| rng.random::<f64>())).unwrap();
        let v = Array3::from_shape_fn((10, 10, 1), |_| rng.random::<f64>() - 0.5);
        let warped = warp(&u, &field).unwrap();
        let lhs: f64 = warped.data().iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        let adj = warp_backward_image(&field, &v);
        let rhs: f64 = u.data().iter().zip(adj.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    use ndarray::Array3;
}
