//! Image containers, bilinear sampling and warping, and quality metrics.
//!
//! Coordinates follow the (x, y) = (column, row) convention with the origin
//! at the top-left pixel center. Warping is pull-back: the output pixel at
//! (x, y) reads the input at (x + dx, y + dy), with out-of-domain coordinates
//! clamped to the boundary pixel before interpolation.

use ndarray::{Array2, Array3};

use crate::error::{CqcdError, Result};
use crate::field::DisplacementField;

/// H x W x C grid of intensities, nominally in [0, 1].
///
/// Channels are 1 (grayscale) or 3 (RGB). All intensities are finite; values
/// may leave [0, 1] transiently inside optimization and are clamped on save.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    /// Wraps an (h, w, c) array. Fails on zero extents, channel counts other
    /// than 1 or 3, or non-finite values.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(CqcdError::InvalidArgument(format!(
                "image extents must be positive, got {h}x{w}"
            )));
        }
        if c != 1 && c != 3 {
            return Err(CqcdError::InvalidArgument(format!(
                "channel count must be 1 or 3, got {c}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CqcdError::InvalidArgument(
                "image contains non-finite intensities".into(),
            ));
        }
        Ok(Self { data })
    }

    /// Constant-valued image.
    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, channels), value))
    }

    /// Builds a single-channel image from `f(x, y)`.
    pub fn from_fn_gray(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        Self::new(Array3::from_shape_fn((height, width, 1), |(y, x, _)| f(x, y)))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// (height, width, channels).
    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn get(&self, x: usize, y: usize, channel: usize) -> f64 {
        self.data[(y, x, channel)]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// One channel as an (h, w) plane.
    pub fn channel_plane(&self, channel: usize) -> Array2<f64> {
        self.data.index_axis(ndarray::Axis(2), channel).to_owned()
    }

    /// Rebuilds an image from per-channel planes.
    pub fn from_planes(planes: &[Array2<f64>]) -> Result<Self> {
        if planes.is_empty() {
            return Err(CqcdError::InvalidArgument("no channel planes".into()));
        }
        let (h, w) = planes[0].dim();
        let mut data = Array3::zeros((h, w, planes.len()));
        for (c, plane) in planes.iter().enumerate() {
            if plane.dim() != (h, w) {
                return Err(CqcdError::DimensionMismatch(
                    "channel planes disagree on extents".into(),
                ));
            }
            data.index_axis_mut(ndarray::Axis(2), c).assign(plane);
        }
        Self::new(data)
    }

    /// Luma plane: the sole channel, or 0.299 R + 0.587 G + 0.114 B.
    pub fn to_luma(&self) -> Array2<f64> {
        let (h, w, c) = self.dim();
        if c == 1 {
            return self.channel_plane(0);
        }
        Array2::from_shape_fn((h, w), |(y, x)| {
            0.299 * self.data[(y, x, 0)] + 0.587 * self.data[(y, x, 1)] + 0.114 * self.data[(y, x, 2)]
        })
    }

    /// Clamps all intensities into [0, 1].
    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(CqcdError::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }
}

/// Ordered frames of identical shape.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    frames: Vec<Image>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| CqcdError::InvalidArgument("empty frame sequence".into()))?;
        let dim = first.dim();
        if frames.iter().any(|f| f.dim() != dim) {
            return Err(CqcdError::DimensionMismatch(
                "frames disagree on extents or channel count".into(),
            ));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Image {
        &self.frames[t]
    }

    /// (height, width, channels) shared by every frame.
    pub fn frame_dim(&self) -> (usize, usize, usize) {
        self.frames[0].dim()
    }
}

/// Bilinear interpolation of the four nearest pixels, clamping out-of-domain
/// coordinates to the boundary row/column first. Total on finite inputs.
pub fn bilinear_sample(img: &Image, x: f64, y: f64, channel: usize) -> f64 {
    let (h, w, _) = img.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let d = img.data();
    let top = (1.0 - fx) * d[(y0, x0, channel)] + fx * d[(y0, x1, channel)];
    let bottom = (1.0 - fx) * d[(y1, x0, channel)] + fx * d[(y1, x1, channel)];
    (1.0 - fy) * top + fy * bottom
}

/// Pull-back warp: `output(x, y, c) = img(x + dx(x, y), y + dy(x, y), c)`.
/// All channels share the field.
pub fn warp(img: &Image, field: &DisplacementField) -> Result<Image> {
    let (h, w, c) = img.dim();
    if field.dim() != (h, w) {
        return Err(CqcdError::DimensionMismatch(format!(
            "field {:?} vs image {:?}",
            field.dim(),
            (h, w)
        )));
    }
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let sx = x as f64 + field.dx[(y, x)];
            let sy = y as f64 + field.dy[(y, x)];
            for ch in 0..c {
                out[(y, x, ch)] = bilinear_sample(img, sx, sy, ch);
            }
        }
    }
    Image::new(out)
}

/// Peak signal-to-noise ratio in dB against a unit peak; `f64::INFINITY`
/// marks a zero-error pair. MSE pools all pixels and channels.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&u, &v)| (u - v) * (u - v))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Valid-mode separable correlation with the 1-D SSIM kernel along both axes.
fn ssim_blur_valid(plane: &Array2<f64>) -> Array2<f64> {
    let k = ssim_kernel();
    let (h, w) = plane.dim();
    let wv = w - SSIM_WINDOW + 1;
    let hv = h - SSIM_WINDOW + 1;
    let mut rows = Array2::zeros((h, wv));
    for y in 0..h {
        for x in 0..wv {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                acc += kj * plane[(y, x + j)];
            }
            rows[(y, x)] = acc;
        }
    }
    let mut out = Array2::zeros((hv, wv));
    for y in 0..hv {
        for x in 0..wv {
            let mut acc = 0.0;
            for (i, ki) in k.iter().enumerate() {
                acc += ki * rows[(y + i, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Mean structural similarity over all fully interior 11x11 Gaussian windows
/// (sigma 1.5, C1 = 0.01^2, C2 = 0.03^2 on unit dynamic range). Color images
/// are compared on luma.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w, _) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CqcdError::InvalidArgument(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let la = a.to_luma();
    let lb = b.to_luma();
    let mu_a = ssim_blur_valid(&la);
    let mu_b = ssim_blur_valid(&lb);
    let e_aa = ssim_blur_valid(&(&la * &la));
    let e_bb = ssim_blur_valid(&(&lb * &lb));
    let e_ab = ssim_blur_valid(&(&la * &lb));

    let mut total = 0.0;
    let n = mu_a.len() as f64;
    for ((((&ma, &mb), &aa), &bb), &ab) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(e_aa.iter())
        .zip(e_bb.iter())
        .zip(e_ab.iter())
    {
        let va = aa - ma * ma;
        let vb = bb - mb * mb;
        let cov = ab - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    Ok(total / n)
}

/// Pixel-wise arithmetic mean of the sequence.
pub fn average_frames(seq: &FrameSequence) -> Image {
    let (h, w, c) = seq.frame_dim();
    let mut acc = Array3::<f64>::zeros((h, w, c));
    for frame in seq.frames() {
        acc += frame.data();
    }
    acc /= seq.len() as f64;
    Image { data: acc }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    fn ramp_h(h: usize, w: usize) -> Image {
        Image::from_fn_gray(h, w, |x, _| x as f64 / (w - 1) as f64).unwrap()
    }

    #[test]
    fn rejects_bad_channel_counts_and_nonfinite() {
        assert!(Image::new(Array3::zeros((4, 4, 2))).is_err());
        let mut d = Array3::zeros((4, 4, 1));
        d[(0, 0, 0)] = f64::NAN;
        assert!(Image::new(d).is_err());
    }

    #[test]
    fn bilinear_at_grid_nodes_returns_stored_values() {
        let img = ramp_h(6, 8);
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(bilinear_sample(&img, x as f64, y as f64, 0), img.get(x, y, 0));
            }
        }
    }

    #[test]
    fn bilinear_of_constant_is_constant() {
        let img = Image::constant(5, 7, 1, 0.7).unwrap();
        for &(x, y) in &[(0.3, 0.9), (2.5, 1.5), (-4.0, 100.0), (6.9, 0.0)] {
            assert!((bilinear_sample(&img, x, y, 0) - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_two_by_two_midpoint() {
        // rows [[0,1],[0,1]]: halfway between columns on the top row.
        let img = Image::new(arr3(&[[[0.0], [1.0]], [[0.0], [1.0]]])).unwrap();
        assert!((bilinear_sample(&img, 0.5, 0.0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bilinear_is_linear_in_the_image() {
        let a = ramp_h(9, 9);
        let b = Image::from_fn_gray(9, 9, |x, y| ((x * 3 + y * 7) % 11) as f64 / 11.0).unwrap();
        let (alpha, beta) = (0.37, -1.25);
        let mixed = Image::new(alpha * a.data() + beta * b.data()).unwrap();
        for &(x, y) in &[(0.25, 7.75), (3.5, 3.5), (8.0, 0.1), (1.9, 6.01)] {
            let lhs = bilinear_sample(&mixed, x, y, 0);
            let rhs = alpha * bilinear_sample(&a, x, y, 0) + beta * bilinear_sample(&b, x, y, 0);
            assert!((lhs - rhs).abs() < 1e-14);
        }
    }

    #[test]
    fn warp_with_zero_field_is_identity() {
        let img = ramp_h(8, 10);
        let zero = DisplacementField::zeros(8, 10);
        let out = warp(&img, &zero).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn warp_shifts_ramp_with_clamping() {
        let w = 10usize;
        let img = ramp_h(6, w);
        let mut field = DisplacementField::zeros(6, w);
        field.dx.fill(1.0);
        let out = warp(&img, &field).unwrap();
        for y in 0..6 {
            for x in 0..w {
                let expect = (x + 1).min(w - 1) as f64 / (w - 1) as f64;
                assert!((out.get(x, y, 0) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn warp_rejects_shape_mismatch() {
        let img = ramp_h(6, 10);
        let field = DisplacementField::zeros(5, 10);
        assert!(warp(&img, &field).is_err());
    }

    #[test]
    fn psnr_markers_and_values() {
        let zeros = Image::constant(8, 8, 1, 0.0).unwrap();
        let ones = Image::constant(8, 8, 1, 1.0).unwrap();
        assert!(psnr(&zeros, &zeros).unwrap().is_infinite());
        assert!((psnr(&zeros, &ones).unwrap() - 0.0).abs() < 1e-12);
        let a = ramp_h(8, 8);
        let shifted = Image::new(a.data() + 0.1).unwrap();
        assert!((psnr(&a, &shifted).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &shifted).unwrap(), psnr(&shifted, &a).unwrap());
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = ramp_h(8, 8);
        let b = ramp_h(8, 9);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_self_is_one() {
        let a = ramp_h(16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = Image::constant(12, 12, 1, 0.5).unwrap();
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = ramp_h(10, 16);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn average_of_identical_frames_is_the_frame() {
        let img = ramp_h(8, 8);
        let seq = FrameSequence::new(vec![img.clone(), img.clone(), img.clone()]).unwrap();
        assert_eq!(average_frames(&seq).data(), img.data());
    }

    #[test]
    fn average_of_zero_and_one_is_half() {
        let zeros = Image::constant(8, 8, 3, 0.0).unwrap();
        let ones = Image::constant(8, 8, 3, 1.0).unwrap();
        let seq = FrameSequence::new(vec![zeros, ones]).unwrap();
        let avg = average_frames(&seq);
        assert!(avg.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn frame_sequence_validates() {
        assert!(FrameSequence::new(vec![]).is_err());
        let a = ramp_h(8, 8);
        let b = ramp_h(8, 9);
        assert!(FrameSequence::new(vec![a, b]).is_err());
    }
}
