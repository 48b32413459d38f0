//! Deformation estimator backends.
//!
//! `Grid`: one control lattice per frame, bilinearly upsampled to full
//! resolution. Control values are squashed through `scale * tanh(raw/scale)`
//! before upsampling, so every emitted displacement is bounded by the scale
//! and a zero parameter block is exactly the identity map.
//!
//! `Conv`: a small shared encoder-decoder over the per-frame tight-frame
//! features (two avg-pool stages down, bilinear stages up, 3x3 periodic
//! convolutions). Hidden layers are seeded Glorot-uniform; the output layer
//! starts at zero so a fresh estimator also emits zero fields.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CqcdError, Result};
use crate::field::DisplacementField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorBackend {
    Grid,
    Conv,
}

impl std::str::FromStr for EstimatorBackend {
    type Err = CqcdError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "grid" | "grid-direct" => Ok(EstimatorBackend::Grid),
            "conv" | "conv-net" => Ok(EstimatorBackend::Conv),
            other => Err(CqcdError::InvalidArgument(format!("unknown backend {other}"))),
        }
    }
}

const CONV_WIDTHS: [usize; 2] = [16, 32];

#[derive(Debug, Clone)]
struct ConvLayer {
    w: Array4<f64>,
    b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct DeformationEstimator {
    pub backend: EstimatorBackend,
    pub displacement_scale: f64,
    pub frames: usize,
    pub image_dims: (usize, usize),
    // grid backend
    pub grid_spacing: usize,
    grid_dims: (usize, usize),
    grid_params: Vec<Array3<f64>>,
    // conv backend
    conv_layers: Vec<ConvLayer>,
    conv_in_planes: usize,
}

/// Forward state needed by the backward pass.
pub enum EstimatorCache {
    Grid { squashed: Vec<Array3<f64>> },
    Conv { per_frame: Vec<ConvCache> },
}

pub struct ConvCache {
    input: Vec<Array2<f64>>,
    z: Vec<Vec<Array2<f64>>>,
    pooled_dims: Vec<(usize, usize)>,
    raw: Vec<Array2<f64>>,
}

fn div_ceil(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

/// Lower node index and fraction for each pixel of an axis mapped onto a
/// control lattice spanning [0, len-1].
fn lattice_map(len: usize, nodes: usize) -> Vec<(usize, f64)> {
    (0..len)
        .map(|i| {
            let g = if len == 1 {
                0.0
            } else {
                i as f64 * (nodes - 1) as f64 / (len - 1) as f64
            };
            let i0 = (g.floor() as usize).min(nodes - 2);
            (i0, g - i0 as f64)
        })
        .collect()
}

impl DeformationEstimator {
    pub fn new_grid(
        frames: usize,
        height: usize,
        width: usize,
        grid_spacing: usize,
        displacement_scale: f64,
    ) -> Result<Self> {
        if grid_spacing == 0 {
            return Err(CqcdError::InvalidArgument("grid spacing must be positive".into()));
        }
        if height < 2 || width < 2 || frames == 0 {
            return Err(CqcdError::InvalidArgument(
                "estimator needs at least 2x2 images and one frame".into(),
            ));
        }
        let gh = div_ceil(height - 1, grid_spacing) + 1;
        let gw = div_ceil(width - 1, grid_spacing) + 1;
        Ok(Self {
            backend: EstimatorBackend::Grid,
            displacement_scale,
            frames,
            image_dims: (height, width),
            grid_spacing,
            grid_dims: (gh, gw),
            grid_params: vec![Array3::zeros((2, gh, gw)); frames],
            conv_layers: Vec::new(),
            conv_in_planes: 0,
        })
    }

    pub fn new_conv(
        frames: usize,
        height: usize,
        width: usize,
        in_planes: usize,
        displacement_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if height < 4 || width < 4 || frames == 0 || in_planes == 0 {
            return Err(CqcdError::InvalidArgument(
                "conv estimator needs >= 4x4 images, one frame, and features".into(),
            ));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut layer = |cin: usize, cout: usize, zero: bool| {
            let k = (6.0 / ((cin + cout) * 9) as f64).sqrt();
            let w = if zero {
                Array4::zeros((cout, cin, 3, 3))
            } else {
                Array4::from_shape_fn((cout, cin, 3, 3), |_| rng.random_range(-k..k))
            };
            ConvLayer {
                w,
                b: Array1::zeros(cout),
            }
        };
        let conv_layers = vec![
            layer(in_planes, CONV_WIDTHS[0], false),
            layer(CONV_WIDTHS[0], CONV_WIDTHS[1], false),
            layer(CONV_WIDTHS[1], CONV_WIDTHS[1], false),
            layer(CONV_WIDTHS[1], CONV_WIDTHS[0], false),
            layer(CONV_WIDTHS[0], 2, true),
        ];
        Ok(Self {
            backend: EstimatorBackend::Conv,
            displacement_scale,
            frames,
            image_dims: (height, width),
            grid_spacing: 0,
            grid_dims: (0, 0),
            grid_params: Vec::new(),
            conv_layers,
            conv_in_planes: in_planes,
        })
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        self.grid_dims
    }

    fn squash(&self, raw: f64) -> f64 {
        self.displacement_scale * (raw / self.displacement_scale).tanh()
    }

    /// One displacement field per frame. The grid backend ignores feature
    /// values; the conv backend consumes one feature stack per frame.
    pub fn forward(
        &self,
        features: Option<&[Vec<Array2<f64>>]>,
    ) -> Result<(Vec<DisplacementField>, EstimatorCache)> {
        match self.backend {
            EstimatorBackend::Grid => self.forward_grid(),
            EstimatorBackend::Conv => {
                let feats = features.ok_or_else(|| {
                    CqcdError::InvalidArgument("conv backend needs feature stacks".into())
                })?;
                self.forward_conv(feats)
            }
        }
    }

    fn forward_grid(&self) -> Result<(Vec<DisplacementField>, EstimatorCache)> {
        let (h, w) = self.image_dims;
        let (gh, gw) = self.grid_dims;
        let map_y = lattice_map(h, gh);
        let map_x = lattice_map(w, gw);
        let mut fields = Vec::with_capacity(self.frames);
        let mut squashed = Vec::with_capacity(self.frames);
        for raw in &self.grid_params {
            let s = raw.mapv(|v| self.squash(v));
            let mut field = DisplacementField::zeros(h, w);
            for y in 0..h {
                let (y0, fy) = map_y[y];
                for x in 0..w {
                    let (x0, fx) = map_x[x];
                    let lerp = |c: usize| {
                        let top = (1.0 - fx) * s[(c, y0, x0)] + fx * s[(c, y0, x0 + 1)];
                        let bot = (1.0 - fx) * s[(c, y0 + 1, x0)] + fx * s[(c, y0 + 1, x0 + 1)];
                        (1.0 - fy) * top + fy * bot
                    };
                    field.dx[(y, x)] = lerp(0);
                    field.dy[(y, x)] = lerp(1);
                }
            }
            fields.push(field);
            squashed.push(s);
        }
        Ok((fields, EstimatorCache::Grid { squashed }))
    }

    /// Gradients with respect to the parameter blocks, in the canonical
    /// order of [`Self::blocks`].
    pub fn backward(
        &self,
        cache: &EstimatorCache,
        dfields: &[DisplacementField],
    ) -> Result<Vec<Vec<f64>>> {
        match (self.backend, cache) {
            (EstimatorBackend::Grid, EstimatorCache::Grid { squashed }) => {
                self.backward_grid(squashed, dfields)
            }
            (EstimatorBackend::Conv, EstimatorCache::Conv { per_frame }) => {
                self.backward_conv(per_frame, dfields)
            }
            _ => Err(CqcdError::InvalidArgument("cache/backend mismatch".into())),
        }
    }

    fn backward_grid(
        &self,
        squashed: &[Array3<f64>],
        dfields: &[DisplacementField],
    ) -> Result<Vec<Vec<f64>>> {
        if dfields.len() != self.frames {
            return Err(CqcdError::DimensionMismatch(
                "field cotangent count != frames".into(),
            ));
        }
        let (h, w) = self.image_dims;
        let (gh, gw) = self.grid_dims;
        let map_y = lattice_map(h, gh);
        let map_x = lattice_map(w, gw);
        let mut grads = Vec::with_capacity(self.frames);
        for (t, dfield) in dfields.iter().enumerate() {
            let mut ds = Array3::<f64>::zeros((2, gh, gw));
            for y in 0..h {
                let (y0, fy) = map_y[y];
                for x in 0..w {
                    let (x0, fx) = map_x[x];
                    for (c, g) in [dfield.dx[(y, x)], dfield.dy[(y, x)]].into_iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        ds[(c, y0, x0)] += g * (1.0 - fx) * (1.0 - fy);
                        ds[(c, y0, x0 + 1)] += g * fx * (1.0 - fy);
                        ds[(c, y0 + 1, x0)] += g * (1.0 - fx) * fy;
                        ds[(c, y0 + 1, x0 + 1)] += g * fx * fy;
                    }
                }
            }
            // chain through the tanh squash
            let s = &squashed[t];
            let mut draw = ds;
            draw.zip_mut_with(s, |d, &sv| {
                let th = sv / self.displacement_scale;
                *d *= 1.0 - th * th;
            });
            grads.push(draw.into_raw_vec_and_offset().0);
        }
        Ok(grads)
    }

    fn forward_conv(
        &self,
        features: &[Vec<Array2<f64>>],
    ) -> Result<(Vec<DisplacementField>, EstimatorCache)> {
        if features.len() != self.frames {
            return Err(CqcdError::DimensionMismatch(format!(
                "{} feature stacks for {} frames",
                features.len(),
                self.frames
            )));
        }
        let (h, w) = self.image_dims;
        let mut fields = Vec::with_capacity(self.frames);
        let mut caches = Vec::with_capacity(self.frames);
        for stack in features {
            if stack.len() != self.conv_in_planes {
                return Err(CqcdError::DimensionMismatch(format!(
                    "{} feature planes, conv expects {}",
                    stack.len(),
                    self.conv_in_planes
                )));
            }
            // encoder
            let z1 = conv_forward(stack, &self.conv_layers[0]);
            let a1 = relu_each(&z1);
            let p1: Vec<Array2<f64>> = a1.iter().map(avgpool2).collect();
            let z2 = conv_forward(&p1, &self.conv_layers[1]);
            let a2 = relu_each(&z2);
            let p2: Vec<Array2<f64>> = a2.iter().map(avgpool2).collect();
            let z3 = conv_forward(&p2, &self.conv_layers[2]);
            let a3 = relu_each(&z3);
            // decoder
            let u1: Vec<Array2<f64>> =
                a3.iter().map(|p| upsample_bilinear(p, p1[0].dim())).collect();
            let z4 = conv_forward(&u1, &self.conv_layers[3]);
            let a4 = relu_each(&z4);
            let u2: Vec<Array2<f64>> =
                a4.iter().map(|p| upsample_bilinear(p, (h, w))).collect();
            let raw = conv_forward(&u2, &self.conv_layers[4]);

            let mut field = DisplacementField::zeros(h, w);
            field.dx.zip_mut_with(&raw[0], |d, &r| *d = self.squash(r));
            field.dy.zip_mut_with(&raw[1], |d, &r| *d = self.squash(r));
            fields.push(field);
            caches.push(ConvCache {
                input: stack.to_vec(),
                z: vec![z1, z2, z3, z4],
                pooled_dims: vec![p1[0].dim(), p2[0].dim()],
                raw,
            });
        }
        Ok((fields, EstimatorCache::Conv { per_frame: caches }))
    }

    fn backward_conv(
        &self,
        per_frame: &[ConvCache],
        dfields: &[DisplacementField],
    ) -> Result<Vec<Vec<f64>>> {
        let mut acc: Vec<(Array4<f64>, Array1<f64>)> = self
            .conv_layers
            .iter()
            .map(|l| (Array4::zeros(l.w.dim()), Array1::zeros(l.b.len())))
            .collect();
        for (cache, dfield) in per_frame.iter().zip(dfields.iter()) {
            // through the squash
            let mut draw = vec![dfield.dx.clone(), dfield.dy.clone()];
            for (c, plane) in draw.iter_mut().enumerate() {
                plane.zip_mut_with(&cache.raw[c], |d, &r| {
                    let th = (r / self.displacement_scale).tanh();
                    *d *= 1.0 - th * th;
                });
            }
            // rebuild intermediate activations from the cached pre-activations
            let a1 = relu_each(&cache.z[0]);
            let p1: Vec<Array2<f64>> = a1.iter().map(avgpool2).collect();
            let a2 = relu_each(&cache.z[1]);
            let p2: Vec<Array2<f64>> = a2.iter().map(avgpool2).collect();
            let a3 = relu_each(&cache.z[2]);
            let u1: Vec<Array2<f64>> =
                a3.iter().map(|p| upsample_bilinear(p, cache.pooled_dims[0])).collect();
            let a4 = relu_each(&cache.z[3]);
            let u2: Vec<Array2<f64>> =
                a4.iter().map(|p| upsample_bilinear(p, self.image_dims)).collect();

            let (dw5, db5, du2) = conv_backward(&u2, &self.conv_layers[4], &draw, true);
            acc[4].0 += &dw5;
            acc[4].1 += &db5;
            let da4 = relu_backward(&upsample_adjoint_each(&du2, cache.pooled_dims[0]), &cache.z[3]);
            let (dw4, db4, du1) = conv_backward(&u1, &self.conv_layers[3], &da4, true);
            acc[3].0 += &dw4;
            acc[3].1 += &db4;
            let da3 = relu_backward(&upsample_adjoint_each(&du1, cache.pooled_dims[1]), &cache.z[2]);
            let (dw3, db3, dp2) = conv_backward(&p2, &self.conv_layers[2], &da3, true);
            acc[2].0 += &dw3;
            acc[2].1 += &db3;
            let da2 = relu_backward(&avgpool_adjoint_each(&dp2, cache.pooled_dims[0]), &cache.z[1]);
            let (dw2, db2, dp1) = conv_backward(&p1, &self.conv_layers[1], &da2, true);
            acc[1].0 += &dw2;
            acc[1].1 += &db2;
            let da1 = relu_backward(&avgpool_adjoint_each(&dp1, self.image_dims), &cache.z[0]);
            let (dw1, db1, _) = conv_backward(&cache.input, &self.conv_layers[0], &da1, false);
            acc[0].0 += &dw1;
            acc[0].1 += &db1;
        }
        let mut out = Vec::with_capacity(acc.len() * 2);
        for (dw, db) in acc {
            out.push(dw.into_raw_vec_and_offset().0);
            out.push(db.to_vec());
        }
        Ok(out)
    }

    /// Parameter blocks in canonical order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        match self.backend {
            EstimatorBackend::Grid => self
                .grid_params
                .iter()
                .map(|p| p.as_slice().unwrap())
                .collect(),
            EstimatorBackend::Conv => {
                let mut out = Vec::with_capacity(self.conv_layers.len() * 2);
                for l in &self.conv_layers {
                    out.push(l.w.as_slice().unwrap());
                    out.push(l.b.as_slice().unwrap());
                }
                out
            }
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        match self.backend {
            EstimatorBackend::Grid => self
                .grid_params
                .iter_mut()
                .map(|p| p.as_slice_mut().unwrap())
                .collect(),
            EstimatorBackend::Conv => {
                let mut out = Vec::with_capacity(self.conv_layers.len() * 2);
                for l in &mut self.conv_layers {
                    out.push(l.w.as_slice_mut().unwrap());
                    out.push(l.b.as_slice_mut().unwrap());
                }
                out
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }
}

fn relu_each(zs: &[Array2<f64>]) -> Vec<Array2<f64>> {
    zs.iter().map(|p| p.mapv(|v| v.max(0.0))).collect()
}

fn relu_backward(d: &[Array2<f64>], z: &[Array2<f64>]) -> Vec<Array2<f64>> {
    d.iter()
        .zip(z.iter())
        .map(|(g, zz)| {
            let mut out = g.clone();
            out.zip_mut_with(zz, |v, &z| {
                if z <= 0.0 {
                    *v = 0.0;
                }
            });
            out
        })
        .collect()
}

/// Periodic 3x3 correlation over a multi-plane input.
fn conv_forward(input: &[Array2<f64>], layer: &ConvLayer) -> Vec<Array2<f64>> {
    let (h, w) = input[0].dim();
    let (cout, cin, _, _) = layer.w.dim();
    debug_assert_eq!(cin, input.len());
    let mut out = vec![Array2::zeros((h, w)); cout];
    for (o, plane) in out.iter_mut().enumerate() {
        plane.fill(layer.b[o]);
        for (i, src) in input.iter().enumerate() {
            for di in 0..3 {
                for dj in 0..3 {
                    let wv = layer.w[(o, i, di, dj)];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let ys = (y + h + di - 1) % h;
                        for x in 0..w {
                            let xs = (x + w + dj - 1) % w;
                            plane[(y, x)] += wv * src[(ys, xs)];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Weight/bias gradients and (optionally) the input cotangent.
fn conv_backward(
    input: &[Array2<f64>],
    layer: &ConvLayer,
    dout: &[Array2<f64>],
    need_input: bool,
) -> (Array4<f64>, Array1<f64>, Vec<Array2<f64>>) {
    let (h, w) = input[0].dim();
    let (cout, cin, _, _) = layer.w.dim();
    let mut dw = Array4::zeros((cout, cin, 3, 3));
    let mut db = Array1::zeros(cout);
    for (o, g) in dout.iter().enumerate() {
        db[o] = g.sum();
        for (i, src) in input.iter().enumerate() {
            for di in 0..3 {
                for dj in 0..3 {
                    let mut acc = 0.0;
                    for y in 0..h {
                        let ys = (y + h + di - 1) % h;
                        for x in 0..w {
                            let xs = (x + w + dj - 1) % w;
                            acc += g[(y, x)] * src[(ys, xs)];
                        }
                    }
                    dw[(o, i, di, dj)] = acc;
                }
            }
        }
    }
    let mut din = Vec::new();
    if need_input {
        din = vec![Array2::zeros((h, w)); cin];
        for (o, g) in dout.iter().enumerate() {
            for (i, dst) in din.iter_mut().enumerate() {
                for di in 0..3 {
                    for dj in 0..3 {
                        let wv = layer.w[(o, i, di, dj)];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let ys = (y + h + di - 1) % h;
                            for x in 0..w {
                                let xs = (x + w + dj - 1) % w;
                                dst[(ys, xs)] += wv * g[(y, x)];
                            }
                        }
                    }
                }
            }
        }
    }
    (dw, db, din)
}

fn avgpool2(input: &Array2<f64>) -> Array2<f64> {
    let (h, w) = input.dim();
    let (oh, ow) = (div_ceil(h, 2), div_ceil(w, 2));
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            let mut count = 0.0;
            for yy in (2 * y)..(2 * y + 2).min(h) {
                for xx in (2 * x)..(2 * x + 2).min(w) {
                    acc += input[(yy, xx)];
                    count += 1.0;
                }
            }
            out[(y, x)] = acc / count;
        }
    }
    out
}

fn avgpool_adjoint(d: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let (h, w) = target;
    let (oh, ow) = d.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..oh {
        for x in 0..ow {
            let ys = (2 * y)..(2 * y + 2).min(h);
            let xs = (2 * x)..(2 * x + 2).min(w);
            let count = (ys.len() * xs.len()) as f64;
            for yy in ys.clone() {
                for xx in xs.clone() {
                    out[(yy, xx)] += d[(y, x)] / count;
                }
            }
        }
    }
    out
}

fn avgpool_adjoint_each(d: &[Array2<f64>], target: (usize, usize)) -> Vec<Array2<f64>> {
    d.iter().map(|p| avgpool_adjoint(p, target)).collect()
}

/// Align-corners bilinear resize.
fn upsample_bilinear(input: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let (sh, sw) = input.dim();
    let (th, tw) = target;
    let fy = if th > 1 { (sh - 1) as f64 / (th - 1) as f64 } else { 0.0 };
    let fx = if tw > 1 { (sw - 1) as f64 / (tw - 1) as f64 } else { 0.0 };
    let mut out = Array2::zeros((th, tw));
    for y in 0..th {
        let sy = y as f64 * fy;
        let y0 = (sy.floor() as usize).min(sh.saturating_sub(2));
        let wy = sy - y0 as f64;
        for x in 0..tw {
            let sx = x as f64 * fx;
            let x0 = (sx.floor() as usize).min(sw.saturating_sub(2));
            let wx = sx - x0 as f64;
            let y1 = (y0 + 1).min(sh - 1);
            let x1 = (x0 + 1).min(sw - 1);
            out[(y, x)] = (1.0 - wy) * ((1.0 - wx) * input[(y0, x0)] + wx * input[(y0, x1)])
                + wy * ((1.0 - wx) * input[(y1, x0)] + wx * input[(y1, x1)]);
        }
    }
    out
}

fn upsample_adjoint(d: &Array2<f64>, source: (usize, usize)) -> Array2<f64> {
    let (sh, sw) = source;
    let (th, tw) = d.dim();
    let fy = if th > 1 { (sh - 1) as f64 / (th - 1) as f64 } else { 0.0 };
    let fx = if tw > 1 { (sw - 1) as f64 / (tw - 1) as f64 } else { 0.0 };
    let mut out = Array2::zeros((sh, sw));
    for y in 0..th {
        let sy = y as f64 * fy;
        let y0 = (sy.floor() as usize).min(sh.saturating_sub(2));
        let wy = sy - y0 as f64;
        for x in 0..tw {
            let sx = x as f64 * fx;
            let x0 = (sx.floor() as usize).min(sw.saturating_sub(2));
            let wx = sx - x0 as f64;
            let y1 = (y0 + 1).min(sh - 1);
            let x1 = (x0 + 1).min(sw - 1);
            let g = d[(y, x)];
            out[(y0, x0)] += g * (1.0 - wy) * (1.0 - wx);
            out[(y0, x1)] += g * (1.0 - wy) * wx;
            out[(y1, x0)] += g * wy * (1.0 - wx);
            out[(y1, x1)] += g * wy * wx;
        }
    }
    out
}

fn upsample_adjoint_each(d: &[Array2<f64>], source: (usize, usize)) -> Vec<Array2<f64>> {
    d.iter().map(|p| upsample_adjoint(p, source)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_grid_estimator_emits_zero_fields() {
        let est = DeformationEstimator::new_grid(3, 16, 16, 8, 10.0).unwrap();
        let (fields, _) = est.forward(None).unwrap();
        assert_eq!(fields.len(), 3);
        for f in &fields {
            assert_eq!(f, &DisplacementField::zeros(16, 16));
        }
    }

    #[test]
    fn single_control_point_paints_the_bilinear_footprint() {
        let mut est = DeformationEstimator::new_grid(1, 17, 17, 8, 10.0).unwrap();
        assert_eq!(est.grid_dims(), (3, 3));
        let raw = 2.0;
        {
            let mut blocks = est.blocks_mut();
            // dx component, node (1, 1)
            blocks[0][3 * 1 + 1] = raw;
        }
        let (fields, _) = est.forward(None).unwrap();
        let squashed = 10.0 * (raw / 10.0f64).tanh();
        let f = &fields[0];
        assert!((f.dx[(8, 8)] - squashed).abs() < 1e-12);
        // hat weights: half at 4 px from the node along one axis
        assert!((f.dx[(8, 4)] - 0.5 * squashed).abs() < 1e-12);
        assert!((f.dx[(4, 4)] - 0.25 * squashed).abs() < 1e-12);
        assert!(f.dx[(0, 0)].abs() < 1e-15);
        assert!(f.dy.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn displacement_scale_bounds_arbitrary_parameters() {
        let mut est = DeformationEstimator::new_grid(1, 16, 16, 8, 5.0).unwrap();
        for b in est.blocks_mut() {
            for (i, v) in b.iter_mut().enumerate() {
                *v = (i as f64 - 8.0) * 1e3;
            }
        }
        let (fields, _) = est.forward(None).unwrap();
        let max = fields[0]
            .dx
            .iter()
            .chain(fields[0].dy.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 5.0 + 1e-12);
    }

    #[test]
    fn grid_backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut est = DeformationEstimator::new_grid(2, 12, 12, 4, 8.0).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        for b in est.blocks_mut() {
            for v in b.iter_mut() {
                *v = rng.random_range(-3.0..3.0);
            }
        }
        let dfields: Vec<DisplacementField> = (0..2)
            .map(|_| {
                let mut d = DisplacementField::zeros(12, 12);
                for v in d.dx.iter_mut().chain(d.dy.iter_mut()) {
                    *v = rng.random_range(-1.0..1.0);
                }
                d
            })
            .collect();
        let loss = |e: &DeformationEstimator| {
            let (fields, _) = e.forward(None).unwrap();
            fields
                .iter()
                .zip(dfields.iter())
                .map(|(f, g)| {
                    (&f.dx * &g.dx).sum() + (&f.dy * &g.dy).sum()
                })
                .sum::<f64>()
        };
        let (_, cache) = est.forward(None).unwrap();
        let grads = est.backward(&cache, &dfields).unwrap();
        let step = 1e-6;
        for (block, probe) in [(0usize, 5usize), (0, 11), (1, 0), (1, 16)] {
            let mut plus = est.clone();
            plus.blocks_mut()[block][probe] += step;
            let mut minus = est.clone();
            minus.blocks_mut()[block][probe] -= step;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let an = grads[block][probe];
            assert!(
                (an - fd).abs() <= 1e-6 * an.abs().max(fd.abs()).max(1.0),
                "block {block}[{probe}]: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn fresh_conv_estimator_emits_zero_fields() {
        let est = DeformationEstimator::new_conv(2, 16, 16, 9, 10.0, 5).unwrap();
        let feats: Vec<Vec<Array2<f64>>> = (0..2)
            .map(|t| {
                (0..9)
                    .map(|p| Array2::from_elem((16, 16), (t + p) as f64 * 0.05))
                    .collect()
            })
            .collect();
        let (fields, _) = est.forward(Some(&feats)).unwrap();
        for f in &fields {
            assert_eq!(f, &DisplacementField::zeros(16, 16));
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
        let mut est = DeformationEstimator::new_conv(1, 8, 8, 3, 6.0, 2).unwrap();
        // give the zero output layer some signal
        {
            let mut blocks = est.blocks_mut();
            for v in blocks[8].iter_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
        let feats: Vec<Vec<Array2<f64>>> = vec![(0..3)
            .map(|_| Array2::from_shape_fn((8, 8), |_| rng.random::<f64>() - 0.4))
            .collect()];
        let dfields = vec![{
            let mut d = DisplacementField::zeros(8, 8);
            for v in d.dx.iter_mut().chain(d.dy.iter_mut()) {
                *v = rng.random_range(-1.0..1.0);
            }
            d
        }];
        let loss = |e: &DeformationEstimator| {
            let (fields, _) = e.forward(Some(&feats)).unwrap();
            (&fields[0].dx * &dfields[0].dx).sum() + (&fields[0].dy * &dfields[0].dy).sum()
        };
        let (_, cache) = est.forward(Some(&feats)).unwrap();
        let grads = est.backward(&cache, &dfields).unwrap();
        let step = 1e-6;
        for (block, probe) in [(0usize, 10usize), (1, 2), (2, 50), (4, 100), (8, 3), (9, 1)] {
            let mut plus = est.clone();
            plus.blocks_mut()[block][probe] += step;
            let mut minus = est.clone();
            minus.blocks_mut()[block][probe] -= step;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let an = grads[block][probe];
            assert!(
                (an - fd).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-2),
                "block {block}[{probe}]: {an} vs {fd}"
            );
        }
    }
}
