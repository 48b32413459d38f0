//! Synthetic turbulence: smooth random deformation fields, blur, and noise,
//! with the ground truth retained for evaluation.
//!
//! Each frame is degraded as warp -> Gaussian blur -> additive Gaussian noise
//! -> clip to [0, 1]. Fields are Gaussian-filtered white noise rescaled to a
//! target peak magnitude; every frame draws independent fields and noise from
//! seeds derived deterministically from the master seed.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CqcdError, Result};
use crate::field::DisplacementField;
use crate::imaging::{warp, FrameSequence, Image};
use crate::io;

/// Turbulence intensity presets: (amplitude px, correlation px, blur sigma,
/// noise sigma).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Mild,
    Medium,
    Severe,
}

impl std::str::FromStr for Preset {
    type Err = CqcdError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mild" => Ok(Preset::Mild),
            "medium" => Ok(Preset::Medium),
            "severe" => Ok(Preset::Severe),
            other => Err(CqcdError::InvalidArgument(format!("unknown preset {other}"))),
        }
    }
}

/// Degradation parameters for one synthetic sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurbulenceConfig {
    /// Peak displacement magnitude in pixels.
    pub amplitude: f64,
    /// Smoothness scale of the random fields in pixels.
    pub correlation_length: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Frame count T.
    pub frames: usize,
    pub seed: u64,
}

impl TurbulenceConfig {
    pub fn preset(preset: Preset, frames: usize, seed: u64) -> Self {
        let (amplitude, correlation_length, blur_sigma, noise_sigma) = match preset {
            Preset::Mild => (2.0, 16.0, 0.5, 0.005),
            Preset::Medium => (4.0, 12.0, 1.0, 0.01),
            Preset::Severe => (7.0, 8.0, 1.5, 0.02),
        };
        Self {
            amplitude,
            correlation_length,
            blur_sigma,
            noise_sigma,
            frames,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.amplitude < 0.0 {
            return Err(CqcdError::InvalidArgument("amplitude must be >= 0".into()));
        }
        if self.correlation_length < 2.0 {
            return Err(CqcdError::InvalidArgument(
                "correlation_length must be >= 2 px".into(),
            ));
        }
        if !(0.0..=0.1).contains(&self.noise_sigma) {
            return Err(CqcdError::InvalidArgument(
                "noise_sigma must lie in [0, 0.1]".into(),
            ));
        }
        if self.blur_sigma < 0.0 {
            return Err(CqcdError::InvalidArgument("blur_sigma must be >= 0".into()));
        }
        if self.frames == 0 {
            return Err(CqcdError::InvalidArgument("frame count must be >= 1".into()));
        }
        Ok(())
    }
}

/// A generated sequence together with the ground truth that produced it.
#[derive(Debug, Clone)]
pub struct GroundTruthBundle {
    pub clean: Image,
    pub frames: FrameSequence,
    pub fields: Vec<DisplacementField>,
    pub config: TurbulenceConfig,
}

const FIELD_TAG: u64 = 0x11;
const NOISE_TAG: u64 = 0x22;

fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Noise seed used for frame `t`; stored bundles replay bit-identically.
pub fn frame_noise_seed(config: &TurbulenceConfig, t: usize) -> u64 {
    derive_seed(config.seed, NOISE_TAG, t as u64)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0;
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        let v = (-d * d / (2.0 * sigma * sigma)).exp();
        k.push(v);
        sum += v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable periodic Gaussian smoothing, truncated at 3 sigma.
pub fn gaussian_blur_plane(plane: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return plane.clone();
    }
    let k = gaussian_kernel(sigma);
    let radius = k.len() / 2;
    let (h, w) = plane.dim();
    let mut rows = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let xi = (x + w + i - radius).rem_euclid(w + w) % w;
                acc += kv * plane[(y, xi)];
            }
            rows[(y, x)] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let yi = (y + h + i - radius).rem_euclid(h + h) % h;
                acc += kv * rows[(yi, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

fn gaussian_blur_image(img: &Image, sigma: f64) -> Result<Image> {
    if sigma <= 0.0 {
        return Ok(img.clone());
    }
    let planes: Vec<Array2<f64>> = (0..img.channels())
        .map(|c| gaussian_blur_plane(&img.channel_plane(c), sigma))
        .collect();
    Image::from_planes(&planes)
}

/// Smooth random displacement field for frame `frame_index`: per-component
/// white noise, periodic Gaussian smoothing with sigma = correlation/2, then
/// rescaling so the peak magnitude equals the configured amplitude.
/// Deterministic in (seed, frame_index).
pub fn random_smooth_field(
    height: usize,
    width: usize,
    config: &TurbulenceConfig,
    frame_index: usize,
) -> DisplacementField {
    if config.amplitude == 0.0 {
        return DisplacementField::zeros(height, width);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, FIELD_TAG, frame_index as u64));
    let normal = StandardNormal;
    let mut dx = Array2::zeros((height, width));
    let mut dy = Array2::zeros((height, width));
    for v in dx.iter_mut() {
        *v = normal.sample(&mut rng);
    }
    for v in dy.iter_mut() {
        *v = normal.sample(&mut rng);
    }
    let sigma = config.correlation_length / 2.0;
    dx = gaussian_blur_plane(&dx, sigma);
    dy = gaussian_blur_plane(&dy, sigma);
    let max_mag = dx
        .iter()
        .zip(dy.iter())
        .map(|(&u, &v)| (u * u + v * v).sqrt())
        .fold(0.0f64, f64::max);
    if max_mag > 1e-12 {
        let scale = config.amplitude / max_mag;
        dx *= scale;
        dy *= scale;
    }
    DisplacementField { dx, dy }
}

/// One degradation pass: warp, blur, noise, clip. The `noise_seed` makes the
/// stochastic part replayable.
pub fn apply_distortion(
    clean: &Image,
    field: &DisplacementField,
    blur_sigma: f64,
    noise_sigma: f64,
    noise_seed: u64,
) -> Result<Image> {
    let warped = warp(clean, field)?;
    let blurred = gaussian_blur_image(&warped, blur_sigma)?;
    if noise_sigma == 0.0 {
        return Ok(blurred.clamped());
    }
    let mut rng = ChaCha12Rng::seed_from_u64(noise_seed);
    let normal = StandardNormal;
    let mut data = blurred.data().clone();
    for v in data.iter_mut() {
        let n: f64 = normal.sample(&mut rng);
        *v = (*v + noise_sigma * n).clamp(0.0, 1.0);
    }
    Image::new(data)
}

/// Generates T frames with independent fields and per-frame noise seeds.
/// A pure function of (clean, config).
pub fn generate(clean: &Image, config: &TurbulenceConfig) -> Result<GroundTruthBundle> {
    config.validate()?;
    let (h, w, _) = clean.dim();
    if h < 8 || w < 8 {
        return Err(CqcdError::InvalidArgument(format!(
            "clean image {h}x{w} below the 8x8 minimum"
        )));
    }
    let mut frames = Vec::with_capacity(config.frames);
    let mut fields = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        let field = random_smooth_field(h, w, config, t);
        frames.push(apply_distortion(
            clean,
            &field,
            config.blur_sigma,
            config.noise_sigma,
            frame_noise_seed(config, t),
        )?);
        fields.push(field);
    }
    Ok(GroundTruthBundle {
        clean: clean.clone(),
        frames: FrameSequence::new(frames)?,
        fields,
        config: config.clone(),
    })
}

/// Deterministic multi-orientation test scene: smooth waves, a checkerboard
/// and a radial pattern, kept inside (0, 1) so sigmoid outputs can reach it.
pub fn default_scene(height: usize, width: usize, channels: usize) -> Image {
    let tau = 2.0 * std::f64::consts::PI;
    let (cy, cx) = (height as f64 / 2.0, width as f64 / 2.0);
    let planes: Vec<Array2<f64>> = (0..channels)
        .map(|c| {
            let phase = c as f64 * 1.7;
            Array2::from_shape_fn((height, width), |(y, x)| {
                let (xf, yf) = (x as f64, y as f64);
                let s1 = (tau * (3.0 * xf + yf) / 17.0 + phase).sin();
                let s2 = (tau * (xf - 2.0 * yf) / 23.0 - phase).sin();
                let checker = if ((x / 8) + (y / 8)) % 2 == 0 { 1.0 } else { -1.0 };
                let r = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
                let radial = (tau * r / 21.0).cos();
                0.5 + 0.14 * s1 + 0.12 * s2 + 0.10 * checker + 0.10 * radial
            })
        })
        .collect();
    Image::from_planes(&planes).expect("scene construction cannot fail")
}

/// Writes `clean.png`, `frame_%03d.png`, `field_%03d.fld`, `config.json`.
pub fn save_bundle(bundle: &GroundTruthBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    io::save_image(&bundle.clean, dir.join("clean.png"))?;
    for (t, frame) in bundle.frames.frames().iter().enumerate() {
        io::save_image(frame, dir.join(format!("frame_{t:03}.png")))?;
    }
    for (t, field) in bundle.fields.iter().enumerate() {
        io::save_field(field, dir.join(format!("field_{t:03}.fld")))?;
    }
    let json = serde_json::to_string_pretty(&bundle.config)
        .map_err(|e| CqcdError::Numerical(format!("config serialization: {e}")))?;
    std::fs::write(dir.join("config.json"), json)?;
    Ok(())
}

/// Reads a bundle directory written by [`save_bundle`]. Frames come back
/// 8-bit quantized; fields at f32 precision.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<GroundTruthBundle> {
    let dir = dir.as_ref();
    let config: TurbulenceConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?).map_err(|e| {
            CqcdError::CorruptFile {
                path: dir.join("config.json").display().to_string(),
                reason: e.to_string(),
            }
        })?;
    let clean = io::load_image(dir.join("clean.png"))?;
    let mut frames = Vec::with_capacity(config.frames);
    let mut fields = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        frames.push(io::load_image(dir.join(format!("frame_{t:03}.png")))?);
        fields.push(io::load_field(dir.join(format!("field_{t:03}.fld")))?);
    }
    Ok(GroundTruthBundle {
        clean,
        frames: FrameSequence::new(frames)?,
        fields,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::psnr;
    use crate::quasiconformal::diagnostics;
    use crate::restoration::field_error;

    fn mild(frames: usize, seed: u64) -> TurbulenceConfig {
        TurbulenceConfig::preset(Preset::Mild, frames, seed)
    }

    #[test]
    fn zero_amplitude_gives_zero_fields() {
        let mut cfg = mild(1, 3);
        cfg.amplitude = 0.0;
        let f = random_smooth_field(16, 16, &cfg, 0);
        assert_eq!(f, DisplacementField::zeros(16, 16));
    }

    #[test]
    fn fields_are_deterministic_and_distinct() {
        let cfg = mild(10, 7);
        let a = random_smooth_field(32, 32, &cfg, 4);
        let b = random_smooth_field(32, 32, &cfg, 4);
        assert_eq!(a, b);
        for t in 1..10 {
            let other = random_smooth_field(32, 32, &cfg, t);
            let (mean_epe, _) = field_error(&a, &other).unwrap();
            assert!(mean_epe > 0.0, "frame {t} duplicates frame 4");
        }
    }

    #[test]
    fn field_peak_magnitude_matches_amplitude() {
        let cfg = mild(1, 11);
        let f = random_smooth_field(64, 64, &cfg, 0);
        assert!((f.max_magnitude() - cfg.amplitude).abs() < 1e-9);
    }

    #[test]
    fn mild_fields_are_bijective_for_nearly_all_seeds() {
        let mut good = 0;
        for seed in 0..100u64 {
            let cfg = mild(1, seed);
            let f = random_smooth_field(64, 64, &cfg, 0);
            let d = diagnostics(&f);
            if d.fold_count == 0 && d.sup_mu < 0.6 {
                good += 1;
            }
        }
        assert!(good >= 99, "only {good}/100 mild fields bijective");
    }

    #[test]
    fn identity_degradation_returns_clean() {
        let clean = default_scene(32, 32, 1);
        let zero = DisplacementField::zeros(32, 32);
        let out = apply_distortion(&clean, &zero, 0.0, 0.0, 1).unwrap();
        assert_eq!(out.data(), clean.data());
    }

    #[test]
    fn blur_contracts_variance() {
        let clean = default_scene(32, 32, 1);
        let zero = DisplacementField::zeros(32, 32);
        let blurred = apply_distortion(&clean, &zero, 1.0, 0.0, 1).unwrap();
        let var = |img: &Image| {
            let n = img.data().len() as f64;
            let mean = img.data().iter().sum::<f64>() / n;
            img.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
        };
        assert!(var(&blurred) < var(&clean));
    }

    #[test]
    fn mild_chain_psnr_stays_in_the_frozen_band() {
        // regression band measured over seeds 0..5 on the default scene
        let clean = default_scene(64, 64, 1);
        for seed in 0..5 {
            let cfg = mild(1, seed);
            let field = random_smooth_field(64, 64, &cfg, 0);
            let frame = apply_distortion(
                &clean,
                &field,
                cfg.blur_sigma,
                cfg.noise_sigma,
                frame_noise_seed(&cfg, 0),
            )
            .unwrap();
            let p = psnr(&clean, &frame).unwrap();
            assert!((14.0..=26.0).contains(&p), "seed {seed}: psnr {p}");
        }
    }

    #[test]
    fn trivial_bundle_reproduces_clean() {
        let clean = default_scene(16, 16, 1);
        let cfg = TurbulenceConfig {
            amplitude: 0.0,
            correlation_length: 8.0,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            frames: 1,
            seed: 5,
        };
        let bundle = generate(&clean, &cfg).unwrap();
        assert_eq!(bundle.frames.len(), 1);
        assert_eq!(bundle.frames.frame(0).data(), clean.data());
    }

    #[test]
    fn generation_is_deterministic_and_replayable() {
        let clean = default_scene(32, 32, 1);
        let cfg = mild(4, 7);
        let a = generate(&clean, &cfg).unwrap();
        let b = generate(&clean, &cfg).unwrap();
        for t in 0..4 {
            assert_eq!(a.frames.frame(t).data(), b.frames.frame(t).data());
            assert_eq!(a.fields[t], b.fields[t]);
            // stored field + seed replays the frame bit-identically
            let replay = apply_distortion(
                &clean,
                &a.fields[t],
                cfg.blur_sigma,
                cfg.noise_sigma,
                frame_noise_seed(&cfg, t),
            )
            .unwrap();
            assert_eq!(replay.data(), a.frames.frame(t).data());
        }
    }

    #[test]
    fn presets_grow_monotonically() {
        let clean = default_scene(48, 48, 1);
        let mut means = Vec::new();
        let mut blurs = Vec::new();
        for preset in [Preset::Mild, Preset::Medium, Preset::Severe] {
            let cfg = TurbulenceConfig::preset(preset, 3, 9);
            let bundle = generate(&clean, &cfg).unwrap();
            let mean: f64 = bundle.fields.iter().map(|f| f.mean_magnitude()).sum::<f64>() / 3.0;
            means.push(mean);
            blurs.push(cfg.blur_sigma);
        }
        assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
        assert!(blurs[0] < blurs[1] && blurs[1] < blurs[2]);
    }

    #[test]
    fn bundle_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let clean = default_scene(24, 24, 1);
        let bundle = generate(&clean, &mild(3, 13)).unwrap();
        save_bundle(&bundle, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back.config, bundle.config);
        assert_eq!(back.frames.len(), 3);
        for t in 0..3 {
            let (mean_epe, max_epe) = field_error(&back.fields[t], &bundle.fields[t]).unwrap();
            assert!(max_epe < 1e-6, "field {t}: {mean_epe} {max_epe}");
            let diff = back
                .frames
                .frame(t)
                .data()
                .iter()
                .zip(bundle.frames.frame(t).data().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(diff <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = mild(3, 1);
        cfg.correlation_length = 1.0;
        assert!(cfg.validate().is_err());
        cfg = mild(3, 1);
        cfg.noise_sigma = 0.5;
        assert!(cfg.validate().is_err());
        cfg = mild(0, 1);
        assert!(cfg.validate().is_err());
    }
}
