//! Geometric and intensity augmentation of training studies.
//!
//! Transforms compose in the fixed order flip → scale → rotate → translate,
//! all about the image center, with bilinear resampling and zero fill.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::PatientStudy;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::seed::derive_seed;

pub const ROTATION_RANGE: (f64, f64) = (-10.0, 10.0);
pub const TRANSLATE_RANGE: (f64, f64) = (-0.1, 0.1);
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.0);
pub const NOISE_RANGE: (f64, f64) = (0.01, 0.05);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub rotation_deg: f64,
    pub hflip: bool,
    /// Shift as a fraction of width and height.
    pub translate_frac: (f64, f64),
    pub scale_factor: f64,
    pub noise_sigma: Option<f64>,
    pub rng_seed: u64,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            hflip: false,
            translate_frac: (0.0, 0.0),
            scale_factor: 1.0,
            noise_sigma: None,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        let ok = within(self.rotation_deg, ROTATION_RANGE)
            && within(self.translate_frac.0, TRANSLATE_RANGE)
            && within(self.translate_frac.1, TRANSLATE_RANGE)
            && within(self.scale_factor, SCALE_RANGE)
            && self.noise_sigma.is_none_or(|s| within(s, NOISE_RANGE));
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("augmentation parameters out of range: {self:?}")))
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.translate_frac == (0.0, 0.0) && self.scale_factor == 1.0
    }
}

/// Draws every parameter uniformly from its range and flips with
/// probability 1/2. The vertical shift is always 0: translation is
/// horizontal only.
pub fn sample_spec(rng_seed: u64) -> AugmentSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut uniform = |(lo, hi): (f64, f64)| rng.random_range(lo..=hi);
    let rotation_deg = uniform(ROTATION_RANGE);
    let tx = uniform(TRANSLATE_RANGE);
    let scale_factor = uniform(SCALE_RANGE);
    let noise_sigma = Some(uniform(NOISE_RANGE));
    AugmentSpec {
        rotation_deg,
        hflip: rng.random_bool(0.5),
        translate_frac: (tx, 0.0),
        scale_factor,
        noise_sigma,
        rng_seed,
    }
}

pub fn hflip(img: &GrayImage) -> GrayImage {
    let mut out = img.clone();
    for row in out.pixels.chunks_mut(img.width) {
        row.reverse();
    }
    out
}

fn sample_bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let px = |xi: f64, yi: f64| {
        if xi < 0.0 || yi < 0.0 || xi >= img.width as f64 || yi >= img.height as f64 {
            0.0
        } else {
            img.get(yi as usize, xi as usize)
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let w = wx * wy;
            if w != 0.0 {
                v += w * px(x0 + dx, y0 + dy);
            }
        }
    }
    v
}

/// Applies flip, scale, rotation and translation; output keeps the input size.
pub fn apply_geometric(img: &GrayImage, spec: &AugmentSpec) -> GrayImage {
    let src = if spec.hflip { hflip(img) } else { img.clone() };
    if spec.is_geometric_identity() {
        return src;
    }
    let (w, h) = (img.width as f64, img.height as f64);
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let (tx, ty) = (spec.translate_frac.0 * w, spec.translate_frac.1 * h);
    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    let mut out = GrayImage::filled(img.height, img.width, 0.0);
    for oy in 0..img.height {
        for ox in 0..img.width {
            // invert translate, then rotate, then scale
            let u = ox as f64 - cx - tx;
            let v = oy as f64 - cy - ty;
            let ru = cos * u + sin * v;
            let rv = -sin * u + cos * v;
            let sx = ru / spec.scale_factor + cx;
            let sy = rv / spec.scale_factor + cy;
            out.set(oy, ox, sample_bilinear(&src, sx, sy).clamp(0.0, 1.0));
        }
    }
    out
}

/// Adds i.i.d. `N(0, σ²)` noise and clamps to `[0, 1]`.
pub fn add_gaussian_noise(img: &GrayImage, sigma: f64, seed: u64) -> Result<GrayImage> {
    if !(NOISE_RANGE.0..=NOISE_RANGE.1).contains(&sigma) {
        return Err(Error::Config(format!(
            "noise sigma {sigma} outside [{}, {}]",
            NOISE_RANGE.0, NOISE_RANGE.1
        )));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for p in &mut out.pixels {
        *p = (*p + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Geometric transform followed by noise, if the spec has any.
pub fn augment_image(img: &GrayImage, spec: &AugmentSpec, noise_seed: u64) -> Result<GrayImage> {
    spec.validate()?;
    let out = apply_geometric(img, spec);
    match spec.noise_sigma {
        Some(s) => add_gaussian_noise(&out, s, noise_seed),
        None => Ok(out),
    }
}

/// Applies one spec to all three modalities of a study; noise is drawn
/// independently per modality.
pub fn augment_study(study: &PatientStudy, spec: &AugmentSpec) -> Result<PatientStudy> {
    let mut out = study.clone();
    for (m, img) in out.images.iter_mut().enumerate() {
        *img = augment_image(img, spec, derive_seed(spec.rng_seed, &[m as u64]))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Train,
    Validation,
}

/// Seed of the augmentation spec for copy `copy` (1-based) of sample `index`.
pub fn copy_seed(seed: u64, index: usize, copy: usize) -> u64 {
    derive_seed(seed, &[index as u64, copy as u64])
}

/// Each training study followed by `multiplier − 1` augmented copies, in
/// input order. Runs on `workers` threads; the result does not depend on
/// the worker count.
pub fn augment_dataset(
    studies: &[(&PatientStudy, Role)],
    multiplier: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<PatientStudy>> {
    if multiplier == 0 {
        return Err(Error::Config("augmentation multiplier must be at least 1".into()));
    }
    if let Some((s, _)) = studies.iter().find(|(_, r)| *r == Role::Validation) {
        return Err(Error::Study {
            patient_id: s.patient_id.clone(),
            reason: "validation studies are never augmented".into(),
        });
    }
    let expand = |index: usize| -> Result<Vec<PatientStudy>> {
        let base = studies[index].0;
        let mut out = Vec::with_capacity(multiplier);
        out.push(base.clone());
        for copy in 1..multiplier {
            out.push(augment_study(base, &sample_spec(copy_seed(seed, index, copy)))?);
        }
        Ok(out)
    };
    let workers = workers.clamp(1, studies.len().max(1));
    let chunks: Vec<Result<Vec<PatientStudy>>> = if workers == 1 {
        vec![(0..studies.len()).map(expand).collect::<Result<Vec<_>>>().map(|v| v.concat())]
    } else {
        let per = studies.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let range = (w * per).min(studies.len())..((w + 1) * per).min(studies.len());
                    let expand = &expand;
                    scope.spawn(move || range.map(expand).collect::<Result<Vec<_>>>().map(|v| v.concat()))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Invalid("augmentation worker panicked".into()))))
                .collect()
        })
    };
    let mut out = Vec::with_capacity(studies.len() * multiplier);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_phantom_sized;

    fn ramp(h: usize, w: usize) -> GrayImage {
        GrayImage::new(h, w, (0..h * w).map(|i| (i % 97) as f64 / 96.0).collect()).unwrap()
    }

    #[test]
    fn identity_and_double_flip() {
        let img = ramp(7, 10);
        assert_eq!(apply_geometric(&img, &AugmentSpec::identity()), img);
        let flip = AugmentSpec {
            hflip: true,
            ..AugmentSpec::identity()
        };
        let once = apply_geometric(&img, &flip);
        assert_ne!(once, img);
        assert_eq!(once.get(2, 0), img.get(2, 9));
        assert_eq!(apply_geometric(&once, &flip), img);
    }

    #[test]
    fn translation_moves_one_pixel() {
        let mut img = GrayImage::filled(10, 10, 0.0);
        img.set(5, 3, 1.0);
        let spec = AugmentSpec {
            translate_frac: (0.1, 0.0),
            ..AugmentSpec::identity()
        };
        let out = apply_geometric(&img, &spec);
        assert!((out.get(5, 4) - 1.0).abs() < 1e-12);
        assert!(out.get(5, 3).abs() < 1e-12);
        assert!((out.pixels.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scaling_shrinks_toward_center() {
        let img = GrayImage::filled(20, 20, 1.0);
        let spec = AugmentSpec {
            scale_factor: 0.8,
            ..AugmentSpec::identity()
        };
        let out = apply_geometric(&img, &spec);
        assert_eq!(out.get(10, 10), 1.0);
        assert_eq!(out.get(0, 0), 0.0);
        let mass = out.pixels.iter().sum::<f64>();
        assert!((mass / 400.0 - 0.64).abs() < 0.05, "{mass}");
    }

    #[test]
    fn rotation_preserves_disc_mass() {
        let n = 41;
        let c = (n - 1) as f64 / 2.0;
        let img = GrayImage::new(
            n,
            n,
            (0..n * n)
                .map(|i| {
                    let (y, x) = ((i / n) as f64, (i % n) as f64);
                    f64::from(((x - c).powi(2) + (y - c).powi(2)).sqrt() <= 12.0)
                })
                .collect(),
        )
        .unwrap();
        let mass = img.pixels.iter().sum::<f64>();
        for deg in [-10.0, -3.5, 7.0, 10.0] {
            let spec = AugmentSpec {
                rotation_deg: deg,
                ..AugmentSpec::identity()
            };
            let m = apply_geometric(&img, &spec).pixels.iter().sum::<f64>();
            assert!((m - mass).abs() / mass < 0.02, "{deg}: {m} vs {mass}");
        }
    }

    #[test]
    fn sampled_specs_are_deterministic_and_bounded() {
        assert_eq!(sample_spec(42), sample_spec(42));
        let specs: Vec<AugmentSpec> = (0..10_000).map(sample_spec).collect();
        for s in &specs {
            s.validate().unwrap();
            assert_eq!(s.translate_frac.1, 0.0);
        }
        let mean = specs.iter().map(|s| s.rotation_deg).sum::<f64>() / 1e4;
        assert!(mean.abs() < 0.5);
        let flips = specs.iter().filter(|s| s.hflip).count();
        assert!((4700..5300).contains(&flips));
    }

    #[test]
    fn noise_statistics_and_clamping() {
        let img = GrayImage::filled(100, 100, 0.5);
        let out = add_gaussian_noise(&img, 0.01, 3).unwrap();
        assert_eq!(out, add_gaussian_noise(&img, 0.01, 3).unwrap());
        let d: Vec<f64> = out.pixels.iter().map(|p| p - 0.5).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((sd - 0.01).abs() < 0.001, "{sd}");
        let dark = add_gaussian_noise(&GrayImage::filled(50, 50, 0.0), 0.05, 1).unwrap();
        assert!(dark.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(add_gaussian_noise(&img, 0.1, 1).is_err());
        assert!(add_gaussian_noise(&img, 0.005, 1).is_err());
    }

    #[test]
    fn dataset_expansion() {
        let s = generate_phantom_sized(6, 0.5, 2, 12).unwrap();
        let tagged: Vec<(&PatientStudy, Role)> = s.iter().map(|x| (x, Role::Train)).collect();
        assert_eq!(augment_dataset(&tagged, 1, 0, 1).unwrap(), s);
        let out = augment_dataset(&tagged, 5, 7, 1).unwrap();
        assert_eq!(out.len(), 30);
        for (i, o) in out.iter().enumerate() {
            let src = &s[i / 5];
            assert_eq!((&o.patient_id, &o.group_marker, o.label), (&src.patient_id, &src.group_marker, src.label));
            assert!(o.images.iter().flat_map(|im| &im.pixels).all(|p| (0.0..=1.0).contains(p)));
        }
        assert_eq!(out, augment_dataset(&tagged, 5, 7, 4).unwrap());
        let mut bad = tagged.clone();
        bad[2].1 = Role::Validation;
        assert!(matches!(augment_dataset(&bad, 2, 7, 1), Err(Error::Study { .. })));
        assert!(augment_dataset(&tagged, 0, 7, 1).is_err());
    }

    #[test]
    fn same_geometry_across_modalities() {
        let s = &generate_phantom_sized(4, 0.5, 2, 12).unwrap()[0];
        let mut same = s.clone();
        same.images = [s.images[0].clone(), s.images[0].clone(), s.images[0].clone()];
        let spec = AugmentSpec {
            noise_sigma: None,
            ..sample_spec(9)
        };
        let out = augment_study(&same, &spec).unwrap();
        assert_eq!(out.images[0], out.images[1]);
        assert_eq!(out.images[1], out.images[2]);
    }
}
