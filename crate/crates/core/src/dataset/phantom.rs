//! Procedural stand-in for lumbar MRI triplets.
//!
//! Sagittal slices show a vertical vertebral column with five disc gaps;
//! the axial slice shows a disc cross-section with the spinal canal behind
//! it. Every study carries one blob of disc-like signal of the same size.
//! In LDH studies it protrudes from the posterior edge of one of the two
//! lowest discs (and from the posterior disc rim in the axial view); in
//! healthy studies it floats detached in the background. Both classes
//! therefore have the same intensity budget and differ only in geometry.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Label, PatientStudy};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::seed::derive_seed;

/// Default side length of generated images.
pub const PHANTOM_SIZE: usize = 32;

const SUPERSAMPLE: usize = 4;
const NOISE_SIGMA: f64 = 0.02;

struct Contrast {
    background: f64,
    bone: f64,
    disc: f64,
}

const T1: Contrast = Contrast {
    background: 0.06,
    bone: 0.55,
    disc: 0.30,
};
const T2: Contrast = Contrast {
    background: 0.04,
    bone: 0.35,
    disc: 0.75,
};
const T2_CANAL: f64 = 0.85;

#[derive(Clone, Copy)]
struct Blob {
    x: f64,
    y: f64,
    r: f64,
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.x).powi(2) + (y - self.y).powi(2) <= self.r * self.r
    }
}

struct Sagittal {
    cx: f64,
    half_width: f64,
    discs: Vec<f64>,
    disc_half: f64,
    blob: Blob,
}

impl Sagittal {
    fn value(&self, x: f64, y: f64, c: &Contrast) -> f64 {
        if (x - self.cx).abs() <= self.half_width {
            if self.discs.iter().any(|d| (y - d).abs() <= self.disc_half) {
                c.disc
            } else {
                c.bone
            }
        } else if self.blob.contains(x, y) {
            c.disc
        } else {
            c.background
        }
    }
}

struct Axial {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    canal: Blob,
    blob: Blob,
}

impl Axial {
    fn value(&self, x: f64, y: f64) -> f64 {
        let e = ((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2);
        if e <= 1.0 {
            T2.disc
        } else if self.canal.contains(x, y) {
            T2_CANAL
        } else if self.blob.contains(x, y) {
            T2.disc
        } else {
            T2.background
        }
    }
}

fn render(size: usize, gain: f64, noise: &mut impl FnMut() -> f64, f: impl Fn(f64, f64) -> f64) -> GrayImage {
    let mut img = GrayImage::filled(size, size, 0.0);
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    acc += f(x, y);
                }
            }
            let v = gain * acc / (SUPERSAMPLE * SUPERSAMPLE) as f64 + noise();
            img.set(py, px, v.clamp(0.0, 1.0));
        }
    }
    img
}

/// Uniform draw from `lo..hi`, or `lo` when the range is empty.
fn draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// A detached blob: either side of the structure spanning `[left, right]`
/// horizontally, at least `gap` away from it.
fn detached_blob(rng: &mut ChaCha8Rng, s: f64, r: f64, left: f64, right: f64, gap: f64) -> Blob {
    let margin = r + 0.5;
    let anterior = (margin, left - r - gap);
    let posterior = (right + r + gap, s - margin);
    let room_a = (anterior.1 - anterior.0).max(0.0);
    let room_p = (posterior.1 - posterior.0).max(0.0);
    let (lo, hi) = if rng.random_range(0.0..room_a + room_p + 1e-12) < room_a {
        anterior
    } else {
        posterior
    };
    Blob {
        x: draw(rng, lo, hi),
        y: draw(rng, margin, s - margin),
        r,
    }
}

fn study(index: usize, label: Label, size: usize, rng: &mut ChaCha8Rng) -> PatientStudy {
    let s = size as f64;
    let r = s * 0.075;
    let gap = s * 0.12;

    let cx = s * draw(rng, 0.40, 0.50);
    let half_width = s * draw(rng, 0.11, 0.14);
    let spacing = s * draw(rng, 0.17, 0.19);
    let y0 = s * draw(rng, 0.08, 0.12);
    let discs: Vec<f64> = (0..5).map(|k| y0 + k as f64 * spacing).collect();
    let disc_half = spacing * draw(rng, 0.15, 0.2);
    let level = if rng.random_bool(0.5) { 3 } else { 4 };
    let sag_blob = match label {
        Label::Ldh => Blob {
            x: cx + half_width + r * draw(rng, 0.9, 1.1),
            y: discs[level] + draw(rng, -0.5, 0.5) * disc_half,
            r,
        },
        Label::Healthy => detached_blob(rng, s, r, cx - half_width, cx + half_width, gap),
    };
    let sag = Sagittal {
        cx,
        half_width,
        discs,
        disc_half,
        blob: sag_blob,
    };

    let (acx, acy) = (s * draw(rng, 0.45, 0.55), s * draw(rng, 0.36, 0.44));
    let (rx, ry) = (s * draw(rng, 0.22, 0.27), s * draw(rng, 0.14, 0.17));
    let canal = Blob {
        x: acx,
        y: acy + ry + s * 0.11,
        r: s * 0.08,
    };
    let ax_blob = match label {
        Label::Ldh => {
            // posterolateral rim, beside the canal
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let t: f64 = draw(rng, 0.35, 0.6) * side;
            let (ex, ey) = (acx + rx * t, acy + ry * (1.0 - t * t).sqrt());
            Blob {
                x: ex + side * r * 0.3,
                y: ey + r * draw(rng, 0.7, 0.9),
                r,
            }
        }
        Label::Healthy => {
            let b = detached_blob(rng, s, r, acx - rx, acx + rx, gap);
            Blob {
                y: draw(rng, r + 0.5, (acy - ry - gap).max(r + 0.5)),
                ..b
            }
        }
    };
    let axial = Axial {
        cx: acx,
        cy: acy,
        rx,
        ry,
        canal,
        blob: ax_blob,
    };

    let gain = draw(rng, 0.8, 1.2);
    let normal = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut noise = || normal.sample(&mut noise_rng);
    let images = [
        render(size, gain, &mut noise, |x, y| sag.value(x, y, &T1)),
        render(size, gain, &mut noise, |x, y| sag.value(x, y, &T2)),
        render(size, gain, &mut noise, |x, y| axial.value(x, y)),
    ];
    PatientStudy {
        patient_id: format!("P{index:04}"),
        group_marker: format!("G{index:04}"),
        images,
        label,
        age: Some(rng.random_range(20..=80)),
    }
}

/// [`generate_phantom_sized`] at [`PHANTOM_SIZE`].
pub fn generate_phantom(n_patients: usize, prevalence: f64, seed: u64) -> Result<Vec<PatientStudy>> {
    generate_phantom_sized(n_patients, prevalence, seed, PHANTOM_SIZE)
}

/// `n_patients` synthetic studies, `round(n · prevalence)` of them LDH.
pub fn generate_phantom_sized(n_patients: usize, prevalence: f64, seed: u64, size: usize) -> Result<Vec<PatientStudy>> {
    if !(prevalence > 0.0 && prevalence < 1.0) {
        return Err(Error::Config(format!("prevalence {prevalence} outside (0, 1)")));
    }
    if n_patients < 4 {
        return Err(Error::Config(format!("need at least 4 patients, got {n_patients}")));
    }
    if size < 4 {
        return Err(Error::Config(format!("image size {size} too small")));
    }
    let n_pos = (n_patients as f64 * prevalence).round() as usize;
    let mut order: Vec<usize> = (0..n_patients).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![Label::Healthy; n_patients];
    for &i in &order[..n_pos] {
        labels[i] = Label::Ldh;
    }
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
            study(i, label, size, &mut rng)
        })
        .collect())
}
