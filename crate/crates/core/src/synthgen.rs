//! Synthetic fundus-like cohorts with a planted, analytically known class
//! signal.
//!
//! Each individual draws a label and four latent biomarkers from
//! class-conditional unit-variance Gaussians (class 1 shifted by
//! `latent_shift` on every coordinate). Every rendered image encodes all four
//! biomarkers geometrically:
//!
//! | biomarker | rendered as |
//! |-----------|-------------|
//! | 0 | vessel amplitude (tortuosity proxy) |
//! | 1 | vessel stroke half-width (caliber proxy) |
//! | 2 | vessel frequency |
//! | 3 | optic-disc blob radius |
//!
//! Per-image seeds come from [`derive_seed`] over `(cohort seed, individual
//! index, image index)`, so any image can be regenerated on its own.

use std::f64::consts::{PI, SQRT_2};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::data_model::{Centering, CohortManifest, Eye, SampleMeta, N_BIOMARKERS};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io::write_atomic;
use crate::seeding::{derive_seed, rng_for};

const STREAM_INDIVIDUAL: u64 = 0;
const STREAM_IMAGE: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_individuals: usize,
    pub t2d_fraction: f64,
    /// Inclusive `[min, max]` image count per eye.
    pub images_per_eye: [usize; 2],
    pub image_size: usize,
    pub latent_shift: f64,
    pub image_noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_individuals: 600,
            t2d_fraction: 0.345,
            images_per_eye: [1, 2],
            image_size: 64,
            latent_shift: 1.0,
            image_noise_std: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.t2d_fraction > 0.0 && self.t2d_fraction < 1.0) {
            return bad(format!("t2d_fraction {} outside (0,1)", self.t2d_fraction));
        }
        let [lo, hi] = self.images_per_eye;
        if lo > hi || hi == 0 {
            return bad(format!("images_per_eye [{lo},{hi}] is not a valid range"));
        }
        if !(self.latent_shift >= 0.0) || !self.latent_shift.is_finite() {
            return bad(format!("latent_shift {} must be >= 0", self.latent_shift));
        }
        if !(self.image_noise_std >= 0.0) || !self.image_noise_std.is_finite() {
            return bad(format!("image_noise_std {} must be >= 0", self.image_noise_std));
        }
        if self.image_size < 64 {
            return bad(format!("image_size {} < 64", self.image_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentIndividual {
    pub individual_id: String,
    pub label: u8,
    pub biomarkers: [f64; N_BIOMARKERS],
}

/// One image to render: its metadata plus the seed that drives the renderer.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedImage {
    pub meta: SampleMeta,
    pub individual_index: usize,
    pub seed: u64,
}

pub fn individual_id(index: usize) -> String {
    format!("P{index:05}")
}

/// Draws the label and latent biomarkers of individual `index`.
pub fn draw_latent(config: &SynthConfig, index: usize) -> LatentIndividual {
    let mut rng = rng_for(config.seed, &[STREAM_INDIVIDUAL, index as u64]);
    let label = u8::from(rng.random_bool(config.t2d_fraction));
    let mean = config.latent_shift * label as f64;
    let normal = Normal::new(mean, 1.0).expect("unit variance");
    let biomarkers = std::array::from_fn(|_| normal.sample(&mut rng));
    LatentIndividual {
        individual_id: individual_id(index),
        label,
        biomarkers,
    }
}

/// Plans the cohort: latent draws, image counts, centerings, ids and
/// per-image seeds. No pixels are produced.
pub fn plan_cohort(config: &SynthConfig) -> Result<(Vec<LatentIndividual>, Vec<PlannedImage>)> {
    config.validate()?;
    let [lo, hi] = config.images_per_eye;
    let mut latents = Vec::with_capacity(config.n_individuals);
    let mut planned = Vec::new();
    for index in 0..config.n_individuals {
        let latent = draw_latent(config, index);
        let mut rng = rng_for(config.seed, &[STREAM_INDIVIDUAL, index as u64, 1]);
        let mut counts = [rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
        if counts == [0, 0] {
            counts[0] = 1;
        }
        let mut image_index = 0u64;
        for (eye, count) in [Eye::Left, Eye::Right].into_iter().zip(counts) {
            for j in 0..count {
                let centering = if j % 2 == 0 {
                    Centering::OpticDisc
                } else {
                    Centering::Fovea
                };
                let image_id = format!("{}_{}{}", latent.individual_id, eye.as_str(), j);
                planned.push(PlannedImage {
                    meta: SampleMeta {
                        path: format!("images/{image_id}.png"),
                        image_id,
                        individual_id: latent.individual_id.clone(),
                        eye,
                        centering,
                        label: latent.label,
                        biomarkers: latent.biomarkers,
                    },
                    individual_index: index,
                    seed: derive_seed(config.seed, &[STREAM_IMAGE, index as u64, image_index]),
                });
                image_index += 1;
            }
        }
        latents.push(latent);
    }
    Ok((latents, planned))
}

/// Generates the cohort, writing one PNG per image under `out_dir`
/// (at the manifest's relative path). Returns the manifest.
pub fn generate_cohort(config: &SynthConfig, out_dir: &Path) -> Result<CohortManifest> {
    let (latents, planned) = plan_cohort(config)?;
    for p in &planned {
        let img = render_image(
            &latents[p.individual_index],
            p.meta.eye,
            p.meta.centering,
            p.seed,
            config,
        )?;
        write_atomic(&out_dir.join(&p.meta.path), &img.encode_png()?)?;
    }
    CohortManifest::from_samples(planned.into_iter().map(|p| p.meta).collect())
}

/// Shape parameters derived from biomarkers, in pixels for `size`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VesselGeometry {
    pub amplitude: f64,
    pub half_width: f64,
    pub cycles: f64,
    pub blob_radius: f64,
}

impl VesselGeometry {
    pub fn from_biomarkers(b: &[f64; N_BIOMARKERS], size: usize) -> Self {
        let s = size as f64;
        Self {
            amplitude: s * (0.08 + 0.03 * b[0]).clamp(0.0, 0.2),
            half_width: s * (0.035 + 0.012 * b[1]).clamp(0.005, 0.09),
            cycles: (1.5 + 0.4 * b[2]).clamp(0.25, 3.5),
            blob_radius: s * (0.09 + 0.02 * b[3]).clamp(0.03, 0.16),
        }
    }
}

const BACKGROUND: [f64; 3] = [0.03, 0.02, 0.02];
const FUNDUS: [f64; 3] = [0.55, 0.27, 0.12];
const VESSEL: [f64; 3] = [0.95, 0.80, 0.70];
const BLOB: [f64; 3] = [0.98, 0.92, 0.62];

fn blend(dst: &mut [f64; 3], src: &[f64; 3], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d * (1.0 - alpha) + s * alpha;
    }
}

/// Renders one RGB image in `[0, 1]`: dark background, fundus disc, a
/// sinusoidal bright vessel, an optic-disc blob (centered for optic-disc
/// images, shifted nasally for fovea-centered ones) and Gaussian noise.
pub fn render_image(
    latent: &LatentIndividual,
    eye: Eye,
    centering: Centering,
    per_image_seed: u64,
    config: &SynthConfig,
) -> Result<ImageTensor> {
    config.validate()?;
    let size = config.image_size;
    let s = size as f64;
    let geo = VesselGeometry::from_biomarkers(&latent.biomarkers, size);
    let mut rng = ChaCha8Rng::seed_from_u64(per_image_seed);
    let phase = rng.random::<f64>() * 2.0 * PI;

    let c = (s - 1.0) / 2.0;
    let fundus_r = 0.46 * s;
    let blob_x = match (centering, eye) {
        (Centering::OpticDisc, _) => c,
        (Centering::Fovea, Eye::Left) => c - 0.2 * s,
        (Centering::Fovea, Eye::Right) => c + 0.2 * s,
    };
    let omega = 2.0 * PI * geo.cycles / s;
    let noise = (config.image_noise_std > 0.0)
        .then(|| Normal::new(0.0, config.image_noise_std).expect("finite std"));

    let mut img = ImageTensor::zeros(size, size, 3);
    for y in 0..size {
        let fy = y as f64;
        for x in 0..size {
            let fx = x as f64;
            let r = ((fy - c).powi(2) + (fx - c).powi(2)).sqrt();
            let mut px = BACKGROUND;
            let inside = (fundus_r - r + 0.5).clamp(0.0, 1.0);
            if inside > 0.0 {
                let mut f = FUNDUS;
                let shade = 1.0 - 0.25 * (r / fundus_r).powi(2);
                f.iter_mut().for_each(|v| *v *= shade);

                let d_blob = ((fy - c).powi(2) + (fx - blob_x).powi(2)).sqrt();
                blend(&mut f, &BLOB, (geo.blob_radius - d_blob + 0.5).clamp(0.0, 1.0));

                let arg = omega * (fx - c) + phase;
                let centre = c + geo.amplitude * arg.sin();
                let slope = geo.amplitude * omega * arg.cos();
                let dist = (fy - centre).abs() / (1.0 + slope * slope).sqrt();
                blend(&mut f, &VESSEL, (geo.half_width - dist + 0.5).clamp(0.0, 1.0));

                blend(&mut px, &f, inside);
            }
            for (ch, v) in px.iter().enumerate() {
                let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                img.set(y, x, ch, (v + n).clamp(0.0, 1.0));
            }
        }
    }
    Ok(img)
}

/// ROC-AUC of the Bayes-optimal score (sum of biomarkers) for the latent
/// model: `Phi(shift * sqrt(4) / sqrt(2))`.
pub fn latent_bayes_auc(latent_shift: f64) -> f64 {
    let d = latent_shift * (N_BIOMARKERS as f64).sqrt();
    NormalDist::new(0.0, 1.0).expect("standard normal").cdf(d / SQRT_2)
}
