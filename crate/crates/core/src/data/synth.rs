//! Multi-site phantom generator.
//!
//! Each slice shows a textured background, a large "body" ellipse, one or
//! two distractor blobs and the target ellipse. The mask is exactly the set
//! of pixel centres inside the target ellipse. Sites differ by an affine
//! intensity shift, Gaussian blur and additive noise.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, SliceRecord, MANIFEST_FILE};
use crate::error::{Error, Result};

pub const PHANTOM_META_FILE: &str = "phantom_meta.json";

/// Acquisition characteristics of one synthetic site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    pub intensity_offset: f64,
    pub contrast: f64,
    pub noise_std: f64,
    /// Gaussian blur sigma in pixels (0 disables blur).
    pub blur_sigma: f64,
}

impl SiteProfile {
    /// Six distinct profiles; the first `n` are returned.
    pub fn defaults(n: usize) -> Vec<SiteProfile> {
        const TABLE: [(f64, f64, f64, f64); 6] = [
            (0.00, 1.00, 0.03, 0.0),
            (0.06, 0.80, 0.05, 0.8),
            (-0.04, 1.15, 0.04, 0.5),
            (0.10, 0.70, 0.08, 1.2),
            (-0.02, 1.05, 0.06, 0.0),
            (0.05, 0.90, 0.07, 1.0),
        ];
        TABLE
            .iter()
            .cycle()
            .take(n)
            .map(|&(intensity_offset, contrast, noise_std, blur_sigma)| SiteProfile {
                intensity_offset,
                contrast,
                noise_std,
                blur_sigma,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_per_site: usize,
    pub height: usize,
    pub width: usize,
    pub slices_per_patient: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_site: 100,
            height: 96,
            width: 96,
            slices_per_patient: 10,
            seed: 0,
        }
    }
}

/// Rotated ellipse in pixel coordinates (pixel `(x, y)` has its centre at
/// `(x, y)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.level(x, y) <= 1.0
    }

    fn level(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Array2<u8> {
        Array2::from_shape_fn((height, width), |(y, x)| u8::from(self.contains(x as f64, y as f64)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomRecord {
    pub site: u32,
    pub patient_id: String,
    pub slice_index: u32,
    pub target: Ellipse,
}

/// Sidecar written next to the manifest of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomMeta {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub profiles: Vec<SiteProfile>,
    pub records: Vec<PhantomRecord>,
}

impl PhantomMeta {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Renders one phantom slice. Returns the image in `[0, 1]` and the target.
pub fn render_phantom(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    profile: &SiteProfile,
) -> (Array2<f64>, Ellipse) {
    let (h, w) = (height as f64, width as f64);
    let scale = h.min(w);

    // Low-frequency texture.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.06),
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / w,
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / h,
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let body = Ellipse {
        cx: w / 2.0 + rng.random_range(-0.05..0.05) * w,
        cy: h / 2.0 + rng.random_range(-0.05..0.05) * h,
        a: rng.random_range(0.38..0.46) * w,
        b: rng.random_range(0.30..0.40) * h,
        theta: rng.random_range(-0.2..0.2),
    };
    let target = Ellipse {
        cx: (w / 2.0 + rng.random_range(-0.12..0.12) * w).round(),
        cy: (h / 2.0 + rng.random_range(-0.08..0.12) * h).round(),
        a: rng.random_range(0.08..0.17) * scale,
        b: rng.random_range(0.07..0.14) * scale,
        theta: rng.random_range(0.0..std::f64::consts::PI),
    };
    let target_level = rng.random_range(0.22..0.32);

    let n_distractors = rng.random_range(1..=2);
    let mut distractors = Vec::with_capacity(n_distractors);
    while distractors.len() < n_distractors {
        let d = Ellipse {
            cx: rng.random_range(0.15..0.85) * w,
            cy: rng.random_range(0.15..0.85) * h,
            a: rng.random_range(0.04..0.09) * scale,
            b: rng.random_range(0.04..0.09) * scale,
            theta: rng.random_range(0.0..std::f64::consts::PI),
        };
        let gap = ((d.cx - target.cx).powi(2) + (d.cy - target.cy).powi(2)).sqrt();
        if gap > target.a.max(target.b) + d.a.max(d.b) + 3.0 {
            let level = if rng.random_bool(0.5) { 0.38 } else { -0.12 };
            distractors.push((d, level));
        }
    }

    let mut img = Array2::from_shape_fn((height, width), |(y, x)| {
        let (xf, yf) = (x as f64, y as f64);
        let mut v = 0.15;
        for &(amp, kx, ky, phase) in &waves {
            v += amp * (kx * xf + ky * yf + phase).sin();
        }
        if body.contains(xf, yf) {
            v += 0.15;
        }
        for (d, level) in &distractors {
            if d.contains(xf, yf) {
                v += level;
            }
        }
        if target.contains(xf, yf) {
            v += target_level;
        }
        v
    });

    if profile.blur_sigma > 0.0 {
        img = gaussian_blur(&img, profile.blur_sigma);
    }
    let noise = Normal::new(0.0, profile.noise_std.max(0.0)).expect("non-negative std");
    img.mapv_inplace(|v| {
        let shifted = profile.intensity_offset + profile.contrast * v + noise.sample(rng);
        shifted.clamp(0.0, 1.0)
    });
    (img, target)
}

fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / sum).collect();
    let (h, w) = img.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz: Array2<f64> = Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * img[[y, clamp(x as isize + k as isize - radius, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * horiz[[clamp(y as isize + k as isize - radius, h), x]])
            .sum::<f64>()
    })
}

/// Writes a synthetic multi-site dataset (site `k` uses `site_profiles[k-1]`)
/// in the standard directory layout, plus `manifest.json` and
/// `phantom_meta.json`.
pub fn synthesize_dataset(
    cfg: &SynthConfig,
    site_profiles: &[SiteProfile],
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    if cfg.n_per_site == 0 {
        return Err(Error::InvalidArgument("n_per_site must be >= 1".into()));
    }
    if site_profiles.is_empty() || site_profiles.len() > 6 {
        return Err(Error::InvalidArgument(format!(
            "1..=6 site profiles required, got {}",
            site_profiles.len()
        )));
    }
    if cfg.slices_per_patient == 0 || cfg.height < 8 || cfg.width < 8 {
        return Err(Error::InvalidArgument("degenerate phantom geometry".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut records = Vec::new();
    let mut meta_records = Vec::new();
    for (si, profile) in site_profiles.iter().enumerate() {
        let site = si as u32 + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(u64::from(site)));
        for n in 0..cfg.n_per_site {
            let patient_id = format!("p{:03}", n / cfg.slices_per_patient);
            let slice_index = (n % cfg.slices_per_patient) as u32;
            let dir = out_dir.join(format!("site{site}")).join(&patient_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let (img, target) = render_phantom(&mut rng, cfg.height, cfg.width, profile);
            let mask = target.rasterize(cfg.height, cfg.width);
            debug_assert!(mask.iter().any(|&m| m == 1));

            let image_path = dir.join(format!("img_{slice_index}.png"));
            let mask_path = dir.join(format!("mask_{slice_index}.png"));
            write_u16(&img, &image_path)?;
            write_mask(&mask, &mask_path)?;
            records.push(SliceRecord {
                site,
                patient_id: patient_id.clone(),
                slice_index,
                image_path: image_path.to_string_lossy().into_owned(),
                mask_path: mask_path.to_string_lossy().into_owned(),
            });
            meta_records.push(PhantomRecord {
                site,
                patient_id,
                slice_index,
                target,
            });
        }
    }
    let manifest = Manifest::new(
        records,
        format!(
            "synthetic phantoms: {} sites x {} slices, {}x{}, seed {}",
            site_profiles.len(),
            cfg.n_per_site,
            cfg.height,
            cfg.width,
            cfg.seed
        ),
    )?;
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    let meta = PhantomMeta {
        height: cfg.height,
        width: cfg.width,
        seed: cfg.seed,
        profiles: site_profiles.to_vec(),
        records: meta_records,
    };
    let meta_path = out_dir.join(PHANTOM_META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok(manifest)
}

fn write_u16(img: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(img[[y as usize, x as usize]] * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn write_mask(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([mask[[y as usize, x as usize]] * 255]));
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
