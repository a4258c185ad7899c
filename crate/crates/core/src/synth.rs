//! Seeded fundus-like synthetic patients.
//!
//! Anatomy (circular field, optic disc, macula, vessel arcs) is rendered per
//! patient in a left-eye frame; the right eye is its column mirror. Lesions
//! and sensor noise are sampled independently per eye from a stream keyed by
//! `(seed, image_id)`, so generation order never changes the output.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{io, rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Laterality {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Diagnosis {
    Normal,
    Abnormal,
}

impl Diagnosis {
    pub fn is_abnormal(self) -> bool {
        self == Diagnosis::Abnormal
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients_labeled: usize,
    pub n_patients_unlabeled: usize,
    pub image_size: usize,
    /// Probability that an eye carries lesions.
    pub lesion_rate: f64,
    /// Share of lesions that are macular exudates rather than vessel hemorrhages.
    pub exudate_fraction: f64,
    /// Lesion blend strength in (0, 1].
    pub lesion_contrast: f64,
    /// Multiplier on lesion semi-axes.
    pub lesion_scale: f64,
    pub noise_sigma: f64,
    /// Shift each right-eye template by up to ±2 px to emulate misalignment.
    pub jitter: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients_labeled: 60,
            n_patients_unlabeled: 140,
            image_size: 64,
            lesion_rate: 0.5,
            exudate_fraction: 0.6,
            lesion_contrast: 1.0,
            lesion_scale: 1.0,
            noise_sigma: 0.03,
            jitter: false,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 || self.image_size % 2 != 0 {
            return Err(Error::invalid("image_size", format!("{} must be even and >= 32", self.image_size)));
        }
        for (name, p) in [
            ("lesion_rate", self.lesion_rate),
            ("exudate_fraction", self.exudate_fraction),
            ("lesion_contrast", self.lesion_contrast),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, format!("{p} outside [0, 1]")));
            }
        }
        if !(self.lesion_scale > 0.0 && self.lesion_scale <= 4.0) {
            return Err(Error::invalid("lesion_scale", format!("{} outside (0, 4]", self.lesion_scale)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma", "must be non-negative"));
        }
        Ok(())
    }

    pub fn n_patients(&self) -> usize {
        self.n_patients_labeled + self.n_patients_unlabeled
    }

    pub fn patient_id(index: usize) -> String {
        format!("p{index:05}")
    }

    pub fn image_id(patient_id: &str, laterality: Laterality) -> String {
        match laterality {
            Laterality::Left => format!("{patient_id}-L"),
            Laterality::Right => format!("{patient_id}-R"),
        }
    }
}

/// Patient-level anatomy in the left-eye frame, pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateParams {
    pub size: usize,
    pub field_radius: f64,
    pub base_color: [f64; 3],
    pub disc_center: (f64, f64),
    pub disc_radius: f64,
    pub macula_center: (f64, f64),
    pub macula_radius: f64,
    /// Quadratic Bézier control points `(start, control, end)` as `(y, x)`.
    pub vessels: Vec<[(f64, f64); 3]>,
}

const VESSEL_SAMPLES: usize = 24;

fn u(r: &mut impl Rng, a: f64, b: f64) -> f64 {
    a + (b - a) * r.random::<f64>()
}

impl TemplateParams {
    pub fn sample(size: usize, r: &mut impl Rng) -> Self {
        let s = size as f64;
        let field_radius = s * u(r, 0.44, 0.48);
        let base_color = [u(r, 0.66, 0.80), u(r, 0.30, 0.42), u(r, 0.14, 0.24)];
        let disc_center = (s * u(r, 0.46, 0.54), s * u(r, 0.68, 0.74));
        let disc_radius = s * u(r, 0.065, 0.085);
        let macula_center = (s * u(r, 0.48, 0.53), s * u(r, 0.38, 0.44));
        let macula_radius = s * u(r, 0.08, 0.10);
        let (dy, dx) = disc_center;
        let mut vessels = Vec::new();
        for sign in [-1.0, 1.0] {
            // temporal arcades sweep around the macula
            vessels.push([
                (dy, dx),
                (dy + sign * s * u(r, 0.30, 0.38), dx - s * u(r, 0.02, 0.08)),
                (dy + sign * s * u(r, 0.12, 0.20), dx - s * u(r, 0.52, 0.60)),
            ]);
            // nasal branches
            vessels.push([
                (dy, dx),
                (dy + sign * s * u(r, 0.12, 0.18), dx + s * u(r, 0.06, 0.10)),
                (dy + sign * s * u(r, 0.30, 0.38), dx + s * u(r, 0.14, 0.20)),
            ]);
        }
        Self {
            size,
            field_radius,
            base_color,
            disc_center,
            disc_radius,
            macula_center,
            macula_radius,
            vessels,
        }
    }

    fn vessel_points(&self, v: usize) -> Vec<(f64, f64)> {
        let [p0, p1, p2] = self.vessels[v];
        (0..=VESSEL_SAMPLES)
            .map(|i| {
                let t = i as f64 / VESSEL_SAMPLES as f64;
                let a = (1.0 - t) * (1.0 - t);
                let b = 2.0 * (1.0 - t) * t;
                let c = t * t;
                (a * p0.0 + b * p1.0 + c * p2.0, a * p0.1 + b * p1.1 + c * p2.1)
            })
            .collect()
    }

    pub fn in_field(&self, y: f64, x: f64, margin: f64) -> bool {
        let c = (self.size as f64 - 1.0) / 2.0;
        ((y - c).powi(2) + (x - c).powi(2)).sqrt() <= self.field_radius - margin
    }

    /// Noise-free image `[3, S, S]` in the left-eye frame.
    pub fn render(&self) -> Tensor {
        let s = self.size;
        let c = (s as f64 - 1.0) / 2.0;
        let polylines: Vec<Vec<(f64, f64)>> = (0..self.vessels.len()).map(|v| self.vessel_points(v)).collect();
        let mut img = Tensor::zeros(&[3, s, s]);
        let data = img.data_mut();
        for y in 0..s {
            for x in 0..s {
                let (yf, xf) = (y as f64, x as f64);
                let rad = ((yf - c).powi(2) + (xf - c).powi(2)).sqrt();
                let field = (self.field_radius - rad + 0.5).clamp(0.0, 1.0);
                if field == 0.0 {
                    continue;
                }
                let vignette = 1.0 - 0.35 * (rad / self.field_radius).powi(2);
                let mut px = self.base_color.map(|v| v * vignette);

                let dm = dist(yf, xf, self.macula_center) / self.macula_radius;
                let mac = 0.35 * (-dm * dm).exp();
                for v in &mut px {
                    *v *= 1.0 - mac;
                }

                for (vi, line) in polylines.iter().enumerate() {
                    let d = dist_to_polyline(yf, xf, line);
                    let width = if vi % 2 == 0 { 0.9 } else { 0.7 };
                    let a = 0.55 * (-(d / width).powi(2)).exp();
                    let vessel = [0.45, 0.08, 0.08];
                    for ch in 0..3 {
                        px[ch] = px[ch] * (1.0 - a) + vessel[ch] * a;
                    }
                }

                let dd = dist(yf, xf, self.disc_center);
                let disc = ((self.disc_radius - dd) / 1.2 + 0.5).clamp(0.0, 1.0);
                let disc_color = [0.97, 0.88, 0.62];
                for ch in 0..3 {
                    px[ch] = px[ch] * (1.0 - disc) + disc_color[ch] * disc;
                }

                for ch in 0..3 {
                    data[(ch * s + y) * s + x] = (px[ch] * field).clamp(0.0, 1.0);
                }
            }
        }
        img
    }
}

fn dist(y: f64, x: f64, p: (f64, f64)) -> f64 {
    ((y - p.0).powi(2) + (x - p.1).powi(2)).sqrt()
}

fn dist_to_polyline(y: f64, x: f64, pts: &[(f64, f64)]) -> f64 {
    pts.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let (vy, vx) = (b.0 - a.0, b.1 - a.1);
            let len2 = vy * vy + vx * vx;
            let t = if len2 > 0.0 {
                (((y - a.0) * vy + (x - a.1) * vx) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            dist(y, x, (a.0 + t * vy, a.1 + t * vx))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Shifts every channel by `(dy, dx)` pixels with zero fill.
fn shift_image(img: &Tensor, dy: i32, dx: i32) -> Tensor {
    let [c, h, w] = [img.shape()[0], img.shape()[1], img.shape()[2]];
    let mut out = Tensor::zeros(img.shape());
    let (src, dst) = (img.data(), out.data_mut());
    for ch in 0..c {
        for y in 0..h {
            let sy = y as i32 - dy;
            if sy < 0 || sy >= h as i32 {
                continue;
            }
            for x in 0..w {
                let sx = x as i32 - dx;
                if sx < 0 || sx >= w as i32 {
                    continue;
                }
                dst[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionKind {
    Exudate,
    Hemorrhage,
}

/// One lesion, in the image's own pixel frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub kind: LesionKind,
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub angle: f64,
}

#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub laterality: Laterality,
    /// `[3, S, S]`, values in `[0, 1]`, exactly representable in f32.
    pub pixels: Tensor,
    /// Known for every record; only labeled-split labels may feed training.
    pub gt_label: Diagnosis,
    /// `[S, S]` binary.
    pub gt_lesion_mask: Tensor,
    pub split: Split,
    pub template: TemplateParams,
    /// Template shift applied after mirroring (right eyes with jitter only).
    pub template_shift: (i32, i32),
    pub lesions: Vec<Lesion>,
}

impl ImageRecord {
    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// The noise- and lesion-free image this record was drawn from.
    pub fn pre_noise_template(&self) -> Tensor {
        let left = self.template.render();
        let oriented = match self.laterality {
            Laterality::Left => left,
            Laterality::Right => left.flip_last_axis(),
        };
        let (dy, dx) = self.template_shift;
        if (dy, dx) == (0, 0) {
            oriented
        } else {
            shift_image(&oriented, dy, dx)
        }
    }
}

/// True iff `right` equals the column reversal of `left` exactly.
pub fn templates_mirror(left: &Tensor, right: &Tensor) -> bool {
    left.shape() == right.shape() && left.flip_last_axis() == *right
}

/// Checks that a patient's right-eye template mirrors the left-eye template.
pub fn mirror_check(left: &ImageRecord, right: &ImageRecord) -> Result<bool> {
    if left.patient_id != right.patient_id {
        return Err(Error::invalid(
            "right",
            format!("patient {} vs {}", left.patient_id, right.patient_id),
        ));
    }
    Ok(templates_mirror(&left.pre_noise_template(), &right.pre_noise_template()))
}

fn sample_lesion(
    tpl: &TemplateParams,
    cfg: &SynthConfig,
    r: &mut impl Rng,
) -> Lesion {
    let s = tpl.size as f64;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let kind = if r.random::<f64>() < cfg.exudate_fraction {
            LesionKind::Exudate
        } else {
            LesionKind::Hemorrhage
        };
        let center = match kind {
            LesionKind::Exudate => {
                let spread = 0.09 * s;
                (
                    tpl.macula_center.0 + spread * normal.sample(r),
                    tpl.macula_center.1 + spread * normal.sample(r),
                )
            }
            LesionKind::Hemorrhage => {
                let v = r.random_range(0..tpl.vessels.len());
                let pts = tpl.vessel_points(v);
                let p = pts[r.random_range(pts.len() / 4..pts.len())];
                (p.0 + 1.5 * normal.sample(r), p.1 + 1.5 * normal.sample(r))
            }
        };
        if !tpl.in_field(center.0, center.1, 3.0) {
            continue;
        }
        let axes = match kind {
            LesionKind::Exudate => (r.random_range(1.4..2.6), r.random_range(1.2..2.2)),
            LesionKind::Hemorrhage => (r.random_range(1.6..3.2), r.random_range(1.4..2.6)),
        };
        return Lesion {
            kind,
            center,
            axes: (axes.0 * cfg.lesion_scale, axes.1 * cfg.lesion_scale),
            angle: r.random_range(0.0..std::f64::consts::PI),
        };
    }
}

/// Paints lesions into `img` and returns the binary support mask.
fn paint_lesions(img: &mut Tensor, lesions: &[Lesion], contrast: f64, field: &TemplateParams) -> Tensor {
    let s = img.shape()[1];
    let mut mask = Tensor::zeros(&[s, s]);
    let data = img.data_mut();
    for les in lesions {
        let color = match les.kind {
            LesionKind::Exudate => [1.0, 0.92, 0.45],
            LesionKind::Hemorrhage => [0.30, 0.03, 0.03],
        };
        let (sin, cos) = les.angle.sin_cos();
        let reach = les.axes.0.max(les.axes.1) + 2.0;
        let y0 = (les.center.0 - reach).floor().max(0.0) as usize;
        let y1 = ((les.center.0 + reach).ceil() as usize).min(s - 1);
        let x0 = (les.center.1 - reach).floor().max(0.0) as usize;
        let x1 = ((les.center.1 + reach).ceil() as usize).min(s - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if !field.in_field(y as f64, x as f64, 0.5) {
                    continue;
                }
                let (dy, dx) = (y as f64 - les.center.0, x as f64 - les.center.1);
                let u = (dy * cos + dx * sin) / les.axes.0;
                let v = (-dy * sin + dx * cos) / les.axes.1;
                let rho = (u * u + v * v).sqrt();
                let a = contrast * ((1.6 - rho) / 0.6).clamp(0.0, 1.0);
                if a <= 0.0 {
                    continue;
                }
                for ch in 0..3 {
                    let i = (ch * s + y) * s + x;
                    data[i] = data[i] * (1.0 - a) + color[ch] * a;
                }
                if rho <= 1.0 {
                    mask.data_mut()[y * s + x] = 1.0;
                }
            }
        }
    }
    mask
}

fn eye_stream(cfg: &SynthConfig, image_id: &str) -> rand_chacha::ChaCha8Rng {
    rng::stream(cfg.seed, &format!("eye:{image_id}"))
}

/// First draw of every eye stream; non-zero only for jittered right eyes.
fn draw_template_shift(cfg: &SynthConfig, laterality: Laterality, r: &mut impl Rng) -> (i32, i32) {
    if !(cfg.jitter && laterality == Laterality::Right) {
        return (0, 0);
    }
    loop {
        let d = (r.random_range(-2..=2), r.random_range(-2..=2));
        if d != (0, 0) {
            return d;
        }
    }
}

fn generate_eye(
    cfg: &SynthConfig,
    patient_id: &str,
    tpl: &TemplateParams,
    laterality: Laterality,
    split: Split,
) -> ImageRecord {
    let image_id = SynthConfig::image_id(patient_id, laterality);
    let mut r = eye_stream(cfg, &image_id);
    let template_shift = draw_template_shift(cfg, laterality, &mut r);
    let mut record = ImageRecord {
        image_id,
        patient_id: patient_id.to_string(),
        laterality,
        pixels: Tensor::zeros(&[0]),
        gt_label: Diagnosis::Normal,
        gt_lesion_mask: Tensor::zeros(&[0]),
        split,
        template: tpl.clone(),
        template_shift,
        lesions: Vec::new(),
    };
    let mut img = record.pre_noise_template();

    // Anatomy is sampled in the left frame, then mapped into this eye's frame.
    let s = cfg.image_size as f64;
    let to_frame = |(y, x): (f64, f64)| -> (f64, f64) {
        let x = match laterality {
            Laterality::Left => x,
            Laterality::Right => s - 1.0 - x,
        };
        (y + template_shift.0 as f64, x + template_shift.1 as f64)
    };
    if r.random::<f64>() < cfg.lesion_rate {
        let n = r.random_range(1..=3);
        record.lesions = (0..n)
            .map(|_| {
                let mut les = sample_lesion(tpl, cfg, &mut r);
                les.center = to_frame(les.center);
                if laterality == Laterality::Right {
                    les.angle = std::f64::consts::PI - les.angle;
                }
                les
            })
            .collect();
    }
    let mut field = tpl.clone();
    field.size = cfg.image_size;
    let mask = paint_lesions(&mut img, &record.lesions, cfg.lesion_contrast, &field);

    let gain = r.random_range(0.9..1.1);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let inside: Vec<bool> = (0..cfg.image_size * cfg.image_size)
        .map(|i| field.in_field((i / cfg.image_size) as f64, (i % cfg.image_size) as f64, 0.0))
        .collect();
    let plane = cfg.image_size * cfg.image_size;
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        let n = if cfg.noise_sigma > 0.0 && inside[i % plane] {
            noise.sample(&mut r)
        } else {
            0.0
        };
        *v = ((*v * gain + n).clamp(0.0, 1.0) as f32) as f64;
    }

    record.gt_label = if mask.data().iter().any(|&m| m > 0.0) {
        Diagnosis::Abnormal
    } else {
        Diagnosis::Normal
    };
    if record.gt_label == Diagnosis::Normal {
        record.lesions.clear();
    }
    record.pixels = img;
    record.gt_lesion_mask = mask;
    record
}

pub fn patient_template(cfg: &SynthConfig, patient_id: &str) -> TemplateParams {
    TemplateParams::sample(cfg.image_size, &mut rng::stream(cfg.seed, &format!("template:{patient_id}")))
}

/// Two records per patient, labeled patients first, left eye before right.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<ImageRecord>> {
    cfg.validate()?;
    let per_patient: Vec<[ImageRecord; 2]> = (0..cfg.n_patients())
        .into_par_iter()
        .map(|i| {
            let pid = SynthConfig::patient_id(i);
            let split = if i < cfg.n_patients_labeled {
                Split::Labeled
            } else {
                Split::Unlabeled
            };
            let tpl = patient_template(cfg, &pid);
            [
                generate_eye(cfg, &pid, &tpl, Laterality::Left, split),
                generate_eye(cfg, &pid, &tpl, Laterality::Right, split),
            ]
        })
        .collect();
    Ok(per_patient.into_iter().flatten().collect())
}

/// One JSON-lines entry of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub patient_id: String,
    pub laterality: Laterality,
    pub gt_label: Diagnosis,
    pub split: Split,
    pub pixel_path: String,
    pub mask_path: String,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "synth_config.json";

/// Writes tensors, the manifest and the generating config under `dir`.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, records: &[ImageRecord]) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for rec in records {
        let pixel_path = format!("images/{}.pix", rec.image_id);
        let mask_path = format!("images/{}.mask", rec.image_id);
        io::save_tensor(&dir.join(&pixel_path), &rec.pixels)?;
        io::save_tensor(&dir.join(&mask_path), &rec.gt_lesion_mask)?;
        let entry = ManifestEntry {
            image_id: rec.image_id.clone(),
            patient_id: rec.patient_id.clone(),
            laterality: rec.laterality,
            gt_label: rec.gt_label,
            split: rec.split,
            pixel_path,
            mask_path,
        };
        manifest.push_str(&serde_json::to_string(&entry)?);
        manifest.push('\n');
    }
    io::atomic_write(&dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    io::atomic_write(&dir.join(MANIFEST_FILE), manifest.as_bytes())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = String::from_utf8(io::read_file(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Loads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(SynthConfig, Vec<ImageRecord>)> {
    let cfg_path = dir.join(CONFIG_FILE);
    let cfg: SynthConfig = serde_json::from_slice(&io::read_file(&cfg_path)?)?;
    let entries: Vec<ManifestEntry> = read_jsonl(&dir.join(MANIFEST_FILE))?;
    let records = entries
        .into_iter()
        .map(|e| {
            let template = patient_template(&cfg, &e.patient_id);
            let pixels = io::load_tensor(&dir.join(&e.pixel_path))?;
            let gt_lesion_mask = io::load_tensor(&dir.join(&e.mask_path))?;
            let template_shift = draw_template_shift(&cfg, e.laterality, &mut eye_stream(&cfg, &e.image_id));
            Ok(ImageRecord {
                image_id: e.image_id,
                patient_id: e.patient_id,
                laterality: e.laterality,
                pixels,
                gt_label: e.gt_label,
                gt_lesion_mask,
                split: e.split,
                template,
                template_shift,
                lesions: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((cfg, records))
}

pub fn dataset_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(MANIFEST_FILE), dir.join(CONFIG_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, lesion_rate: f64) -> SynthConfig {
        SynthConfig {
            n_patients_labeled: n / 2,
            n_patients_unlabeled: n - n / 2,
            lesion_rate,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_lesion_rate_gives_all_normal() {
        let recs = generate_dataset(&small(10, 0.0)).unwrap();
        assert_eq!(recs.len(), 20);
        for r in &recs {
            assert_eq!(r.gt_label, Diagnosis::Normal);
            assert!(r.gt_lesion_mask.data().iter().all(|&m| m == 0.0));
        }
    }

    #[test]
    fn same_config_is_bit_identical() {
        let a = generate_dataset(&small(6, 0.5)).unwrap();
        let b = generate_dataset(&small(6, 0.5)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pixels, y.pixels);
            assert_eq!(x.gt_lesion_mask, y.gt_lesion_mask);
        }
    }

    #[test]
    fn abnormal_fraction_tracks_lesion_rate() {
        let recs = generate_dataset(&small(50, 0.5)).unwrap();
        let frac = recs.iter().filter(|r| r.gt_label.is_abnormal()).count() as f64 / recs.len() as f64;
        assert!((0.35..=0.65).contains(&frac), "{frac}");
    }

    #[test]
    fn records_satisfy_label_mask_and_range_invariants() {
        let recs = generate_dataset(&small(20, 0.6)).unwrap();
        for r in &recs {
            let any = r.gt_lesion_mask.data().iter().any(|&m| m > 0.0);
            assert_eq!(any, r.gt_label.is_abnormal());
            assert!(r.gt_lesion_mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
            assert!(r.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let s = r.size();
            for (i, &m) in r.gt_lesion_mask.data().iter().enumerate() {
                if m > 0.0 {
                    assert!(r.template.in_field((i / s) as f64, (i % s) as f64, 0.0));
                }
            }
        }
    }

    #[test]
    fn generated_pairs_mirror() {
        let recs = generate_dataset(&small(4, 0.5)).unwrap();
        for pair in recs.chunks(2) {
            assert!(mirror_check(&pair[0], &pair[1]).unwrap());
            // unmirrored self-comparison fails because anatomy is asymmetric
            assert!(!mirror_check(&pair[0], &pair[0]).unwrap());
        }
        assert!(mirror_check(&recs[0], &recs[3]).is_err());
        let unrelated = templates_mirror(&recs[0].pre_noise_template(), &recs[3].pre_noise_template());
        assert!(!unrelated);
    }

    #[test]
    fn jitter_breaks_exact_mirroring() {
        let cfg = SynthConfig {
            jitter: true,
            ..small(4, 0.0)
        };
        let recs = generate_dataset(&cfg).unwrap();
        for pair in recs.chunks(2) {
            assert_ne!(pair[1].template_shift, (0, 0));
            assert!(!mirror_check(&pair[0], &pair[1]).unwrap());
        }
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &cfg, &recs).unwrap();
        let (_, back) = read_dataset(dir.path()).unwrap();
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.template_shift, b.template_shift);
        }
    }

    #[test]
    fn lesion_placement_depends_on_position() {
        let cfg = SynthConfig {
            n_patients_labeled: 0,
            n_patients_unlabeled: 500,
            lesion_rate: 1.0,
            seed: 7,
            ..SynthConfig::default()
        };
        let recs = generate_dataset(&cfg).unwrap();
        assert!(recs.len() >= 1000);
        let s = cfg.image_size as f64;
        let central = |(y, x): (f64, f64)| (s / 4.0..3.0 * s / 4.0).contains(&y) && (s / 4.0..3.0 * s / 4.0).contains(&x);
        let quadrant = |(y, x): (f64, f64)| ((y >= s / 2.0) as usize) * 2 + (x >= s / 2.0) as usize;
        let mut center_hits = 0usize;
        let mut corner_hits = [0usize; 4];
        for r in &recs {
            if r.lesions.iter().any(|l| central(l.center)) {
                center_hits += 1;
            }
            for q in 0..4 {
                if r.lesions.iter().any(|l| !central(l.center) && quadrant(l.center) == q) {
                    corner_hits[q] += 1;
                }
            }
        }
        let n = recs.len() as f64;
        let center = center_hits as f64 / n;
        let corner = corner_hits.iter().sum::<usize>() as f64 / 4.0 / n;
        assert!(center - corner >= 0.2, "center {center} corner {corner}");
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = SynthConfig {
            image_size: 30,
            ..SynthConfig::default()
        };
        assert!(generate_dataset(&bad).is_err());
        let bad = SynthConfig {
            lesion_rate: 1.5,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn disk_roundtrip_is_exact() {
        let cfg = small(3, 0.5);
        let recs = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &cfg, &recs).unwrap();
        let (cfg2, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.pixels, b.pixels);
            assert_eq!(a.gt_lesion_mask, b.gt_lesion_mask);
            assert_eq!(a.image_id, b.image_id);
        }
    }
}
