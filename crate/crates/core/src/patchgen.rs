//! Five-crop patch annotation from normalized CAMs.
//!
//! Right eyes and their CAMs are mirrored into the left-eye frame, each image
//! is cut into five fixed crops, and every crop gets the mean of the matching
//! CAM crop as its lesion score. Labeled-split normals are forced to 0.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labeler::NormalizedCam;
use crate::numerics::{io, Tensor};
use crate::synth::{read_jsonl, Diagnosis, ImageRecord, Laterality, Split};

/// Minimum lesion-mask pixels inside a crop for it to count as abnormal in
/// the ground truth.
pub const GT_MIN_LESION_PIXELS: usize = 4;
pub const DEFAULT_THRESHOLD: f64 = 0.4;
pub const HISTOGRAM_BINS: usize = 10;

pub const PATCH_MANIFEST_FILE: &str = "patches.jsonl";
pub const PATCH_PARAMS_FILE: &str = "patch_params.json";
pub const HISTOGRAM_FILE: &str = "lesion_score_histogram.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Tl,
    Tr,
    C,
    Bl,
    Br,
}

impl Position {
    pub const ALL: [Position; 5] = [Position::Tl, Position::Tr, Position::C, Position::Bl, Position::Br];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Position::Tl => "tl",
            Position::Tr => "tr",
            Position::C => "c",
            Position::Bl => "bl",
            Position::Br => "br",
        }
    }

    /// Top-left corner of this crop for side `p` inside side `s`.
    pub fn anchor(self, s: usize, p: usize) -> (usize, usize) {
        let far = s - p;
        match self {
            Position::Tl => (0, 0),
            Position::Tr => (0, far),
            Position::C => (far / 2, far / 2),
            Position::Bl => (far, 0),
            Position::Br => (far, far),
        }
    }
}

/// Square crop of the last two axes; works for `[C, H, W]` and `[H, W]`.
pub fn crop(t: &Tensor, top: usize, left: usize, side: usize) -> Tensor {
    let shape = t.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    assert!(top + side <= h && left + side <= w, "crop outside tensor");
    let lead: usize = shape[..shape.len() - 2].iter().product();
    let mut out = Vec::with_capacity(lead * side * side);
    for plane in t.data().chunks(h * w) {
        for y in top..top + side {
            out.extend_from_slice(&plane[y * w + left..y * w + left + side]);
        }
    }
    let mut new_shape = shape[..shape.len() - 2].to_vec();
    new_shape.extend([side, side]);
    Tensor::from_parts(new_shape, out).expect("crop sizes agree")
}

/// The five fixed crops of a square `[C, S, S]` image.
pub fn five_crop(image: &Tensor, p: usize) -> Result<Vec<(Position, Tensor)>> {
    let [_, h, w] = image.dims::<3>("five_crop")?;
    if h != w {
        return Err(Error::shape("five_crop", format!("image is {h}x{w}, expected square")));
    }
    if p == 0 || p > h {
        return Err(Error::invalid("patch_side", format!("{p} must lie in 1..={h}")));
    }
    Ok(Position::ALL
        .iter()
        .map(|&pos| {
            let (y, x) = pos.anchor(h, p);
            (pos, crop(image, y, x, p))
        })
        .collect())
}

/// Mirrors right-eye images and CAMs into the left-eye frame.
pub fn align_flip(record: &ImageRecord, cam: &NormalizedCam) -> (Tensor, NormalizedCam) {
    match record.laterality {
        Laterality::Left => (record.pixels.clone(), cam.clone()),
        Laterality::Right => (record.pixels.flip_last_axis(), cam.flip_horizontal()),
    }
}

/// Mean of the CAM crop; exactly 0 for labeled-split normal sources.
pub fn score_patch(cam_crop: &Tensor, split: Split, gt_label: Diagnosis) -> Result<f64> {
    if cam_crop.is_empty() {
        return Err(Error::invalid("cam_crop", "empty crop"));
    }
    if split == Split::Labeled && gt_label == Diagnosis::Normal {
        return Ok(0.0);
    }
    Ok(cam_crop.mean())
}

/// Abnormal iff `score >= t`.
pub fn threshold_label(score: f64, t: f64) -> Result<Diagnosis> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::invalid("score", format!("{score} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid("threshold", format!("{t} outside [0, 1]")));
    }
    Ok(if score >= t { Diagnosis::Abnormal } else { Diagnosis::Normal })
}

/// Patch metadata; pixels are stored separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub image_id: String,
    pub patient_id: String,
    pub laterality: Laterality,
    pub split: Split,
    pub position: Position,
    pub lesion_score: f64,
    pub abnormality: Diagnosis,
    /// From the synthetic lesion mask; evaluation only.
    pub gt_patch_abnormal: bool,
    pub pixel_path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildParams {
    pub threshold: f64,
    pub patch_frac: f64,
    pub patch_side: usize,
    pub cam_patch_side: usize,
    pub source_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchManifest {
    pub params: BuildParams,
    pub records: Vec<PatchRecord>,
}

impl PatchManifest {
    pub fn abnormal_count(&self) -> usize {
        self.records.iter().filter(|r| r.abnormality.is_abnormal()).count()
    }

    /// Relabels every record at a new threshold without touching scores.
    pub fn relabel(&self, t: f64) -> Result<PatchManifest> {
        let mut out = self.clone();
        out.params.threshold = t;
        for r in &mut out.records {
            r.abnormality = threshold_label(r.lesion_score, t)?;
        }
        Ok(out)
    }
}

/// A patch record together with its pixels.
#[derive(Clone, Debug)]
pub struct Patch {
    pub record: PatchRecord,
    pub pixels: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub counts: [usize; HISTOGRAM_BINS],
}

impl Histogram {
    /// Ten equal bins over `[0, 1]`; the last bin is closed.
    pub fn of(scores: impl IntoIterator<Item = f64>) -> Self {
        let mut counts = [0; HISTOGRAM_BINS];
        for s in scores {
            let bin = ((s * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
            counts[bin] += 1;
        }
        Self { counts }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let lo = i as f64 / HISTOGRAM_BINS as f64;
            let hi = (i + 1) as f64 / HISTOGRAM_BINS as f64;
            out.push_str(&format!("{lo:.1},{hi:.1},{c}\n"));
        }
        out
    }
}

/// SHA-256 over image ids and pixel bit patterns, in input order.
pub fn source_hash(images: &[ImageRecord]) -> String {
    let mut h = Sha256::new();
    for img in images {
        h.update(img.image_id.as_bytes());
        for v in img.pixels.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Flip-aligns, crops, scores and thresholds every image. Output is sorted by
/// image id, then position.
pub fn build_dataset(
    images: &[ImageRecord],
    cams: &BTreeMap<String, NormalizedCam>,
    t: f64,
    patch_frac: f64,
) -> Result<(PatchManifest, Vec<Patch>, Histogram)> {
    let missing: Vec<&str> = images
        .iter()
        .filter(|r| !cams.contains_key(&r.image_id))
        .map(|r| r.image_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid("cams", format!("no CAM for {}", missing.join(", "))));
    }
    threshold_label(0.0, t)?;
    if !(patch_frac > 0.0 && patch_frac <= 1.0) {
        return Err(Error::invalid("patch_frac", format!("{patch_frac} outside (0, 1]")));
    }
    let Some(first) = images.first() else {
        return Err(Error::invalid("images", "empty"));
    };
    let s = first.size();
    let p = (s as f64 * patch_frac).round() as usize;
    let cam_side = cams[&first.image_id].side().0;
    let pc = ((p * cam_side) as f64 / s as f64).round().max(1.0) as usize;

    let per_image = images
        .par_iter()
        .map(|img| -> Result<Vec<Patch>> {
            if img.size() != s {
                return Err(Error::shape("build_dataset", format!("{} has side {}, expected {s}", img.image_id, img.size())));
            }
            let cam = &cams[&img.image_id];
            if cam.side() != (cam_side, cam_side) {
                return Err(Error::shape("build_dataset", format!("CAM of {} is {:?}", img.image_id, cam.side())));
            }
            let (pixels, cam) = align_flip(img, cam);
            let mask = match img.laterality {
                Laterality::Left => img.gt_lesion_mask.clone(),
                Laterality::Right => img.gt_lesion_mask.flip_last_axis(),
            };
            let crops = five_crop(&pixels, p)?;
            crops
                .into_iter()
                .map(|(pos, patch)| {
                    let (cy, cx) = pos.anchor(cam_side, pc);
                    let lesion_score = score_patch(&crop(cam.abnormal(), cy, cx, pc), img.split, img.gt_label)?;
                    let (my, mx) = pos.anchor(s, p);
                    let lesion_pixels = crop(&mask, my, mx, p).data().iter().filter(|&&v| v > 0.5).count();
                    let patch_id = format!("{}-{}", img.image_id, pos.as_str());
                    Ok(Patch {
                        record: PatchRecord {
                            pixel_path: format!("patches/{patch_id}.pix"),
                            patch_id,
                            image_id: img.image_id.clone(),
                            patient_id: img.patient_id.clone(),
                            laterality: img.laterality,
                            split: img.split,
                            position: pos,
                            lesion_score,
                            abnormality: threshold_label(lesion_score, t)?,
                            gt_patch_abnormal: lesion_pixels >= GT_MIN_LESION_PIXELS,
                        },
                        pixels: patch,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut patches: Vec<Patch> = per_image.into_iter().flatten().collect();
    patches.sort_by(|a, b| {
        (a.record.image_id.as_str(), a.record.position).cmp(&(b.record.image_id.as_str(), b.record.position))
    });
    let records: Vec<PatchRecord> = patches.iter().map(|p| p.record.clone()).collect();
    let hist = Histogram::of(records.iter().map(|r| r.lesion_score));
    let manifest = PatchManifest {
        params: BuildParams {
            threshold: t,
            patch_frac,
            patch_side: p,
            cam_patch_side: pc,
            source_hash: source_hash(images),
        },
        records,
    };
    Ok((manifest, patches, hist))
}

/// Writes patch tensors, the JSON-lines manifest, build parameters and the
/// histogram CSV under `dir`.
pub fn write_patches(dir: &Path, manifest: &PatchManifest, patches: &[Patch], hist: &Histogram) -> Result<()> {
    fs::create_dir_all(dir.join("patches")).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    for p in patches {
        io::save_tensor(&dir.join(&p.record.pixel_path), &p.pixels)?;
    }
    for r in &manifest.records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    io::atomic_write(&dir.join(PATCH_PARAMS_FILE), serde_json::to_string_pretty(&manifest.params)?.as_bytes())?;
    io::atomic_write(&dir.join(HISTOGRAM_FILE), hist.to_csv().as_bytes())?;
    io::atomic_write(&dir.join(PATCH_MANIFEST_FILE), lines.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<PatchManifest> {
    let params: BuildParams = serde_json::from_slice(&io::read_file(&dir.join(PATCH_PARAMS_FILE))?)?;
    let records = read_jsonl(&dir.join(PATCH_MANIFEST_FILE))?;
    Ok(PatchManifest { params, records })
}

/// Loads manifest records and their pixels.
pub fn read_patches(dir: &Path) -> Result<(PatchManifest, Vec<Patch>)> {
    let manifest = read_manifest(dir)?;
    let patches = manifest
        .records
        .par_iter()
        .map(|r| {
            Ok(Patch {
                pixels: io::load_tensor(&dir.join(&r.pixel_path))?,
                record: r.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, patches))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeler::normalize_cam;
    use crate::synth::{generate_dataset, mirror_check, SynthConfig};

    fn uniform_cam(side: usize, v: f64) -> NormalizedCam {
        NormalizedCam::from_values(Tensor::full(&[side, side], v)).unwrap()
    }

    #[test]
    fn anchors_follow_the_geometry_rule() {
        let anchors: Vec<_> = Position::ALL.iter().map(|p| p.anchor(64, 32)).collect();
        assert_eq!(anchors, [(0, 0), (0, 32), (16, 16), (32, 0), (32, 32)]);
        assert_eq!(Position::C.anchor(16, 8), (4, 4));
        assert_eq!(Position::C.anchor(7, 4), (1, 1));
    }

    #[test]
    fn full_size_crops_equal_the_image() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| i as f64);
        for (_, c) in five_crop(&img, 8).unwrap() {
            assert_eq!(c, img);
        }
        assert!(five_crop(&img, 9).is_err());
    }

    #[test]
    fn corner_crops_tile_the_image_once() {
        let s = 10;
        let mut cover = vec![0u32; s * s];
        for pos in [Position::Tl, Position::Tr, Position::Bl, Position::Br] {
            let (y, x) = pos.anchor(s, s / 2);
            for yy in y..y + s / 2 {
                for xx in x..x + s / 2 {
                    cover[yy * s + xx] += 1;
                }
            }
        }
        assert!(cover.iter().all(|&c| c == 1));
    }

    #[test]
    fn scoring_rules() {
        let crop = Tensor::new(vec![2, 2], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        assert!((score_patch(&crop, Split::Unlabeled, Diagnosis::Abnormal).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(score_patch(&Tensor::full(&[3, 3], 0.3), Split::Unlabeled, Diagnosis::Normal).unwrap(), 0.3);
        assert_eq!(score_patch(&crop, Split::Labeled, Diagnosis::Normal).unwrap(), 0.0);
        assert!(score_patch(&Tensor::zeros(&[0, 0]), Split::Unlabeled, Diagnosis::Normal).is_err());
    }

    #[test]
    fn threshold_is_inclusive_and_range_checked() {
        assert_eq!(threshold_label(0.4, 0.4).unwrap(), Diagnosis::Abnormal);
        assert_eq!(threshold_label(0.4 - 1e-12, 0.4).unwrap(), Diagnosis::Normal);
        assert_eq!(threshold_label(0.0, 0.1).unwrap(), Diagnosis::Normal);
        assert!(threshold_label(1.1, 0.4).is_err());
        assert!(threshold_label(0.5, -0.1).is_err());
    }

    #[test]
    fn histogram_bins() {
        let h = Histogram::of([0.0, 0.05, 0.1, 0.95, 1.0]);
        assert_eq!(h.counts, [2, 1, 0, 0, 0, 0, 0, 0, 0, 2]);
        assert!(h.to_csv().starts_with("bin_start,bin_end,count\n0.0,0.1,2\n"));
    }

    fn tiny_dataset(lesion_rate: f64) -> Vec<ImageRecord> {
        generate_dataset(&SynthConfig {
            n_patients_labeled: 3,
            n_patients_unlabeled: 3,
            lesion_rate,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn flipped_right_template_matches_left() {
        let data = tiny_dataset(0.5);
        let cam = uniform_cam(16, 0.5);
        for pair in data.chunks(2) {
            let (l, r) = (&pair[0], &pair[1]);
            assert!(mirror_check(l, r).unwrap());
            let (_, flipped) = align_flip(r, &cam);
            assert_eq!(flipped, cam);
            assert_eq!(r.pre_noise_template().flip_last_axis(), l.pre_noise_template());
            assert_eq!(align_flip(l, &cam).0, l.pixels);
        }
    }

    #[test]
    fn build_produces_five_sorted_patches_per_image() {
        let data = tiny_dataset(0.5);
        let cams: BTreeMap<_, _> = data.iter().map(|r| (r.image_id.clone(), uniform_cam(16, 0.45))).collect();
        let (m, patches, hist) = build_dataset(&data, &cams, 0.4, 0.5).unwrap();
        assert_eq!(m.records.len(), 5 * data.len());
        assert_eq!(patches[0].pixels.shape(), [3, 32, 32]);
        assert_eq!(m.params.cam_patch_side, 8);
        assert_eq!(hist.counts.iter().sum::<usize>(), m.records.len());
        for r in &m.records {
            let expect = if r.split == Split::Labeled && data.iter().any(|d| d.image_id == r.image_id && d.gt_label == Diagnosis::Normal) {
                0.0
            } else {
                0.45
            };
            assert!((r.lesion_score - expect).abs() < 1e-12);
        }
        let mut prev = usize::MAX;
        for k in 0..=10 {
            let n = m.relabel(k as f64 / 10.0).unwrap().abnormal_count();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn labeled_normals_fall_in_the_first_bin() {
        let data: Vec<_> = generate_dataset(&SynthConfig {
            n_patients_labeled: 4,
            n_patients_unlabeled: 0,
            lesion_rate: 0.0,
            ..SynthConfig::default()
        })
        .unwrap();
        let ones = Tensor::full(&[16, 16], 3.0);
        let cams = data
            .iter()
            .map(|r| (r.image_id.clone(), normalize_cam(&ones, &Tensor::zeros(&[16, 16])).unwrap()))
            .collect();
        let (_, _, hist) = build_dataset(&data, &cams, 0.4, 0.5).unwrap();
        assert_eq!(hist.counts[0], 5 * data.len());
    }

    #[test]
    fn missing_cams_are_listed() {
        let data = tiny_dataset(0.0);
        let err = build_dataset(&data, &BTreeMap::new(), 0.4, 0.5).unwrap_err();
        assert!(err.to_string().contains(&data[0].image_id));
    }

    #[test]
    fn disk_roundtrip() {
        let data = tiny_dataset(0.5);
        let cams: BTreeMap<_, _> = data.iter().map(|r| (r.image_id.clone(), uniform_cam(16, 0.7))).collect();
        let (m, patches, hist) = build_dataset(&data, &cams, 0.4, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_patches(dir.path(), &m, &patches, &hist).unwrap();
        let (m2, p2) = read_patches(dir.path()).unwrap();
        assert_eq!(m2, m);
        assert_eq!(p2[7].pixels, patches[7].pixels);
    }
}
