//! Corpus builder: writes PNG images, JSON-lines annotations and a manifest
//! with per-file checksums. Target-train annotations are withheld; eval
//! ground truth lives under `oracle/` where the training pipeline never
//! looks.

use std::path::Path;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, ImageSample, SceneSpec};
use super::shift::{
    apply_compound_member, apply_domain_shift, CompoundMember, DomainShift, ShiftKind,
};
use crate::detect::BoxF;
use crate::error::{Error, Result};
use crate::model::{file_digest, write_file};
use crate::rng::{child_seed, labeled_seed};

fn default_image_size() -> usize {
    128
}
fn default_max_objects() -> usize {
    3
}
fn default_source_train() -> usize {
    512
}
fn default_target_train() -> usize {
    128
}
fn default_target_eval() -> usize {
    128
}
fn default_kind() -> ShiftKind {
    ShiftKind::Night
}
fn default_severity() -> f64 {
    0.85
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub master_seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Objects per scene are drawn uniformly from 1..=max_objects.
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    #[serde(default = "default_source_train")]
    pub n_source_train: usize,
    #[serde(default = "default_target_train")]
    pub n_target_train: usize,
    #[serde(default = "default_target_eval")]
    pub n_target_eval: usize,
    #[serde(default = "default_kind")]
    pub target_kind: ShiftKind,
    #[serde(default = "default_severity")]
    pub severity: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            image_size: default_image_size(),
            max_objects: default_max_objects(),
            n_source_train: default_source_train(),
            n_target_train: default_target_train(),
            n_target_eval: default_target_eval(),
            target_kind: default_kind(),
            severity: default_severity(),
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.n_source_train == 0 || self.n_target_train == 0 || self.n_target_eval == 0 {
            return Err(Error::InvalidConfig("zero-sized split".into()));
        }
        if self.max_objects == 0 {
            return Err(Error::InvalidConfig("max_objects must be >= 1".into()));
        }
        Ok(())
    }
}

/// One annotation line: coordinates are pixel floats, x1<x2, y1<y2, origin
/// top-left. Target-train records carry empty boxes/classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnRecord {
    pub file: String,
    pub domain: u8,
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub split: String,
    pub domain: u8,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub master_seed: u64,
    pub files: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn split_entries(&self, split: &str) -> Vec<&ManifestEntry> {
        self.files.iter().filter(|e| e.split == split).collect()
    }

    pub fn splits(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for e in &self.files {
            if e.path.ends_with(".png") && !names.contains(&e.split) {
                names.push(e.split.clone());
            }
        }
        names
    }
}

pub fn image_to_png_bytes(image: &Array3<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = image.dim();
    debug_assert_eq!(c, 3);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image[[0, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (image[[1, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (image[[2, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut bytes = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut bytes);
    use image::ImageEncoder;
    encoder
        .write_image(buf.as_raw(), w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(Error::Image)?;
    Ok(bytes)
}

pub fn png_bytes_to_image(bytes: &[u8]) -> Result<Array3<f64>> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

fn scene_for(cfg: &CorpusConfig, stream: &str, index: usize) -> Result<ImageSample> {
    let seed = child_seed(labeled_seed(cfg.master_seed, stream), index as u64);
    let mut n_rng = crate::rng::rng_from_seed(child_seed(seed, 0xA11CE));
    use rand::Rng;
    let n_objects = n_rng.gen_range(1..=cfg.max_objects);
    let background = (index % 4) as u8;
    generate_scene(&SceneSpec::new(cfg.image_size, n_objects, background, seed))
}

struct BuiltImage {
    rel_path: String,
    split: String,
    domain: u8,
    png: Vec<u8>,
    record: AnnRecord,
}

fn boxes_to_arrays(boxes: &[BoxF]) -> Vec<[f64; 4]> {
    boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect()
}

fn build_split<F>(
    split: &str,
    count: usize,
    with_annotations: bool,
    make: F,
) -> Result<Vec<BuiltImage>>
where
    F: Fn(usize) -> Result<ImageSample> + Sync,
{
    (0..count)
        .into_par_iter()
        .map(|i| {
            let sample = make(i)?;
            let rel_path = format!("images/{split}/img_{i:05}.png");
            let png = image_to_png_bytes(&sample.image)?;
            let (domain, boxes, classes) = if with_annotations {
                (
                    sample.domain,
                    boxes_to_arrays(&sample.boxes),
                    sample.class_ids.clone(),
                )
            } else {
                (1, Vec::new(), Vec::new())
            };
            Ok(BuiltImage {
                rel_path: rel_path.clone(),
                split: split.to_string(),
                domain,
                png,
                record: AnnRecord {
                    file: rel_path,
                    domain,
                    boxes,
                    classes,
                },
            })
        })
        .collect()
}

/// Generate the full corpus under `out_dir` and return (and persist) the
/// manifest. Deterministic in `config.master_seed`.
pub fn build_corpus(config: &CorpusConfig, out_dir: &Path) -> Result<CorpusManifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut splits: Vec<(Vec<BuiltImage>, &str, bool)> = Vec::new();

    // labeled source scenes
    let source = build_split("source_train", config.n_source_train, true, |i| {
        scene_for(config, "source_train", i)
    })?;
    splits.push((source, "annotations", true));

    // unlabeled target training split
    let tt = build_split("target_train", config.n_target_train, false, |i| {
        let clean = scene_for(config, "target_train", i)?;
        let seed = child_seed(labeled_seed(config.master_seed, "target_train_shift"), i as u64);
        let shifted = apply_domain_shift(
            &clean,
            &DomainShift::new(config.target_kind, config.severity, seed),
        )?;
        Ok(ImageSample::unlabeled_target(shifted.image))
    })?;
    splits.push((tt, "annotations", false));

    // eval splits with oracle annotations
    let eval_kinds: Vec<(String, Option<CompoundMember>)> = match config.target_kind {
        ShiftKind::Compound => vec![
            ("target_eval_compound".to_string(), None),
            ("target_eval_dusk".to_string(), Some(CompoundMember::RainOnDusk)),
            (
                "target_eval_night".to_string(),
                Some(CompoundMember::RainOnNight),
            ),
        ],
        _ => vec![("target_eval".to_string(), None)],
    };
    for (split_name, member) in &eval_kinds {
        let split_name_owned = split_name.clone();
        let member = *member;
        let built = build_split(&split_name_owned, config.n_target_eval, true, |i| {
            let clean = scene_for(config, &split_name_owned, i)?;
            let seed = child_seed(
                labeled_seed(config.master_seed, &format!("{split_name_owned}_shift")),
                i as u64,
            );
            let mut shifted = match member {
                Some(m) => apply_compound_member(&clean, m, config.severity, seed)?,
                None => apply_domain_shift(
                    &clean,
                    &DomainShift::new(config.target_kind, config.severity, seed),
                )?,
            };
            shifted.domain = 1; // annotations retained for the oracle file only
            Ok(shifted)
        })?;
        splits.push((built, "oracle", true));
    }

    let mut manifest_files: Vec<ManifestEntry> = Vec::new();
    for (images, ann_dir, _with_ann) in &splits {
        if images.is_empty() {
            continue;
        }
        let split = images[0].split.clone();
        let mut jsonl = String::new();
        for img in images {
            let path = out_dir.join(&img.rel_path);
            write_file(&path, &img.png)?;
            manifest_files.push(ManifestEntry {
                path: img.rel_path.clone(),
                split: split.clone(),
                domain: img.domain,
                sha256: crate::model::hex_digest(&img.png),
            });
            jsonl.push_str(&serde_json::to_string(&img.record)?);
            jsonl.push('\n');
        }
        let ann_rel = format!("{ann_dir}/{split}.jsonl");
        let ann_path = out_dir.join(&ann_rel);
        write_file(&ann_path, jsonl.as_bytes())?;
        manifest_files.push(ManifestEntry {
            path: ann_rel,
            split,
            domain: images[0].domain,
            sha256: crate::model::hex_digest(jsonl.as_bytes()),
        });
    }

    let manifest = CorpusManifest {
        config: config.clone(),
        master_seed: config.master_seed,
        files: manifest_files,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)?;
    write_file(&out_dir.join("manifest.json"), manifest_json.as_bytes())?;
    Ok(manifest)
}

// ----- loading -----

#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub file: String,
    pub domain: u8,
    pub boxes: Vec<BoxF>,
    pub class_ids: Vec<usize>,
    pixels: Vec<u8>,
    height: usize,
    width: usize,
}

impl LoadedSample {
    /// Decode to the float image on demand; keeps the resident set small.
    pub fn to_image(&self) -> Array3<f64> {
        let mut out = Array3::zeros((3, self.height, self.width));
        for y in 0..self.height {
            for x in 0..self.width {
                let base = (y * self.width + x) * 3;
                for c in 0..3 {
                    out[[c, y, x]] = self.pixels[base + c] as f64 / 255.0;
                }
            }
        }
        out
    }
}

pub fn open_manifest(corpus_root: &Path) -> Result<CorpusManifest> {
    let path = corpus_root.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Load a split via its annotation file (`annotations/<split>.jsonl` for
/// training splits, `oracle/<split>.jsonl` for eval splits).
pub fn load_split(corpus_root: &Path, ann_rel: &str) -> Result<Vec<LoadedSample>> {
    let ann_path = corpus_root.join(ann_rel);
    let text = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let records: Vec<AnnRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    records
        .par_iter()
        .map(|rec| {
            let img_path = corpus_root.join(&rec.file);
            let bytes = std::fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
            let rgb = image::load_from_memory(&bytes)?.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            Ok(LoadedSample {
                file: rec.file.clone(),
                domain: rec.domain,
                boxes: rec
                    .boxes
                    .iter()
                    .map(|b| BoxF::new(b[0], b[1], b[2], b[3]))
                    .collect(),
                class_ids: rec.classes.clone(),
                pixels: rgb.into_raw(),
                height: h,
                width: w,
            })
        })
        .collect()
}

/// Locate the annotation file for a split name, preferring the training
/// annotations and falling back to the oracle directory.
pub fn split_annotation_path(corpus_root: &Path, split: &str) -> Result<String> {
    for dir in ["annotations", "oracle"] {
        let rel = format!("{dir}/{split}.jsonl");
        if corpus_root.join(&rel).exists() {
            return Ok(rel);
        }
    }
    Err(Error::Corpus(format!(
        "no annotation file for split {split} under {}",
        corpus_root.display()
    )))
}

pub fn checkpoint_of_manifest(manifest: &CorpusManifest) -> Result<String> {
    Ok(crate::model::hex_digest(
        serde_json::to_string(manifest)?.as_bytes(),
    ))
}

/// Digest of all files listed in the manifest (content hash of the corpus).
pub fn corpus_digest(corpus_root: &Path) -> Result<String> {
    let manifest = open_manifest(corpus_root)?;
    let mut all = String::new();
    for e in &manifest.files {
        let actual = file_digest(&corpus_root.join(&e.path))?;
        all.push_str(&e.path);
        all.push(':');
        all.push_str(&actual);
        all.push('\n');
    }
    Ok(crate::model::hex_digest(all.as_bytes()))
}
