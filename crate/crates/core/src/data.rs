//! Synthetic tiny-object scenes with a heavy-tailed instance-count
//! distribution.
//!
//! Each scene is a noisy background with small axis-aligned colored blobs;
//! the blob count per image follows a log-normal model moment-matched to a
//! target mean/std and clamped at a maximum. Counts are drawn by
//! stratified inversion — one jittered quantile stratum per image, with a
//! seeded permutation assigning strata to images — so even modest corpora
//! reproduce the target moments tightly despite the distribution's huge
//! kurtosis. Everything derives from `(seed, image index)`, so any image
//! can be regenerated bit-identically in isolation.
//!
//! Also here: a small binary image container (`TDIM`) and COCO-flavored
//! JSON annotations for interoperability.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::matching::GroundTruth;
use crate::tensor::Tensor;

/// Per-image instance-count model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CountModel {
    /// Log-normal moment-matched so that (before clamping at `max`) the
    /// count has the given mean and standard deviation.
    LogNormal { mean: f64, std: f64, max: usize },
    /// Every image holds exactly `count` objects.
    Fixed { count: usize },
    /// Images cycle round-robin through inclusive count ranges — one per
    /// count level — giving a level-balanced corpus.
    PerLevel { ranges: Vec<(usize, usize)> },
}

impl CountModel {
    fn validate(&self) -> Result<()> {
        match self {
            CountModel::LogNormal { mean, std, max } => {
                if !(mean.is_finite() && *mean > 0.0 && std.is_finite() && *std > 0.0) {
                    return Err(Error::Config(format!(
                        "log-normal count model needs positive mean/std, got {mean}/{std}"
                    )));
                }
                if *max == 0 {
                    return Err(Error::Config("count clamp must be at least 1".to_string()));
                }
            }
            CountModel::Fixed { .. } => {}
            CountModel::PerLevel { ranges } => {
                if ranges.is_empty() || ranges.iter().any(|&(lo, hi)| lo > hi) {
                    return Err(Error::Config(format!(
                        "per-level ranges must be non-empty with lo ≤ hi, got {ranges:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Underlying normal parameters (μ, σ) for the log-normal model:
    /// σ² = ln(1 + (std/mean)²), μ = ln(mean) − σ²/2.
    pub fn lognormal_params(&self) -> Option<(f64, f64)> {
        match self {
            CountModel::LogNormal { mean, std, .. } => {
                let sigma2 = (1.0 + (std / mean).powi(2)).ln();
                Some(((mean).ln() - sigma2 / 2.0, sigma2.sqrt()))
            }
            _ => None,
        }
    }
}

/// Recipe for one synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Image channels; blob colors are one-hot-ish over channels.
    pub channels: usize,
    /// Distinct object classes.
    pub num_classes: usize,
    /// Inclusive blob extent range in pixels (width and height drawn
    /// independently).
    pub blob_size: (usize, usize),
    /// Instance-count model.
    pub counts: CountModel,
    /// Background noise amplitude in [0, 1).
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> SceneSpec {
        SceneSpec {
            image_size: 128,
            channels: 3,
            num_classes: 3,
            blob_size: (2, 5),
            counts: CountModel::LogNormal { mean: 24.64, std: 63.94, max: 2267 },
            noise: 0.2,
        }
    }
}

impl SceneSpec {
    /// Validates the recipe.
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.blob_size;
        if self.image_size < 8 {
            return Err(Error::Config(format!("image size {} too small", self.image_size)));
        }
        if self.channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("need at least one channel and one class".to_string()));
        }
        if lo < 1 || lo > hi || hi * 4 > self.image_size {
            return Err(Error::Config(format!(
                "blob sizes [{lo}, {hi}] must fit 1 ≤ lo ≤ hi ≤ image/4 = {}",
                self.image_size / 4
            )));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 1)", self.noise)));
        }
        self.counts.validate()
    }
}

/// One rendered scene.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Pixel data `[channels, size, size]` in [0, 1].
    pub image: Tensor,
    /// Normalized center-form boxes and classes.
    pub gt: GroundTruth,
    /// Index within its corpus.
    pub index: usize,
}

/// A deterministic corpus: counts are fixed up front (stratified for the
/// log-normal model), pixels are rendered on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    spec: SceneSpec,
    seed: u64,
    counts: Vec<usize>,
}

/// Stream ids: 0 drives corpus-level choices; each image gets one stream
/// for count planning and a separate one for rendering, so the two can
/// never interleave.
const CORPUS_STREAM: u64 = 0;

fn plan_stream(index: usize) -> u64 {
    1 + 2 * index as u64
}

fn render_stream(index: usize) -> u64 {
    2 + 2 * index as u64
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Dataset {
    /// Plans a corpus of `len` images.
    pub fn new(spec: SceneSpec, seed: u64, len: usize) -> Result<Dataset> {
        spec.validate()?;
        if len == 0 {
            return Err(Error::Config("corpus needs at least one image".to_string()));
        }
        let counts = match &spec.counts {
            CountModel::Fixed { count } => vec![*count; len],
            CountModel::PerLevel { ranges } => {
                let mut counts = Vec::with_capacity(len);
                for i in 0..len {
                    let (lo, hi) = ranges[i % ranges.len()];
                    let mut rng = stream_rng(seed, plan_stream(i));
                    counts.push(rng.gen_range(lo..=hi));
                }
                counts
            }
            CountModel::LogNormal { max, .. } => {
                let (mu, sigma) = spec.counts.lognormal_params().unwrap();
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                // One quantile stratum per image, shuffled so count has no
                // relation to position in the corpus.
                let mut strata: Vec<usize> = (0..len).collect();
                let mut corpus_rng = stream_rng(seed, CORPUS_STREAM);
                for i in (1..len).rev() {
                    let j = corpus_rng.gen_range(0..=i);
                    strata.swap(i, j);
                }
                let mut counts = Vec::with_capacity(len);
                for (i, &stratum) in strata.iter().enumerate() {
                    let mut rng = stream_rng(seed, plan_stream(i));
                    let jitter: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
                    let u = (stratum as f64 + jitter) / len as f64;
                    let value = (mu + sigma * normal.inverse_cdf(u)).exp();
                    counts.push((value.round() as usize).min(*max));
                }
                counts
            }
        };
        Ok(Dataset { spec, seed, counts })
    }

    /// The recipe this corpus was planned from.
    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// Corpus seed.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Images in the corpus.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    /// True when the corpus has no images (cannot be constructed).
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Planned instance count per image.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Renders image `index` deterministically; the same `(spec, seed,
    /// index)` always yields bit-identical pixels and annotations.
    pub fn image(&self, index: usize) -> Result<Scene> {
        let count = *self
            .counts
            .get(index)
            .ok_or_else(|| Error::Config(format!("image {index} outside corpus of {}", self.len())))?;
        let spec = &self.spec;
        let (c, s) = (spec.channels, spec.image_size);
        let mut rng = stream_rng(self.seed, render_stream(index));

        let mut data = vec![0.0f64; c * s * s];
        for v in data.iter_mut() {
            *v = spec.noise * rng.gen::<f64>();
        }

        let (lo, hi) = spec.blob_size;
        let mut boxes = Vec::with_capacity(count);
        let mut classes = Vec::with_capacity(count);
        let mut rects: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(count);
        for _ in 0..count {
            let bw = rng.gen_range(lo..=hi);
            let bh = rng.gen_range(lo..=hi);
            let class = rng.gen_range(0..spec.num_classes);
            let intensity = 0.75 + 0.25 * rng.gen::<f64>();
            // Prefer a spot that does not touch existing blobs; fall back
            // to overlap so the planned count always renders.
            let mut x0 = 0;
            let mut y0 = 0;
            for attempt in 0..40 {
                x0 = rng.gen_range(0..=s - bw);
                y0 = rng.gen_range(0..=s - bh);
                let clear = rects
                    .iter()
                    .all(|&(rx, ry, rw, rh)| x0 + bw <= rx || rx + rw <= x0 || y0 + bh <= ry || ry + rh <= y0);
                if clear || attempt == 39 {
                    break;
                }
            }
            rects.push((x0, y0, bw, bh));
            for ch in 0..c {
                let base = if ch == class % c { 1.0 } else { 0.1 };
                let value = base * intensity;
                for y in y0..y0 + bh {
                    for x in x0..x0 + bw {
                        data[(ch * s + y) * s + x] = value;
                    }
                }
            }
            boxes.push([
                (x0 as f64 + bw as f64 / 2.0) / s as f64,
                (y0 as f64 + bh as f64 / 2.0) / s as f64,
                bw as f64 / s as f64,
                bh as f64 / s as f64,
            ]);
            classes.push(class);
        }
        Ok(Scene {
            image: Tensor::from_vec(&[c, s, s], data)?,
            gt: GroundTruth::new(boxes, classes)?,
            index,
        })
    }
}

// --- binary image container -------------------------------------------------

const TDIM_MAGIC: &[u8; 4] = b"TDIM";
const TDIM_VERSION: u16 = 1;

/// Writes an image tensor (`[c, h, w]`) as a TDIM file: magic, version,
/// dimensions, then row-major little-endian f64 samples.
pub fn write_tdim(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        ref other => {
            return Err(Error::shape(
                "write_tdim",
                format!("expected [c,h,w] image, got {:?}", other),
            ))
        }
    };
    let mut out = Vec::with_capacity(4 + 2 + 12 + image.numel() * 8);
    out.extend_from_slice(TDIM_MAGIC);
    out.extend_from_slice(&TDIM_VERSION.to_le_bytes());
    for dim in [c, h, w] {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::Config(format!("dimension {dim} exceeds the format limit")))?;
        out.extend_from_slice(&dim.to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Reads a TDIM file back into a `[c, h, w]` tensor. Malformed input
/// fails with the byte offset where parsing stopped.
pub fn read_tdim(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let parse_err = |offset: usize, message: String| Error::Parse { offset: offset as u64, message };

    if bytes.len() < 4 || &bytes[..4] != TDIM_MAGIC {
        return Err(parse_err(0, "missing TDIM magic".to_string()));
    }
    if bytes.len() < 6 {
        return Err(parse_err(4, "truncated before version".to_string()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TDIM_VERSION {
        return Err(parse_err(4, format!("unsupported version {version}")));
    }
    if bytes.len() < 18 {
        return Err(parse_err(6, "truncated before dimensions".to_string()));
    }
    let mut dims = [0usize; 3];
    for (i, dim) in dims.iter_mut().enumerate() {
        let at = 6 + 4 * i;
        *dim = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        if *dim == 0 {
            return Err(parse_err(at, "zero dimension".to_string()));
        }
    }
    let numel = dims[0] * dims[1] * dims[2];
    let expect = 18 + numel * 8;
    if bytes.len() != expect {
        return Err(parse_err(
            bytes.len().min(expect),
            format!("expected {expect} bytes for {dims:?}, found {}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let at = 18 + 8 * i;
        let v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        if !v.is_finite() {
            return Err(parse_err(at, format!("non-finite sample {v}")));
        }
        data.push(v);
    }
    Tensor::from_vec(&dims, data)
}

// --- JSON annotations --------------------------------------------------------

/// COCO-flavored annotation file: images, object annotations with
/// top-left-corner pixel boxes, and the category list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: usize,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: usize,
    pub image_id: usize,
    pub category_id: usize,
    /// `[x, y, width, height]` in pixels, top-left origin.
    pub bbox: [f64; 4],
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: usize,
    pub name: String,
}

/// Builds the annotation table for a corpus (rendering each image's
/// ground truth; pixels are not touched).
pub fn annotations_for(dataset: &Dataset, file_names: &[String]) -> Result<AnnotationFile> {
    if file_names.len() != dataset.len() {
        return Err(Error::Config(format!(
            "{} file names for {} images",
            file_names.len(),
            dataset.len()
        )));
    }
    let size = dataset.spec().image_size as f64;
    let mut images = Vec::with_capacity(dataset.len());
    let mut annotations = Vec::new();
    for (i, file_name) in file_names.iter().enumerate() {
        let scene = dataset.image(i)?;
        images.push(ImageInfo {
            id: i,
            file_name: file_name.clone(),
            width: dataset.spec().image_size,
            height: dataset.spec().image_size,
        });
        for (b, &class) in scene.gt.boxes().iter().zip(scene.gt.classes()) {
            let w = b[2] * size;
            let h = b[3] * size;
            annotations.push(AnnotationRecord {
                id: annotations.len(),
                image_id: i,
                category_id: class,
                bbox: [b[0] * size - w / 2.0, b[1] * size - h / 2.0, w, h],
                area: w * h,
            });
        }
    }
    let categories = (0..dataset.spec().num_classes)
        .map(|c| CategoryRecord { id: c, name: format!("class{c}") })
        .collect();
    Ok(AnnotationFile { images, annotations, categories })
}

/// Serializes annotations as pretty JSON.
pub fn write_annotations(path: &Path, file: &AnnotationFile) -> Result<()> {
    let json = serde_json::to_vec_pretty(file)?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Reads an annotation file back.
pub fn read_annotations(path: &Path) -> Result<AnnotationFile> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}
