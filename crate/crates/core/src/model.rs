//! The assembled detection model and its configuration.
//!
//! A forward pass runs: backbone pyramid → flatten → encoder → (optional)
//! density extraction and count-level prediction on the finest memory level
//! → (optional) density-guided gating of every memory level → query
//! selection with a count-dependent or fixed budget → decoder with
//! iterative box refinement. The counting and gating branches are
//! independently switchable so component contributions can be measured;
//! both depend on the density features, so they require the counting
//! branch.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::counting::{
    counting_loss, predicted_level, regression_level, regression_loss, CountLevel, DensityHead,
    LevelThresholds, QueryBudget,
};
use crate::enhance::FeatureGates;
use crate::error::{Error, Result};
use crate::init::ParamVisitor;
use crate::metrics::Detection;
use crate::pyramid::{flatten_levels, Backbone, PyramidLevel};
use crate::query::{dynamic_pipeline, QuerySet, SelectionHead};
use crate::tensor::{sigmoid_scalar, Tensor};
use crate::transformer::{DecoderOutput, Transformer};

/// How the counting branch summarizes the density features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountingMode {
    /// Per-level logits trained with cross-entropy against the binned
    /// ground-truth count.
    Classification,
    /// A single `ln(1 + count)` estimate trained with squared error; the
    /// estimate is binned through the same thresholds when a level is
    /// needed.
    Regression,
}

/// Model architecture and component toggles.
///
/// Defaults describe the small reference setup: 32-wide features over a
/// three-level pyramid of a 64×64 image, with counting, gating and dynamic
/// query budgets all enabled.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input image channels.
    pub channels: usize,
    /// Feature width `d` throughout the model.
    pub width: usize,
    /// Attention heads.
    pub heads: usize,
    /// Encoder layers.
    pub encoder_layers: usize,
    /// Decoder layers.
    pub decoder_layers: usize,
    /// Pyramid levels; level 0 is the finest.
    pub pyramid_levels: usize,
    /// Downsampling of the first backbone stage (2 or 4); later stages
    /// halve.
    pub initial_stride: usize,
    /// Hidden width of the count classifier.
    pub density_hidden: usize,
    /// Channel-gate bottleneck divisor.
    pub gate_reduction: usize,
    /// Anchor extent at level 0 as a fraction of the image; doubles per
    /// level.
    pub base_anchor_scale: f64,
    /// Object classes.
    pub num_classes: usize,
    /// Count-level boundaries (a count `c` falls in the first level whose
    /// cut exceeds it).
    pub count_cuts: Vec<f64>,
    /// Query budget per count level; must have `count_cuts.len() + 1`
    /// entries when dynamic budgets are enabled.
    pub query_budgets: Vec<usize>,
    /// Enables the counting branch (density extraction + count prediction).
    pub use_counting: bool,
    /// Enables density-guided feature gating. Requires `use_counting`.
    pub use_enhancement: bool,
    /// Enables count-dependent query budgets. Requires `use_counting`.
    pub use_dynamic_queries: bool,
    /// Query count when dynamic budgets are disabled.
    pub fixed_queries: usize,
    /// Counting head flavor.
    pub counting_mode: CountingMode,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            channels: 3,
            width: 32,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            pyramid_levels: 3,
            initial_stride: 4,
            density_hidden: 32,
            gate_reduction: 4,
            base_anchor_scale: 0.05,
            num_classes: 3,
            count_cuts: vec![1.0, 10.0, 50.0],
            query_budgets: vec![30, 50, 90, 150],
            use_counting: true,
            use_enhancement: true,
            use_dynamic_queries: true,
            fixed_queries: 90,
            counting_mode: CountingMode::Classification,
        }
    }
}

impl ModelConfig {
    /// Checks cross-field consistency. Per-component numeric constraints
    /// are enforced again by the component constructors.
    pub fn validate(&self) -> Result<()> {
        if self.use_enhancement && !self.use_counting {
            return Err(Error::Config(
                "feature gating needs the counting branch's density features".to_string(),
            ));
        }
        if self.use_dynamic_queries && !self.use_counting {
            return Err(Error::Config(
                "dynamic query budgets need the counting branch's level prediction".to_string(),
            ));
        }
        if self.use_counting && self.count_cuts.is_empty() {
            return Err(Error::Config(
                "counting needs at least one count-level boundary".to_string(),
            ));
        }
        if self.use_dynamic_queries && self.query_budgets.len() != self.count_cuts.len() + 1 {
            return Err(Error::Config(format!(
                "{} count cuts define {} levels but {} budgets were given",
                self.count_cuts.len(),
                self.count_cuts.len() + 1,
                self.query_budgets.len()
            )));
        }
        if !self.use_dynamic_queries && self.fixed_queries == 0 {
            return Err(Error::Config(
                "fixed query count must be at least one".to_string(),
            ));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::Config("need at least one pyramid level".to_string()));
        }
        let coarsest = self.base_anchor_scale * (1u64 << (self.pyramid_levels - 1)) as f64;
        if !(self.base_anchor_scale > 0.0 && coarsest < 1.0) {
            return Err(Error::Config(format!(
                "base anchor scale {} gives coarsest anchor extent {coarsest}, outside (0, 1)",
                self.base_anchor_scale
            )));
        }
        Ok(())
    }

    /// Output width of the counting head under the configured mode.
    fn count_outputs(&self) -> usize {
        match self.counting_mode {
            CountingMode::Classification => self.count_cuts.len() + 1,
            CountingMode::Regression => 1,
        }
    }

    /// Hash over every field that determines the parameter set, used to
    /// reject checkpoints from a different architecture. Inference-side
    /// knobs (budgets, cut values, anchor scale, fixed query count) do not
    /// participate: weights remain loadable when only those change.
    pub fn arch_hash(&self) -> String {
        let fingerprint = format!(
            "channels={} width={} heads={} enc={} dec={} levels={} stride={} \
             density_hidden={} gate_reduction={} classes={} count_outputs={} \
             counting={} gating={}",
            self.channels,
            self.width,
            self.heads,
            self.encoder_layers,
            self.decoder_layers,
            self.pyramid_levels,
            self.initial_stride,
            self.density_hidden,
            self.gate_reduction,
            self.num_classes,
            if self.use_counting { self.count_outputs() } else { 0 },
            self.use_counting,
            self.use_enhancement,
        );
        let digest = Sha256::digest(fingerprint.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Per-decoder-layer class logits and boxes.
    pub decoder: DecoderOutput,
    /// The selected query set (anchors, provenance, dense selection
    /// scores).
    pub queries: QuerySet,
    /// Counting-head output: per-level logits or a single `ln(1 + count)`
    /// estimate, absent when the branch is disabled.
    pub count_output: Option<Tensor>,
    /// Count level inferred from `count_output`.
    pub predicted_level: Option<CountLevel>,
    /// Spatial extent `(h, w)` of each level of the score map in
    /// `queries.scores`, finest first; lets supervision map flat positions
    /// back to cells.
    pub level_dims: Vec<(usize, usize)>,
}

impl ModelOutput {
    /// Number of queries the pass ran with.
    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    /// Flattens the final layer into one candidate detection per
    /// (query, class) pair, with boxes scaled from the unit square to an
    /// `image_extent`-sized image. Score filtering and per-image caps are
    /// the evaluator's business.
    pub fn detections(&self, image_extent: f64) -> Result<Vec<Detection>> {
        let last = self.decoder.final_layer();
        let (k, m) = match *last.class_logits.shape() {
            [k, m] => (k, m),
            ref other => {
                return Err(Error::shape(
                    "detections",
                    format!("expected [k,classes] logits, got {other:?}"),
                ))
            }
        };
        let logits = last.class_logits.data();
        let boxes = last.boxes.data();
        let mut out = Vec::with_capacity(k * m);
        for q in 0..k {
            let b = &boxes[q * 4..q * 4 + 4];
            for c in 0..m {
                out.push(Detection {
                    bbox: [
                        b[0] * image_extent,
                        b[1] * image_extent,
                        b[2] * image_extent,
                        b[3] * image_extent,
                    ],
                    class: c,
                    score: sigmoid_scalar(logits[q * m + c]),
                });
            }
        }
        Ok(out)
    }
}

/// The assembled detector.
#[derive(Debug, Clone)]
pub struct DetectionModel {
    config: ModelConfig,
    backbone: Backbone,
    transformer: Transformer,
    density: Option<DensityHead>,
    gates: Option<FeatureGates>,
    selection: SelectionHead,
    thresholds: Option<LevelThresholds>,
    budgets: Option<QueryBudget>,
}

impl DetectionModel {
    /// Builds a fresh model. Components excluded by the toggles are not
    /// constructed at all, so they contribute no parameters.
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<DetectionModel> {
        config.validate()?;
        let backbone = Backbone::init(
            config.channels,
            config.width,
            config.pyramid_levels,
            config.initial_stride,
            rng,
        )?;
        let transformer = Transformer::init(
            config.width,
            config.heads,
            config.encoder_layers,
            config.decoder_layers,
            config.pyramid_levels,
            config.num_classes,
            rng,
        )?;
        let density = if config.use_counting {
            Some(DensityHead::init(
                config.width,
                config.density_hidden,
                config.count_outputs(),
                rng,
            )?)
        } else {
            None
        };
        let gates = if config.use_enhancement {
            Some(FeatureGates::init(config.width, config.gate_reduction, rng)?)
        } else {
            None
        };
        let selection = SelectionHead::init(config.width, config.num_classes, rng)?;
        let thresholds = if config.use_counting {
            Some(LevelThresholds::new(config.count_cuts.clone())?)
        } else {
            None
        };
        let budgets = if config.use_dynamic_queries {
            Some(QueryBudget::new(config.query_budgets.clone())?)
        } else {
            None
        };
        Ok(DetectionModel {
            config,
            backbone,
            transformer,
            density,
            gates,
            selection,
            thresholds,
            budgets,
        })
    }

    /// The configuration the model was built from.
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Count-level boundaries, present when the counting branch is on.
    pub fn thresholds(&self) -> Option<&LevelThresholds> {
        self.thresholds.as_ref()
    }

    /// Runs the full pipeline on one `[c, h, w]` image.
    pub fn forward(&self, image: &Tensor) -> Result<ModelOutput> {
        let pyramid = self.backbone.extract_pyramid(image)?;
        let flat = flatten_levels(&pyramid)?;
        let memory = self.transformer.encode(&flat)?;

        let mut active = memory.clone();
        let mut count_output = None;
        let mut level = None;
        if let Some(head) = &self.density {
            let maps = memory.unflatten()?;
            let density = head.extract_density(&maps[0])?;
            let output = head.classify_level(&density)?;
            level = Some(self.infer_level(&output)?);
            count_output = Some(output);
            if let Some(gates) = &self.gates {
                let as_levels: Vec<PyramidLevel> = maps
                    .iter()
                    .enumerate()
                    .map(|(i, map)| PyramidLevel {
                        map: map.clone(),
                        stride: self.config.initial_stride << i,
                        index: i,
                    })
                    .collect();
                let gated = gates.enhance(&as_levels, &density)?;
                let gated_levels: Vec<PyramidLevel> = gated
                    .into_iter()
                    .enumerate()
                    .map(|(i, map)| PyramidLevel {
                        map,
                        stride: self.config.initial_stride << i,
                        index: i,
                    })
                    .collect();
                active = flatten_levels(&gated_levels)?;
            }
        }

        let queries = if self.config.use_dynamic_queries {
            let budgets = self.budgets.as_ref().expect("validated with dynamic queries");
            let level = level.expect("validated: dynamic queries imply counting");
            dynamic_pipeline(
                &self.selection,
                &active,
                level,
                budgets,
                self.config.base_anchor_scale,
            )?
        } else {
            let total = active.total();
            let k = self.config.fixed_queries.min(total);
            if k < self.config.fixed_queries {
                log::debug!(
                    "fixed query count {} clamped to {total} available positions",
                    self.config.fixed_queries
                );
            }
            self.selection.select(&active, k, self.config.base_anchor_scale)?
        };
        let decoder = self.transformer.decode(&queries, &active)?;
        Ok(ModelOutput {
            decoder,
            queries,
            count_output,
            predicted_level: level,
            level_dims: active.level_dims,
        })
    }

    /// Runs only the counting path — backbone, encoder, density head —
    /// returning the head output. Used by the counting warm-up stage,
    /// which does not need queries or boxes.
    pub fn counting_forward(&self, image: &Tensor) -> Result<Tensor> {
        let head = self.density.as_ref().ok_or_else(|| {
            Error::Config("counting branch is disabled in this configuration".to_string())
        })?;
        let pyramid = self.backbone.extract_pyramid(image)?;
        let flat = flatten_levels(&pyramid)?;
        let memory = self.transformer.encode(&flat)?;
        let maps = memory.unflatten()?;
        let density = head.extract_density(&maps[0])?;
        head.classify_level(&density)
    }

    /// Counting loss for one image, `None` when the branch is disabled.
    pub fn counting_term(&self, output: &ModelOutput, gt_count: usize) -> Result<Option<Tensor>> {
        match &output.count_output {
            None => Ok(None),
            Some(out) => self.count_loss_for(out, gt_count).map(Some),
        }
    }

    /// Counting loss for a raw head output: cross-entropy against the
    /// binned count, or squared error on `ln(1 + count)` in regression
    /// mode.
    pub fn count_loss_for(&self, head_output: &Tensor, gt_count: usize) -> Result<Tensor> {
        match self.config.counting_mode {
            CountingMode::Classification => {
                let thresholds = self.thresholds.as_ref().ok_or_else(|| {
                    Error::Config("counting branch is disabled in this configuration".to_string())
                })?;
                counting_loss(head_output, thresholds.count_to_level(gt_count as f64))
            }
            CountingMode::Regression => regression_loss(head_output, gt_count),
        }
    }

    /// Count level implied by a raw counting-head output: the arg-max
    /// level in classification mode, the binned `exp(v) − 1` estimate in
    /// regression mode.
    pub fn infer_level(&self, output: &Tensor) -> Result<CountLevel> {
        match self.config.counting_mode {
            CountingMode::Classification => predicted_level(output),
            CountingMode::Regression => {
                let thresholds = self.thresholds.as_ref().ok_or_else(|| {
                    Error::Config("counting branch is disabled in this configuration".to_string())
                })?;
                regression_level(output, thresholds)
            }
        }
    }

    /// Writes all parameters to `path` (atomically, via a sibling temp
    /// file), tagged with the architecture hash.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let hash = self.config.arch_hash();
        let mut params: Vec<(String, Tensor)> = Vec::new();
        self.visit_params("model", &mut |name, t| params.push((name, t.clone())));

        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(hash.len() as u32).to_le_bytes());
        buf.extend_from_slice(hash.as_bytes());
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, tensor) in &params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &dim in tensor.shape() {
                buf.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        let tmp = path.with_extension("tmp");
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&buf)?;
        file.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Replaces all parameters with those stored at `path`. The stored
    /// architecture hash must match this model's configuration; names and
    /// shapes must match exactly.
    pub fn restore(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        let mut reader = CheckpointReader::new(&bytes);

        let magic = reader.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(reader.error_at(0, "bad magic; not a checkpoint file"));
        }
        let version = reader.u16()?;
        if version != VERSION {
            return Err(reader.error(format!("unsupported checkpoint version {version}")));
        }
        let hash_len = reader.u32()? as usize;
        let hash_bytes = reader.take(hash_len)?;
        let found = std::str::from_utf8(hash_bytes)
            .map_err(|_| reader.error("architecture hash is not valid UTF-8".to_string()))?
            .to_string();
        let expected = self.config.arch_hash();
        if found != expected {
            return Err(Error::HashMismatch { expected, found });
        }

        let count = reader.u32()? as usize;
        let mut stored: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = reader.u32()? as usize;
            let name = std::str::from_utf8(reader.take(name_len)?)
                .map_err(|_| reader.error("parameter name is not valid UTF-8".to_string()))?
                .to_string();
            let rank = reader.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(reader.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(reader.f64()?);
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(reader.error(format!("parameter {name} has non-finite values")));
            }
            if stored.insert(name.clone(), (shape, data)).is_some() {
                return Err(reader.error(format!("duplicate parameter {name}")));
            }
        }
        if !reader.exhausted() {
            return Err(reader.error("trailing bytes after the last parameter".to_string()));
        }

        let mut failure: Option<Error> = None;
        self.visit_params("model", &mut |name, slot| {
            if failure.is_some() {
                return;
            }
            match stored.remove(&name) {
                None => {
                    failure = Some(Error::Parse {
                        offset: 0,
                        message: format!("checkpoint is missing parameter {name}"),
                    });
                }
                Some((shape, data)) => {
                    if shape != slot.shape() {
                        failure = Some(Error::Parse {
                            offset: 0,
                            message: format!(
                                "parameter {name} has shape {shape:?}, expected {:?}",
                                slot.shape()
                            ),
                        });
                        return;
                    }
                    match Tensor::param(&shape, data) {
                        Ok(t) => *slot = t,
                        Err(e) => failure = Some(e),
                    }
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(name) = stored.keys().next() {
            return Err(Error::Parse {
                offset: 0,
                message: format!("checkpoint has unknown parameter {name}"),
            });
        }
        Ok(())
    }

    /// Builds a model from `config` and immediately restores the
    /// parameters stored at `path`.
    pub fn load(path: &Path, config: ModelConfig) -> Result<DetectionModel> {
        let mut model = DetectionModel::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.restore(path)?;
        Ok(model)
    }
}

impl ParamVisitor for DetectionModel {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.backbone.visit_params(&format!("{prefix}.backbone"), f);
        self.transformer.visit_params(&format!("{prefix}.transformer"), f);
        if let Some(density) = &mut self.density {
            density.visit_params(&format!("{prefix}.density"), f);
        }
        if let Some(gates) = &mut self.gates {
            gates.visit_params(&format!("{prefix}.gates"), f);
        }
        self.selection.visit_params(&format!("{prefix}.selection"), f);
    }
}

const MAGIC: &[u8] = b"TDCP";
const VERSION: u16 = 1;

/// Cursor over checkpoint bytes that reports the failing offset.
struct CheckpointReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> CheckpointReader<'a> {
    fn new(bytes: &'a [u8]) -> CheckpointReader<'a> {
        CheckpointReader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error(format!(
                "needed {n} bytes, only {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut arr = [0u8; 8];
        arr.copy_from_slice(b);
        Ok(f64::from_le_bytes(arr))
    }

    fn exhausted(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn error(&self, message: String) -> Error {
        self.error_at(self.pos as u64, message)
    }

    fn error_at(&self, offset: u64, message: impl Into<String>) -> Error {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}
