//! Shared fixtures for the benchmark suite: deterministic random tensors
//! and prebuilt model pieces, kept out of the timed sections.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tinydet_core::model::{DetectionModel, ModelConfig};
use tinydet_core::pyramid::{flatten_levels, FlattenedFeatures, PyramidLevel};
use tinydet_core::query::SelectionHead;
use tinydet_core::transformer::Transformer;
use tinydet_core::Tensor;

/// Deterministic uniform tensor in `[-0.5, 0.5)`.
pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    Tensor::from_vec(shape, data).expect("valid shape")
}

/// Deterministic cost matrix for assignment benchmarks.
pub fn random_costs(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.gen_range(0.0..10.0)).collect()
}

/// A three-level feature pyramid flattened into an encoder sequence,
/// matching the desk-scale extent of a 64×64 image (16² + 8² + 4² = 336
/// positions).
pub fn desk_features(d: usize, rng: &mut ChaCha8Rng) -> FlattenedFeatures {
    let levels: Vec<PyramidLevel> = (0..3)
        .map(|i| PyramidLevel {
            map: random_tensor(&[d, 16 >> i, 16 >> i], rng),
            stride: 4 << i,
            index: i,
        })
        .collect();
    flatten_levels(&levels).expect("valid levels")
}

/// Selection head and transformer sized for [`desk_features`].
pub fn desk_modules(d: usize, rng: &mut ChaCha8Rng) -> (SelectionHead, Transformer) {
    let head = SelectionHead::init(d, 3, rng).expect("valid head");
    let transformer = Transformer::init(d, 4, 2, 2, 3, 3, rng).expect("valid transformer");
    (head, transformer)
}

/// The default desk-scale model plus a matching random input image.
pub fn desk_model(rng: &mut ChaCha8Rng) -> (DetectionModel, Tensor) {
    let model = DetectionModel::init(ModelConfig::default(), rng).expect("valid config");
    let image = random_tensor(&[3, 64, 64], rng);
    (model, image)
}
