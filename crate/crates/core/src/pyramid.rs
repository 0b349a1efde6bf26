//! Multi-scale feature extraction and the map ↔ sequence correspondence.
//!
//! A small strided-conv backbone turns an image into `l` feature maps whose
//! strides double per level (level 0 is the finest and largest). The maps
//! are flattened — level 0 first, row-major within a level — into a single
//! `[d, Σ h·w]` sequence for the encoder, and the flattening is exactly
//! invertible so downstream consumers can move between views freely.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::{xavier, zeros, ParamVisitor};
use crate::tensor::Tensor;

/// One level of the feature pyramid.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    /// Feature map, `[d, h, w]`.
    pub map: Tensor,
    /// Total downsampling factor relative to the input image.
    pub stride: usize,
    /// Level index; 0 is the finest (largest) map.
    pub index: usize,
}

/// Pyramid maps flattened into one encoder sequence.
#[derive(Debug, Clone)]
pub struct FlattenedFeatures {
    /// Features as `[d, total]`, level 0's positions first, row-major
    /// within each level.
    pub seq: Tensor,
    /// Half-open flat-position range `[start, end)` of each level.
    pub level_ranges: Vec<(usize, usize)>,
    /// Spatial extent `(h, w)` of each level, needed to invert.
    pub level_dims: Vec<(usize, usize)>,
}

/// Strided-conv backbone: `l` stages of 3×3 conv + ReLU, each halving the
/// extent (the first stage may downsample more, see `initial_stride`).
#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<(Tensor, Tensor)>, // (weight [d, c_prev, 3, 3], bias [d])
    initial_stride: usize,
}

impl Backbone {
    /// Initializes `levels` stages mapping `c_in` image channels to `d`
    /// feature channels. `initial_stride` is the downsampling of the first
    /// stage (2 in the default configuration); later stages halve.
    pub fn init(
        c_in: usize,
        d: usize,
        levels: usize,
        initial_stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Backbone> {
        if levels == 0 {
            return Err(Error::Config("backbone needs at least one level".to_string()));
        }
        if !matches!(initial_stride, 2 | 4) {
            return Err(Error::Config(format!(
                "initial backbone stride must be 2 or 4, got {initial_stride}"
            )));
        }
        let mut stages = Vec::with_capacity(levels);
        let mut prev = c_in;
        for _ in 0..levels {
            let weight = xavier(&[d, prev, 3, 3], prev * 9, d * 9, rng)?;
            let bias = zeros(&[d])?;
            stages.push((weight, bias));
            prev = d;
        }
        Ok(Backbone {
            stages,
            initial_stride,
        })
    }

    /// Number of pyramid levels produced.
    pub fn levels(&self) -> usize {
        self.stages.len()
    }

    /// Runs the backbone on `image: [c, h, w]`, producing one level per
    /// stage. Requires the image extent to survive every halving exactly
    /// (extent divisible by the total stride).
    pub fn extract_pyramid(&self, image: &Tensor) -> Result<Vec<PyramidLevel>> {
        let (c, h, w) = match *image.shape() {
            [c, h, w] => (c, h, w),
            ref other => {
                return Err(Error::shape(
                    "extract_pyramid",
                    format!("expected [c,h,w] image, got {:?}", other),
                ))
            }
        };
        let total_stride = self.initial_stride << (self.stages.len() - 1);
        if h % total_stride != 0 || w % total_stride != 0 {
            return Err(Error::shape(
                "extract_pyramid",
                format!(
                    "image extent {}x{} not divisible by total stride {}",
                    h, w, total_stride
                ),
            ));
        }
        let mut x = image.reshape(&[1, c, h, w])?;
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut stride_so_far = 1;
        for (i, (weight, bias)) in self.stages.iter().enumerate() {
            let s = if i == 0 { self.initial_stride } else { 2 };
            // Stride-2: 3×3 pad 1 halves evenly. Stride-4 needs pad 0 with
            // the extent offset handled by the formula; use pad 1 and let
            // the closed form decide the extent.
            x = x.conv2d(weight, Some(bias), s, 1, 1)?.relu()?;
            stride_so_far *= s;
            let (d, oh, ow) = match *x.shape() {
                [1, d, oh, ow] => (d, oh, ow),
                _ => unreachable!("conv2d output rank"),
            };
            levels.push(PyramidLevel {
                map: x.reshape(&[d, oh, ow])?,
                stride: stride_so_far,
                index: i,
            });
        }
        Ok(levels)
    }
}

impl ParamVisitor for Backbone {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, (weight, bias)) in self.stages.iter_mut().enumerate() {
            f(format!("{prefix}.stage{i}.weight"), weight);
            f(format!("{prefix}.stage{i}.bias"), bias);
        }
    }
}

/// Flattens pyramid maps into a `[d, Σ h·w]` sequence (level 0 first,
/// row-major within each level). Differentiable; gradients flow back into
/// the maps.
pub fn flatten_levels(levels: &[PyramidLevel]) -> Result<FlattenedFeatures> {
    if levels.is_empty() {
        return Err(Error::shape("flatten_levels", "no levels given".to_string()));
    }
    let d = levels[0].map.shape()[0];
    let mut parts = Vec::with_capacity(levels.len());
    let mut level_ranges = Vec::with_capacity(levels.len());
    let mut level_dims = Vec::with_capacity(levels.len());
    let mut offset = 0;
    for (i, level) in levels.iter().enumerate() {
        let (ld, h, w) = match *level.map.shape() {
            [ld, h, w] => (ld, h, w),
            ref other => {
                return Err(Error::shape(
                    "flatten_levels",
                    format!("level {} map has shape {:?}", i, other),
                ))
            }
        };
        if ld != d {
            return Err(Error::shape(
                "flatten_levels",
                format!("level {} has {} channels, level 0 has {}", i, ld, d),
            ));
        }
        parts.push(level.map.reshape(&[d, h * w])?);
        level_ranges.push((offset, offset + h * w));
        level_dims.push((h, w));
        offset += h * w;
    }
    let seq = Tensor::concat_cols(&parts)?;
    Ok(FlattenedFeatures {
        seq,
        level_ranges,
        level_dims,
    })
}

impl FlattenedFeatures {
    /// Total number of flat positions.
    pub fn total(&self) -> usize {
        self.level_ranges.last().map_or(0, |&(_, end)| end)
    }

    /// Number of levels.
    pub fn num_levels(&self) -> usize {
        self.level_ranges.len()
    }

    /// Inverts the flattening, reproducing `[d, h, w]` maps per level.
    pub fn unflatten(&self) -> Result<Vec<Tensor>> {
        let d = self.seq.shape()[0];
        let mut maps = Vec::with_capacity(self.level_ranges.len());
        for (&(start, end), &(h, w)) in self.level_ranges.iter().zip(&self.level_dims) {
            maps.push(self.seq.slice_cols(start, end)?.reshape(&[d, h, w])?);
        }
        Ok(maps)
    }

    /// Maps a flat position to `(level, y, x)`.
    pub fn position_of(&self, flat: usize) -> Result<(usize, usize, usize)> {
        for (level, (&(start, end), &(_, w))) in
            self.level_ranges.iter().zip(&self.level_dims).enumerate()
        {
            if flat >= start && flat < end {
                let within = flat - start;
                return Ok((level, within / w, within % w));
            }
        }
        Err(Error::shape(
            "position_of",
            format!("flat index {} out of range {}", flat, self.total()),
        ))
    }

    /// Maps `(level, y, x)` to the flat position.
    pub fn flat_of(&self, level: usize, y: usize, x: usize) -> Result<usize> {
        let (&(start, _), &(h, w)) = self
            .level_ranges
            .get(level)
            .zip(self.level_dims.get(level))
            .ok_or_else(|| Error::shape("flat_of", format!("level {} out of range", level)))?;
        if y >= h || x >= w {
            return Err(Error::shape(
                "flat_of",
                format!("position ({y},{x}) outside level {level} extent {h}x{w}"),
            ));
        }
        Ok(start + y * w + x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn level_from(map: Tensor, stride: usize, index: usize) -> PyramidLevel {
        PyramidLevel { map, stride, index }
    }

    #[test]
    fn default_pyramid_shapes_halve_per_level() {
        let backbone = Backbone::init(3, 32, 3, 2, &mut rng()).unwrap();
        let image = Tensor::from_vec(&[3, 64, 64], vec![0.1; 3 * 64 * 64]).unwrap();
        let levels = backbone.extract_pyramid(&image).unwrap();
        assert_eq!(levels.len(), 3);
        assert_eq!(levels[0].map.shape(), &[32, 32, 32]);
        assert_eq!(levels[1].map.shape(), &[32, 16, 16]);
        assert_eq!(levels[2].map.shape(), &[32, 8, 8]);
        assert_eq!(
            levels.iter().map(|l| l.stride).collect::<Vec<_>>(),
            vec![2, 4, 8]
        );
        assert_eq!(levels.iter().map(|l| l.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn initial_stride_four_doubles_thereafter() {
        let backbone = Backbone::init(3, 16, 3, 4, &mut rng()).unwrap();
        let image = Tensor::zeros(&[3, 64, 64]);
        let levels = backbone.extract_pyramid(&image).unwrap();
        assert_eq!(levels[0].map.shape(), &[16, 16, 16]);
        assert_eq!(levels[1].map.shape(), &[16, 8, 8]);
        assert_eq!(levels[2].map.shape(), &[16, 4, 4]);
        assert_eq!(
            levels.iter().map(|l| l.stride).collect::<Vec<_>>(),
            vec![4, 8, 16]
        );
    }

    #[test]
    fn single_level_pyramid_has_stride_two() {
        let backbone = Backbone::init(1, 8, 1, 2, &mut rng()).unwrap();
        let image = Tensor::zeros(&[1, 16, 16]);
        let levels = backbone.extract_pyramid(&image).unwrap();
        assert_eq!(levels.len(), 1);
        assert_eq!(levels[0].stride, 2);
        assert_eq!(levels[0].map.shape(), &[8, 8, 8]);
    }

    #[test]
    fn zero_image_produces_finite_features() {
        let backbone = Backbone::init(3, 8, 3, 2, &mut rng()).unwrap();
        let levels = backbone.extract_pyramid(&Tensor::zeros(&[3, 32, 32])).unwrap();
        for level in levels {
            assert!(level.map.is_finite());
        }
    }

    #[test]
    fn rejects_indivisible_extent() {
        let backbone = Backbone::init(1, 4, 3, 2, &mut rng()).unwrap();
        // 20 is divisible by 4 but not by 8.
        assert!(backbone.extract_pyramid(&Tensor::zeros(&[1, 20, 20])).is_err());
    }

    #[test]
    fn flatten_orders_levels_and_positions() {
        // 2x2 then 1x1 single-channel maps → 5 positions.
        let l0 = level_from(
            Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            2,
            0,
        );
        let l1 = level_from(Tensor::from_vec(&[1, 1, 1], vec![5.0]).unwrap(), 4, 1);
        let flat = flatten_levels(&[l0, l1]).unwrap();
        assert_eq!(flat.seq.shape(), &[1, 5]);
        assert_eq!(flat.seq.data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(flat.level_ranges, vec![(0, 4), (4, 5)]);
    }

    #[test]
    fn flatten_rejects_channel_mismatch() {
        let l0 = level_from(Tensor::zeros(&[2, 2, 2]), 2, 0);
        let l1 = level_from(Tensor::zeros(&[3, 1, 1]), 4, 1);
        assert!(flatten_levels(&[l0, l1]).is_err());
    }

    #[test]
    fn position_maps_are_mutually_inverse() {
        let l0 = level_from(Tensor::zeros(&[4, 3, 5]), 2, 0);
        let l1 = level_from(Tensor::zeros(&[4, 2, 2]), 4, 1);
        let flat = flatten_levels(&[l0, l1]).unwrap();
        for flat_idx in 0..flat.total() {
            let (level, y, x) = flat.position_of(flat_idx).unwrap();
            assert_eq!(flat.flat_of(level, y, x).unwrap(), flat_idx);
        }
        assert!(flat.position_of(flat.total()).is_err());
        assert!(flat.flat_of(0, 3, 0).is_err());
        assert!(flat.flat_of(2, 0, 0).is_err());
    }

    #[test]
    fn flatten_gradient_reaches_maps() {
        let map = Tensor::param(&[2, 2, 2], vec![1.0; 8]).unwrap();
        let levels = vec![level_from(map.clone(), 2, 0)];
        let flat = flatten_levels(&levels).unwrap();
        flat.seq.sum_all().unwrap().backward().unwrap();
        assert_eq!(map.grad().unwrap(), vec![1.0; 8]);
    }

    proptest! {
        #[test]
        fn unflatten_inverts_flatten(
            d in 1usize..4,
            dims in proptest::collection::vec((1usize..5, 1usize..5), 1..4),
        ) {
            let mut levels = Vec::new();
            let mut stride = 2;
            let mut counter = 0.0;
            for (i, &(h, w)) in dims.iter().enumerate() {
                let data: Vec<f64> = (0..d * h * w).map(|k| {
                    counter += 1.0;
                    counter + k as f64 * 0.5
                }).collect();
                levels.push(level_from(Tensor::from_vec(&[d, h, w], data).unwrap(), stride, i));
                stride *= 2;
            }
            let flat = flatten_levels(&levels).unwrap();
            prop_assert_eq!(flat.total(), dims.iter().map(|&(h, w)| h * w).sum::<usize>());
            let maps = flat.unflatten().unwrap();
            for (level, map) in levels.iter().zip(&maps) {
                prop_assert_eq!(map.shape(), level.map.shape());
                prop_assert_eq!(map.data(), level.map.data());
            }
        }
    }
}
