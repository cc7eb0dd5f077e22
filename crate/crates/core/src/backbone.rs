//! Frozen multiscale feature extraction and patch-feature assembly.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::{concatenate, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::resize_bilinear;
use crate::nn::{avg_pool, relu_inplace, Conv2d};

/// Feature maps tapped from successive backbone stages, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSet {
    maps: Vec<Array3<f64>>,
    strides: Vec<usize>,
}

impl FeatureMapSet {
    pub fn new(maps: Vec<Array3<f64>>, strides: Vec<usize>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::invalid("feature map set is empty"));
        }
        if maps.len() != strides.len() {
            return Err(Error::shape(format!(
                "{} maps but {} strides",
                maps.len(),
                strides.len()
            )));
        }
        for pair in maps.windows(2) {
            let (_, h0, w0) = pair[0].dim();
            let (_, h1, w1) = pair[1].dim();
            if h1 > h0 || w1 > w0 {
                return Err(Error::shape(format!(
                    "tap sizes must be non-increasing, got {h0}x{w0} then {h1}x{w1}"
                )));
            }
        }
        if maps.iter().any(|m| m.dim().0 == 0) {
            return Err(Error::shape("feature map with zero channels"));
        }
        Ok(Self { maps, strides })
    }

    pub fn maps(&self) -> &[Array3<f64>] {
        &self.maps
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }
}

/// Concatenated `D x H x W` patch features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap {
    data: Array3<f64>,
}

impl PatchFeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patch features".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn patch_count(&self) -> usize {
        self.height() * self.width()
    }

    /// `D x T` view with patches in row-major spatial order.
    pub fn as_matrix(&self) -> ArrayView2<'_, f64> {
        let (d, h, w) = self.data.dim();
        self.data
            .view()
            .into_shape_with_order((d, h * w))
            .expect("patch features are contiguous")
    }
}

/// Resize every tap to the finest tap's grid and stack along channels.
pub fn assemble_patch_features(set: &FeatureMapSet) -> Result<PatchFeatureMap> {
    let first = set
        .maps
        .first()
        .ok_or_else(|| Error::invalid("feature map set is empty"))?;
    let (_, h, w) = first.dim();
    let resized: Vec<Array3<f64>> = set
        .maps
        .iter()
        .map(|m| resize_bilinear(m.view(), h, w))
        .collect();
    let views: Vec<_> = resized.iter().map(|m| m.view()).collect();
    let data = concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
    PatchFeatureMap::new(data)
}

/// A frozen convolutional feature extractor. Implementations never mutate their weights.
pub trait Backbone: Send + Sync {
    fn name(&self) -> &str;

    /// Input pixels per feature cell, one entry per tap.
    fn strides(&self) -> Vec<usize>;

    fn channels(&self) -> Vec<usize>;

    /// Raw forward pass; callers go through [`extract_multiscale`].
    fn forward(&self, image: ArrayView3<f64>) -> Vec<Array3<f64>>;

    /// SHA-256 over all weights, used to prove the extractor stays frozen.
    fn weights_digest(&self) -> String;

    fn feature_dim(&self) -> usize {
        self.channels().iter().sum()
    }
}

pub fn extract_multiscale(backbone: &dyn Backbone, image: ArrayView3<f64>) -> Result<FeatureMapSet> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3-channel image, got {c}")));
    }
    let largest = backbone.strides().into_iter().max().unwrap_or(1);
    if h % largest != 0 || w % largest != 0 || h == 0 || w == 0 {
        return Err(Error::Sizing {
            height: h,
            width: w,
            stride: largest,
        });
    }
    let maps = backbone.forward(image);
    if maps.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("{} activations", backbone.name())));
    }
    FeatureMapSet::new(maps, backbone.strides())
}

pub fn extract_patch_features(
    backbone: &dyn Backbone,
    image: ArrayView3<f64>,
) -> Result<PatchFeatureMap> {
    assemble_patch_features(&extract_multiscale(backbone, image)?)
}

pub(crate) fn digest_arrays<'a>(arrays: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut hasher = Sha256::new();
    for arr in arrays {
        for v in arr {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Seeded random three-stage extractor for tests and desk-scale runs.
///
/// Each stage is a 3x3 convolution, ReLU, and average pooling, giving taps at
/// strides 4, 8 and 16.
#[derive(Debug, Clone)]
pub struct TinyBackbone {
    stages: Vec<(Conv2d, usize)>,
    seed: u64,
}

impl TinyBackbone {
    pub const POOLS: [usize; 3] = [4, 2, 2];

    pub fn new(channels: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_c = 3;
        let mut stages = Vec::with_capacity(3);
        for (&out_c, &pool) in channels.iter().zip(Self::POOLS.iter()) {
            let std = (2.0 / (in_c * 9) as f64).sqrt();
            let weight = Array3::from_shape_simple_fn((out_c, in_c, 9), || {
                std * rng.sample::<f64, _>(StandardNormal)
            })
            .into_shape_with_order((out_c, in_c, 3, 3))
            .expect("weight shape");
            let bias = ndarray::Array1::from_shape_simple_fn(out_c, || rng.gen_range(-0.1..0.1));
            stages.push((
                Conv2d {
                    weight,
                    bias: Some(bias),
                    stride: 1,
                    padding: 1,
                },
                pool,
            ));
            in_c = out_c;
        }
        Self { stages, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Backbone for TinyBackbone {
    fn name(&self) -> &str {
        "tiny"
    }

    fn strides(&self) -> Vec<usize> {
        Self::POOLS
            .iter()
            .scan(1, |acc, p| {
                *acc *= p;
                Some(*acc)
            })
            .collect()
    }

    fn channels(&self) -> Vec<usize> {
        self.stages.iter().map(|(c, _)| c.out_channels()).collect()
    }

    fn forward(&self, image: ArrayView3<f64>) -> Vec<Array3<f64>> {
        let mut x = image.to_owned();
        let mut taps = Vec::with_capacity(self.stages.len());
        for (conv, pool) in &self.stages {
            let mut y = conv.forward(x.view());
            relu_inplace(&mut y);
            x = avg_pool(y.view(), *pool);
            taps.push(x.clone());
        }
        taps
    }

    fn weights_digest(&self) -> String {
        digest_arrays(self.stages.iter().flat_map(|(c, _)| {
            [
                c.weight.as_slice().expect("contiguous"),
                c.bias.as_ref().and_then(|b| b.as_slice()).unwrap_or(&[]),
            ]
        }))
    }
}

/// Resize and per-channel normalization applied to every input image.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocess {
    pub size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            size: 256,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Preprocess {
    pub fn load(&self, path: &Path) -> Result<Array3<f64>> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(self.apply(&img.to_rgb8()))
    }

    pub fn apply(&self, img: &image::RgbImage) -> Array3<f64> {
        let resized;
        let img = if img.width() as usize != self.size || img.height() as usize != self.size {
            resized = image::imageops::resize(
                img,
                self.size as u32,
                self.size as u32,
                FilterType::Triangle,
            );
            &resized
        } else {
            img
        };
        let n = self.size;
        Array3::from_shape_fn((3, n, n), |(c, y, x)| {
            let v = img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0;
            (v - self.mean[c]) / self.std[c]
        })
    }
}

/// Side length of the patch grid for a square input of `image_size` pixels.
pub fn patch_grid(backbone: &dyn Backbone, image_size: usize) -> usize {
    image_size / backbone.strides()[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn test_image(n: usize) -> Array3<f64> {
        Array::from_shape_fn((3, n, n), |(c, y, x)| {
            ((c * 31 + y * 7 + x * 3) as f64 * 0.1).sin()
        })
    }

    #[test]
    fn tiny_backbone_shapes() {
        let bb = TinyBackbone::new([8, 16, 32], 0);
        let set = extract_multiscale(&bb, test_image(256).view()).unwrap();
        let dims: Vec<_> = set.maps().iter().map(|m| m.dim()).collect();
        assert_eq!(dims, vec![(8, 64, 64), (16, 32, 32), (32, 16, 16)]);
        assert_eq!(set.strides(), &[4, 8, 16]);
    }

    #[test]
    fn tiny_backbone_is_deterministic() {
        let a = TinyBackbone::new([8, 16, 32], 0);
        let b = TinyBackbone::new([8, 16, 32], 0);
        let img = test_image(64);
        let fa = extract_multiscale(&a, img.view()).unwrap();
        let fb = extract_multiscale(&b, img.view()).unwrap();
        let fa2 = extract_multiscale(&a, img.view()).unwrap();
        for (x, y) in fa.maps().iter().zip(fb.maps()).chain(fa.maps().iter().zip(fa2.maps())) {
            let xb: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(a.weights_digest(), b.weights_digest());
        assert_ne!(a.weights_digest(), TinyBackbone::new([8, 16, 32], 1).weights_digest());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let bb = TinyBackbone::new([8, 16, 32], 0);
        let err = extract_multiscale(&bb, test_image(40).view()).unwrap_err();
        assert!(matches!(err, Error::Sizing { stride: 16, .. }));
    }

    #[test]
    fn assemble_shapes_and_identity() {
        let maps = vec![
            Array3::from_elem((8, 16, 16), 1.0),
            Array3::from_elem((16, 8, 8), 2.0),
            Array3::from_elem((32, 4, 4), 3.0),
        ];
        let set = FeatureMapSet::new(maps, vec![4, 8, 16]).unwrap();
        let pf = assemble_patch_features(&set).unwrap();
        assert_eq!(pf.data().dim(), (56, 16, 16));
        assert_eq!(pf.patch_count(), 256);

        let single = test_image(8);
        let set = FeatureMapSet::new(vec![single.clone()], vec![1]).unwrap();
        assert_eq!(assemble_patch_features(&set).unwrap().data(), &single);
    }

    #[test]
    fn empty_or_growing_sets_are_rejected() {
        assert!(FeatureMapSet::new(vec![], vec![]).is_err());
        let maps = vec![Array3::zeros((1, 2, 2)), Array3::zeros((1, 4, 4))];
        assert!(FeatureMapSet::new(maps, vec![8, 4]).is_err());
    }

    #[test]
    fn channel_permutation_stays_within_tap() {
        let a = test_image(8);
        let b = Array::from_shape_fn((2, 4, 4), |(c, y, x)| (c + y * x) as f64);
        let set = FeatureMapSet::new(vec![a.clone(), b.clone()], vec![1, 2]).unwrap();
        let base = assemble_patch_features(&set).unwrap();
        let b_perm = b.select(Axis(0), &[1, 0]);
        let set = FeatureMapSet::new(vec![a, b_perm], vec![1, 2]).unwrap();
        let perm = assemble_patch_features(&set).unwrap();
        assert_eq!(base.data().slice(ndarray::s![0..3, .., ..]), perm.data().slice(ndarray::s![0..3, .., ..]));
        assert_eq!(base.data().index_axis(Axis(0), 3), perm.data().index_axis(Axis(0), 4));
        assert_eq!(base.data().index_axis(Axis(0), 4), perm.data().index_axis(Axis(0), 3));
    }

    #[test]
    fn preprocess_normalizes_per_channel() {
        let img = image::RgbImage::from_pixel(4, 4, image::Rgb([255, 0, 128]));
        let pre = Preprocess {
            size: 4,
            ..Preprocess::default()
        };
        let arr = pre.apply(&img);
        assert!((arr[[0, 0, 0]] - (1.0 - 0.485) / 0.229).abs() < 1e-12);
        assert!((arr[[1, 2, 3]] - (0.0 - 0.456) / 0.224).abs() < 1e-12);
    }
}
