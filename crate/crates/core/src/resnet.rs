//! Pretrained bottleneck ResNet (Wide-ResNet50-2 by default) used as the
//! production backbone. Taps are the outputs of `layer1`, `layer2` and
//! `layer3` (strides 4, 8, 16). Batch norms are folded into the convolutions
//! at load time.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3, Array4, ArrayView3};
use safetensors::{Dtype, SafeTensors};

use crate::backbone::{digest_arrays, Backbone};
use crate::error::{Error, Result};
use crate::nn::{max_pool, relu_inplace, BatchNorm, Conv2d};

pub const WIDE_RESNET50_2_URL: &str =
    "https://huggingface.co/timm/wide_resnet50_2.tv_in1k/resolve/main/model.safetensors";

/// Environment variable naming the pretrained-weight cache directory.
pub const CACHE_DIR_ENV: &str = "RDCFA_CACHE_DIR";

/// Layout of a torchvision-style bottleneck ResNet, truncated after the last tapped stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ResNetLayout {
    pub blocks: Vec<usize>,
    /// Bottleneck inner width of the first stage; doubles per stage.
    pub base_width: usize,
    /// Output channels of the first stage (`planes * expansion`); doubles per stage.
    pub base_planes_out: usize,
}

impl ResNetLayout {
    pub fn wide_resnet50_2() -> Self {
        Self {
            blocks: vec![3, 4, 6],
            base_width: 128,
            base_planes_out: 256,
        }
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    downsample: Option<Conv2d>,
}

impl Bottleneck {
    fn forward(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let mut y = self.conv1.forward(x);
        relu_inplace(&mut y);
        let mut y = self.conv2.forward(y.view());
        relu_inplace(&mut y);
        let mut y = self.conv3.forward(y.view());
        match &self.downsample {
            Some(ds) => y += &ds.forward(x),
            None => y += &x,
        }
        relu_inplace(&mut y);
        y
    }
}

#[derive(Debug, Clone)]
pub struct ResNetBackbone {
    name: String,
    stem: Conv2d,
    stages: Vec<Vec<Bottleneck>>,
    digest: String,
}

struct TensorSource<'a> {
    tensors: SafeTensors<'a>,
    prefix: String,
}

impl TensorSource<'_> {
    fn get(&self, key: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let full = format!("{}{}", self.prefix, key);
        let view = self
            .tensors
            .tensor(&full)
            .map_err(|e| Error::Weights(format!("tensor `{full}`: {e}")))?;
        let data = view.data();
        let values = match view.dtype() {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            other => {
                return Err(Error::Weights(format!(
                    "tensor `{full}` has unsupported dtype {other:?}"
                )))
            }
        };
        Ok((view.shape().to_vec(), values))
    }

    fn vector(&self, key: &str) -> Result<Array1<f64>> {
        let (_, v) = self.get(key)?;
        Ok(Array1::from(v))
    }

    fn conv(&self, key: &str, stride: usize, padding: usize) -> Result<Conv2d> {
        let (shape, v) = self.get(&format!("{key}.weight"))?;
        if shape.len() != 4 {
            return Err(Error::Weights(format!("`{key}.weight` is not 4-D")));
        }
        let weight = Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), v)
            .map_err(|e| Error::Weights(e.to_string()))?;
        Ok(Conv2d {
            weight,
            bias: None,
            stride,
            padding,
        })
    }

    fn bn(&self, key: &str) -> Result<BatchNorm> {
        Ok(BatchNorm {
            weight: self.vector(&format!("{key}.weight"))?,
            bias: self.vector(&format!("{key}.bias"))?,
            running_mean: self.vector(&format!("{key}.running_mean"))?,
            running_var: self.vector(&format!("{key}.running_var"))?,
            eps: 1e-5,
        })
    }

    fn conv_bn(&self, conv: &str, bn: &str, stride: usize, padding: usize) -> Result<Conv2d> {
        Ok(self.conv(conv, stride, padding)?.fold_batch_norm(&self.bn(bn)?))
    }
}

impl ResNetBackbone {
    pub fn from_safetensors_bytes(name: &str, bytes: &[u8], layout: &ResNetLayout) -> Result<Self> {
        let tensors = SafeTensors::deserialize(bytes)
            .map_err(|e| Error::Weights(format!("cannot parse safetensors: {e}")))?;
        // some exports nest everything under `model.`
        let prefix = if tensors.names().iter().any(|n| n.starts_with("model.conv1")) {
            "model.".to_string()
        } else {
            String::new()
        };
        let src = TensorSource { tensors, prefix };

        let stem = src.conv_bn("conv1", "bn1", 2, 3)?;
        let mut stages = Vec::with_capacity(layout.blocks.len());
        for (stage_idx, &n_blocks) in layout.blocks.iter().enumerate() {
            let layer = format!("layer{}", stage_idx + 1);
            let stride = if stage_idx == 0 { 1 } else { 2 };
            let mut blocks = Vec::with_capacity(n_blocks);
            for b in 0..n_blocks {
                let p = format!("{layer}.{b}");
                let s = if b == 0 { stride } else { 1 };
                let downsample = if b == 0 {
                    Some(src.conv_bn(&format!("{p}.downsample.0"), &format!("{p}.downsample.1"), s, 0)?)
                } else {
                    None
                };
                blocks.push(Bottleneck {
                    conv1: src.conv_bn(&format!("{p}.conv1"), &format!("{p}.bn1"), 1, 0)?,
                    conv2: src.conv_bn(&format!("{p}.conv2"), &format!("{p}.bn2"), s, 1)?,
                    conv3: src.conv_bn(&format!("{p}.conv3"), &format!("{p}.bn3"), 1, 0)?,
                    downsample,
                });
            }
            stages.push(blocks);
        }
        let expected: Vec<usize> = (0..layout.blocks.len())
            .map(|i| layout.base_planes_out << i)
            .collect();
        let found: Vec<usize> = stages
            .iter()
            .map(|s| s.last().map_or(0, |b| b.conv3.out_channels()))
            .collect();
        if expected != found {
            return Err(Error::Weights(format!(
                "stage widths {found:?} do not match layout {expected:?}"
            )));
        }

        let digest = digest_arrays(
            std::iter::once(&stem)
                .chain(stages.iter().flatten().flat_map(|b| {
                    [&b.conv1, &b.conv2, &b.conv3].into_iter().chain(b.downsample.iter())
                }))
                .flat_map(|c| {
                    [
                        c.weight.as_slice().expect("contiguous"),
                        c.bias.as_ref().and_then(|b| b.as_slice()).unwrap_or(&[]),
                    ]
                }),
        );
        Ok(Self {
            name: name.to_string(),
            stem,
            stages,
            digest,
        })
    }

    pub fn from_file(name: &str, path: &Path, layout: &ResNetLayout) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_safetensors_bytes(name, &bytes, layout)
    }

    /// Load Wide-ResNet50-2 from the cache, downloading it first if absent.
    pub fn wide_resnet50_2(cache_dir: &Path, url: &str) -> Result<Self> {
        let path = cached_weights(cache_dir, "wide_resnet50_2.safetensors", url)?;
        Self::from_file("wide_resnet50_2", &path, &ResNetLayout::wide_resnet50_2())
    }
}

pub fn default_cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_DIR_ENV) {
        return PathBuf::from(dir);
    }
    std::env::var_os("HOME")
        .map(|h| PathBuf::from(h).join(".cache").join("rdcfa"))
        .unwrap_or_else(|| PathBuf::from(".rdcfa-cache"))
}

fn cached_weights(cache_dir: &Path, file: &str, url: &str) -> Result<PathBuf> {
    let path = cache_dir.join(file);
    if path.exists() {
        return Ok(path);
    }
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    log::info!("downloading backbone weights from {url}");
    let response = reqwest::blocking::get(url)
        .and_then(|r| r.error_for_status())
        .map_err(|e| Error::Weights(format!("download of {url} failed: {e}")))?;
    let bytes = response
        .bytes()
        .map_err(|e| Error::Weights(format!("download of {url} failed: {e}")))?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

impl Backbone for ResNetBackbone {
    fn name(&self) -> &str {
        &self.name
    }

    fn strides(&self) -> Vec<usize> {
        (0..self.stages.len()).map(|i| 4 << i).collect()
    }

    fn channels(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|s| s.last().map_or(0, |b| b.conv3.out_channels()))
            .collect()
    }

    fn forward(&self, image: ArrayView3<f64>) -> Vec<Array3<f64>> {
        let mut x = self.stem.forward(image);
        relu_inplace(&mut x);
        let mut x = max_pool(x.view(), 3, 2, 1);
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in stage {
                x = block.forward(x.view());
            }
            taps.push(x.clone());
        }
        taps
    }

    fn weights_digest(&self) -> String {
        self.digest.clone()
    }
}

/// Serialize named `f64` tensors to safetensors bytes (used to build test fixtures).
pub fn write_safetensors(tensors: &HashMap<String, (Vec<usize>, Vec<f64>)>) -> Result<Vec<u8>> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(k, (shape, v))| {
            let bytes = v.iter().flat_map(|x| (*x as f32).to_le_bytes()).collect();
            (k.clone(), shape.clone(), bytes)
        })
        .collect();
    let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = raw
        .iter()
        .map(|(k, shape, bytes)| {
            safetensors::tensor::TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::Weights(e.to_string()))
        })
        .collect::<Result<_>>()?;
    safetensors::serialize(views, &None).map_err(|e| Error::Weights(e.to_string()))
}
