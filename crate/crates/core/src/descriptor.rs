//! Patch descriptor: a per-location affine map from backbone features to
//! target-oriented features, optionally fed normalized (x, y) coordinates.

use ndarray::{concatenate, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::PatchFeatureMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub use_coordinate_channels: bool,
}

impl DescriptorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("descriptor dimensions must be >= 1"));
        }
        Ok(())
    }

    /// Width of the affine map's input, including coordinate channels.
    pub fn augmented_input_dim(&self) -> usize {
        self.input_dim + if self.use_coordinate_channels { 2 } else { 0 }
    }
}

/// `D' x T` adapted features with their spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFeatureMap {
    data: Array2<f64>,
    height: usize,
    width: usize,
}

impl TargetFeatureMap {
    pub fn new(data: Array2<f64>, height: usize, width: usize) -> Result<Self> {
        if data.ncols() != height * width {
            return Err(Error::shape(format!(
                "{} columns for a {height}x{width} grid",
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("target-oriented features".into()));
        }
        Ok(Self {
            data,
            height,
            width,
        })
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn to_array3(&self) -> Array3<f64> {
        self.data
            .clone()
            .into_shape_with_order((self.channels(), self.height, self.width))
            .expect("grid shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDescriptor {
    config: DescriptorConfig,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Row-major normalized coordinates in [-1, 1]; a single cell maps to 0.
pub(crate) fn coordinate_rows(height: usize, width: usize) -> Array2<f64> {
    let norm = |i: usize, n: usize| {
        if n > 1 {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    Array2::from_shape_fn((2, height * width), |(axis, t)| {
        let (y, x) = (t / width, t % width);
        if axis == 0 {
            norm(x, width)
        } else {
            norm(y, height)
        }
    })
}

impl PatchDescriptor {
    /// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(config: DescriptorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let fan_in = config.augmented_input_dim();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((config.output_dim, fan_in), || {
            rng.gen_range(-bound..bound)
        });
        let bias = Array1::from_shape_simple_fn(config.output_dim, || rng.gen_range(-bound..bound));
        Ok(Self {
            config,
            weight,
            bias,
        })
    }

    pub fn from_parts(config: DescriptorConfig, weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        config.validate()?;
        if weight.dim() != (config.output_dim, config.augmented_input_dim()) || bias.len() != config.output_dim {
            return Err(Error::shape("descriptor parameters do not match config"));
        }
        Ok(Self {
            config,
            weight,
            bias,
        })
    }

    /// Identity map with zero bias (requires `D' == D`, no coordinates).
    pub fn identity(dim: usize) -> Self {
        Self {
            config: DescriptorConfig {
                input_dim: dim,
                output_dim: dim,
                use_coordinate_channels: false,
            },
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn config(&self) -> &DescriptorConfig {
        &self.config
    }

    /// Backbone features with coordinate rows appended when enabled: `D_in x T`.
    pub fn input_matrix(&self, features: &PatchFeatureMap) -> Result<Array2<f64>> {
        if features.channels() != self.config.input_dim {
            return Err(Error::shape(format!(
                "descriptor expects {} channels, got {}",
                self.config.input_dim,
                features.channels()
            )));
        }
        let base = features.as_matrix();
        if !self.config.use_coordinate_channels {
            return Ok(base.to_owned());
        }
        let coords = coordinate_rows(features.height(), features.width());
        concatenate(Axis(0), &[base, coords.view()]).map_err(|e| Error::shape(e.to_string()))
    }

    pub(crate) fn apply(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let mut out = self.weight.dot(&input);
        out += &self.bias.view().insert_axis(Axis(1));
        out
    }

    pub fn describe(&self, features: &PatchFeatureMap) -> Result<TargetFeatureMap> {
        let input = self.input_matrix(features)?;
        TargetFeatureMap::new(self.apply(input.view()), features.height(), features.width())
    }

    /// Parameter gradient given the upstream gradient on the `D' x T` output.
    pub fn backward(&self, input: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> DescriptorGrad {
        DescriptorGrad {
            weight: grad_out.dot(&input.t()),
            bias: grad_out.sum_axis(Axis(1)),
        }
    }
}

impl DescriptorGrad {
    pub fn zeros_like(d: &PatchDescriptor) -> Self {
        Self {
            weight: Array2::zeros(d.weight.raw_dim()),
            bias: Array1::zeros(d.bias.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }
}
