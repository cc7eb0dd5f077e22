//! The trainable part of the detector: descriptor, discriminator heads and class means.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::PatchFeatureMap;
use crate::descriptor::{DescriptorConfig, DescriptorGrad, PatchDescriptor, TargetFeatureMap};
use crate::discriminator::{ClassMeans, Discriminator, DiscriminatorGrad, GaussianField};
use crate::error::{Error, Result};

/// Backbone patch features of one normal training image with its class index.
#[derive(Debug, Clone)]
pub struct LabeledFeatures {
    pub label: usize,
    pub features: PatchFeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdCfaModel {
    pub descriptor: PatchDescriptor,
    pub discriminator: Discriminator,
    pub class_means: ClassMeans,
}

/// Intermediate activations of one image, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub input: Array2<f64>,
    pub target: Array2<f64>,
    pub mu: Array2<f64>,
    pub log_var: Array2<f64>,
    pub height: usize,
    pub width: usize,
}

impl Forward {
    pub fn target_map(&self) -> Result<TargetFeatureMap> {
        TargetFeatureMap::new(self.target.clone(), self.height, self.width)
    }

    pub fn field(&self) -> Result<GaussianField> {
        GaussianField::new(self.mu.clone(), self.log_var.clone(), self.height, self.width)
    }

    /// Bank/query vectors for every patch, `E x T`.
    pub fn query(&self, augment: bool) -> Array2<f64> {
        if augment {
            augment_matrix(self.target.view(), self.mu.view(), self.log_var.view())
        } else {
            self.target.clone()
        }
    }
}

/// Column-wise `[phi ; mu ; exp(log_var)]`.
pub fn augment_matrix(target: ArrayView2<f64>, mu: ArrayView2<f64>, log_var: ArrayView2<f64>) -> Array2<f64> {
    let var = log_var.mapv(f64::exp);
    concatenate(Axis(0), &[target.view(), mu.view(), var.view()]).expect("matching column counts")
}

impl RdCfaModel {
    pub fn new(
        descriptor: DescriptorConfig,
        latent_dim: usize,
        num_classes: usize,
        rho: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let descriptor = PatchDescriptor::new(descriptor, &mut rng)?;
        let discriminator = Discriminator::new(descriptor.config().output_dim, latent_dim, &mut rng)?;
        let class_means = ClassMeans::random(num_classes, latent_dim, rho, &mut rng)?;
        Ok(Self {
            descriptor,
            discriminator,
            class_means,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.discriminator.input_dim() != self.descriptor.config().output_dim {
            return Err(Error::shape("discriminator input differs from descriptor output"));
        }
        if self.class_means.latent_dim() != self.discriminator.latent_dim() {
            return Err(Error::shape("class means latent dim differs from discriminator"));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.discriminator.latent_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.num_classes()
    }

    pub fn query_width(&self, augment: bool) -> usize {
        let d = self.descriptor.config().output_dim;
        if augment {
            d + 2 * self.latent_dim()
        } else {
            d
        }
    }

    pub fn forward(&self, features: &PatchFeatureMap) -> Result<Forward> {
        let input = self.descriptor.input_matrix(features)?;
        let target = self.descriptor.apply(input.view());
        let (mu, log_var) = self.discriminator.heads(target.view());
        if target.iter().chain(mu.iter()).chain(log_var.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model activations".into()));
        }
        Ok(Forward {
            input,
            target,
            mu,
            log_var,
            height: features.height(),
            width: features.width(),
        })
    }

    pub fn embed(&self, features: &PatchFeatureMap, augment: bool) -> Result<Array2<f64>> {
        Ok(self.forward(features)?.query(augment))
    }

    /// Backpropagate per-patch gradients on `phi`, `mu` and `log_var` into parameter gradients.
    pub fn backward(
        &self,
        fwd: &Forward,
        mut grad_target: Array2<f64>,
        grad_mu: ArrayView2<f64>,
        grad_log_var: ArrayView2<f64>,
    ) -> (DescriptorGrad, DiscriminatorGrad) {
        let (disc, into_target) = self.discriminator.backward(fwd.target.view(), grad_mu, grad_log_var);
        grad_target += &into_target;
        let desc = self.descriptor.backward(fwd.input.view(), grad_target.view());
        (desc, disc)
    }

    /// Every trainable tensor, in a fixed order shared with [`ModelGrad::slices`].
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.descriptor.weight.as_slice_mut().expect("contiguous"),
            self.descriptor.bias.as_slice_mut().expect("contiguous"),
            self.discriminator.mu_weight.as_slice_mut().expect("contiguous"),
            self.discriminator.mu_bias.as_slice_mut().expect("contiguous"),
            self.discriminator.log_var_weight.as_slice_mut().expect("contiguous"),
            self.discriminator.log_var_bias.as_slice_mut().expect("contiguous"),
            self.class_means.means.as_slice_mut().expect("contiguous"),
        ]
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        vec![
            self.descriptor.weight.as_slice().expect("contiguous"),
            self.descriptor.bias.as_slice().expect("contiguous"),
            self.discriminator.mu_weight.as_slice().expect("contiguous"),
            self.discriminator.mu_bias.as_slice().expect("contiguous"),
            self.discriminator.log_var_weight.as_slice().expect("contiguous"),
            self.discriminator.log_var_bias.as_slice().expect("contiguous"),
            self.class_means.means.as_slice().expect("contiguous"),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub descriptor: DescriptorGrad,
    pub discriminator: DiscriminatorGrad,
    pub class_means: Array2<f64>,
}

impl ModelGrad {
    pub fn zeros_like(model: &RdCfaModel) -> Self {
        Self {
            descriptor: DescriptorGrad::zeros_like(&model.descriptor),
            discriminator: DiscriminatorGrad::zeros_like(&model.discriminator),
            class_means: Array2::zeros(model.class_means.means.raw_dim()),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.descriptor.weight.as_slice().expect("contiguous"),
            self.descriptor.bias.as_slice().expect("contiguous"),
            self.discriminator.mu_weight.as_slice().expect("contiguous"),
            self.discriminator.mu_bias.as_slice().expect("contiguous"),
            self.discriminator.log_var_weight.as_slice().expect("contiguous"),
            self.discriminator.log_var_bias.as_slice().expect("contiguous"),
            self.class_means.as_slice().expect("contiguous"),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn augment_matrix_layout() {
        let target = array![[1.0], [2.0], [3.0], [4.0]];
        let mu = array![[5.0], [6.0]];
        let lv = array![[0.0], [0.0]];
        let q = augment_matrix(target.view(), mu.view(), lv.view());
        assert_eq!(q.column(0).to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 1.0, 1.0]);
    }

    #[test]
    fn parameter_and_grad_slices_align() {
        let cfg = DescriptorConfig {
            input_dim: 6,
            output_dim: 4,
            use_coordinate_channels: true,
        };
        let mut model = RdCfaModel::new(cfg, 3, 2, 10.0, 0).unwrap();
        model.validate().unwrap();
        let grad = ModelGrad::zeros_like(&model);
        let lens: Vec<usize> = grad.slices().iter().map(|s| s.len()).collect();
        let plens: Vec<usize> = model.parameters_mut().iter().map(|s| s.len()).collect();
        assert_eq!(lens, plens);
        assert_eq!(model.query_width(true), 4 + 6);
        assert_eq!(model.query_width(false), 4);
    }
}
