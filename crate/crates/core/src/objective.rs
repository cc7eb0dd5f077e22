//! The full training objective on one batch: forward pass, all four loss
//! terms, and the gradient of the weighted total w.r.t. every parameter.

use ndarray::s;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discriminator::{
    dissimilarity_matrix, kld_loss_with_grad, repulsive_loss_with_grad, DissimilarityMatrix, GaussianField,
};
use crate::error::{Error, Result};
use crate::losses::{coupled_terms, total_loss, CfaConfig, LossBreakdown};
use crate::memory_bank::MemoryBank;
use crate::model::{LabeledFeatures, ModelGrad, RdCfaModel};

/// Components above this magnitude abort training.
pub const LOSS_GUARD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Store `[phi ; mu ; Sigma]` in the bank instead of `phi` alone.
    pub augment_bank: bool,
    /// Rebuild the bank after every epoch.
    pub refresh_bank: bool,
    /// Weight class-mean repulsion by the batch dissimilarity matrix.
    pub use_dissimilarity: bool,
}

impl AblationFlags {
    pub const ALL: Self = Self {
        augment_bank: true,
        refresh_bank: true,
        use_dissimilarity: true,
    };

    pub const NONE: Self = Self {
        augment_bank: false,
        refresh_bank: false,
        use_dissimilarity: false,
    };
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub breakdown: LossBreakdown,
    pub grad: ModelGrad,
    pub dissimilarity: DissimilarityMatrix,
}

pub fn check_breakdown(b: &LossBreakdown) -> Result<()> {
    for (component, value) in b.components() {
        if !value.is_finite() || value.abs() > LOSS_GUARD {
            return Err(Error::Divergence { component, value });
        }
    }
    Ok(())
}

/// Loss and gradients for one batch against a fixed bank.
pub fn batch_objective(
    model: &RdCfaModel,
    bank: &MemoryBank,
    batch: &[&LabeledFeatures],
    cfg: &CfaConfig,
    flags: &AblationFlags,
) -> Result<BatchOutcome> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let augment = flags.augment_bank;
    if bank.augmented() != augment || bank.width() != model.query_width(augment) {
        return Err(Error::shape(format!(
            "bank width {} (augmented: {}) does not match model query width {}",
            bank.width(),
            bank.augmented(),
            model.query_width(augment)
        )));
    }
    let n_neighbors = cfg.k + cfg.j;
    if n_neighbors > bank.len() {
        return Err(Error::invalid(format!(
            "k + j = {n_neighbors} exceeds bank size {}",
            bank.len()
        )));
    }

    let forwards = batch
        .par_iter()
        .map(|s| model.forward(&s.features))
        .collect::<Result<Vec<_>>>()?;
    let fields = forwards
        .iter()
        .map(|f| f.field())
        .collect::<Result<Vec<GaussianField>>>()?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();

    let dissimilarity = if flags.use_dissimilarity && batch.len() >= 2 {
        let dm = dissimilarity_matrix(&fields)?;
        if dm.degenerate {
            log::warn!("dissimilarity range collapsed; falling back to unit weights");
        }
        dm
    } else {
        DissimilarityMatrix::ones(batch.len())
    };

    let kld = kld_loss_with_grad(&fields, &labels, &model.class_means)?;
    let (d_rep, d_rep_grad) = repulsive_loss_with_grad(&model.class_means, &labels, &dissimilarity, cfg.rho)?;

    let total_queries: usize = forwards.iter().map(|f| f.target.ncols()).sum();
    let att_scale = 1.0 / (total_queries * cfg.k) as f64;
    let rep_scale = 1.0 / (total_queries * cfg.j) as f64;
    let d_out = model.descriptor.config().output_dim;
    let m = model.latent_dim();

    let per_sample = forwards
        .par_iter()
        .enumerate()
        .map(|(i, fwd)| {
            let queries = fwd.query(augment);
            let neighbors = bank.nearest_columns(queries.view(), n_neighbors)?;
            let coupled = coupled_terms(queries.view(), bank, &neighbors, cfg, att_scale, rep_scale);

            let grad_target = coupled.grad.slice(s![..d_out, ..]).to_owned();
            let mut grad_mu = &kld.grad_mu[i] * cfg.alpha_kl;
            let mut grad_log_var = &kld.grad_log_var[i] * cfg.alpha_kl;
            if augment {
                grad_mu += &coupled.grad.slice(s![d_out..d_out + m, ..]);
                // chain rule through the stored variance exp(log_var)
                let grad_var = coupled.grad.slice(s![d_out + m.., ..]);
                grad_log_var += &(&grad_var * &fwd.log_var.mapv(f64::exp));
            }
            let (desc, disc) = model.backward(fwd, grad_target, grad_mu.view(), grad_log_var.view());
            Ok((coupled.att_sum, coupled.rep_sum, desc, disc))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grad = ModelGrad::zeros_like(model);
    let (mut att_sum, mut rep_sum) = (0.0, 0.0);
    for (a, r, desc, disc) in &per_sample {
        att_sum += a;
        rep_sum += r;
        grad.descriptor.add_assign(desc);
        grad.discriminator.add_assign(disc);
    }
    grad.class_means = &kld.grad_means * cfg.alpha_kl + &d_rep_grad * cfg.alpha_dr;

    let breakdown = total_loss(att_sum * att_scale, rep_sum * rep_scale, kld.value, d_rep, cfg);
    Ok(BatchOutcome {
        breakdown,
        grad,
        dissimilarity,
    })
}

/// Loss only, for validation monitoring.
pub fn batch_loss(
    model: &RdCfaModel,
    bank: &MemoryBank,
    batch: &[&LabeledFeatures],
    cfg: &CfaConfig,
    flags: &AblationFlags,
) -> Result<LossBreakdown> {
    batch_objective(model, bank, batch, cfg, flags).map(|o| o.breakdown)
}
