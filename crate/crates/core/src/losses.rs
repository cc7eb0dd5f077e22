//! Coupled-hypersphere attraction/repulsion losses and the weighted total.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory_bank::{MemoryBank, NeighborResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfaConfig {
    /// Attraction neighbors per query.
    pub k: usize,
    /// Hard negatives per query (neighbor ranks `k+1 ..= k+j`).
    pub j: usize,
    /// Squared hypersphere radius.
    pub r_squared: f64,
    /// Repulsion margin.
    pub alpha: f64,
    pub alpha_kl: f64,
    pub alpha_dr: f64,
    pub rho: f64,
}

impl CfaConfig {
    /// Defaults for a descriptor of width `output_dim`: `r^2 = 1e-5 D'`, `alpha = 0.1 r^2`.
    pub fn with_defaults(output_dim: usize) -> Self {
        let r_squared = 1e-5 * output_dim as f64;
        Self {
            k: 3,
            j: 3,
            r_squared,
            alpha: 0.1 * r_squared,
            alpha_kl: 0.5,
            alpha_dr: 0.1,
            rho: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.k >= 1
            && self.j >= 1
            && self.r_squared > 0.0
            && self.alpha >= 0.0
            && self.alpha_kl >= 0.0
            && self.alpha_dr >= 0.0
            && self.rho > 0.0;
        if !ok {
            return Err(Error::invalid(format!("invalid loss configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub f_att: f64,
    pub f_rep: f64,
    pub kld: f64,
    pub d_rep: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [(&'static str, f64); 5] {
        [
            ("f_att", self.f_att),
            ("f_rep", self.f_rep),
            ("kld", self.kld),
            ("d_rep", self.d_rep),
            ("total", self.total),
        ]
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.f_att += b.f_att;
            acc.f_rep += b.f_rep;
            acc.kld += b.kld;
            acc.d_rep += b.d_rep;
            acc.total += b.total;
        }
        LossBreakdown {
            f_att: acc.f_att / n,
            f_rep: acc.f_rep / n,
            kld: acc.kld / n,
            d_rep: acc.d_rep / n,
            total: acc.total / n,
        }
    }
}

/// `alpha_kl * kld + alpha_dr * d_rep + f_att + f_rep`.
pub fn total_loss(f_att: f64, f_rep: f64, kld: f64, d_rep: f64, cfg: &CfaConfig) -> LossBreakdown {
    LossBreakdown {
        f_att,
        f_rep,
        kld,
        d_rep,
        total: cfg.alpha_kl * kld + cfg.alpha_dr * d_rep + f_att + f_rep,
    }
}

fn check_queries(queries: ArrayView2<f64>, bank: &MemoryBank, needed: usize) -> Result<()> {
    if queries.ncols() == 0 {
        return Err(Error::invalid("no query vectors"));
    }
    if queries.nrows() != bank.width() {
        return Err(Error::shape(format!(
            "query width {} but bank width {}",
            queries.nrows(),
            bank.width()
        )));
    }
    if needed > bank.len() {
        return Err(Error::invalid(format!(
            "{needed} neighbors requested from a bank of {}",
            bank.len()
        )));
    }
    Ok(())
}

/// Mean over queries and the `k` nearest entries of `max(0, d - r^2)`.
/// `queries` is `E x T`, one column per patch.
pub fn attract_loss(queries: ArrayView2<f64>, bank: &MemoryBank, k: usize, r_squared: f64) -> Result<f64> {
    check_queries(queries, bank, k)?;
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let neighbors = bank.nearest_columns(queries, k)?;
    let sum: f64 = neighbors
        .iter()
        .flat_map(|n| n.distances.iter())
        .map(|d| (d - r_squared).max(0.0))
        .sum();
    Ok(sum / (queries.ncols() * k) as f64)
}

/// Mean over queries and hard negatives (ranks `k+1 ..= k+j`) of `max(0, r^2 - d - alpha)`.
pub fn repel_loss(
    queries: ArrayView2<f64>,
    bank: &MemoryBank,
    k: usize,
    j: usize,
    r_squared: f64,
    alpha: f64,
) -> Result<f64> {
    check_queries(queries, bank, k + j)?;
    if j == 0 {
        return Err(Error::invalid("j must be >= 1"));
    }
    let neighbors = bank.nearest_columns(queries, k + j)?;
    let sum: f64 = neighbors
        .iter()
        .flat_map(|n| n.distances[k..].iter())
        .map(|d| (r_squared - d - alpha).max(0.0))
        .sum();
    Ok(sum / (queries.ncols() * j) as f64)
}

/// Both hypersphere terms from one neighbor search, with the gradient w.r.t. the queries.
#[derive(Debug, Clone)]
pub struct CoupledOutput {
    /// Unnormalized sums; divide by `count * k` / `count * j`.
    pub att_sum: f64,
    pub rep_sum: f64,
    /// Gradient of `att_sum * att_scale + rep_sum * rep_scale` w.r.t. each query column.
    pub grad: Array2<f64>,
}

/// Hinge sums for a block of queries given precomputed neighbors. `att_scale`
/// and `rep_scale` are the normalizers applied by the caller, folded into the gradient.
pub fn coupled_terms(
    queries: ArrayView2<f64>,
    bank: &MemoryBank,
    neighbors: &[NeighborResult],
    cfg: &CfaConfig,
    att_scale: f64,
    rep_scale: f64,
) -> CoupledOutput {
    let mut grad = Array2::zeros(queries.raw_dim());
    let mut att_sum = 0.0;
    let mut rep_sum = 0.0;
    let entries = bank.entries();
    for (t, nb) in neighbors.iter().enumerate() {
        let q = queries.column(t);
        let mut g = grad.column_mut(t);
        for (rank, (&idx, &d)) in nb.indices.iter().zip(&nb.distances).enumerate() {
            let c = entries.row(idx);
            let coef = if rank < cfg.k {
                let h = d - cfg.r_squared;
                if h <= 0.0 {
                    continue;
                }
                att_sum += h;
                2.0 * att_scale
            } else {
                let h = cfg.r_squared - d - cfg.alpha;
                if h <= 0.0 {
                    continue;
                }
                rep_sum += h;
                -2.0 * rep_scale
            };
            g.zip_mut_with(&(&q - &c), |gi, diff| *gi += coef * diff);
        }
    }
    CoupledOutput {
        att_sum,
        rep_sum,
        grad,
    }
}
