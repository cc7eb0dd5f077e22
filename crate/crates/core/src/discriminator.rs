//! Regularized discriminator: per-patch diagonal Gaussians, learnable class
//! means, the supervised KL term, the batch dissimilarity matrix and the
//! dissimilarity-weighted repulsion between class means.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::descriptor::TargetFeatureMap;
use crate::error::{Error, Result};

/// Range below which min-max scaling is considered degenerate.
pub const DEGENERATE_RANGE: f64 = 1e-12;

/// Per-patch mean and log-variance, each `m x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    pub mu: Array2<f64>,
    pub log_var: Array2<f64>,
    pub height: usize,
    pub width: usize,
}

impl GaussianField {
    pub fn new(mu: Array2<f64>, log_var: Array2<f64>, height: usize, width: usize) -> Result<Self> {
        if mu.dim() != log_var.dim() || mu.ncols() != height * width {
            return Err(Error::shape("mu/log_var/grid disagree"));
        }
        if mu.iter().chain(log_var.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian field".into()));
        }
        Ok(Self {
            mu,
            log_var,
            height,
            width,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.nrows()
    }

    pub fn patch_count(&self) -> usize {
        self.mu.ncols()
    }

    /// Diagonal of the covariance, `exp(log_var)`.
    pub fn variance(&self) -> Array2<f64> {
        self.log_var.mapv(f64::exp)
    }
}

/// Learnable class means, `N_c x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    pub means: Array2<f64>,
}

impl ClassMeans {
    pub fn new(means: Array2<f64>) -> Result<Self> {
        if means.nrows() == 0 {
            return Err(Error::invalid("need at least one class mean"));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("class means".into()));
        }
        Ok(Self { means })
    }

    /// Standard normal draws scaled by `sqrt(rho) / 2`.
    pub fn random(num_classes: usize, latent_dim: usize, rho: f64, rng: &mut impl Rng) -> Result<Self> {
        let scale = rho.sqrt() / 2.0;
        Self::new(Array2::from_shape_simple_fn((num_classes, latent_dim), || {
            scale * rng.sample::<f64, _>(StandardNormal)
        }))
    }

    pub fn num_classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.means.ncols()
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }

    pub fn squared_distance(&self, a: usize, b: usize) -> f64 {
        self.means
            .row(a)
            .iter()
            .zip(self.means.row(b))
            .map(|(x, y)| (x - y).powi(2))
            .sum()
    }
}

/// Two per-location affine heads producing `mu` and `log_var`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub mu_weight: Array2<f64>,
    pub mu_bias: Array1<f64>,
    pub log_var_weight: Array2<f64>,
    pub log_var_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorGrad {
    pub mu_weight: Array2<f64>,
    pub mu_bias: Array1<f64>,
    pub log_var_weight: Array2<f64>,
    pub log_var_bias: Array1<f64>,
}

impl Discriminator {
    /// Uniform fan-in weights; biases start at zero so `Sigma_Q` starts near identity.
    pub fn new(input_dim: usize, latent_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || latent_dim == 0 {
            return Err(Error::invalid("discriminator dimensions must be >= 1"));
        }
        let bound = 1.0 / (input_dim as f64).sqrt();
        let mut draw = || Array2::from_shape_simple_fn((latent_dim, input_dim), || rng.gen_range(-bound..bound));
        let mu_weight = draw();
        let log_var_weight = draw() * 0.1;
        Ok(Self {
            mu_weight,
            mu_bias: Array1::zeros(latent_dim),
            log_var_weight,
            log_var_bias: Array1::zeros(latent_dim),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mu_weight.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_weight.nrows()
    }

    pub(crate) fn heads(&self, input: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut mu = self.mu_weight.dot(&input);
        mu += &self.mu_bias.view().insert_axis(Axis(1));
        let mut log_var = self.log_var_weight.dot(&input);
        log_var += &self.log_var_bias.view().insert_axis(Axis(1));
        (mu, log_var)
    }

    pub fn discriminate(&self, target: &TargetFeatureMap) -> Result<GaussianField> {
        if target.channels() != self.input_dim() {
            return Err(Error::shape(format!(
                "discriminator expects {} channels, got {}",
                self.input_dim(),
                target.channels()
            )));
        }
        let (mu, log_var) = self.heads(target.matrix());
        GaussianField::new(mu, log_var, target.height(), target.width())
    }

    /// Parameter gradients and the gradient flowing back into the `D' x T` input.
    pub fn backward(
        &self,
        input: ArrayView2<f64>,
        grad_mu: ArrayView2<f64>,
        grad_log_var: ArrayView2<f64>,
    ) -> (DiscriminatorGrad, Array2<f64>) {
        let grad = DiscriminatorGrad {
            mu_weight: grad_mu.dot(&input.t()),
            mu_bias: grad_mu.sum_axis(Axis(1)),
            log_var_weight: grad_log_var.dot(&input.t()),
            log_var_bias: grad_log_var.sum_axis(Axis(1)),
        };
        let grad_input = self.mu_weight.t().dot(&grad_mu) + self.log_var_weight.t().dot(&grad_log_var);
        (grad, grad_input)
    }
}

impl DiscriminatorGrad {
    pub fn zeros_like(d: &Discriminator) -> Self {
        Self {
            mu_weight: Array2::zeros(d.mu_weight.raw_dim()),
            mu_bias: Array1::zeros(d.mu_bias.raw_dim()),
            log_var_weight: Array2::zeros(d.log_var_weight.raw_dim()),
            log_var_bias: Array1::zeros(d.log_var_bias.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, o: &Self) {
        self.mu_weight += &o.mu_weight;
        self.mu_bias += &o.mu_bias;
        self.log_var_weight += &o.log_var_weight;
        self.log_var_bias += &o.log_var_bias;
    }
}

/// KL value with gradients w.r.t. every field's `mu`, `log_var`, and the class means.
#[derive(Debug, Clone)]
pub struct KldOutput {
    pub value: f64,
    pub grad_mu: Vec<Array2<f64>>,
    pub grad_log_var: Vec<Array2<f64>>,
    pub grad_means: Array2<f64>,
}

fn check_kld_inputs(fields: &[GaussianField], labels: &[usize], means: &ClassMeans) -> Result<()> {
    if fields.len() != labels.len() || fields.is_empty() {
        return Err(Error::shape("one label per gaussian field required"));
    }
    for (f, &l) in fields.iter().zip(labels) {
        means.check_label(l)?;
        if f.latent_dim() != means.latent_dim() {
            return Err(Error::shape("latent dims of field and class means differ"));
        }
    }
    Ok(())
}

/// Supervised KL divergence to `N(mu_l, I)`, averaged over patches and samples.
pub fn kld_loss(fields: &[GaussianField], labels: &[usize], means: &ClassMeans) -> Result<f64> {
    check_kld_inputs(fields, labels, means)?;
    let m = means.latent_dim() as f64;
    let total_patches: usize = fields.iter().map(|f| f.patch_count()).sum();
    let mut sum = 0.0;
    for (f, &l) in fields.iter().zip(labels) {
        let target = means.means.row(l);
        for t in 0..f.patch_count() {
            let mu = f.mu.column(t);
            let lv = f.log_var.column(t);
            let dist: f64 = mu.iter().zip(target.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            let trace: f64 = lv.iter().map(|v| v.exp()).sum();
            let log_det: f64 = lv.sum();
            sum += dist + trace - log_det - m;
        }
    }
    Ok(sum / total_patches as f64)
}

pub fn kld_loss_with_grad(fields: &[GaussianField], labels: &[usize], means: &ClassMeans) -> Result<KldOutput> {
    let value = kld_loss(fields, labels, means)?;
    let total_patches: usize = fields.iter().map(|f| f.patch_count()).sum();
    let scale = 1.0 / total_patches as f64;
    let mut grad_means = Array2::zeros(means.means.raw_dim());
    let mut grad_mu = Vec::with_capacity(fields.len());
    let mut grad_log_var = Vec::with_capacity(fields.len());
    for (f, &l) in fields.iter().zip(labels) {
        let target = means.means.row(l).insert_axis(Axis(1));
        let g_mu = (&f.mu - &target) * (2.0 * scale);
        grad_means.row_mut(l).scaled_add(-1.0, &g_mu.sum_axis(Axis(1)));
        grad_log_var.push(f.log_var.mapv(|v| (v.exp() - 1.0) * scale));
        grad_mu.push(g_mu);
    }
    Ok(KldOutput {
        value,
        grad_mu,
        grad_log_var,
        grad_means,
    })
}

/// Min-max scaled mean pairwise patch distances between samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMatrix {
    pub values: Array2<f64>,
    /// True when the scaling range collapsed and the all-ones fallback was used.
    pub degenerate: bool,
}

impl DissimilarityMatrix {
    /// Unit weights, i.e. unweighted repulsion.
    pub fn ones(n: usize) -> Self {
        Self {
            values: Array2::ones((n, n)),
            degenerate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Mean squared distance between every patch mean of sample `a` and every patch mean of sample `b`.
///
/// Uses `E||x - y||^2 = E||x||^2 + E||y||^2 - 2 E[x] . E[y]` for independent draws.
fn mean_pair_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let sq = |x: &Array2<f64>| x.mapv(|v| v * v).sum() / x.ncols() as f64;
    let ma = a.mean_axis(Axis(1)).expect("non-empty");
    let mb = b.mean_axis(Axis(1)).expect("non-empty");
    (sq(a) + sq(b) - 2.0 * ma.dot(&mb)).max(0.0)
}

pub fn dissimilarity_matrix(fields: &[GaussianField]) -> Result<DissimilarityMatrix> {
    let n = fields.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "dissimilarity matrix needs at least 2 samples, got {n}"
        )));
    }
    let first = &fields[0];
    if fields
        .iter()
        .any(|f| f.mu.dim() != first.mu.dim() || f.height != first.height || f.width != first.width)
    {
        return Err(Error::shape("all samples must share grid and latent size"));
    }
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let d = mean_pair_distance(&fields[i].mu, &fields[j].mu);
            m[[i, j]] = d;
            m[[j, i]] = d;
        }
    }
    Ok(min_max_scale(m))
}

pub(crate) fn min_max_scale(m: Array2<f64>) -> DissimilarityMatrix {
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= DEGENERATE_RANGE {
        return DissimilarityMatrix {
            values: Array2::ones(m.raw_dim()),
            degenerate: true,
        };
    }
    DissimilarityMatrix {
        values: m.mapv(|v| (v - lo) / (hi - lo)),
        degenerate: false,
    }
}

fn check_repulsive_inputs(means: &ClassMeans, labels: &[usize], dm: &DissimilarityMatrix, rho: f64) -> Result<()> {
    if !(rho > 0.0) {
        return Err(Error::invalid(format!("rho must be positive, got {rho}")));
    }
    if dm.values.dim() != (labels.len(), labels.len()) {
        return Err(Error::shape(format!(
            "dissimilarity matrix is {:?} for {} labels",
            dm.values.dim(),
            labels.len()
        )));
    }
    labels.iter().try_for_each(|&l| means.check_label(l))
}

/// `(1/rho) * sum over ordered pairs with different labels of max(0, DM_ij (rho - |mu_li - mu_lj|^2))^2`.
pub fn repulsive_loss(means: &ClassMeans, labels: &[usize], dm: &DissimilarityMatrix, rho: f64) -> Result<f64> {
    check_repulsive_inputs(means, labels, dm, rho)?;
    let mut sum = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == lj {
                continue;
            }
            let h = dm.values[[i, j]] * (rho - means.squared_distance(li, lj));
            sum += h.max(0.0).powi(2);
        }
    }
    Ok(sum / rho)
}

/// Repulsion value and its gradient w.r.t. the class means.
pub fn repulsive_loss_with_grad(
    means: &ClassMeans,
    labels: &[usize],
    dm: &DissimilarityMatrix,
    rho: f64,
) -> Result<(f64, Array2<f64>)> {
    let value = repulsive_loss(means, labels, dm, rho)?;
    let mut grad = Array2::zeros(means.means.raw_dim());
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == lj {
                continue;
            }
            let w = dm.values[[i, j]];
            let h = w * (rho - means.squared_distance(li, lj));
            if h <= 0.0 {
                continue;
            }
            // d/dmu_li of h^2/rho = (2h/rho) * w * (-2 (mu_li - mu_lj))
            let coef = -4.0 * h * w / rho;
            let diff = &means.means.row(li) - &means.means.row(lj);
            grad.row_mut(li).scaled_add(coef, &diff);
            grad.row_mut(lj).scaled_add(-coef, &diff);
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(mu: Array2<f64>, log_var: Array2<f64>) -> GaussianField {
        let t = mu.ncols();
        GaussianField::new(mu, log_var, 1, t).unwrap()
    }

    #[test]
    fn discriminate_shapes_and_bias_only_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Discriminator::new(8, 4, &mut rng).unwrap();
        let target = TargetFeatureMap::new(Array2::ones((8, 16)), 4, 4).unwrap();
        let g = d.discriminate(&target).unwrap();
        assert_eq!(g.mu.dim(), (4, 16));
        assert_eq!(g.log_var.dim(), (4, 16));

        let zero = Discriminator {
            mu_weight: Array2::zeros((4, 8)),
            mu_bias: Array1::zeros(4),
            log_var_weight: Array2::zeros((4, 8)),
            log_var_bias: Array1::zeros(4),
        };
        let g = zero.discriminate(&target).unwrap();
        assert!(g.mu.iter().all(|&v| v == 0.0));
        assert!(g.variance().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn discriminate_commutes_with_spatial_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Discriminator::new(3, 2, &mut rng).unwrap();
        let x = Array::from_shape_fn((3, 4), |(c, t)| (c as f64 - t as f64 * 0.7).sin());
        let perm = [2, 0, 3, 1];
        let xp = x.select(Axis(1), &perm);
        let g = d.discriminate(&TargetFeatureMap::new(x, 2, 2).unwrap()).unwrap();
        let gp = d.discriminate(&TargetFeatureMap::new(xp, 2, 2).unwrap()).unwrap();
        assert_eq!(gp.mu, g.mu.select(Axis(1), &perm));
        assert_eq!(gp.log_var, g.log_var.select(Axis(1), &perm));
    }

    #[test]
    fn discriminate_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Discriminator::new(8, 4, &mut rng).unwrap();
        let target = TargetFeatureMap::new(Array2::ones((7, 4)), 2, 2).unwrap();
        assert!(matches!(d.discriminate(&target), Err(Error::Shape(_))));
    }

    #[test]
    fn kld_hand_values() {
        let means = ClassMeans::new(array![[0.5, -1.0, 2.0, 0.0]]).unwrap();
        let mu = Array2::from_shape_fn((4, 3), |(i, _)| means.means[[0, i]]);
        let f = field(mu, Array2::zeros((4, 3)));
        assert!(kld_loss(&[f], &[0], &means).unwrap().abs() < 1e-12);

        let means = ClassMeans::new(array![[0.0]]).unwrap();
        let f = field(array![[1.0]], array![[0.0]]);
        assert!((kld_loss(&[f], &[0], &means).unwrap() - 1.0).abs() < 1e-12);

        let f = field(array![[0.0]], array![[2f64.ln()]]);
        let expect = 2.0 - 2f64.ln() - 1.0;
        assert!((kld_loss(&[f], &[0], &means).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.3069).abs() < 1e-4);
    }

    #[test]
    fn kld_rejects_bad_label() {
        let means = ClassMeans::new(array![[0.0], [1.0]]).unwrap();
        let f = field(array![[1.0]], array![[0.0]]);
        assert!(matches!(
            kld_loss(&[f], &[2], &means),
            Err(Error::LabelOutOfRange { label: 2, num_classes: 2 })
        ));
    }

    #[test]
    fn dissimilarity_hand_case() {
        let fields = [field(array![[0.0]], array![[0.0]]), field(array![[2.0]], array![[0.0]])];
        let dm = dissimilarity_matrix(&fields).unwrap();
        assert_eq!(dm.values, array![[0.0, 1.0], [1.0, 0.0]]);
        assert!(!dm.degenerate);
    }

    #[test]
    fn dissimilarity_degenerate_and_too_small() {
        let f = field(array![[1.0, 1.0], [2.0, 2.0]], Array2::zeros((2, 2)));
        let dm = dissimilarity_matrix(&[f.clone(), f.clone(), f.clone()]).unwrap();
        assert!(dm.degenerate);
        assert!(dm.values.iter().all(|&v| v == 1.0));
        assert!(dissimilarity_matrix(&[f]).is_err());
    }

    #[test]
    fn repulsive_hand_values() {
        let means = ClassMeans::new(array![[0.0, 0.0], [3.0, 4.0]]).unwrap();
        let dm = DissimilarityMatrix::ones(2);
        assert_eq!(repulsive_loss(&means, &[0, 1], &dm, 10.0).unwrap(), 0.0);

        let means = ClassMeans::new(array![[0.0], [2.0]]).unwrap();
        let v = repulsive_loss(&means, &[0, 1], &dm, 10.0).unwrap();
        assert!((v - 7.2).abs() < 1e-12);

        let zero = DissimilarityMatrix {
            values: Array2::zeros((2, 2)),
            degenerate: false,
        };
        assert_eq!(repulsive_loss(&means, &[0, 1], &zero, 10.0).unwrap(), 0.0);
        assert!(repulsive_loss(&means, &[0, 1], &dm, 0.0).is_err());
    }

    #[test]
    fn same_class_pairs_do_not_contribute() {
        let means = ClassMeans::new(array![[0.0], [1.0]]).unwrap();
        let dm = DissimilarityMatrix::ones(3);
        let with_dup = repulsive_loss(&means, &[0, 0, 1], &dm, 10.0).unwrap();
        // pairs (0,2),(1,2),(2,0),(2,1): four ordered cross-class pairs of distance 1
        assert!((with_dup - 4.0 * 81.0 / 10.0).abs() < 1e-12);
        let (_, g) = repulsive_loss_with_grad(&means, &[0, 0], &DissimilarityMatrix::ones(2), 10.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }
}
