//! Optimization loop: shuffled mixed-class batches, one AdamW step per batch,
//! bank refresh at the epoch barrier.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptor::DescriptorConfig;
use crate::error::{Error, Result};
use crate::losses::{CfaConfig, LossBreakdown};
use crate::memory_bank::MemoryBank;
use crate::model::{LabeledFeatures, RdCfaModel};
use crate::objective::{batch_loss, batch_objective, check_breakdown, AblationFlags};
use crate::optim::AdamW;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub flags: AblationFlags,
    pub cfa: CfaConfig,
    pub descriptor: DescriptorConfig,
    pub latent_dim: usize,
    /// Per-class fraction of training images held out for loss monitoring.
    pub val_fraction: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if self.flags.use_dissimilarity && self.batch_size < 2 {
            return Err(Error::invalid("the dissimilarity matrix needs batch size >= 2"));
        }
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent dim must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate and weight decay must be >= 0"));
        }
        self.cfa.validate()?;
        self.descriptor.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub size: usize,
    pub breakdown: LossBreakdown,
    /// Dissimilarity fell back to unit weights.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch-mean breakdown, one per epoch.
    pub epochs: Vec<LossBreakdown>,
    pub batches: Vec<BatchLog>,
    /// Held-out loss after each epoch; empty when nothing is held out.
    pub validation: Vec<LossBreakdown>,
    pub skipped_batches: usize,
    pub final_epoch_stamp: u64,
    /// Excluded from equality-sensitive comparisons by callers.
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<&LossBreakdown> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RdCfaModel,
    pub bank: MemoryBank,
    pub report: TrainReport,
}

#[derive(Debug, Clone)]
pub struct EpochOutcome {
    pub mean: LossBreakdown,
    pub logs: Vec<BatchLog>,
    pub skipped: usize,
}

/// Per class, the last `floor(n * fraction)` samples (in input order) are
/// held out, always keeping at least one for training.
pub fn split_validation(samples: &[LabeledFeatures], num_classes: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut per_class = vec![Vec::new(); num_classes];
    for (i, s) in samples.iter().enumerate() {
        if s.label < num_classes {
            per_class[s.label].push(i);
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for idx in per_class {
        let n_val = ((idx.len() as f64 * fraction).floor() as usize).min(idx.len().saturating_sub(1));
        let cut = idx.len() - n_val;
        train.extend_from_slice(&idx[..cut]);
        val.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Shuffled index batches covering every sample once.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn check_labels(samples: &[LabeledFeatures], class_names: &[String]) -> Result<()> {
    if let Some(s) = samples.iter().find(|s| s.label >= class_names.len()) {
        return Err(Error::LabelOutOfRange {
            label: s.label,
            num_classes: class_names.len(),
        });
    }
    if let Some(c) = (0..class_names.len()).find(|&c| !samples.iter().any(|s| s.label == c)) {
        return Err(Error::EmptyClass(class_names[c].clone()));
    }
    Ok(())
}

/// One pass over `batches`, one optimizer step each. Single-sample batches are
/// skipped when the dissimilarity matrix is on.
pub fn train_epoch(
    model: &mut RdCfaModel,
    optimizer: &mut AdamW,
    bank: &MemoryBank,
    batches: &[Vec<&LabeledFeatures>],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochOutcome> {
    let mut logs = Vec::with_capacity(batches.len());
    let mut skipped = 0;
    for (b, batch) in batches.iter().enumerate() {
        if cfg.flags.use_dissimilarity && batch.len() < 2 {
            log::warn!("epoch {epoch} batch {b}: single-sample batch skipped (dissimilarity needs pairs)");
            skipped += 1;
            continue;
        }
        let out = batch_objective(model, bank, batch, &cfg.cfa, &cfg.flags)?;
        check_breakdown(&out.breakdown)?;
        optimizer.step(model.parameters_mut(), out.grad.slices());
        logs.push(BatchLog {
            epoch,
            batch: b,
            size: batch.len(),
            breakdown: out.breakdown,
            degenerate: out.dissimilarity.degenerate,
        });
    }
    if logs.is_empty() {
        return Err(Error::invalid(format!("epoch {epoch} had no usable batches")));
    }
    let breakdowns: Vec<LossBreakdown> = logs.iter().map(|l| l.breakdown).collect();
    Ok(EpochOutcome {
        mean: LossBreakdown::mean(&breakdowns),
        logs,
        skipped,
    })
}

/// Train from scratch on normal features of `class_names.len()` classes.
pub fn train(cfg: &TrainConfig, samples: &[LabeledFeatures], class_names: &[String]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    check_labels(samples, class_names)?;
    let start = Instant::now();

    let (train_idx, val_idx) = split_validation(samples, class_names.len(), cfg.val_fraction);
    let pool: Vec<LabeledFeatures> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let held_out: Vec<&LabeledFeatures> = val_idx.iter().map(|&i| &samples[i]).collect();

    let mut model = RdCfaModel::new(
        cfg.descriptor,
        cfg.latent_dim,
        class_names.len(),
        cfg.cfa.rho,
        cfg.seed,
    )?;
    let mut optimizer = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut bank = MemoryBank::initialize(&pool, class_names, &model, cfg.flags.augment_bank)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        batches: Vec::new(),
        validation: Vec::new(),
        skipped_batches: 0,
        final_epoch_stamp: 0,
        wall_clock_secs: 0.0,
    };
    for epoch in 0..cfg.epochs {
        let batches: Vec<Vec<&LabeledFeatures>> = epoch_batches(pool.len(), cfg.batch_size, &mut rng)
            .into_iter()
            .map(|b| b.into_iter().map(|i| &pool[i]).collect())
            .collect();
        let out = train_epoch(&mut model, &mut optimizer, &bank, &batches, cfg, epoch)?;
        log::info!(
            "epoch {}: total {:.6} (att {:.6}, rep {:.6}, kld {:.6}, d_rep {:.6})",
            epoch + 1,
            out.mean.total,
            out.mean.f_att,
            out.mean.f_rep,
            out.mean.kld,
            out.mean.d_rep
        );
        report.epochs.push(out.mean);
        report.batches.extend(out.logs);
        report.skipped_batches += out.skipped;

        if cfg.flags.refresh_bank {
            bank = bank.refresh(&pool, class_names, &model)?;
        }
        if !held_out.is_empty() {
            let mut parts = Vec::new();
            for chunk in held_out.chunks(cfg.batch_size) {
                parts.push(batch_loss(&model, &bank, chunk, &cfg.cfa, &cfg.flags)?);
            }
            report.validation.push(LossBreakdown::mean(&parts));
        }
    }
    report.final_epoch_stamp = bank.epoch_stamp();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome { model, bank, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::PatchFeatureMap;
    use ndarray::Array3;
    use rand::Rng;

    fn sample(label: usize, seed: u64) -> LabeledFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((4, 2, 2), |(c, _, _)| label as f64 + 0.1 * c as f64 + rng.gen_range(-0.2..0.2));
        LabeledFeatures {
            label,
            features: PatchFeatureMap::new(data).unwrap(),
        }
    }

    fn toy_set() -> (Vec<LabeledFeatures>, Vec<String>) {
        let samples = (0..12).map(|i| sample(i % 3, i as u64)).collect();
        (samples, vec!["a".into(), "b".into(), "c".into()])
    }

    fn toy_config() -> TrainConfig {
        let descriptor = DescriptorConfig {
            input_dim: 4,
            output_dim: 4,
            use_coordinate_channels: true,
        };
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e-2,
            weight_decay: 5e-4,
            seed: 3,
            flags: AblationFlags::ALL,
            cfa: CfaConfig::with_defaults(4),
            descriptor,
            latent_dim: 2,
            val_fraction: 0.0,
        }
    }

    #[test]
    fn validation_split_keeps_a_training_sample_per_class() {
        let (samples, _) = toy_set();
        let (train, val) = split_validation(&samples, 3, 0.5);
        assert_eq!(train.len() + val.len(), 12);
        assert_eq!(val.len(), 6);
        let (train, val) = split_validation(&samples[..3], 3, 0.9);
        assert_eq!((train.len(), val.len()), (3, 0));
    }

    #[test]
    fn report_shape_and_stamp() {
        let (samples, names) = toy_set();
        let out = train(&toy_config(), &samples, &names).unwrap();
        assert_eq!(out.report.epochs.len(), 3);
        assert_eq!(out.report.final_epoch_stamp, 3);
        assert_eq!(out.bank.epoch_stamp(), 3);
        assert_eq!(out.report.batches.len(), 9);

        let cfg = TrainConfig {
            flags: AblationFlags {
                refresh_bank: false,
                ..AblationFlags::ALL
            },
            ..toy_config()
        };
        assert_eq!(train(&cfg, &samples, &names).unwrap().report.final_epoch_stamp, 0);
    }

    #[test]
    fn epoch_mean_matches_batch_logs() {
        let (samples, names) = toy_set();
        let out = train(&toy_config(), &samples, &names).unwrap();
        for (e, mean) in out.report.epochs.iter().enumerate() {
            let logs: Vec<_> = out.report.batches.iter().filter(|l| l.epoch == e).collect();
            let total: f64 = logs.iter().map(|l| l.breakdown.total).sum::<f64>() / logs.len() as f64;
            assert!((total - mean.total).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (samples, names) = toy_set();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..toy_config()
        };
        let fresh = RdCfaModel::new(cfg.descriptor, cfg.latent_dim, 3, cfg.cfa.rho, cfg.seed).unwrap();
        let out = train(&cfg, &samples, &names).unwrap();
        assert_eq!(out.model.parameters(), fresh.parameters());
    }

    #[test]
    fn single_sample_batches_are_skipped() {
        let (samples, names) = toy_set();
        let cfg = TrainConfig {
            batch_size: 5,
            epochs: 1,
            ..toy_config()
        };
        let model = RdCfaModel::new(cfg.descriptor, 2, 3, 10.0, 0).unwrap();
        let bank = MemoryBank::initialize(&samples, &names, &model, true).unwrap();
        let mut m = model.clone();
        let mut opt = AdamW::new(1e-3, 0.0);
        let batches = vec![vec![&samples[0], &samples[1]], vec![&samples[2]]];
        let out = train_epoch(&mut m, &mut opt, &bank, &batches, &cfg, 0).unwrap();
        assert_eq!((out.logs.len(), out.skipped), (1, 1));
    }

    #[test]
    fn identical_batch_engages_degenerate_fallback() {
        let (samples, names) = toy_set();
        let cfg = toy_config();
        let model = RdCfaModel::new(cfg.descriptor, 2, 3, 10.0, 0).unwrap();
        let bank = MemoryBank::initialize(&samples, &names, &model, true).unwrap();
        let mut m = model.clone();
        let mut opt = AdamW::new(1e-3, 0.0);
        let batches = vec![vec![&samples[0], &samples[0], &samples[0]]];
        let out = train_epoch(&mut m, &mut opt, &bank, &batches, &cfg, 0).unwrap();
        assert!(out.logs[0].degenerate);
    }

    #[test]
    fn empty_class_is_named() {
        let (samples, _) = toy_set();
        let names = vec!["a".to_string(), "b".into(), "c".into(), "ghost".into()];
        match train(&toy_config(), &samples, &names) {
            Err(Error::EmptyClass(c)) => assert_eq!(c, "ghost"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = toy_config();
        assert!(TrainConfig { epochs: 0, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { val_fraction: 1.0, ..base }.validate().is_err());
    }
}
