//! End-to-end orchestration: frozen features are extracted once per dataset,
//! then shared by every training run, evaluation and ablation cell.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{extract_patch_features, Backbone, Preprocess};
use crate::checkpoint::{BackboneInfo, Checkpoint};
use crate::config::Config;
use crate::data::{load_mask, Dataset};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, AblationRow, ClassResult, ClassTestSet, ReportTable, TestItem};
use crate::model::LabeledFeatures;
use crate::objective::AblationFlags;
use crate::trainer::{train, TrainReport};

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub class_names: Vec<String>,
    pub train: Vec<LabeledFeatures>,
    pub test: Vec<ClassTestSet>,
    /// Scoring resolution `(H, W)`, equal to the preprocessed input size.
    pub image_size: (usize, usize),
    pub backbone: BackboneInfo,
}

impl PreparedDataset {
    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim
    }
}

pub fn backbone_info(backbone: &dyn Backbone) -> BackboneInfo {
    BackboneInfo {
        name: backbone.name().to_string(),
        weights_digest: backbone.weights_digest(),
        feature_dim: backbone.feature_dim(),
    }
}

/// Run the frozen backbone over every image of `dataset`.
pub fn prepare(dataset: &Dataset, backbone: &dyn Backbone, preprocess: &Preprocess) -> Result<PreparedDataset> {
    let features = |path: &std::path::Path| -> Result<_> {
        let image = preprocess.load(path)?;
        extract_patch_features(backbone, image.view())
    };
    let train = dataset
        .train
        .par_iter()
        .map(|s| {
            Ok(LabeledFeatures {
                label: s.label,
                features: features(&s.path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let test = dataset
        .test
        .iter()
        .zip(&dataset.class_names)
        .map(|(samples, name)| {
            let items = samples
                .par_iter()
                .map(|s| {
                    Ok(TestItem {
                        features: features(&s.path)?,
                        anomalous: s.anomalous,
                        mask: s.mask.as_deref().map(|m| load_mask(m, preprocess.size)).transpose()?,
                        path: s.path.display().to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ClassTestSet {
                name: name.clone(),
                items,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedDataset {
        class_names: dataset.class_names.clone(),
        train,
        test,
        image_size: (preprocess.size, preprocess.size),
        backbone: backbone_info(backbone),
    })
}

/// Train with `cfg` (seed taken from `cfg.seed`) and package the result.
pub fn train_checkpoint(cfg: &Config, data: &PreparedDataset) -> Result<(Checkpoint, TrainReport)> {
    let tc = cfg.train_config(data.feature_dim())?;
    let out = train(&tc, &data.train, &data.class_names)?;
    let ck = Checkpoint {
        model: out.model,
        bank: out.bank,
        class_names: data.class_names.clone(),
        train_config: tc,
        backbone: data.backbone.clone(),
        config: cfg.to_flat(),
    };
    Ok((ck, out.report))
}

/// Refuse to score features from a different backbone than the checkpoint's.
pub fn check_compatible(ck: &Checkpoint, data: &PreparedDataset) -> Result<()> {
    if ck.backbone.feature_dim != data.feature_dim() || ck.train_config.descriptor.input_dim != data.feature_dim() {
        return Err(Error::shape(format!(
            "checkpoint expects {}-dim features, dataset has {}",
            ck.train_config.descriptor.input_dim,
            data.feature_dim()
        )));
    }
    if ck.backbone.weights_digest != data.backbone.weights_digest {
        return Err(Error::shape(format!(
            "checkpoint was trained on backbone `{}` with different weights",
            ck.backbone.name
        )));
    }
    Ok(())
}

pub fn evaluate_checkpoint(ck: &Checkpoint, data: &PreparedDataset, sigma: f64) -> Result<Vec<(String, ClassResult)>> {
    check_compatible(ck, data)?;
    evaluate(&data.test, &ck.model, &ck.bank, data.image_size, sigma)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub table: ReportTable,
    pub reports: Vec<TrainReport>,
    pub seeds: Vec<u64>,
}

pub fn run_seeds(cfg: &Config) -> Vec<u64> {
    (0..cfg.runs.max(1) as u64).map(|i| cfg.seed + i).collect()
}

/// `cfg.runs` train/evaluate runs with seeds `seed, seed + 1, ...`, averaged.
pub fn run_experiment(cfg: &Config, data: &PreparedDataset) -> Result<ExperimentOutcome> {
    let seeds = run_seeds(cfg);
    let mut results = Vec::with_capacity(seeds.len());
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let run_cfg = Config { seed, ..cfg.clone() };
        let (ck, report) = train_checkpoint(&run_cfg, data)?;
        results.push(evaluate_checkpoint(&ck, data, cfg.sigma)?);
        reports.push(report);
    }
    Ok(ExperimentOutcome {
        table: ReportTable::from_runs(&results, &cfg.texture_classes)?,
        reports,
        seeds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationGrid {
    /// Bank augmentation x bank refresh.
    Flags,
    /// Dissimilarity weighting off / on.
    Dissimilarity,
    /// `rho x alpha_kl x alpha_dr`.
    Hyper,
}

impl std::str::FromStr for AblationGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flags" => Ok(Self::Flags),
            "dissimilarity" => Ok(Self::Dissimilarity),
            "hyper" => Ok(Self::Hyper),
            other => Err(Error::Config(format!(
                "unknown grid `{other}` (expected flags, dissimilarity or hyper)"
            ))),
        }
    }
}

pub const RHO_GRID: [f64; 4] = [5.0, 10.0, 20.0, 50.0];
pub const ALPHA_GRID: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];

/// Configurations for one grid, in row order. With both bank enhancements
/// off the row is plain coupled-hypersphere adaptation, so the class-aware
/// terms are disabled as well.
pub fn ablation_configs(grid: AblationGrid, base: &Config) -> Vec<Config> {
    let with_flags = |augment: bool, refresh: bool, dissimilarity: bool| {
        let mut c = base.clone();
        c.flags = AblationFlags {
            augment_bank: augment,
            refresh_bank: refresh,
            use_dissimilarity: dissimilarity,
        };
        if !augment && !refresh {
            c.alpha_kl = 0.0;
            c.alpha_dr = 0.0;
            c.flags.use_dissimilarity = false;
        }
        c
    };
    match grid {
        AblationGrid::Flags => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(a, r)| with_flags(a, r, base.flags.use_dissimilarity))
            .collect(),
        AblationGrid::Dissimilarity => [false, true].into_iter().map(|d| with_flags(true, true, d)).collect(),
        AblationGrid::Hyper => {
            let mut out = Vec::new();
            for rho in RHO_GRID {
                for alpha_kl in ALPHA_GRID {
                    for alpha_dr in ALPHA_GRID {
                        out.push(Config {
                            rho,
                            alpha_kl,
                            alpha_dr,
                            ..base.clone()
                        });
                    }
                }
            }
            out
        }
    }
}

pub fn ablation_row(cfg: &Config, table: &ReportTable) -> AblationRow {
    let total = table.total();
    AblationRow {
        flags: cfg.flags,
        alpha_kl: cfg.alpha_kl,
        alpha_dr: cfg.alpha_dr,
        rho: cfg.rho,
        detection: total.detection,
        localization: total.localization,
        runs: table.runs,
    }
}

pub fn run_ablation(grid: AblationGrid, base: &Config, data: &PreparedDataset) -> Result<Vec<AblationRow>> {
    ablation_configs(grid, base)
        .iter()
        .map(|cfg| Ok(ablation_row(cfg, &run_experiment(cfg, data)?.table)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        let base = Config::desk_scale();
        let flags = ablation_configs(AblationGrid::Flags, &base);
        assert_eq!(flags.len(), 4);
        assert_eq!(flags[0].flags, AblationFlags::NONE);
        assert_eq!((flags[0].alpha_kl, flags[0].alpha_dr), (0.0, 0.0));
        assert_eq!(flags[3].flags, AblationFlags::ALL);
        assert_eq!(flags[3].alpha_kl, base.alpha_kl);

        let dm = ablation_configs(AblationGrid::Dissimilarity, &base);
        assert_eq!(dm.len(), 2);
        assert!(!dm[0].flags.use_dissimilarity && dm[1].flags.use_dissimilarity);

        assert_eq!(ablation_configs(AblationGrid::Hyper, &base).len(), 100);
        assert!("nope".parse::<AblationGrid>().is_err());
    }
}
