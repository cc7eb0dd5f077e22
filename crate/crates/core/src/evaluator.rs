//! AUROC, per-class reports with group averages, and ablation tables.

use std::cmp::Ordering;
use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::PatchFeatureMap;
use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;
use crate::model::RdCfaModel;
use crate::objective::AblationFlags;
use crate::scorer::score_features;

/// Probability that a random positive outscores a random negative, ties counted
/// one half. Computed from average ranks (Mann-Whitney U).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUROC needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].total_cmp(&scores[order[i]]) == Ordering::Equal {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean
        let avg_rank = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone)]
pub struct TestItem {
    pub features: PatchFeatureMap,
    pub anomalous: bool,
    /// Ground truth at the scoring resolution; `None` means unavailable.
    pub mask: Option<Array2<bool>>,
    pub path: String,
}

#[derive(Debug, Clone)]
pub struct ClassTestSet {
    pub name: String,
    pub items: Vec<TestItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub detection: f64,
    /// `None` when some abnormal image lacks a mask.
    pub localization: Option<f64>,
}

/// Score every test image and compute per-class detection and pooled pixel AUROC.
pub fn evaluate_class(
    set: &ClassTestSet,
    model: &RdCfaModel,
    bank: &MemoryBank,
    image_size: (usize, usize),
    sigma: f64,
) -> Result<ClassResult> {
    let maps = set
        .items
        .par_iter()
        .map(|it| score_features(&it.features, model, bank, image_size.0, image_size.1, sigma))
        .collect::<Result<Vec<_>>>()?;
    let image_scores: Vec<f64> = maps.iter().map(|m| m.image_score).collect();
    let image_labels: Vec<bool> = set.items.iter().map(|it| it.anomalous).collect();
    let detection = auroc(&image_scores, &image_labels)
        .map_err(|e| Error::Data(format!("class `{}`: {e}", set.name)))?;

    let masks_complete = set.items.iter().all(|it| !it.anomalous || it.mask.is_some());
    let localization = if masks_complete {
        let mut pixel_scores = Vec::new();
        let mut pixel_labels = Vec::new();
        for (it, map) in set.items.iter().zip(&maps) {
            match &it.mask {
                Some(mask) => {
                    if mask.dim() != map.pixel_scores.dim() {
                        return Err(Error::shape(format!(
                            "{}: mask {:?} vs score map {:?}",
                            it.path,
                            mask.dim(),
                            map.pixel_scores.dim()
                        )));
                    }
                    pixel_labels.extend(mask.iter().copied());
                }
                None => pixel_labels.extend(std::iter::repeat(false).take(map.pixel_scores.len())),
            }
            pixel_scores.extend(map.pixel_scores.iter().copied());
        }
        auroc(&pixel_scores, &pixel_labels).ok()
    } else {
        log::warn!("class `{}`: missing masks, localization not reported", set.name);
        None
    };
    Ok(ClassResult {
        detection,
        localization,
    })
}

pub fn evaluate(
    sets: &[ClassTestSet],
    model: &RdCfaModel,
    bank: &MemoryBank,
    image_size: (usize, usize),
    sigma: f64,
) -> Result<Vec<(String, ClassResult)>> {
    sets.iter()
        .map(|s| Ok((s.name.clone(), evaluate_class(s, model, bank, image_size, sigma)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Object,
    Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub name: String,
    pub group: Group,
    pub detection: f64,
    pub localization: Option<f64>,
    pub detection_runs: Vec<f64>,
    pub localization_runs: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub label: String,
    pub detection: f64,
    pub localization: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub runs: usize,
    pub classes: Vec<ClassRow>,
    pub averages: Vec<AverageRow>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean of the present values; `None` if any is missing.
fn mean_complete(values: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = values.iter().copied().collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

impl ReportTable {
    /// Combine runs (each listing classes in the same order). Object and texture
    /// rows are emitted only when both groups are populated.
    pub fn from_runs(runs: &[Vec<(String, ClassResult)>], textures: &[String]) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::invalid("no runs to report"))?;
        if first.is_empty() {
            return Err(Error::invalid("no classes to report"));
        }
        let mut classes = Vec::with_capacity(first.len());
        for (c, (name, _)) in first.iter().enumerate() {
            let mut detection_runs = Vec::with_capacity(runs.len());
            let mut localization_runs = Vec::with_capacity(runs.len());
            for run in runs {
                let (n, r) = run
                    .get(c)
                    .ok_or_else(|| Error::shape("runs list different class counts"))?;
                if n != name {
                    return Err(Error::shape(format!("class order differs between runs: `{n}` vs `{name}`")));
                }
                detection_runs.push(r.detection);
                localization_runs.push(r.localization);
            }
            classes.push(ClassRow {
                name: name.clone(),
                group: if textures.iter().any(|t| t == name) {
                    Group::Texture
                } else {
                    Group::Object
                },
                detection: mean(&detection_runs),
                localization: mean_complete(&localization_runs),
                detection_runs,
                localization_runs,
            });
        }

        let average = |label: &str, rows: &[&ClassRow]| AverageRow {
            label: label.to_string(),
            detection: mean(&rows.iter().map(|r| r.detection).collect::<Vec<_>>()),
            localization: mean_complete(&rows.iter().map(|r| r.localization).collect::<Vec<_>>()),
        };
        let objects: Vec<&ClassRow> = classes.iter().filter(|r| r.group == Group::Object).collect();
        let texture_rows: Vec<&ClassRow> = classes.iter().filter(|r| r.group == Group::Texture).collect();
        let mut averages = Vec::new();
        if !objects.is_empty() && !texture_rows.is_empty() {
            averages.push(average("avg. obj.", &objects));
            averages.push(average("avg. tex.", &texture_rows));
        }
        averages.push(average("avg. total", &classes.iter().collect::<Vec<_>>()));
        Ok(Self {
            runs: runs.len(),
            classes,
            averages,
        })
    }

    pub fn total(&self) -> &AverageRow {
        self.averages.last().expect("total row always present")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "row",
            "kind",
            "detection_auroc",
            "localization_auroc",
            "runs",
            "detection_per_run",
            "localization_per_run",
        ])?;
        for r in &self.classes {
            let kind = match r.group {
                Group::Object => "object",
                Group::Texture => "texture",
            };
            let det_runs: Vec<String> = r.detection_runs.iter().map(|v| format!("{v:.6}")).collect();
            let loc_runs: Vec<String> = r
                .localization_runs
                .iter()
                .map(|v| v.map(|v| format!("{v:.6}")).unwrap_or_default())
                .collect();
            w.write_record([
                r.name.clone(),
                kind.to_string(),
                format!("{:.6}", r.detection),
                r.localization.map(|v| format!("{v:.6}")).unwrap_or_default(),
                self.runs.to_string(),
                det_runs.join(";"),
                loc_runs.join(";"),
            ])?;
        }
        for a in &self.averages {
            w.write_record([
                a.label.clone(),
                "average".to_string(),
                format!("{:.6}", a.detection),
                a.localization.map(|v| format!("{v:.6}")).unwrap_or_default(),
                self.runs.to_string(),
                String::new(),
                String::new(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|r| r.name.len())
            .chain(self.averages.iter().map(|a| a.label.len()))
            .chain(std::iter::once(5))
            .max()
            .unwrap_or(5);
        let mut s = format!(
            "{:<width$}  {:>9}  {:>12}   (mean of {} run{})\n",
            "class",
            "detection",
            "localization",
            self.runs,
            if self.runs == 1 { "" } else { "s" }
        );
        for r in &self.classes {
            s.push_str(&format!(
                "{:<width$}  {:>9.4}  {:>12}\n",
                r.name,
                r.detection,
                fmt_opt(r.localization)
            ));
        }
        s.push_str(&format!("{}\n", "-".repeat(width + 25)));
        for a in &self.averages {
            s.push_str(&format!(
                "{:<width$}  {:>9.4}  {:>12}\n",
                a.label,
                a.detection,
                fmt_opt(a.localization)
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub alpha_kl: f64,
    pub alpha_dr: f64,
    pub rho: f64,
    pub detection: f64,
    pub localization: Option<f64>,
    pub runs: usize,
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "augment_bank",
        "refresh_bank",
        "use_dissimilarity",
        "rho",
        "alpha_kl",
        "alpha_dr",
        "detection_auroc",
        "localization_auroc",
        "runs",
    ])?;
    for r in rows {
        w.write_record([
            r.flags.augment_bank.to_string(),
            r.flags.refresh_bank.to_string(),
            r.flags.use_dissimilarity.to_string(),
            r.rho.to_string(),
            r.alpha_kl.to_string(),
            r.alpha_dr.to_string(),
            format!("{:.6}", r.detection),
            r.localization.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.runs.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_count(scores: &[f64], labels: &[bool]) -> f64 {
        let mut acc = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    acc += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        acc / pairs
    }

    #[test]
    fn auroc_hand_cases() {
        let labels = [false, false, true, true];
        assert!((auroc(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(auroc(&[0.0, 0.1, 0.5, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &labels).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn auroc_with_ties_matches_pair_counting() {
        let s = [0.5, 0.5, 0.2, 0.9, 0.5, 0.2];
        let l = [true, false, false, true, false, true];
        assert!((auroc(&s, &l).unwrap() - pair_count(&s, &l)).abs() < 1e-12);
    }

    fn result(det: f64, loc: Option<f64>) -> ClassResult {
        ClassResult {
            detection: det,
            localization: loc,
        }
    }

    #[test]
    fn report_groups_and_averages() {
        let textures = vec!["tile".to_string()];
        let run = vec![
            ("bottle".to_string(), result(1.0, Some(0.9))),
            ("tile".to_string(), result(0.8, Some(0.7))),
            ("screw".to_string(), result(0.6, None)),
        ];
        let t = ReportTable::from_runs(&[run.clone(), run], &textures).unwrap();
        assert_eq!(t.runs, 2);
        let labels: Vec<&str> = t.averages.iter().map(|a| a.label.as_str()).collect();
        assert_eq!(labels, ["avg. obj.", "avg. tex.", "avg. total"]);
        assert!((t.averages[0].detection - 0.8).abs() < 1e-12);
        assert_eq!(t.averages[0].localization, None);
        assert!((t.total().detection - 0.8).abs() < 1e-12);

        let single = ReportTable::from_runs(&[vec![("a".to_string(), result(0.7, Some(0.6)))]], &textures).unwrap();
        assert_eq!(single.averages.len(), 1);
        assert_eq!(single.total().detection, 0.7);
        assert_eq!(single.total().localization, Some(0.6));
    }

    #[test]
    fn csv_and_text_render() {
        let run = vec![("a".to_string(), result(0.75, Some(0.5))), ("b".to_string(), result(1.0, None))];
        let t = ReportTable::from_runs(&[run], &[]).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("a,object,0.750000,0.500000,1,0.750000,0.500000"));
        assert!(text.contains("avg. total,average,0.875000,,1,,"));
        assert!(t.to_text().contains("avg. total"));
    }
}
