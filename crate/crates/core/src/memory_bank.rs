//! Memorized normal features and exact nearest-neighbor search.
//!
//! The bank holds, for every class, the per-location average of the
//! (optionally augmented) target-oriented features over that class's normal
//! training images, so `B = N_c * T`. It is rebuilt from scratch by
//! [`MemoryBank::refresh`], never updated through gradients.

use std::cmp::Ordering;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{LabeledFeatures, RdCfaModel};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    entries: Array2<f64>,
    augmented: bool,
    epoch_stamp: u64,
}

/// Top-n bank neighbors, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborResult {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

/// `[phi ; mu ; exp(log_var)]` for one patch.
pub fn augment_feature(target: &[f64], mu: &[f64], log_var: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != log_var.len() {
        return Err(Error::shape("mu and log_var lengths differ"));
    }
    Ok(target
        .iter()
        .chain(mu)
        .copied()
        .chain(log_var.iter().map(|v| v.exp()))
        .collect())
}

pub fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

impl MemoryBank {
    pub fn from_entries(entries: Array2<f64>, augmented: bool, epoch_stamp: u64) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::invalid("memory bank must hold at least one entry"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("memory bank entries".into()));
        }
        let entries = entries.as_standard_layout().into_owned();
        Ok(Self {
            entries,
            augmented,
            epoch_stamp,
        })
    }

    /// Build the bank from normal training features with the current model.
    pub fn initialize(
        samples: &[LabeledFeatures],
        class_names: &[String],
        model: &RdCfaModel,
        augment: bool,
    ) -> Result<Self> {
        let entries = class_location_means(samples, class_names, |f| model.embed(f, augment))?;
        Self::from_entries(entries, augment, 0)
    }

    /// Same construction as [`initialize`](Self::initialize) with the current
    /// parameters; the stamp advances by one.
    pub fn refresh(
        &self,
        samples: &[LabeledFeatures],
        class_names: &[String],
        model: &RdCfaModel,
    ) -> Result<Self> {
        let mut next = Self::initialize(samples, class_names, model, self.augmented)?;
        if next.entries.dim() != self.entries.dim() {
            return Err(Error::shape(format!(
                "refreshed bank is {:?}, previous was {:?}",
                next.entries.dim(),
                self.entries.dim()
            )));
        }
        next.epoch_stamp = self.epoch_stamp + 1;
        Ok(next)
    }

    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.entries.ncols()
    }

    pub fn augmented(&self) -> bool {
        self.augmented
    }

    pub fn epoch_stamp(&self) -> u64 {
        self.epoch_stamp
    }

    /// Exact top-`n` by squared Euclidean distance; ties go to the lower index.
    pub fn nearest(&self, query: ArrayView1<f64>, n: usize) -> Result<NeighborResult> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(format!(
                "neighbor count {n} outside 1..={}",
                self.len()
            )));
        }
        if query.len() != self.width() {
            return Err(Error::shape(format!(
                "query width {} but bank width {}",
                query.len(),
                self.width()
            )));
        }
        let q = query.to_vec();
        Ok(self.nearest_slice(&q, n))
    }

    fn nearest_slice(&self, query: &[f64], n: usize) -> NeighborResult {
        let entries = self.entries.as_slice().expect("standard layout");
        let width = self.width();
        let distances = entries.chunks_exact(width).map(|row| slice_distance(query, row));
        let best: Vec<(f64, usize)> = if n <= SMALL_N {
            // insertion into a sorted top-n buffer; later indices never win ties
            let mut top: Vec<(f64, usize)> = Vec::with_capacity(n + 1);
            for (i, d) in distances.enumerate() {
                if top.len() == n && d.total_cmp(&top[n - 1].0) != Ordering::Less {
                    continue;
                }
                let pos = top.partition_point(|p| p.0.total_cmp(&d) != Ordering::Greater);
                top.insert(pos, (d, i));
                top.truncate(n);
            }
            top
        } else {
            let mut scored: Vec<(f64, usize)> = distances.enumerate().map(|(i, d)| (d, i)).collect();
            if n < scored.len() {
                scored.select_nth_unstable_by(n - 1, by_distance_then_index);
                scored.truncate(n);
            }
            scored.sort_unstable_by(by_distance_then_index);
            scored
        };
        NeighborResult {
            indices: best.iter().map(|p| p.1).collect(),
            distances: best.iter().map(|p| p.0).collect(),
        }
    }

    /// Neighbors for every column of an `E x T` query matrix.
    pub fn nearest_columns(&self, queries: ArrayView2<f64>, n: usize) -> Result<Vec<NeighborResult>> {
        if queries.nrows() != self.width() {
            return Err(Error::shape(format!(
                "query width {} but bank width {}",
                queries.nrows(),
                self.width()
            )));
        }
        if n == 0 || n > self.len() {
            return Err(Error::invalid(format!(
                "neighbor count {n} outside 1..={}",
                self.len()
            )));
        }
        let rows = queries.t().as_standard_layout().into_owned();
        let rows = rows.as_slice().expect("standard layout");
        Ok(rows
            .par_chunks_exact(self.width())
            .map(|q| self.nearest_slice(q, n))
            .collect())
    }
}

const SMALL_N: usize = 16;

fn slice_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per class, the average over that class's samples of each location's embedding;
/// rows are ordered class-major then row-major location.
pub(crate) fn class_location_means(
    samples: &[LabeledFeatures],
    class_names: &[String],
    embed: impl Fn(&crate::backbone::PatchFeatureMap) -> Result<Array2<f64>> + Sync,
) -> Result<Array2<f64>> {
    let embedded: Vec<(usize, Array2<f64>)> = samples
        .par_iter()
        .map(|s| embed(&s.features).map(|e| (s.label, e)))
        .collect::<Result<_>>()?;
    let (width, patches) = embedded
        .first()
        .map(|(_, e)| e.dim())
        .ok_or_else(|| Error::EmptyClass(class_names.first().cloned().unwrap_or_default()))?;
    let mut out = Array2::zeros((class_names.len() * patches, width));
    let mut counts = vec![0usize; class_names.len()];
    for (label, e) in &embedded {
        if *label >= class_names.len() {
            return Err(Error::LabelOutOfRange {
                label: *label,
                num_classes: class_names.len(),
            });
        }
        if e.dim() != (width, patches) {
            return Err(Error::shape("training images yield different patch grids"));
        }
        let mut block = out.slice_mut(s![label * patches..(label + 1) * patches, ..]);
        block += &e.t();
        counts[*label] += 1;
    }
    for (c, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::EmptyClass(class_names[c].clone()));
        }
        let mut block = out.slice_mut(s![c * patches..(c + 1) * patches, ..]);
        block /= count as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::PatchFeatureMap;
    use crate::descriptor::{DescriptorConfig, PatchDescriptor};
    use ndarray::{array, Array, Array3};

    fn identity_model(dim: usize, classes: usize) -> RdCfaModel {
        let mut m = RdCfaModel::new(
            DescriptorConfig {
                input_dim: dim,
                output_dim: dim,
                use_coordinate_channels: false,
            },
            2,
            classes,
            10.0,
            0,
        )
        .unwrap();
        m.descriptor = PatchDescriptor::identity(dim);
        m
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class{i}")).collect()
    }

    #[test]
    fn nearest_hand_case() {
        let bank = MemoryBank::from_entries(array![[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]], false, 0).unwrap();
        let r = bank.nearest(array![0.9, 1.2].view(), 1).unwrap();
        assert_eq!(r.indices, vec![1]);
        assert!((r.distances[0] - 0.05).abs() < 1e-12);

        let r = bank.nearest(array![5.0, 5.0].view(), 1).unwrap();
        assert_eq!((r.indices[0], r.distances[0]), (2, 0.0));

        let r = bank.nearest(array![0.0, 0.0].view(), 3).unwrap();
        assert_eq!(r.indices, vec![0, 1, 2]);
        assert!(bank.nearest(array![0.0, 0.0].view(), 4).is_err());
        assert!(bank.nearest(array![0.0, 0.0].view(), 0).is_err());
        assert!(bank.nearest(array![0.0].view(), 1).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let bank = MemoryBank::from_entries(array![[1.0], [-1.0], [1.0], [3.0]], false, 0).unwrap();
        let r = bank.nearest(array![0.0].view(), 3).unwrap();
        assert_eq!(r.indices, vec![0, 1, 2]);
    }

    #[test]
    fn augment_feature_layout() {
        let v = augment_feature(&[1.0, 2.0, 3.0, 4.0], &[0.5, 0.25], &[0.0, 0.0]).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(&v[6..], &[1.0, 1.0]);
    }

    #[test]
    fn initialize_averages_per_class_and_location() {
        let v = Array::from_shape_fn((3, 2, 2), |(c, y, x)| (c + 2 * y + x) as f64 + 0.5);
        let samples = vec![
            LabeledFeatures {
                label: 0,
                features: PatchFeatureMap::new(v.clone()).unwrap(),
            },
            LabeledFeatures {
                label: 0,
                features: PatchFeatureMap::new(&v * 3.0).unwrap(),
            },
        ];
        let model = identity_model(3, 1);
        let bank = MemoryBank::initialize(&samples, &names(1), &model, false).unwrap();
        assert_eq!(bank.len(), 4);
        for t in 0..4 {
            for c in 0..3 {
                assert!((bank.entries()[[t, c]] - 2.0 * v[[c, t / 2, t % 2]]).abs() < 1e-12);
            }
        }
        assert_eq!(bank.epoch_stamp(), 0);
    }

    #[test]
    fn bank_size_scales_with_classes() {
        let samples: Vec<_> = (0..3)
            .map(|label| LabeledFeatures {
                label,
                features: PatchFeatureMap::new(Array3::from_elem((2, 4, 4), label as f64)).unwrap(),
            })
            .collect();
        let model = identity_model(2, 3);
        let bank = MemoryBank::initialize(&samples, &names(3), &model, true).unwrap();
        assert_eq!(bank.len(), 48);
        assert_eq!(bank.width(), 2 + 4);
    }

    #[test]
    fn empty_class_is_named() {
        let samples = vec![LabeledFeatures {
            label: 0,
            features: PatchFeatureMap::new(Array3::zeros((2, 1, 1))).unwrap(),
        }];
        let err = MemoryBank::initialize(&samples, &names(2), &identity_model(2, 2), false).unwrap_err();
        assert!(matches!(err, Error::EmptyClass(ref c) if c == "class1"));
    }

    #[test]
    fn refresh_is_idempotent_and_stamps() {
        let samples: Vec<_> = (0..4)
            .map(|i| LabeledFeatures {
                label: i % 2,
                features: PatchFeatureMap::new(Array::from_shape_fn((3, 2, 2), |(c, y, x)| {
                    ((i * 7 + c * 3 + y + x) as f64).cos()
                }))
                .unwrap(),
            })
            .collect();
        let model = RdCfaModel::new(
            DescriptorConfig {
                input_dim: 3,
                output_dim: 2,
                use_coordinate_channels: true,
            },
            2,
            2,
            10.0,
            5,
        )
        .unwrap();
        let bank = MemoryBank::initialize(&samples, &names(2), &model, true).unwrap();
        let again = bank.refresh(&samples, &names(2), &model).unwrap();
        assert_eq!(again.entries(), bank.entries());
        assert_eq!(again.epoch_stamp(), 1);
        assert_eq!(again.refresh(&samples, &names(2), &model).unwrap().epoch_stamp(), 2);
    }

    #[test]
    fn refresh_tracks_linear_descriptor_scaling() {
        let samples: Vec<_> = (0..3)
            .map(|i| LabeledFeatures {
                label: 0,
                features: PatchFeatureMap::new(Array::from_shape_fn((2, 3, 3), |(c, y, x)| {
                    (i + c) as f64 * 0.3 - (y * x) as f64
                }))
                .unwrap(),
            })
            .collect();
        let mut model = identity_model(2, 1);
        model.descriptor.weight = array![[0.5, -1.0], [2.0, 0.25]];
        let bank = MemoryBank::initialize(&samples, &names(1), &model, false).unwrap();
        model.descriptor.weight *= 2.0;
        let scaled = bank.refresh(&samples, &names(1), &model).unwrap();
        for (a, b) in bank.entries().iter().zip(scaled.entries().iter()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }
}
