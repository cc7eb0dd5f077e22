//! Directory-layout datasets and a seeded procedural stand-in.
//!
//! Layout, per class:
//! `<class>/train/good/*`, `<class>/test/<defect or good>/*`,
//! `<class>/ground_truth/<defect>/<stem>_mask.png` (or `<stem>.png`).

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "PNG", "JPG"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
    pub anomalous: bool,
    /// Test sub-folder name (`good` for normal test images).
    pub defect: Option<String>,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    /// Normal training images of every class.
    pub train: Vec<Sample>,
    /// Test images, indexed by class.
    pub test: Vec<Vec<Sample>>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_test(&self) -> usize {
        self.test.iter().map(Vec::len).sum()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.retain(|p| {
        !p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'))
    });
    out.sort();
    Ok(out)
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e))
        })
        .collect())
}

fn name_of(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn stem_of(p: &Path) -> String {
    p.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Load every class under `root`. Classes are the sorted sub-directories.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("no class directories under {}", root.display())));
    }
    let mut class_names = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut offenders = Vec::new();

    for (label, dir) in class_dirs.iter().enumerate() {
        let name = name_of(dir);
        let good = dir.join("train").join("good");
        if !good.is_dir() {
            return Err(Error::Data(format!("class `{name}` has no train/good directory")));
        }
        let train_images = images_in(&good)?;
        if train_images.is_empty() {
            return Err(Error::EmptyClass(name));
        }
        train.extend(train_images.into_iter().map(|path| Sample {
            path,
            label,
            split: Split::Train,
            anomalous: false,
            defect: None,
            mask: None,
        }));

        let mut class_test = Vec::new();
        let test_dir = dir.join("test");
        if test_dir.is_dir() {
            for defect_dir in sorted_entries(&test_dir)?.into_iter().filter(|p| p.is_dir()) {
                let defect = name_of(&defect_dir);
                let anomalous = defect != "good";
                let images = images_in(&defect_dir)?;
                let gt_dir = dir.join("ground_truth").join(&defect);
                let masks = if anomalous && gt_dir.is_dir() {
                    Some(images_in(&gt_dir)?)
                } else {
                    None
                };
                let mut used = vec![false; masks.as_ref().map_or(0, Vec::len)];
                for path in images {
                    let mask = match &masks {
                        Some(list) => {
                            let stem = stem_of(&path);
                            let found = list.iter().position(|m| {
                                let ms = stem_of(m);
                                ms == format!("{stem}_mask") || ms == stem
                            });
                            match found {
                                Some(i) => {
                                    used[i] = true;
                                    Some(list[i].clone())
                                }
                                None => {
                                    offenders.push(format!("{}: no mask", path.display()));
                                    None
                                }
                            }
                        }
                        None => None,
                    };
                    class_test.push(Sample {
                        path,
                        label,
                        split: Split::Test,
                        anomalous,
                        defect: Some(defect.clone()),
                        mask,
                    });
                }
                if let Some(list) = &masks {
                    for (m, _) in list.iter().zip(&used).filter(|(_, u)| !**u) {
                        offenders.push(format!("{}: no matching image", m.display()));
                    }
                }
            }
        }
        class_names.push(name);
        test.push(class_test);
    }
    if !offenders.is_empty() {
        return Err(Error::Data(format!(
            "mask/image mismatch for {} file(s):\n  {}",
            offenders.len(),
            offenders.join("\n  ")
        )));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        class_names,
        train,
        test,
    })
}

/// Binary mask (nonzero = anomalous) resized with nearest-neighbor sampling.
pub fn load_mask(path: &Path, size: usize) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Nearest)
    } else {
        img
    };
    Ok(Array2::from_shape_fn((size, size), |(y, x)| img.get_pixel(x as u32, y as u32)[0] > 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub test_good_per_class: usize,
    pub test_defect_per_class: usize,
    /// Inclusive side-length range of the inserted rectangle, in pixels.
    pub anomaly_min: usize,
    pub anomaly_max: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 3,
            image_size: 64,
            train_per_class: 20,
            test_good_per_class: 5,
            test_defect_per_class: 5,
            anomaly_min: 12,
            anomaly_max: 20,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid("synthetic data needs at least 2 classes"));
        }
        if self.image_size < 8 || self.train_per_class == 0 || self.test_good_per_class + self.test_defect_per_class == 0 {
            return Err(Error::invalid("synthetic sizes must be positive"));
        }
        if self.anomaly_min == 0 || self.anomaly_min > self.anomaly_max || self.anomaly_max > self.image_size {
            return Err(Error::invalid(format!(
                "anomaly size range {}..={} invalid for image size {}",
                self.anomaly_min, self.anomaly_max, self.image_size
            )));
        }
        Ok(())
    }

    pub fn class_name(&self, class: usize) -> String {
        format!("{:02}_{}", class, TextureKind::of(class).name())
    }
}

/// Where an anomaly was inserted, relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub class: usize,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TextureKind {
    Stripes,
    Checker,
    Dots,
}

impl TextureKind {
    fn of(class: usize) -> Self {
        [Self::Stripes, Self::Checker, Self::Dots][class % 3]
    }

    fn name(self) -> &'static str {
        match self {
            Self::Stripes => "stripes",
            Self::Checker => "checker",
            Self::Dots => "dots",
        }
    }
}

const PALETTE: [([f64; 3], [f64; 3]); 6] = [
    ([0.85, 0.80, 0.70], [0.35, 0.25, 0.20]),
    ([0.20, 0.35, 0.55], [0.75, 0.80, 0.90]),
    ([0.30, 0.55, 0.30], [0.90, 0.90, 0.60]),
    ([0.60, 0.30, 0.30], [0.95, 0.85, 0.80]),
    ([0.40, 0.40, 0.45], [0.80, 0.80, 0.75]),
    ([0.70, 0.55, 0.25], [0.25, 0.20, 0.35]),
];

/// Per-class texture geometry; only the phase varies between samples.
#[derive(Debug, Clone, Copy)]
struct Texture {
    kind: TextureKind,
    period: f64,
    angle: f64,
    colors: ([f64; 3], [f64; 3]),
}

impl Texture {
    fn for_class(class: usize, size: usize) -> Self {
        let variant = (class / 3) as f64;
        let scale = size as f64 / 64.0;
        let kind = TextureKind::of(class);
        let period = scale
            * match kind {
                TextureKind::Stripes => 10.0 + 3.0 * variant,
                TextureKind::Checker => 16.0 + 4.0 * variant,
                TextureKind::Dots => 12.0 + 4.0 * variant,
            };
        Self {
            kind,
            period,
            angle: (30.0 + 50.0 * variant).to_radians(),
            colors: PALETTE[class % PALETTE.len()],
        }
    }

    /// Mixing weight in [0, 1] between the two colors at `(x, y)`.
    fn pattern(&self, x: f64, y: f64, phase: (f64, f64)) -> f64 {
        let (x, y) = (x + phase.0, y + phase.1);
        let p = self.period;
        match self.kind {
            TextureKind::Stripes => {
                let u = x * self.angle.cos() + y * self.angle.sin();
                0.5 + 0.5 * (std::f64::consts::TAU * u / p).sin()
            }
            TextureKind::Checker => {
                let cell = (x / (p / 2.0)).floor() + (y / (p / 2.0)).floor();
                if cell.rem_euclid(2.0) < 1.0 {
                    0.0
                } else {
                    1.0
                }
            }
            TextureKind::Dots => {
                let (dx, dy) = (x.rem_euclid(p) - p / 2.0, y.rem_euclid(p) - p / 2.0);
                if (dx * dx + dy * dy).sqrt() < 0.3 * p {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn color(&self, x: f64, y: f64, phase: (f64, f64)) -> [f64; 3] {
        let t = self.pattern(x, y, phase);
        let (a, b) = self.colors;
        [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn render(texture: &Texture, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let jitter = 0.15 * texture.period;
    let phase = (rng.gen_range(0.0..jitter), rng.gen_range(0.0..jitter));
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let c = texture.color(x as f64, y as f64, phase);
            img.put_pixel(x as u32, y as u32, Rgb(c.map(|v| to_u8(v + noise.sample(rng)))));
        }
    }
    img
}

/// Paint a foreign-texture rectangle; returns `(x, y, w, h)`.
fn insert_anomaly(
    img: &mut RgbImage,
    class: usize,
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> (usize, usize, usize, usize) {
    let size = spec.image_size;
    let w = rng.gen_range(spec.anomaly_min..=spec.anomaly_max);
    let h = rng.gen_range(spec.anomaly_min..=spec.anomaly_max);
    let x0 = rng.gen_range(0..=size - w);
    let y0 = rng.gen_range(0..=size - h);
    // a different pattern family at a finer scale, in colors off the class palette
    let base = Texture::for_class(class, size);
    let foreign = Texture {
        kind: TextureKind::of(class + 1 + rng.gen_range(0..2)),
        period: (base.period * 0.5).max(4.0),
        angle: base.angle + std::f64::consts::FRAC_PI_2,
        colors: (
            [rng.gen_range(0.0..0.3), rng.gen_range(0.6..1.0), rng.gen_range(0.0..0.3)],
            [rng.gen_range(0.7..1.0), rng.gen_range(0.0..0.3), rng.gen_range(0.6..1.0)],
        ),
    };
    let phase = (rng.gen_range(0.0..foreign.period), rng.gen_range(0.0..foreign.period));
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let c = foreign.color(x as f64, y as f64, phase);
            img.put_pixel(x as u32, y as u32, Rgb(c.map(to_u8)));
        }
    }
    (x0, y0, w, h)
}

fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub const SYNTHETIC_DEFECT: &str = "foreign";

/// Write a synthetic dataset under `root` and return the anomaly placements.
/// The output is fully determined by `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<Vec<Placement>> {
    spec.validate()?;
    let size = spec.image_size;
    let mut placements = Vec::new();
    for class in 0..spec.n_classes {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(class as u64 + 1);
        let texture = Texture::for_class(class, size);
        let name = spec.class_name(class);
        let cdir = root.join(&name);
        let (train_dir, good_dir) = (cdir.join("train/good"), cdir.join("test/good"));
        let (bad_dir, gt_dir) = (
            cdir.join("test").join(SYNTHETIC_DEFECT),
            cdir.join("ground_truth").join(SYNTHETIC_DEFECT),
        );
        for d in [&train_dir, &good_dir, &bad_dir, &gt_dir] {
            mkdir(d)?;
        }
        for i in 0..spec.train_per_class {
            save_rgb(&render(&texture, size, &mut rng), &train_dir.join(format!("{i:03}.png")))?;
        }
        for i in 0..spec.test_good_per_class {
            save_rgb(&render(&texture, size, &mut rng), &good_dir.join(format!("{i:03}.png")))?;
        }
        for i in 0..spec.test_defect_per_class {
            let mut img = render(&texture, size, &mut rng);
            let (x, y, w, h) = insert_anomaly(&mut img, class, spec, &mut rng);
            let image = bad_dir.join(format!("{i:03}.png"));
            let mask = gt_dir.join(format!("{i:03}_mask.png"));
            save_rgb(&img, &image)?;
            let m = GrayImage::from_fn(size as u32, size as u32, |px, py| {
                let inside = (x..x + w).contains(&(px as usize)) && (y..y + h).contains(&(py as usize));
                Luma([if inside { 255 } else { 0 }])
            });
            m.save(&mask).map_err(|source| Error::Image {
                path: mask.clone(),
                source,
            })?;
            placements.push(Placement {
                class,
                image: image.strip_prefix(root).unwrap_or(&image).to_path_buf(),
                mask: mask.strip_prefix(root).unwrap_or(&mask).to_path_buf(),
                x,
                y,
                width: w,
                height: h,
            });
        }
    }
    Ok(placements)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            train_per_class: 4,
            test_good_per_class: 2,
            test_defect_per_class: 2,
            image_size: 32,
            anomaly_min: 6,
            anomaly_max: 10,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn round_trip_counts_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        generate_synthetic(&spec, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.class_names, ["00_stripes", "01_checker", "02_dots"]);
        assert_eq!(ds.train.len(), 12);
        assert_eq!(ds.num_test(), 12);
        assert!(ds.train.iter().all(|s| !s.anomalous && s.mask.is_none()));
        for (label, set) in ds.test.iter().enumerate() {
            assert!(set.iter().all(|s| s.label == label));
            assert!(set.iter().all(|s| s.anomalous == s.mask.is_some()));
            assert_eq!(set.iter().filter(|s| s.anomalous).count(), 2);
        }
    }

    #[test]
    fn masks_match_placements() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let placements = generate_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(placements.len(), 6);
        for p in &placements {
            let mask = load_mask(&dir.path().join(&p.mask), spec.image_size).unwrap();
            for ((y, x), &v) in mask.indexed_iter() {
                let inside = (p.x..p.x + p.width).contains(&x) && (p.y..p.y + p.height).contains(&y);
                assert_eq!(v, inside);
            }
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic(&small_spec(), a.path()).unwrap();
        generate_synthetic(&small_spec(), b.path()).unwrap();
        let ds = load_dataset(a.path()).unwrap();
        for s in ds.train.iter().chain(ds.test.iter().flatten()) {
            let rel = s.path.strip_prefix(a.path()).unwrap();
            assert_eq!(std::fs::read(&s.path).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        }
    }

    #[test]
    fn missing_train_good_and_mask_mismatch_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(), dir.path()).unwrap();
        let stray = dir.path().join("01_checker/ground_truth/foreign/099_mask.png");
        std::fs::copy(dir.path().join("01_checker/ground_truth/foreign/000_mask.png"), &stray).unwrap();
        std::fs::remove_file(dir.path().join("02_dots/ground_truth/foreign/001_mask.png")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Data(msg)) => {
                assert!(msg.contains("099_mask.png"), "{msg}");
                assert!(msg.contains("02_dots/test/foreign/001.png"), "{msg}");
            }
            other => panic!("{other:?}"),
        }

        std::fs::create_dir_all(dir.path().join("zz_empty/test")).unwrap();
        std::fs::remove_file(stray).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(m)) if m.contains("zz_empty")));
    }

    #[test]
    fn single_class_root_loads() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(), dir.path()).unwrap();
        let one = tempfile::tempdir().unwrap();
        std::fs::rename(dir.path().join("00_stripes"), one.path().join("00_stripes")).unwrap();
        let ds = load_dataset(one.path()).unwrap();
        assert_eq!((ds.num_classes(), ds.train.len()), (1, 4));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SyntheticSpec { n_classes: 1, ..small_spec() }.validate().is_err());
        assert!(SyntheticSpec { anomaly_max: 40, ..small_spec() }.validate().is_err());
    }
}
