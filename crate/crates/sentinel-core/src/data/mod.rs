//! Dataset ingestion (directory-per-class PPM/PGM), preprocessing, the
//! stratified train/validation/test split, and the synthetic generator.

pub mod geom;
pub mod ppm;
pub mod synth;

pub use geom::{affine_transform, augment, resize_bilinear, AugmentConfig};
pub use synth::{synth_cells, SynthConfig};

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    MissingDir(PathBuf),
    /// No class subdirectories under the dataset root.
    NoClasses(PathBuf),
    /// Empty class subdirectory in strict mode.
    EmptyClass(PathBuf),
    /// Undecodable file in strict mode.
    Undecodable { path: PathBuf, reason: String },
    Decode(String),
    /// Split fractions that do not sum to 1, or non-positive.
    BadSplit(String),
    /// Dataset too small for the requested operation.
    TooSmall { needed: usize, got: usize },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::MissingDir(p) => write!(f, "dataset directory not found: {}", p.display()),
            Self::NoClasses(p) => {
                write!(f, "no class subdirectories under {}", p.display())
            }
            Self::EmptyClass(p) => write!(f, "empty class subdirectory: {}", p.display()),
            Self::Undecodable { path, reason } => {
                write!(f, "cannot decode {}: {reason}", path.display())
            }
            Self::Decode(msg) => write!(f, "{msg}"),
            Self::BadSplit(msg) => write!(f, "invalid split: {msg}"),
            Self::TooSmall { needed, got } => {
                write!(f, "dataset too small: need {needed} items, have {got}")
            }
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

/// Images with class labels. Labels index `class_names`, which follow the
/// lexicographic order of the class subdirectories.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    items: Vec<(Tensor, usize)>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(items: Vec<(Tensor, usize)>, class_names: Vec<String>) -> Result<Self, DataError> {
        for (_, label) in &items {
            if *label >= class_names.len() {
                return Err(DataError::Decode(format!(
                    "label {label} out of range for {} classes",
                    class_names.len()
                )));
            }
        }
        Ok(LabeledDataset { items, class_names })
    }

    pub fn items(&self) -> &[(Tensor, usize)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Apply a fallible image transform to every item.
    pub fn map_images(
        &self,
        mut f: impl FnMut(&Tensor) -> Result<Tensor, DataError>,
    ) -> Result<LabeledDataset, DataError> {
        let mut items = Vec::with_capacity(self.items.len());
        for (img, label) in &self.items {
            items.push((f(img)?, *label));
        }
        Ok(LabeledDataset { items, class_names: self.class_names.clone() })
    }

    /// Resize every image to `size x size`.
    pub fn resized(&self, size: usize) -> Result<LabeledDataset, DataError> {
        self.map_images(|img| resize_bilinear(img, size, size))
    }
}

/// Split fractions; must be positive and sum to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// The 60:10:30 protocol split.
    pub fn default_protocol(seed: u64) -> Self {
        SplitSpec { train_frac: 0.6, val_frac: 0.1, test_frac: 0.3, seed }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::BadSplit(format!("fractions sum to {sum}, expected 1")));
        }
        if self.train_frac <= 0.0 || self.val_frac <= 0.0 || self.test_frac <= 0.0 {
            return Err(DataError::BadSplit("fractions must be positive".to_string()));
        }
        Ok(())
    }
}

/// Stratified split: per class, validation and test sizes are
/// floor-allocated and the remainder goes to train. Partitions are
/// disjoint, exhaustive, and deterministic in the seed.
pub fn split(
    dataset: &LabeledDataset,
    spec: &SplitSpec,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset), DataError> {
    spec.validate()?;
    let c = dataset.num_classes();
    if dataset.len() < c * 3 {
        return Err(DataError::TooSmall { needed: c * 3, got: dataset.len() });
    }

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, (_, label)) in dataset.items().iter().enumerate() {
        per_class[*label].push(i);
    }

    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (class, indices) in per_class.iter_mut().enumerate() {
        let mut rng = seeded(derive_seed(spec.seed, &format!("split/{class}")));
        crate::rng::shuffle(indices, &mut rng);
        let n = indices.len();
        let n_val = (spec.val_frac * n as f64).floor() as usize;
        let n_test = (spec.test_frac * n as f64).floor() as usize;
        let n_train = n - n_val - n_test;
        parts[0].extend_from_slice(&indices[..n_train]);
        parts[1].extend_from_slice(&indices[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&indices[n_train + n_val..]);
    }

    let take = |ids: &[usize]| -> LabeledDataset {
        LabeledDataset {
            items: ids.iter().map(|&i| dataset.items[i].clone()).collect(),
            class_names: dataset.class_names.clone(),
        }
    };
    Ok((take(&parts[0]), take(&parts[1]), take(&parts[2])))
}

/// How the directory loader treats undecodable files and empty classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Skip bad files (and empty class directories) with a warning.
    Lenient,
    /// Any bad file or empty class directory is an error.
    Strict,
}

/// Load a `root/<class_name>/*.ppm` directory tree. Class order is
/// lexicographic by subdirectory name; files are read in lexicographic
/// order within each class. Returns the dataset and any warnings emitted
/// in lenient mode.
pub fn load_image_dir(
    root: &Path,
    mode: LoadMode,
) -> Result<(LabeledDataset, Vec<String>), DataError> {
    if !root.is_dir() {
        return Err(DataError::MissingDir(root.to_path_buf()));
    }
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses(root.to_path_buf()));
    }

    let mut items = Vec::new();
    let mut class_names = Vec::new();
    let mut warnings = Vec::new();
    for dir in &class_dirs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();

        let mut decoded = Vec::new();
        for file in &files {
            match decode_image_file(file) {
                Ok(img) => decoded.push(img),
                Err(reason) => match mode {
                    LoadMode::Strict => {
                        return Err(DataError::Undecodable { path: file.clone(), reason })
                    }
                    LoadMode::Lenient => {
                        warnings.push(format!("skipping {}: {reason}", file.display()))
                    }
                },
            }
        }
        if decoded.is_empty() {
            match mode {
                LoadMode::Strict => return Err(DataError::EmptyClass(dir.clone())),
                LoadMode::Lenient => {
                    warnings.push(format!("skipping empty class {}", dir.display()));
                    continue;
                }
            }
        }
        let label = class_names.len();
        class_names
            .push(dir.file_name().unwrap_or_default().to_string_lossy().to_string());
        items.extend(decoded.into_iter().map(|img| (img, label)));
    }
    if class_names.is_empty() {
        return Err(DataError::NoClasses(root.to_path_buf()));
    }
    Ok((LabeledDataset { items, class_names }, warnings))
}

fn decode_image_file(path: &Path) -> Result<Tensor, String> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    match ext.as_str() {
        "ppm" | "pgm" => ppm::decode(&bytes).map_err(|e| e.to_string()),
        #[cfg(feature = "png")]
        "png" => {
            let img = image::load_from_memory(&bytes).map_err(|e| e.to_string())?.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let plane = w * h;
            let mut data = vec![0.0f32; 3 * plane];
            for (i, p) in img.pixels().enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = p.0[c] as f32 / 255.0;
                }
            }
            Ok(Tensor::new(vec![3, h, w], data).expect("length computed"))
        }
        _ => Err(format!("unsupported image extension {ext:?}")),
    }
}
