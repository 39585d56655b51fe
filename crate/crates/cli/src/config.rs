use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use indistill_core::data::{self, load_split, synthetic_blobs, Dataset, DatasetKind, Normalization, Split};
use indistill_core::metrics::DEFAULT_K;
use indistill_core::nn::{make_auxiliary, InputShape, ModelSpec};
use indistill_core::train::{config_hash, DistillConfig};
use indistill_core::Error;

/// Everything a command needs, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub models: ModelsConfig,
    /// Supervised training of the teacher.
    pub teacher: DistillConfig,
    /// Logit distillation from the teacher into the auxiliary model.
    pub auxiliary: DistillConfig,
    /// Student distillation.
    pub distill: DistillConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Dataset root; falls back to `INDISTILL_DATA`.
    pub data_root: Option<PathBuf>,
    /// Train on a seeded random subset of this size.
    pub train_subset: Option<usize>,
    /// Evaluate on a seeded random subset of this size.
    pub test_subset: Option<usize>,
    pub subset_seed: u64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetKind::FashionMnist,
            data_root: None,
            train_subset: None,
            test_subset: None,
            subset_seed: 0,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train: usize,
    pub test: usize,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train: 256,
            test: 128,
            classes: 4,
            channels: 1,
            height: 16,
            width: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub teacher: String,
    pub student: String,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        ModelsConfig {
            teacher: "wide-teacher".into(),
            student: "cnn-s".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Retrieval cutoff for Precision@k.
    pub k: usize,
    pub seeds: Vec<u64>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs"),
            k: DEFAULT_K,
            seeds: vec![0],
        }
    }
}

/// Loaded, normalized train and test splits.
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(Error::from)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// Relative output paths resolve against the config file's directory.
    pub fn resolve_output(&mut self, config_path: &Path) {
        if self.output.dir.is_relative() {
            if let Some(parent) = config_path.parent() {
                self.output.dir = parent.join(&self.output.dir);
            }
        }
    }

    pub fn input_and_classes(&self) -> (InputShape, usize) {
        match self.data.dataset {
            DatasetKind::FashionMnist => (InputShape::FASHION_MNIST, 10),
            DatasetKind::Cifar10 => (InputShape::CIFAR10, 10),
            DatasetKind::Synthetic => {
                let s = &self.data.synthetic;
                (InputShape::new(s.channels, s.height, s.width), s.classes)
            }
        }
    }

    pub fn teacher_spec(&self) -> Result<ModelSpec, Error> {
        let (input, classes) = self.input_and_classes();
        let mut spec = ModelSpec::by_name(&self.models.teacher, input, classes)?;
        spec.role = indistill_core::ModelRole::Teacher;
        Ok(spec)
    }

    pub fn student_spec(&self) -> Result<ModelSpec, Error> {
        let (input, classes) = self.input_and_classes();
        let mut spec = ModelSpec::by_name(&self.models.student, input, classes)?;
        spec.role = indistill_core::ModelRole::Student;
        Ok(spec)
    }

    pub fn auxiliary_spec(&self) -> Result<ModelSpec, Error> {
        make_auxiliary(&self.student_spec()?, self.distill.q)
    }

    /// Checks every model and hyperparameter before any compute.
    pub fn validate(&self) -> Result<(), Error> {
        let teacher = self.teacher_spec()?;
        teacher.validate()?;
        let student = self.student_spec()?;
        student.validate()?;
        self.auxiliary_spec()?.validate()?;
        self.teacher.validate(None)?;
        self.auxiliary.validate(None)?;
        self.distill.validate(Some(student.feature_layers()))?;
        if self.output.k == 0 {
            return Err(Error::Config("output.k must be positive".into()));
        }
        if self.output.seeds.is_empty() {
            return Err(Error::Config("output.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<Splits, Error> {
        let (train, test) = match self.data.dataset {
            DatasetKind::Synthetic => {
                let s = &self.data.synthetic;
                let all = synthetic_blobs(s.train + s.test, s.classes, s.channels, s.height, s.width, s.seed)?;
                let train_idx: Vec<usize> = (0..s.train).collect();
                let test_idx: Vec<usize> = (s.train..s.train + s.test).collect();
                (all.subset(&train_idx)?, all.subset(&test_idx)?)
            }
            kind => {
                let root = data::data_root(self.data.data_root.as_deref()).ok_or_else(|| {
                    Error::Io(std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("no dataset root: set data.data_root or {}", data::DATA_ENV),
                    ))
                })?;
                (load_split(kind, &root, Split::Train)?, load_split(kind, &root, Split::Test)?)
            }
        };
        let train = match self.data.train_subset {
            Some(n) => train.random_subset(n, self.data.subset_seed)?,
            None => train,
        };
        let test = match self.data.test_subset {
            Some(n) => test.random_subset(n, self.data.subset_seed)?,
            None => test,
        };
        let normalization = Normalization::fit(train.images());
        Ok(Splits {
            train: train.normalized(&normalization)?,
            test: test.normalized(&normalization)?,
            normalization,
        })
    }
}
