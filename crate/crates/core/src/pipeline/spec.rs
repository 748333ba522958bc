use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::classifier::ClassifierConfig;
use crate::contrastive::{EncoderSpec, PretrainConfig};
use crate::error::{ensure, Error, Result};
use crate::image::AugmentConfig;
use crate::metrics::SplitConfig;
use crate::phantom::DomainConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Raw images, randomly initialized encoder.
    Baseline,
    /// Enhanced images, randomly initialized encoder.
    Dce,
    /// Raw images, contrastively pretrained encoder.
    Simclr,
    /// Enhanced images, contrastively pretrained encoder.
    Scc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Dce, Variant::Simclr, Variant::Scc];

    pub fn uses_enhancement(self) -> bool {
        matches!(self, Variant::Dce | Variant::Scc)
    }

    pub fn uses_pretraining(self) -> bool {
        matches!(self, Variant::Simclr | Variant::Scc)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Dce => "dce",
            Variant::Simclr => "simclr",
            Variant::Scc => "scc",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a labeled corpus comes from: a phantom domain (preset name or a
/// TOML domain file) or a directory holding images and `manifest.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CorpusSource {
    Phantom(String),
    Directory(PathBuf),
}

impl CorpusSource {
    /// Short label used in reports.
    pub fn label(&self) -> String {
        match self {
            CorpusSource::Phantom(d) => Path::new(d)
                .file_stem()
                .map_or_else(|| d.clone(), |s| s.to_string_lossy().into_owned()),
            CorpusSource::Directory(p) => p
                .file_name()
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()),
        }
    }

    pub fn phantom_domain(&self) -> Result<Option<DomainConfig>> {
        match self {
            CorpusSource::Phantom(d) => match DomainConfig::preset(d) {
                Some(c) => Ok(Some(c)),
                None => DomainConfig::from_toml_file(Path::new(d)).map(Some),
            },
            CorpusSource::Directory(_) => Ok(None),
        }
    }
}

impl FromStr for CorpusSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("phantom", d)) if !d.is_empty() => Ok(CorpusSource::Phantom(d.to_string())),
            Some(("dir", p)) if !p.is_empty() => Ok(CorpusSource::Directory(PathBuf::from(p))),
            _ => Err(Error::Config(format!(
                "corpus source {s:?} must be phantom:<domain> or dir:<path>"
            ))),
        }
    }
}

impl TryFrom<String> for CorpusSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CorpusSource> for String {
    fn from(c: CorpusSource) -> String {
        match c {
            CorpusSource::Phantom(d) => format!("phantom:{d}"),
            CorpusSource::Directory(p) => format!("dir:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Labeled in-distribution corpus.
    pub id: CorpusSource,
    /// Out-of-distribution corpora, each split into few-shot train and test.
    pub ood: Vec<CorpusSource>,
    /// Unlabeled pool for the self-supervised stages (enhancer and encoder).
    pub unlabeled: CorpusSource,
    /// Sizes of generated phantom corpora; directory corpora use every row.
    pub id_count: usize,
    pub ood_count: usize,
    pub unlabeled_count: usize,
    pub positive_fraction: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            id: CorpusSource::Phantom("A".into()),
            ood: vec![CorpusSource::Phantom("B".into()), CorpusSource::Phantom("C".into())],
            unlabeled: CorpusSource::Phantom("A".into()),
            id_count: 200,
            ood_count: 300,
            unlabeled_count: 64,
            positive_fraction: 0.5,
        }
    }
}

/// Full description of one comparison run. Serialized as TOML: top-level
/// `key = value` pairs plus one table per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Few-shot fractions of the OOD training split, each in `(0, 1]`.
    pub few_shot_fractions: Vec<f64>,
    pub data: DataSpec,
    pub splits: SplitConfig,
    /// Enhancer training; `seed` is replaced by the run seed.
    pub dce: TrainConfig,
    /// Encoder architecture; images are resized to `input_side` on load.
    pub encoder: EncoderSpec,
    /// Contrastive pretraining; `seed` is derived from the run seed.
    pub pretrain: PretrainConfig,
    /// Supervised training on the in-distribution corpus.
    pub classifier: ClassifierConfig,
    /// Continued training on few-shot OOD subsets.
    pub few_shot: ClassifierConfig,
}

impl Default for ExperimentSpec {
    /// The stock phantom benchmark: train on domain A, test on B and C.
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: (0..5).collect(),
            few_shot_fractions: vec![0.1, 0.5, 1.0],
            data: DataSpec::default(),
            splits: SplitConfig {
                folds: 5,
                ood_test_ratio: 0.3,
            },
            dce: TrainConfig {
                epochs: 30,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            encoder: EncoderSpec {
                input_side: 64,
                ..EncoderSpec::default()
            },
            pretrain: PretrainConfig {
                epochs: 30,
                augment: AugmentConfig {
                    output_width: 64,
                    output_height: 64,
                    ..AugmentConfig::default()
                },
                ..PretrainConfig::default()
            },
            classifier: ClassifierConfig {
                weight_decay: 0.5,
                ..ClassifierConfig::default()
            },
            few_shot: ClassifierConfig {
                steps: 100,
                learning_rate: 0.01,
                ..ClassifierConfig::default()
            },
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.variants.is_empty(), Config, "no variants requested");
        ensure!(!self.seeds.is_empty(), Config, "no seeds requested");
        let mut v = self.variants.clone();
        v.sort_unstable();
        v.dedup();
        ensure!(v.len() == self.variants.len(), Config, "duplicate variants");
        ensure!(!self.data.ood.is_empty(), Config, "at least one OOD corpus is required");
        ensure!(
            (0.0..=1.0).contains(&self.data.positive_fraction),
            Config,
            "positive_fraction outside [0, 1]"
        );
        ensure!(
            self.data.id_count >= 10 && self.data.ood_count >= 10,
            Config,
            "phantom corpora need at least 10 samples"
        );
        ensure!(self.data.unlabeled_count >= 2, Config, "unlabeled pool needs at least 2 images");
        for &f in &self.few_shot_fractions {
            ensure!(f > 0.0 && f <= 1.0, Config, "few-shot fraction {f} outside (0, 1]");
        }
        ensure!(
            self.few_shot_fractions.windows(2).all(|w| w[0] < w[1]),
            Config,
            "few-shot fractions must be strictly increasing"
        );
        ensure!(
            self.splits.folds >= 2 && self.splits.ood_test_ratio > 0.0 && self.splits.ood_test_ratio < 1.0,
            Config,
            "need at least 2 folds and an OOD test ratio in (0, 1)"
        );
        self.encoder.validate()?;
        let stride = self.dce.unet.stride();
        ensure!(
            self.encoder.input_side % stride == 0,
            Config,
            "encoder input side {} must be a multiple of the enhancer stride {stride}",
            self.encoder.input_side
        );
        if self.variants.iter().any(|v| v.uses_enhancement()) {
            self.dce.validate()?;
        }
        if self.variants.iter().any(|v| v.uses_pretraining()) {
            self.pretrain.validate()?;
        }
        self.classifier.validate()?;
        self.few_shot.validate()?;
        for source in std::iter::once(&self.data.id)
            .chain(&self.data.ood)
            .chain(std::iter::once(&self.data.unlabeled))
        {
            if let Some(domain) = source.phantom_domain()? {
                domain.validate()?;
            }
        }
        Ok(())
    }
}
