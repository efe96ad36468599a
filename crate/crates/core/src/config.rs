//! Experiment configuration: the (mask, reconstruct, classify) modality
//! triplet and every training hyperparameter.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::backbone_preset;

/// Input stream: raw RGB pixels or the LDP code image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Ldp,
}

impl Modality {
    pub fn label(self) -> &'static str {
        match self {
            Modality::Rgb => "RGB",
            Modality::Ldp => "LDP",
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "ldp" => Ok(Modality::Ldp),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Which modality is masked, which are reconstructed, which is classified.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigurationTriplet {
    pub mask: Modality,
    /// Sorted, deduplicated, nonempty.
    pub reconstruct: Vec<Modality>,
    pub classify: Modality,
}

impl ConfigurationTriplet {
    pub fn new(mask: Modality, reconstruct: &[Modality], classify: Modality) -> Result<Self> {
        let mut reconstruct = reconstruct.to_vec();
        reconstruct.sort();
        reconstruct.dedup();
        let t = Self {
            mask,
            reconstruct,
            classify,
        };
        t.validate()?;
        Ok(t)
    }

    /// The five supported variants, in table order; the last is the
    /// RGB-only baseline.
    pub fn all() -> Vec<Self> {
        use Modality::{Ldp, Rgb};
        vec![
            Self::new(Ldp, &[Rgb], Rgb).unwrap(),
            Self::new(Ldp, &[Rgb], Ldp).unwrap(),
            Self::new(Rgb, &[Ldp], Rgb).unwrap(),
            Self::new(Rgb, &[Rgb, Ldp], Rgb).unwrap(),
            Self::baseline(),
        ]
    }

    pub fn baseline() -> Self {
        Self {
            mask: Modality::Rgb,
            reconstruct: vec![Modality::Rgb],
            classify: Modality::Rgb,
        }
    }

    pub fn is_baseline(&self) -> bool {
        *self == Self::baseline()
    }

    pub fn validate(&self) -> Result<()> {
        let mut canon = self.clone();
        canon.reconstruct.sort();
        canon.reconstruct.dedup();
        if canon.reconstruct != self.reconstruct || !Self::all_raw().contains(&canon) {
            return Err(Error::Config(format!("unsupported configuration {self}")));
        }
        Ok(())
    }

    fn all_raw() -> [Self; 5] {
        use Modality::{Ldp, Rgb};
        let t = |mask, reconstruct: &[Modality], classify| Self {
            mask,
            reconstruct: reconstruct.to_vec(),
            classify,
        };
        [
            t(Ldp, &[Rgb], Rgb),
            t(Ldp, &[Rgb], Ldp),
            t(Rgb, &[Ldp], Rgb),
            t(Rgb, &[Rgb, Ldp], Rgb),
            t(Rgb, &[Rgb], Rgb),
        ]
    }
}

impl fmt::Display for ConfigurationTriplet {
    /// `M-LDP/R-RGB/C-RGB`; multiple targets are joined with `+`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rec: Vec<_> = self.reconstruct.iter().map(|m| m.label()).collect();
        write!(
            f,
            "M-{}/R-{}/C-{}",
            self.mask.label(),
            rec.join("+"),
            self.classify.label()
        )
    }
}

impl FromStr for ConfigurationTriplet {
    type Err = Error;

    /// Accepts `LDP,RGB,RGB`, `RGB,RGB+LDP,RGB` or the display form.
    fn from_str(s: &str) -> Result<Self> {
        let cleaned = s.replace("M-", "").replace("R-", "").replace("C-", "");
        let parts: Vec<&str> = cleaned.split([',', '/']).collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("triplet `{s}` needs three parts")));
        }
        let rec = parts[1]
            .split('+')
            .map(Modality::from_str)
            .collect::<Result<Vec<_>>>()?;
        Self::new(parts[0].parse()?, &rec, parts[2].parse()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Multiclass,
    MultiAttribute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthFamily {
    /// Distinct texture families per class.
    Textures,
    /// Raw noise texture vs. the same texture with a locally smoothed region.
    Deepfake,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        family: SynthFamily,
        per_class: usize,
        classes: usize,
    },
    Directory {
        root: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub triplet: ConfigurationTriplet,
    pub preset: String,
    /// Weight of the classification loss; reconstruction gets `1 - lambda`.
    pub lambda: f64,
    pub mask_ratio: f64,
    pub patch_size: usize,
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub drop_path: f64,
    /// LDP bits per code.
    pub k: usize,
    pub num_classes: usize,
    pub task: TaskKind,
    pub shared_encoder: bool,
    pub seed: u64,
    pub dataset: DatasetSource,
    pub split: SplitFractions,
}

impl Default for ExperimentConfig {
    /// Full-scale defaults: 224px inputs in 16px patches, batch 8, 75 epochs,
    /// cosine schedule 5e-5 to 1e-6, decay 0.05, drop path 0.01,
    /// lambda 0.1, masking ratio 0.75.
    fn default() -> Self {
        Self {
            triplet: ConfigurationTriplet::new(Modality::Ldp, &[Modality::Rgb], Modality::Rgb)
                .unwrap(),
            preset: "vit-b".into(),
            lambda: 0.1,
            mask_ratio: 0.75,
            patch_size: 16,
            image_size: 224,
            batch_size: 8,
            epochs: 75,
            lr_max: 5e-5,
            lr_min: 1e-6,
            weight_decay: 0.05,
            momentum: 0.9,
            drop_path: 0.01,
            k: 3,
            num_classes: 2,
            task: TaskKind::Multiclass,
            shared_encoder: true,
            seed: 0,
            dataset: DatasetSource::Synthetic {
                family: SynthFamily::Textures,
                per_class: 250,
                classes: 2,
            },
            split: SplitFractions::default(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults scaled to a desk: toy-b on 32px images in 8px patches,
    /// 30 epochs, 500 synthetic samples split 400/100.
    pub fn desk_scale() -> Self {
        Self {
            preset: "toy-b".into(),
            patch_size: 8,
            image_size: 32,
            epochs: 30,
            split: SplitFractions {
                train: 0.8,
                val: 0.0,
                test: 0.2,
            },
            ..Self::default()
        }
    }

    /// Number of classifier outputs: one per class, or a two-way head per
    /// attribute.
    pub fn num_outputs(&self) -> usize {
        match self.task {
            TaskKind::Multiclass => self.num_classes,
            TaskKind::MultiAttribute => 2 * self.num_classes,
        }
    }

    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch_size.max(1);
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        self.triplet.validate()?;
        backbone_preset(&self.preset)?.validate()?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::LambdaOutOfRange(self.lambda));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::RatioOutOfRange(self.mask_ratio));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::IndivisibleDims {
                dim: self.image_size,
                patch: self.patch_size,
            });
        }
        if self.image_size < 3 {
            return Err(Error::Config("image_size must be at least 3".into()));
        }
        let checks: [(bool, &str); 8] = [
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (
                self.lr_min >= 0.0 && self.lr_min <= self.lr_max,
                "need 0 <= lr_min <= lr_max",
            ),
            (self.weight_decay >= 0.0, "weight_decay must be >= 0"),
            ((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)"),
            ((0.0..1.0).contains(&self.drop_path), "drop_path must be in [0, 1)"),
            ((1..=8).contains(&self.k), "k must be in 1..=8"),
            (
                match self.task {
                    TaskKind::Multiclass => self.num_classes >= 2,
                    TaskKind::MultiAttribute => self.num_classes >= 1,
                },
                "too few classes",
            ),
            (
                [self.split.train, self.split.val, self.split.test]
                    .iter()
                    .all(|f| (0.0..=1.0).contains(f))
                    && ((self.split.train + self.split.val + self.split.test) - 1.0).abs() < 1e-9,
                "split fractions must be in [0, 1] and sum to 1",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
