//! Run configuration: a TOML file with sections, every key optional.
//!
//! The top-level `seed` and `num_cell_types` override the same keys in the
//! `[cohort]` and `[cells]` sections, and `hidden_dim` sets the hidden width
//! of both MLP-A and MLP-B.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::CohortSpec;
use crate::error::{Error, Result};
use crate::fusion::{Architecture, FusionMode, TrainConfig};
use crate::modulation::ModulationConfig;
use crate::smoothing::{CellCorpusSpec, LambdaMode, Stage1Config, DEFAULT_NUM_TYPES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingSection {
    pub enabled: bool,
    pub stage1_epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub lambda: LambdaMode,
    /// Width of the frozen encoder's embedding.
    pub embed_dim: usize,
    /// Width of the MLP-A output fed to MLP-B.
    pub feature_dim: usize,
    /// Cell pairs used to measure the interpolation gap.
    pub gap_pairs: usize,
}

impl Default for SmoothingSection {
    fn default() -> Self {
        Self {
            enabled: true,
            stage1_epochs: 30,
            eta: 0.5,
            batch_size: 32,
            lambda: LambdaMode::Uniform,
            embed_dim: 32,
            feature_dim: 32,
            gap_pairs: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub snn_hidden: usize,
    pub snn_out: usize,
    pub genomic_dim: usize,
    pub image_hidden: usize,
    pub image_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            snn_hidden: a.snn_hidden,
            snn_out: a.snn_out,
            genomic_dim: a.genomic_dim,
            image_hidden: a.image_hidden,
            image_dim: a.image_dim,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub cohort: Option<PathBuf>,
    pub cells: Option<PathBuf>,
    /// Stage-1 checkpoint (encoder + MLP-A).
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub num_cell_types: usize,
    pub k_folds: usize,
    pub fusion_mode: FusionMode,
    pub momentum: f64,
    pub step_decay: bool,
    pub modulation: ModulationConfig,
    pub smoothing: SmoothingSection,
    pub model: ModelSection,
    pub cohort: CohortSpec,
    pub cells: CellCorpusSpec,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: 0,
            eta: t.eta,
            epochs: t.epochs,
            batch_size: t.batch_size,
            hidden_dim: 128,
            num_cell_types: DEFAULT_NUM_TYPES,
            k_folds: 15,
            fusion_mode: FusionMode::Concat,
            momentum: t.momentum,
            step_decay: t.step_decay,
            modulation: ModulationConfig::default(),
            smoothing: SmoothingSection::default(),
            model: ModelSection::default(),
            cohort: CohortSpec::default(),
            cells: CellCorpusSpec::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Pushes the top-level keys into the sections they govern.
    pub fn resolve(&mut self) {
        self.cohort.seed = self.seed;
        self.cohort.num_cell_types = self.num_cell_types;
        self.cells.seed = self.seed;
        self.cells.num_types = self.num_cell_types;
        self.cells.gene_dim = self.cohort.dim_rna;
        self.cells.atlas_seed = self.cohort.atlas_seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(Error::invalid("k_folds", format!("{} must be at least 2", self.k_folds)));
        }
        if self.hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim", "must be positive"));
        }
        let m = &self.model;
        for (name, v) in [
            ("model.snn_hidden", m.snn_hidden),
            ("model.snn_out", m.snn_out),
            ("model.genomic_dim", m.genomic_dim),
            ("model.image_hidden", m.image_hidden),
            ("model.image_dim", m.image_dim),
            ("smoothing.embed_dim", self.smoothing.embed_dim),
            ("smoothing.gap_pairs", self.smoothing.gap_pairs),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if self.modulation.enabled && self.fusion_mode != FusionMode::Concat {
            return Err(Error::Config(
                "modulation.enabled requires fusion_mode = \"concat\"".into(),
            ));
        }
        self.train().validate()?;
        self.stage1().validate()?;
        self.cohort.validate()?;
        self.cells.validate()
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            eta: self.eta,
            batch_size: self.batch_size,
            momentum: self.momentum,
            step_decay: self.step_decay,
            modulation: self.modulation.clone(),
            seed: self.seed,
        }
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            epochs: self.smoothing.stage1_epochs,
            batch_size: self.smoothing.batch_size,
            eta: self.smoothing.eta,
            hidden_dim: self.hidden_dim,
            feature_dim: self.smoothing.feature_dim,
            lambda: self.smoothing.lambda,
            seed: self.seed,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            snn_hidden: self.model.snn_hidden,
            snn_out: self.model.snn_out,
            hidden_dim: self.hidden_dim,
            genomic_dim: self.model.genomic_dim,
            image_hidden: self.model.image_hidden,
            image_dim: self.model.image_dim,
            fusion_mode: self.fusion_mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_documented_ones() {
        let c = RunConfig::default();
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.hidden_dim, 128);
        assert_eq!(c.num_cell_types, 17);
        assert_eq!(c.k_folds, 15);
        c.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_and_sections() {
        let c = RunConfig::from_toml(
            "seed = 3\neta = 0.005\n[modulation]\nenabled = false\n[cohort]\nn_patients = 90\n",
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert!(!c.modulation.enabled);
        assert_eq!(c.cohort.n_patients, 90);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::from_toml("sed = 3\n").unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let mut c = RunConfig::default();
        c.eta = 0.0;
        assert!(c.validate().unwrap_err().to_string().contains("eta"));
        let mut c = RunConfig::default();
        c.batch_size = 1;
        assert!(c.validate().unwrap_err().to_string().contains("batch_size"));
        let mut c = RunConfig::default();
        c.fusion_mode = FusionMode::Kronecker;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
