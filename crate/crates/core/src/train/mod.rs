//! Optimization, evaluation and the experiment protocols: weight grid
//! search, decoder ablations and cross-domain transfer.

mod dataset;
mod grid;
mod optim;
mod protocols;
mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use dataset::{Batch, Dataset, Modality, Sample, FLOW_DIR};
pub use grid::{coordinate_search, fine_values, GridCell, GridReport, WeightName, COARSE_GRID, FINE_GRID};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use protocols::{
    ablation_configs, ablation_suite, cross_domain, flow_input_config, grid_search, train_variant, xdomain_variants,
    AblationReport, AblationRow, XDomainReport, XDomainRow, ABLATION_VARIANTS,
};
pub use run::{
    accuracy, check_modality, evaluate, predict, train, EpochReport, Selection, StepRecord, TrainConfig, TrainReport,
    CHECKPOINT_FILE, METRICS_FILE, REPORT_FILE, TOTAL_CHECK_TOL,
};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::flow::TvL1Params;
use crate::model::Rev2NetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Training epochs spent on every grid cell.
    pub epochs_per_cell: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { epochs_per_cell: 2 }
    }
}

/// Everything one experiment needs, as read from a JSON config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Rev2NetConfig,
    pub train: TrainConfig,
    pub flow: TvL1Params,
    pub grid: GridConfig,
}

impl RunConfig {
    /// Parses strictly (unknown keys are errors) and validates every section.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.flow.validate()?;
        check_modality(&self.model, self.train.modality)
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        self.train
            .manifest
            .as_deref()
            .ok_or_else(|| Error::config("train.manifest", "must be set"))
    }

    /// Loads the manifest's clips and checks them against the model geometry.
    pub fn load_dataset(&self) -> Result<(DatasetManifest, Dataset)> {
        let manifest = DatasetManifest::load(self.manifest_path()?)?;
        let data = Dataset::from_manifest(&manifest)?;
        let (t, h, w) = data.geometry()?;
        let m = &self.model;
        let expected_t = match self.train.modality {
            Modality::Rgb => t,
            Modality::Flow => t - 1,
        };
        if (m.frames, m.height, m.width) != (expected_t, h, w) {
            return Err(Error::config(
                "model.frames/height/width",
                format!("model expects {}x{}x{}, dataset clips are {t}x{h}x{w}", m.frames, m.height, m.width),
            ));
        }
        Ok((manifest, data))
    }

    /// Attaches flow fields to the listed samples. Flows cached under the
    /// dataset's `flows/` directory are reused; new ones are cached under
    /// the run's output directory.
    pub fn attach_flows(&self, manifest: &DatasetManifest, data: &mut Dataset, indices: &[usize]) -> Result<()> {
        let read = manifest.root.join(FLOW_DIR);
        let write: Option<PathBuf> = self.train.output_dir.as_ref().map(|d| d.join(FLOW_DIR));
        data.attach_flows(indices, &self.flow, Some(&read), write.as_deref())
    }
}
