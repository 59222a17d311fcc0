use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Modality};
use super::grid::{coordinate_search, GridReport};
use super::run::{accuracy, check_modality, train, write_json, Selection, TrainConfig, TrainReport};
use super::RunConfig;
use crate::data::{Domain, Split};
use crate::error::{Error, Result};
use crate::loss::{DdpMode, LossWeights};
use crate::model::{Rev2Net, Rev2NetConfig};

pub const ABLATION_VARIANTS: [&str; 4] = [
    "Rev2Net w/o frame dec.",
    "Rev2Net w/o flow dec.",
    "Rev2Net w/o DDP",
    "Rev2Net (ours)",
];

pub(crate) fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn subdir(cfg: &TrainConfig, parts: &[&str]) -> Option<PathBuf> {
    cfg.output_dir.as_ref().map(|d| parts.iter().fold(d.clone(), |p, s| p.join(s)))
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-")
}

/// Builds a model from `model_cfg` with the run's seed and trains it.
pub fn train_variant(
    model_cfg: &Rev2NetConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
    sel: &Selection,
) -> Result<(Rev2Net<f32>, TrainReport)> {
    let mut model = Rev2Net::<f32>::build(model_cfg, train_cfg.seed)?;
    let report = train(&mut model, train_cfg, data, sel)?;
    Ok((model, report))
}

/// Model configs of the four ablation rows, in table order.
pub fn ablation_configs(base: &Rev2NetConfig) -> Vec<(&'static str, Rev2NetConfig)> {
    let no_frame = Rev2NetConfig {
        frame_decoder: false,
        flow_decoder: true,
        weights: LossWeights { lambda_im: 0.0, ..base.weights },
        ddp_mode: DdpMode::Off,
        ..base.clone()
    };
    let no_flow = Rev2NetConfig {
        frame_decoder: true,
        flow_decoder: false,
        weights: LossWeights { lambda_flow: 0.0, ..base.weights },
        ddp_mode: DdpMode::Off,
        ..base.clone()
    };
    let no_ddp = Rev2NetConfig {
        flow_decoder: true,
        frame_decoder: true,
        weights: LossWeights { alpha: 0.0, beta: 0.0, ..base.weights },
        ddp_mode: DdpMode::Off,
        ..base.clone()
    };
    let full = Rev2NetConfig {
        flow_decoder: true,
        frame_decoder: true,
        ..base.clone()
    };
    ABLATION_VARIANTS.into_iter().zip([no_frame, no_flow, no_ddp, full]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub final_total_loss: f64,
    pub num_params: usize,
    pub data_order: String,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Whether the full model scored at least as well as the variant
    /// without discrepancy terms. Reported, not enforced.
    pub full_at_least_no_ddp: bool,
}

/// Trains the four ablation variants with the same seed and data order and
/// reports held-out accuracy for each.
pub fn ablation_suite(run: &RunConfig, data: &Dataset, sel: &Selection) -> Result<AblationReport> {
    if sel.test.is_empty() {
        return Err(Error::input("ablation needs held-out clips"));
    }
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(&run.model) {
        log::info!("ablation: training {name}");
        let tc = TrainConfig {
            output_dir: subdir(&run.train, &["ablation", &slug(name)]),
            ..run.train.clone()
        };
        let (model, report) = train_variant(&cfg, &tc, data, sel)?;
        let last = report.last();
        rows.push(AblationRow {
            variant: name.to_string(),
            test_accuracy: last.test_accuracy.expect("test split is non-empty"),
            train_accuracy: last.train_accuracy,
            final_total_loss: last.loss.total,
            num_params: model.num_params(),
            data_order: report.data_order.clone(),
            checkpoint: report.checkpoint.clone(),
        });
    }
    let acc = |n: &str| rows.iter().find(|r| r.variant == n).map(|r| r.test_accuracy).unwrap_or(0.0);
    let full_at_least_no_ddp = acc(ABLATION_VARIANTS[3]) >= acc(ABLATION_VARIANTS[2]);
    if !full_at_least_no_ddp {
        log::warn!(
            "full model ({:.3}) scored below the variant without discrepancy terms ({:.3})",
            acc(ABLATION_VARIANTS[3]),
            acc(ABLATION_VARIANTS[2])
        );
    }
    let report = AblationReport {
        rows,
        full_at_least_no_ddp,
    };
    if let Some(dir) = &run.train.output_dir {
        write_json(&dir.join("ablation.json"), &report)?;
        write_csv(&dir.join("ablation.csv"), &report.rows)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XDomainRow {
    pub variant: String,
    pub input: String,
    pub source: Domain,
    pub target: Domain,
    /// Held-out accuracy on the target domain.
    pub accuracy: f64,
    /// Held-out accuracy on the source domain, for reference.
    pub source_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XDomainReport {
    pub rows: Vec<XDomainRow>,
    /// Mean source-minus-target accuracy drop per variant.
    pub mean_drop: Vec<(String, f64)>,
    pub observation: String,
}

/// Flow-stack input variant of a model config: a plain classifier over
/// `[T-1, 2, H, W]`.
pub fn flow_input_config(base: &Rev2NetConfig) -> Rev2NetConfig {
    Rev2NetConfig {
        input_channels: 2,
        input_offset: 0.0,
        frames: base.frames - 1,
        ..base.plain_classifier()
    }
}

pub fn xdomain_variants(base: &Rev2NetConfig) -> Vec<(&'static str, Modality, Rev2NetConfig)> {
    vec![
        ("RGB classifier", Modality::Rgb, base.plain_classifier()),
        ("Flow classifier", Modality::Flow, flow_input_config(base)),
        ("Rev2Net", Modality::Rgb, Rev2NetConfig { flow_decoder: true, frame_decoder: true, ..base.clone() }),
    ]
}

/// Trains every variant on one domain and tests it on the other, in both
/// directions. The dataset must hold flows for every clip.
pub fn cross_domain(run: &RunConfig, data: &Dataset) -> Result<XDomainReport> {
    if data.domains().len() < 2 {
        return Err(Error::input("cross-domain evaluation needs clips from both domains"));
    }
    let mut rows = Vec::new();
    for (source, target) in [(Domain::A, Domain::B), (Domain::B, Domain::A)] {
        let sel = Selection {
            train: data.indices(Split::Train, Some(source)),
            test: data.indices(Split::Test, Some(target)),
        };
        let source_test = data.indices(Split::Test, Some(source));
        if sel.train.is_empty() || sel.test.is_empty() || source_test.is_empty() {
            return Err(Error::input(format!("{}->{}: empty train or test split", source.name(), target.name())));
        }
        for (name, modality, cfg) in xdomain_variants(&run.model) {
            check_modality(&cfg, modality)?;
            log::info!("cross-domain {}->{}: training {name}", source.name(), target.name());
            let dir = format!("{}-to-{}", source.name(), target.name());
            let tc = TrainConfig {
                modality,
                output_dir: subdir(&run.train, &["xdomain", &dir, &slug(name)]),
                ..run.train.clone()
            };
            let (model, report) = train_variant(&cfg, &tc, data, &sel)?;
            rows.push(XDomainRow {
                variant: name.to_string(),
                input: modality.label().to_string(),
                source,
                target,
                accuracy: report.last().test_accuracy.expect("target split is non-empty"),
                source_accuracy: accuracy(&model, data, &source_test, modality, tc.batch_size)?,
            });
        }
    }
    let mean_drop: Vec<(String, f64)> = xdomain_variants(&run.model)
        .iter()
        .map(|(name, _, _)| {
            let drops: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == *name)
                .map(|r| r.source_accuracy - r.accuracy)
                .collect();
            (name.to_string(), drops.iter().sum::<f64>() / drops.len() as f64)
        })
        .collect();
    let drop = |n: &str| mean_drop.iter().find(|(v, _)| v == n).map(|(_, d)| *d).unwrap_or(0.0);
    let verdict = if drop("Flow classifier") > drop("RGB classifier") {
        "flow-input features generalized worse than RGB features"
    } else {
        "flow-input features generalized at least as well as RGB features"
    };
    let observation = format!(
        "mean source-to-target accuracy drop: RGB classifier {:.3}, flow classifier {:.3}, Rev2Net {:.3}; {verdict}",
        drop("RGB classifier"),
        drop("Flow classifier"),
        drop("Rev2Net"),
    );
    let report = XDomainReport {
        rows,
        mean_drop,
        observation,
    };
    if let Some(dir) = &run.train.output_dir {
        write_json(&dir.join("xdomain.json"), &report)?;
        write_csv(&dir.join("xdomain.csv"), &report.rows)?;
    }
    Ok(report)
}

/// Coordinate grid search over the four loss weights, scoring each cell by
/// held-out accuracy after `run.grid.epochs_per_cell` epochs.
pub fn grid_search(run: &RunConfig, data: &Dataset, sel: &Selection) -> Result<GridReport> {
    let budget = run.grid.epochs_per_cell;
    if budget == 0 {
        return Err(Error::input("grid search budget (epochs per cell) must be >= 1"));
    }
    if sel.test.is_empty() {
        return Err(Error::input("grid search needs held-out clips"));
    }
    let tc = TrainConfig {
        epochs: budget,
        output_dir: None,
        ..run.train.clone()
    };
    let report = coordinate_search(run.model.weights, budget, |w| {
        let cfg = Rev2NetConfig { weights: *w, ..run.model.clone() };
        let (_, r) = train_variant(&cfg, &tc, data, sel)?;
        Ok(r.last().test_accuracy.expect("test split is non-empty"))
    })?;
    if let Some(dir) = &run.train.output_dir {
        write_json(&dir.join("grid.json"), &report)?;
        write_csv(&dir.join("grid.csv"), &report.cells)?;
    }
    Ok(report)
}
