use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;

/// First-stage values tried for every weight.
pub const COARSE_GRID: [f64; 6] = [0.0, 0.0001, 0.001, 0.1, 1.0, 10.0];
/// Second-stage multipliers, applied to a scale derived from the
/// first-stage winner (see [`fine_values`]).
pub const FINE_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightName {
    Alpha,
    Beta,
    LambdaFlow,
    LambdaIm,
}

impl WeightName {
    pub const ALL: [WeightName; 4] = [WeightName::Alpha, WeightName::Beta, WeightName::LambdaFlow, WeightName::LambdaIm];

    pub fn name(self) -> &'static str {
        match self {
            WeightName::Alpha => "alpha",
            WeightName::Beta => "beta",
            WeightName::LambdaFlow => "lambda_flow",
            WeightName::LambdaIm => "lambda_im",
        }
    }

    pub fn get(self, w: &LossWeights) -> f64 {
        match self {
            WeightName::Alpha => w.alpha,
            WeightName::Beta => w.beta,
            WeightName::LambdaFlow => w.lambda_flow,
            WeightName::LambdaIm => w.lambda_im,
        }
    }

    pub fn with(self, w: &LossWeights, v: f64) -> LossWeights {
        let mut out = *w;
        match self {
            WeightName::Alpha => out.alpha = v,
            WeightName::Beta => out.beta = v,
            WeightName::LambdaFlow => out.lambda_flow = v,
            WeightName::LambdaIm => out.lambda_im = v,
        }
        out
    }
}

/// The fine grid around a first-stage winner `w`: `f * 2w` for every
/// multiplier `f`, so `w` sits in the middle. A winner of 0 is refined on
/// the scale of the smallest positive coarse value.
pub fn fine_values(winner: f64) -> [f64; 5] {
    let smallest = COARSE_GRID.iter().copied().find(|v| *v > 0.0).expect("positive coarse value");
    let scale = 2.0 * if winner > 0.0 { winner } else { smallest };
    FINE_GRID.map(|f| f * scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub stage: u8,
    pub weight: WeightName,
    pub value: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_flow: f64,
    pub lambda_im: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    /// Always "coordinate": one weight varies while the others are held.
    pub search: String,
    pub epochs_per_cell: usize,
    pub cells: Vec<GridCell>,
    pub stage1_best: LossWeights,
    pub best: LossWeights,
}

impl GridReport {
    pub fn stage_cells(&self, stage: u8, weight: WeightName) -> Vec<&GridCell> {
        self.cells.iter().filter(|c| c.stage == stage && c.weight == weight).collect()
    }
}

/// Two-stage coordinate search. Stage 1 sweeps each weight over the coarse
/// grid with the others at `defaults`; stage 2 sweeps each weight over its
/// fine grid with the others at their stage-1 winners. Selection maximizes
/// `evaluate`, breaking ties toward the smaller weight. Identical weight
/// vectors are evaluated once.
pub fn coordinate_search(
    defaults: LossWeights,
    epochs_per_cell: usize,
    mut evaluate: impl FnMut(&LossWeights) -> Result<f64>,
) -> Result<GridReport> {
    if epochs_per_cell == 0 {
        return Err(Error::input("grid search budget (epochs per cell) must be >= 1"));
    }
    let mut memo: HashMap<[u64; 4], f64> = HashMap::new();
    let mut cells = Vec::new();
    let mut run = |stage: u8, weight: WeightName, values: &[f64], base: &LossWeights, cells: &mut Vec<GridCell>| {
        let mut best: Option<(f64, f64)> = None;
        for &value in values {
            let w = weight.with(base, value);
            let key = [w.alpha, w.beta, w.lambda_flow, w.lambda_im].map(f64::to_bits);
            let accuracy = match memo.get(&key) {
                Some(a) => *a,
                None => {
                    let a = evaluate(&w)?;
                    memo.insert(key, a);
                    a
                }
            };
            log::info!("grid stage {stage} {}={value}: accuracy {accuracy:.4}", weight.name());
            cells.push(GridCell {
                stage,
                weight,
                value,
                alpha: w.alpha,
                beta: w.beta,
                lambda_flow: w.lambda_flow,
                lambda_im: w.lambda_im,
                accuracy,
            });
            let better = match best {
                None => true,
                Some((bv, ba)) => accuracy > ba || (accuracy == ba && value < bv),
            };
            if better {
                best = Some((value, accuracy));
            }
        }
        Ok::<f64, Error>(best.expect("non-empty grid").0)
    };

    let mut stage1 = defaults;
    for weight in WeightName::ALL {
        let v = run(1, weight, &COARSE_GRID, &defaults, &mut cells)?;
        stage1 = weight.with(&stage1, v);
    }
    let mut best = stage1;
    for weight in WeightName::ALL {
        let values = fine_values(weight.get(&stage1));
        let v = run(2, weight, &values, &stage1, &mut cells)?;
        best = weight.with(&best, v);
    }
    Ok(GridReport {
        search: "coordinate".to_string(),
        epochs_per_cell,
        cells,
        stage1_best: stage1,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fine_values_center_on_winner() {
        assert_eq!(fine_values(0.1), [0.0, 0.05, 0.1, 0.15000000000000002, 0.2]);
        assert_eq!(fine_values(0.0)[1], 0.00005);
    }

    #[test]
    fn picks_the_maximum() {
        let r = coordinate_search(LossWeights::default(), 1, |w| Ok(if w.beta == 1.0 { 0.9 } else { 0.5 })).unwrap();
        assert_eq!(r.stage1_best.beta, 1.0);
        // Stage 2 for beta is {0, 0.5, 1, 1.5, 2}; only 1.0 scores 0.9.
        assert_eq!(r.best.beta, 1.0);
        assert_eq!(r.cells.len(), 4 * 6 + 4 * 5);
    }

    #[test]
    fn zero_budget_is_rejected() {
        assert!(matches!(coordinate_search(LossWeights::default(), 0, |_| Ok(0.0)), Err(Error::InvalidInput(_))));
    }
}
