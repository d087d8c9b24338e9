use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{TttConfig, TttSession, TttTrace, UniformRows};
use crate::backbone::{BackboneSnapshot, Model};
use crate::error::{Error, Result};
use crate::masking::MaskingStrategy;
use crate::optim::LossKind;
use crate::scoring::{score_records, spearman, ProbabilitySupport, ScoringMode};
use crate::seqio::{MutationRecord, TokenSequence};
use crate::tensor::Scalar;

/// Hyperparameter axes; cells are their Cartesian product in
/// lr-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub micro_batch_sizes: Vec<usize>,
    pub grad_accum_steps: Vec<usize>,
    pub maskings: Vec<MaskingStrategy>,
    pub loss_kinds: Vec<LossKind>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            learning_rates: vec![4e-5, 4e-4, 4e-3],
            micro_batch_sizes: vec![4],
            grad_accum_steps: vec![4, 8, 16],
            maskings: vec![MaskingStrategy::default()],
            loss_kinds: vec![LossKind::default()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub learning_rate: f64,
    pub micro_batch_size: usize,
    pub grad_accum_steps: usize,
    pub masking: MaskingStrategy,
    pub loss_kind: LossKind,
}

impl GridCell {
    pub fn apply(&self, base: &TttConfig) -> TttConfig {
        TttConfig {
            learning_rate: self.learning_rate,
            micro_batch_size: self.micro_batch_size,
            grad_accum_steps: self.grad_accum_steps,
            masking: self.masking,
            loss_kind: self.loss_kind,
            ..*base
        }
    }

    /// Masking label, suffixed with the loss kind when it is not the default.
    pub fn masking_label(&self) -> String {
        let m = self.masking.label();
        if self.loss_kind == LossKind::default() {
            m
        } else {
            let kind = serde_json::to_value(self.loss_kind).expect("enum serializes");
            format!("{m}/{}", kind.as_str().unwrap_or_default())
        }
    }

    /// Directory-safe identifier.
    pub fn slug(&self, index: usize) -> String {
        format!(
            "cell{index:03}_lr{}_mb{}_acc{}_{}",
            self.learning_rate,
            self.micro_batch_size,
            self.grad_accum_steps,
            self.masking_label().replace('/', "-")
        )
    }
}

impl GridSpec {
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rates {
            for &micro_batch_size in &self.micro_batch_sizes {
                for &grad_accum_steps in &self.grad_accum_steps {
                    for &masking in &self.maskings {
                        for &loss_kind in &self.loss_kinds {
                            out.push(GridCell {
                                learning_rate,
                                micro_batch_size,
                                grad_accum_steps,
                                masking,
                                loss_kind,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// A grid target with an optional assay for the Spearman curve.
#[derive(Debug, Clone)]
pub struct GridTarget {
    pub sequence: TokenSequence,
    pub assay: Option<Vec<MutationRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetRun {
    pub target_id: String,
    pub trace: Option<TttTrace>,
    /// Assay Spearman per step, when an assay was given.
    pub spearman: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub cell: GridCell,
    pub runs: Vec<TargetRun>,
}

impl CellResult {
    pub fn succeeded(&self) -> bool {
        self.runs.iter().any(|r| r.error.is_none())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub lr: f64,
    pub micro_batch: usize,
    pub accum: usize,
    pub masking: String,
    pub step: usize,
    pub mean_perplexity: Option<f64>,
    pub mean_spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridReport {
    pub steps: usize,
    pub cells: Vec<CellResult>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl GridReport {
    /// One row per cell and step `0..=T`, averaged over successful targets.
    pub fn rows(&self) -> Vec<GridRow> {
        let mut rows = Vec::new();
        for c in &self.cells {
            let ok: Vec<&TargetRun> = c.runs.iter().filter(|r| r.error.is_none()).collect();
            for step in 0..=self.steps {
                rows.push(GridRow {
                    lr: c.cell.learning_rate,
                    micro_batch: c.cell.micro_batch_size,
                    accum: c.cell.grad_accum_steps,
                    masking: c.cell.masking_label(),
                    step,
                    mean_perplexity: mean(
                        ok.iter()
                            .filter_map(|r| r.trace.as_ref()?.steps.get(step)?.perplexity),
                    ),
                    mean_spearman: mean(ok.iter().filter_map(|r| r.spearman.get(step).copied())),
                });
            }
        }
        rows
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.rows() {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn run_target<F: Scalar>(
    base: &BackboneSnapshot<F>,
    target: &GridTarget,
    cfg: &TttConfig,
    mode: ScoringMode,
) -> Result<(TttTrace, Vec<f64>)> {
    let mut session = TttSession::new(Model::from_snapshot(base.clone()));
    let mut curve = Vec::new();
    let mut hook = |_step: usize, model: &Model<F>| -> Result<()> {
        if let Some(records) = &target.assay {
            let preds = score_records(model, &target.sequence, records, mode, ProbabilitySupport::FullVocabulary)?;
            let truth: Vec<f64> = records.iter().map(|r| r.measured_fitness).collect();
            curve.push(spearman(&preds, &truth)?);
        }
        Ok(())
    };
    let out = session.run(&target.sequence, std::slice::from_ref(&target.sequence), &UniformRows, cfg, &mut hook)?;
    Ok((out.trace, curve))
}

/// Runs every cell on every target from `base`, with perplexity recorded at
/// each step. Cells run concurrently on `jobs` workers; failures are kept
/// per target and do not stop the grid.
pub fn run_grid<F: Scalar + Send + Sync>(
    base: &BackboneSnapshot<F>,
    targets: &[GridTarget],
    spec: &GridSpec,
    base_cfg: &TttConfig,
    mode: ScoringMode,
    jobs: usize,
) -> Result<GridReport> {
    let cells = spec.cells();
    if cells.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let cfg = TttConfig {
                    emit_perplexity: true,
                    ..cell.apply(base_cfg)
                };
                let runs = targets
                    .iter()
                    .map(|t| match run_target(base, t, &cfg, mode) {
                        Ok((trace, spearman)) => TargetRun {
                            target_id: t.sequence.source_id().to_string(),
                            trace: Some(trace),
                            spearman,
                            error: None,
                        },
                        Err(e) => TargetRun {
                            target_id: t.sequence.source_id().to_string(),
                            trace: None,
                            spearman: Vec::new(),
                            error: Some(e.to_string()),
                        },
                    })
                    .collect();
                CellResult { cell: *cell, runs }
            })
            .collect()
    });
    Ok(GridReport {
        steps: base_cfg.steps,
        cells: results,
    })
}
