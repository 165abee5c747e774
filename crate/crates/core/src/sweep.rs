//! Grid search over fusion position x training epochs, reusing the
//! phase-1 streams across all cells, plus the sensitivity summary over
//! per-position best values.
//!
//! Cells for distinct fusion positions run as independent jobs on
//! deep-copied stream parameters, each with a joint network freshly
//! initialized from `(seed, position)`. Within a position the epoch marks
//! share one training trajectory: training pauses at each mark for a
//! validation measurement (which equals retraining to that epoch from
//! scratch, because the schedule is evaluated against the full run).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{evaluate, EvalOptions, EvalSample, ModelSynthesizer, Synthesizer};
use crate::model::{FusionRegime, JointNetwork, MultiStreamModel};
use crate::nn::{Discriminator, DiscriminatorSpec};
use crate::rng::derive_seed;
use crate::tensor::Element;
use crate::train::{train_joint_resume, JointTrainState, TrainConfig, TrainLog, TrainSample, FINETUNE_LR_RATIO};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Psnr,
    Ssim,
}

impl Default for SelectionMetric {
    fn default() -> Self {
        SelectionMetric::Psnr
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub fusion_positions: Vec<usize>,
    pub epoch_values: Vec<usize>,
    #[serde(default)]
    pub selection_metric: SelectionMetric,
}

impl SweepGrid {
    pub fn validate(&self, total_layers: usize) -> Result<()> {
        if self.fusion_positions.is_empty() || self.epoch_values.is_empty() {
            return Err(Error::Config("sweep grid must not be empty".into()));
        }
        for &i in &self.fusion_positions {
            if i < 1 || i >= total_layers {
                return Err(Error::Config(format!(
                    "sweep fusion position {i} out of range 1..={}",
                    total_layers - 1
                )));
            }
        }
        let mut prev = 0usize;
        for &e in &self.epoch_values {
            if e == 0 || e <= prev {
                return Err(Error::Config(
                    "sweep epoch values must be positive and ascending".into(),
                ));
            }
            prev = e;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepCell {
    pub fusion_i: usize,
    pub epochs: usize,
    pub regime: FusionRegime,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub grid: Vec<SweepCell>,
    pub selection_metric: SelectionMetric,
    /// `(fusion position, epochs)` attaining the grid maximum; ties break
    /// toward smaller epochs, then smaller position.
    pub selected: Option<(usize, usize)>,
    /// Hash of the shared phase-1 stream parameters every cell started from.
    pub stream_hash: String,
}

/// Per-position best values and the overall spread between the best and
/// worst positions.
#[derive(Clone, Debug, Serialize)]
pub struct PositionBest {
    pub fusion_i: usize,
    pub regime: FusionRegime,
    pub best_epochs: usize,
    pub best_value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpreadStats {
    pub per_position: Vec<PositionBest>,
    pub spread: f64,
}

pub struct SweepOutcome<E: Element> {
    pub report: SweepReport,
    /// Model snapshot at the selected cell, ready for checkpointing.
    pub best_model: Option<MultiStreamModel<E>>,
    pub best_state: Option<JointTrainState<E>>,
    pub logs: TrainLog,
}

fn cell_value(cell: &SweepCell, metric: SelectionMetric) -> Option<f64> {
    if cell.status != CellStatus::Ok {
        return None;
    }
    match metric {
        SelectionMetric::Psnr => cell.val_psnr,
        SelectionMetric::Ssim => cell.val_ssim,
    }
}

/// Selection rule over a filled grid: maximum of the selection metric,
/// ties toward smaller epochs then smaller position.
pub fn select_cell(cells: &[SweepCell], metric: SelectionMetric) -> Option<(usize, usize)> {
    let mut best: Option<(f64, usize, usize)> = None;
    for cell in cells {
        let Some(v) = cell_value(cell, metric) else {
            continue;
        };
        let candidate = (v, cell.epochs, cell.fusion_i);
        best = Some(match best {
            None => candidate,
            Some(cur) => {
                let (bv, be, bi) = cur;
                if v > bv || (v == bv && (candidate.1, candidate.2) < (be, bi)) {
                    candidate
                } else {
                    cur
                }
            }
        });
    }
    best.map(|(_, e, i)| (i, e))
}

struct PositionResult<E: Element> {
    cells: Vec<SweepCell>,
    snapshots: Vec<(usize, MultiStreamModel<E>, JointTrainState<E>)>,
    log: TrainLog,
}

#[allow(clippy::too_many_arguments)]
fn run_position<E: Element>(
    base: &MultiStreamModel<E>,
    train_data: &[TrainSample<E>],
    val_samples: &[EvalSample<E>],
    grid: &SweepGrid,
    cfg: &TrainConfig,
    seed: u64,
    position: usize,
    base_hash: &str,
) -> Result<PositionResult<E>> {
    // per-cell copy of the shared streams; the phase-1 parameters are
    // value-semantic, so a clone isolates this cell's fine-tuning
    let mut model = base.clone();
    debug_assert_eq!(model.stream_param_hash(), base_hash);
    model.fusion.i = position;
    model.joint = JointNetwork::build(
        &model.gen_spec,
        model.fusion.k,
        position,
        derive_seed(seed, &[3, position as u64]),
    )?;
    model.joint_disc = Discriminator::build(
        DiscriminatorSpec::new(model.fusion.k + 1, model.gen_spec.base_channels),
        derive_seed(seed, &[4, position as u64]),
    )?;

    let max_epochs = *grid.epoch_values.last().expect("validated non-empty");
    let cell_cfg = TrainConfig {
        epochs: max_epochs,
        ..*cfg
    };
    let regime = model.fusion.regime(&model.gen_spec);

    let mut state = JointTrainState::fresh(&cell_cfg);
    let mut cells = Vec::with_capacity(grid.epoch_values.len());
    let mut snapshots = Vec::new();
    let mut log = TrainLog::default();
    let mut failed: Option<String> = None;
    for &mark in &grid.epoch_values {
        if failed.is_none() {
            match train_joint_resume(&mut model, train_data, &cell_cfg, FINETUNE_LR_RATIO, &mut state, mark)
            {
                Ok(l) => log.extend(l),
                Err(e) => failed = Some(e.to_string()),
            }
        }
        if let Some(msg) = &failed {
            cells.push(SweepCell {
                fusion_i: position,
                epochs: mark,
                regime,
                val_psnr: None,
                val_ssim: None,
                status: CellStatus::Failed,
                error: Some(msg.clone()),
            });
            continue;
        }
        let synth = ModelSynthesizer::new(&model);
        let models: Vec<&dyn Synthesizer<E>> = vec![&synth];
        let report = evaluate(&models, val_samples, EvalOptions::default())?;
        let scores = &report.models[0];
        cells.push(SweepCell {
            fusion_i: position,
            epochs: mark,
            regime,
            val_psnr: Some(scores.psnr_mean),
            val_ssim: Some(scores.ssim_mean),
            status: CellStatus::Ok,
            error: None,
        });
        snapshots.push((mark, model.clone(), state.clone()));
    }
    Ok(PositionResult {
        cells,
        snapshots,
        log,
    })
}

/// Runs the full grid: for each fusion position, trains the joint phase
/// once up to the largest epoch value, measuring validation metrics at
/// every epoch mark; then selects the grid maximum.
pub fn run_sweep<E: Element>(
    streams: &MultiStreamModel<E>,
    train_data: &[TrainSample<E>],
    val_samples: &[EvalSample<E>],
    grid: &SweepGrid,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SweepOutcome<E>> {
    grid.validate(streams.gen_spec.total_layers())?;
    if val_samples.is_empty() {
        return Err(Error::Data("sweep needs a non-empty validation split".into()));
    }
    let base_hash = streams.stream_param_hash();

    let jobs: Vec<_> = grid
        .fusion_positions
        .iter()
        .map(|&position| {
            let base_hash = base_hash.clone();
            move || {
                run_position(
                    streams, train_data, val_samples, grid, cfg, seed, position, &base_hash,
                )
            }
        })
        .collect();
    let results = exec::run_jobs(jobs);

    let mut cells = Vec::new();
    let mut snapshots = Vec::new();
    let mut logs = TrainLog::default();
    for res in results {
        let r = res?;
        cells.extend(r.cells);
        snapshots.extend(r.snapshots.into_iter().map(|(mark, m, s)| ((m.fusion.i, mark), (m, s))));
        logs.extend(r.log);
    }

    let selected = select_cell(&cells, grid.selection_metric);
    let (best_model, best_state) = match selected {
        Some(key) => match snapshots.into_iter().find(|(k, _)| *k == key) {
            Some((_, (m, s))) => (Some(m), Some(s)),
            None => (None, None),
        },
        None => (None, None),
    };

    Ok(SweepOutcome {
        report: SweepReport {
            grid: cells,
            selection_metric: grid.selection_metric,
            selected,
            stream_hash: base_hash,
        },
        best_model,
        best_state,
        logs,
    })
}

/// Spread statistics over the completed report: best value per position
/// and the difference between the strongest and weakest positions.
pub fn sensitivity(report: &SweepReport) -> SpreadStats {
    let mut positions: Vec<usize> = report.grid.iter().map(|c| c.fusion_i).collect();
    positions.sort_unstable();
    positions.dedup();
    let mut per_position = Vec::new();
    for i in positions {
        let mut best: Option<(f64, usize, FusionRegime)> = None;
        for cell in report.grid.iter().filter(|c| c.fusion_i == i) {
            if let Some(v) = cell_value(cell, report.selection_metric) {
                match best {
                    Some((bv, be, _)) if v < bv || (v == bv && cell.epochs >= be) => {}
                    _ => best = Some((v, cell.epochs, cell.regime)),
                }
            }
        }
        if let Some((v, e, regime)) = best {
            per_position.push(PositionBest {
                fusion_i: i,
                regime,
                best_epochs: e,
                best_value: v,
            });
        }
    }
    let spread = match (
        per_position
            .iter()
            .map(|p| p.best_value)
            .fold(f64::NEG_INFINITY, f64::max),
        per_position
            .iter()
            .map(|p| p.best_value)
            .fold(f64::INFINITY, f64::min),
    ) {
        (max, min) if max.is_finite() && min.is_finite() => max - min,
        _ => 0.0,
    };
    SpreadStats {
        per_position,
        spread,
    }
}

impl SweepReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fusion_i,epochs,val_psnr,val_ssim,status\n");
        for c in &self.grid {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.fusion_i,
                c.epochs,
                c.val_psnr.map_or(String::new(), |v| v.to_string()),
                c.val_ssim.map_or(String::new(), |v| v.to_string()),
                match c.status {
                    CellStatus::Ok => "ok",
                    CellStatus::Failed => "failed",
                }
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let stats = sensitivity(self);
        let mut out = String::new();
        match self.selected {
            Some((i, e)) => out.push_str(&format!(
                "selected fusion position i*={i} at epochs*={e}\n"
            )),
            None => out.push_str("no cell completed successfully\n"),
        }
        out.push_str(&format!(
            "spread across positions: {:.4}\n",
            stats.spread
        ));
        for p in &stats.per_position {
            out.push_str(&format!(
                "  i={} ({:?}): best {:.4} at {} epochs\n",
                p.fusion_i, p.regime, p.best_value, p.best_epochs
            ));
        }
        out
    }
}
