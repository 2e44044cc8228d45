//! Experiment matrices: train a grid of (preset, position-encoding, seed)
//! cells over one corpus and budget, and tabulate final validation
//! perplexity, plateau length, and wall clock per cell.
//!
//! Every cell shares the base configuration's corpus, budget, and optimizer
//! settings, so rows differ only in the dimensions under study. Cells are
//! isolated: one diverging run marks its own row failed and the rest of the
//! table still completes.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::data::CorpusShard;
use crate::error::{Error, Result};
use crate::model::{Preset, PositionEncodingKind};
use crate::objectives::ObjectiveKind;
use crate::scalar::Scalar;
use crate::trainer::config::TrainConfig;
use crate::trainer::stages::{detect_stages, StageParams};
use crate::trainer::train::{evaluate_ppl, train_on_shards, RunOutput};
use std::path::Path;

/// One experiment cell: the dimensions that vary across the table.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixCell {
    /// Row label; also names the cell's artifact directory.
    pub label: String,
    pub preset: Preset,
    pub pe_kind: PositionEncodingKind,
    pub seed: u64,
    /// Overrides the base objective when set (decoder cells typically run
    /// causal LM while the rest of the table runs masked LM).
    pub objective: Option<ObjectiveKind>,
    /// Overrides the base peak learning rate when set.
    pub peak_lr: Option<f64>,
}

impl MatrixCell {
    pub fn new(preset: Preset, pe_kind: PositionEncodingKind, seed: u64) -> Self {
        MatrixCell {
            label: format!("{preset}/{pe_kind}/s{seed}"),
            preset,
            pe_kind,
            seed,
            objective: None,
            peak_lr: None,
        }
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = label.to_string();
        self
    }

    pub fn with_objective(mut self, objective: ObjectiveKind) -> Self {
        self.objective = Some(objective);
        self
    }

    pub fn with_peak_lr(mut self, peak_lr: f64) -> Self {
        self.peak_lr = Some(peak_lr);
        self
    }

    /// The cell's full training configuration on top of `base`.
    pub fn config(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        cfg.model.pe_kind = self.pe_kind;
        cfg.seed = self.seed;
        if let Some(objective) = self.objective {
            cfg.objective = objective;
        }
        if let Some(peak_lr) = self.peak_lr {
            cfg.peak_lr = peak_lr;
        }
        let cfg = cfg.with_preset(self.preset)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Compact text form `preset,pe,seed[,objective]`, e.g.
/// `decbert_diff,learnable,3` or `gpt_decoder,absent,1,clm`.
impl FromStr for MatrixCell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let fields: Vec<&str> = s.split(',').map(str::trim).collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Config(format!(
                "cell {s:?} must be preset,pe,seed[,objective]"
            )));
        }
        let preset: Preset = fields[0].parse()?;
        let pe: PositionEncodingKind = fields[1].parse()?;
        let seed: u64 = fields[2]
            .parse()
            .map_err(|_| Error::Config(format!("cell seed {:?} is not a u64", fields[2])))?;
        let mut cell = MatrixCell::new(preset, pe, seed);
        if let Some(o) = fields.get(3) {
            cell = cell.with_objective(o.parse()?);
        }
        Ok(cell)
    }
}

/// Row-major (preset × pe) grid of cells at one seed, in the given order.
pub fn preset_pe_grid(
    presets: &[Preset],
    pes: &[PositionEncodingKind],
    seed: u64,
) -> Vec<MatrixCell> {
    presets
        .iter()
        .flat_map(|&p| pes.iter().map(move |&pe| MatrixCell::new(p, pe, seed)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

impl CellStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, CellStatus::Ok)
    }
}

impl fmt::Display for CellStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellStatus::Ok => "ok",
            CellStatus::Failed(_) => "failed",
        })
    }
}

/// One finished (or failed) cell. Metric fields are `None` for failed cells
/// and for metrics the run could not produce (no validation shard; log too
/// short for stage detection).
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub cell: String,
    pub preset: Preset,
    pub pe_kind: PositionEncodingKind,
    pub seed: u64,
    pub status: CellStatus,
    pub final_valid_ppl: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub plateau_length: Option<u64>,
    pub wall_clock_s: f64,
}

pub const MATRIX_CSV_HEADER: &str =
    "cell,preset,pe,seed,status,final_valid_ppl,final_train_loss,plateau_length,wall_clock_s";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatrixTable {
    pub rows: Vec<MatrixRow>,
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

impl MatrixTable {
    pub fn row(&self, label: &str) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.cell == label)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(MATRIX_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.cell,
                r.preset,
                r.pe_kind,
                r.seed,
                r.status,
                opt(&r.final_valid_ppl),
                opt(&r.final_train_loss),
                opt(&r.plateau_length),
                r.wall_clock_s,
            ));
        }
        out
    }
}

fn cell_metrics<T: Scalar>(
    cfg: &TrainConfig,
    valid_shard: Option<&CorpusShard>,
    out: &RunOutput<T>,
) -> Result<(Option<f64>, Option<f64>, Option<u64>)> {
    let final_train_loss = out.log.entries().last().map(|e| e.train_loss);
    let final_valid_ppl = match valid_shard {
        Some(shard) => {
            let logged = out
                .log
                .eval_entries()
                .last()
                .filter(|e| e.step + 1 == cfg.total_steps)
                .map(|e| e.valid_ppl);
            Some(match logged {
                Some(ppl) => ppl,
                None => evaluate_ppl(&out.params, cfg, shard)?.1,
            })
        }
        None => None,
    };
    let plateau_length = detect_stages(out.log.entries(), &StageParams::default())
        .ok()
        .map(|r| r.plateau_length);
    Ok((final_valid_ppl, final_train_loss, plateau_length))
}

/// Trains every cell over the shared shards and returns one row per cell, in
/// input order. A failing cell yields a `Failed` row; the rest of the table
/// still runs. With `out_dir` set, each cell writes its checkpoints and logs
/// under `out_dir/<label>` and the table CSV lands in `out_dir/matrix.csv`.
pub fn run_experiment_matrix_on_shards<T: Scalar>(
    base: &TrainConfig,
    cells: &[MatrixCell],
    train_shard: &CorpusShard,
    valid_shard: Option<&CorpusShard>,
    out_dir: Option<&Path>,
) -> Result<MatrixTable> {
    for (i, c) in cells.iter().enumerate() {
        if cells[..i].iter().any(|o| o.label == c.label) {
            return Err(Error::Config(format!("duplicate cell label {:?}", c.label)));
        }
    }
    let mut table = MatrixTable::default();
    for cell in cells {
        let clock = Instant::now();
        let outcome = cell.config(base).and_then(|cfg| {
            let cell_dir = out_dir.map(|d| d.join(cell.label.replace('/', "_")));
            let out = train_on_shards::<T>(&cfg, train_shard, valid_shard, cell_dir.as_deref())?;
            cell_metrics(&cfg, valid_shard, &out)
        });
        let (status, metrics) = match outcome {
            Ok(m) => (CellStatus::Ok, m),
            Err(e) => (CellStatus::Failed(e.to_string()), (None, None, None)),
        };
        table.rows.push(MatrixRow {
            cell: cell.label.clone(),
            preset: cell.preset,
            pe_kind: cell.pe_kind,
            seed: cell.seed,
            status,
            final_valid_ppl: metrics.0,
            final_train_loss: metrics.1,
            plateau_length: metrics.2,
            wall_clock_s: clock.elapsed().as_secs_f64(),
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("matrix.csv");
        std::fs::write(&path, table.csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(table)
}

/// [`run_experiment_matrix_on_shards`] with the shared corpus loaded from
/// the base configuration's shard paths.
pub fn run_experiment_matrix<T: Scalar>(
    base: &TrainConfig,
    cells: &[MatrixCell],
    out_dir: Option<&Path>,
) -> Result<MatrixTable> {
    let train_shard = CorpusShard::read_from_path(&base.train_shard)?;
    let valid_shard = match base.valid_shard.as_str() {
        "" => None,
        p => Some(CorpusShard::read_from_path(p)?),
    };
    run_experiment_matrix_on_shards::<T>(base, cells, &train_shard, valid_shard.as_ref(), out_dir)
}
