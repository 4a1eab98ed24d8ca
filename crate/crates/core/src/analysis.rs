//! Experiment harness: training runs with per-epoch metrics, multi-seed
//! comparisons of routing variants, the coupling-initialization study and
//! per-type reconstruction grids.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::capsule_ops::{CapsError, CapsLayerSpec, PredictionTensor};
use crate::data_io::{one_hot, write_atomic, Dataset, Split};
use crate::network::{evaluate, seeds, ArchConfig, Evaluation, Model, NetError, TrainConfig, Trainer};
use crate::routing::{rate_of_change_report, route, RoutingConfig};
use crate::tensor::{Tape, Tensor};

/// Images used for the per-epoch coupling-change probe.
pub const PROBE_IMAGES: usize = 16;

pub const METRICS_HEADER: &str = "run_id,epoch,split,accuracy,loss,lr,config,wall_seconds,c0,mean_dc";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Caps(#[from] CapsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_text(path: &Path, text: &str) -> Result<(), AnalysisError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| AnalysisError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    write_atomic(path, text.as_bytes()).map_err(|source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One row of a metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub epoch: usize,
    pub split: Split,
    pub accuracy: f64,
    pub loss: f64,
    pub learning_rate: f64,
    /// Curve label: `b`, `bc`, `o` or `oc`.
    pub config: String,
    pub wall_seconds: f64,
    /// Coupling value at zero logits.
    pub c0: f64,
    /// Mean `|c_r - c_{r-1}|` on the probe images; `None` with one iteration.
    pub mean_dc: Option<f64>,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.epoch,
            self.split,
            format_f64(self.accuracy),
            format_f64(self.loss),
            format_f64(self.learning_rate),
            self.config,
            format_f64(self.wall_seconds),
            format_f64(self.c0),
            self.mean_dc.map(format_f64).unwrap_or_default(),
        )
    }
}

/// Header plus one LF-terminated line per record.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Wall-clock time is the only nondeterministic column; tests and
/// reproducibility checks can zero it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Clock {
    #[default]
    Wall,
    Frozen,
}

#[derive(Clone, Debug)]
pub struct RunSpec<'a> {
    pub run_id: String,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub arch: ArchConfig,
    pub routing: RoutingConfig,
    pub train_config: TrainConfig,
    pub clock: Clock,
}

pub struct RunResult {
    pub run_id: String,
    pub routing: RoutingConfig,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    /// Final test evaluation; `None` if the run diverged.
    pub final_test: Option<Evaluation>,
    pub diverged: Option<String>,
    pub model: Model,
}

/// Mean coupling change between the last two routing iterations on the
/// first few images of `data`.
pub fn probe_coupling_change(model: &Model, data: &Dataset) -> Result<Option<f64>, AnalysisError> {
    let take = data.len().min(PROBE_IMAGES);
    let probe = data.take(take);
    let tape = Tape::new();
    let params = model.bind(&tape, false);
    let out = model.forward(&params, tape.constant(probe.images().clone()), true)?;
    Ok(out.trace.and_then(|t| t.final_coupling_change()))
}

/// Trains one model, recording train and test metrics after every epoch.
/// A non-finite loss ends the run and is reported in `diverged`.
pub fn train_run(spec: &RunSpec) -> Result<RunResult, AnalysisError> {
    let caps = spec.arch.caps_spec()?;
    let c0 = spec.routing.initial_coupling(&caps);
    let model = Model::new(spec.arch, spec.routing, seeds::init(spec.train_config.seed))?;
    let mut trainer = Trainer::new(model, spec.train_config);
    let started = Instant::now();
    let elapsed = || match spec.clock {
        Clock::Wall => started.elapsed().as_secs_f64(),
        Clock::Frozen => 0.0,
    };
    let mut records = Vec::new();
    let mut final_test = None;
    let mut diverged = None;
    for epoch in 0..spec.train_config.epochs {
        let lr = spec.train_config.lr_at(epoch);
        let stats = match trainer.train_epoch(spec.train, epoch) {
            Ok(stats) => stats,
            Err(NetError::NonFinite { tensor, step }) => {
                diverged = Some(format!("non-finite {tensor} at step {step} (epoch {epoch})"));
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let test = evaluate(&trainer.model, spec.test, spec.train_config.batch_size)?;
        let mean_dc = probe_coupling_change(&trainer.model, spec.test)?;
        let wall = elapsed();
        let record = |split, accuracy, loss| MetricsRecord {
            run_id: spec.run_id.clone(),
            epoch,
            split,
            accuracy,
            loss,
            learning_rate: lr,
            config: spec.routing.label().to_string(),
            wall_seconds: wall,
            c0,
            mean_dc,
        };
        records.push(record(Split::Train, stats.accuracy, stats.loss));
        records.push(record(Split::Test, test.accuracy, test.mean_loss));
        final_test = Some(test);
    }
    if diverged.is_some() {
        final_test = None;
    }
    Ok(RunResult {
        run_id: spec.run_id.clone(),
        routing: spec.routing,
        seed: spec.train_config.seed,
        records,
        final_test,
        diverged,
        model: trainer.model,
    })
}

/// Seed-averaged final test accuracy of one routing variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub routing: RoutingConfig,
    /// Final test accuracy per seed, `None` where the run diverged.
    pub per_seed: Vec<Option<f64>>,
    /// Mean over non-diverged seeds.
    pub mean: Option<f64>,
}

impl ComparisonRow {
    pub fn diverged_seeds(&self, seeds: &[u64]) -> Vec<u64> {
        seeds
            .iter()
            .zip(&self.per_seed)
            .filter(|(_, a)| a.is_none())
            .map(|(s, _)| *s)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
    pub records: Vec<MetricsRecord>,
    /// Per-run metrics files, when written.
    pub curve_paths: Vec<PathBuf>,
}

impl ComparisonReport {
    pub fn row(&self, routing: &RoutingConfig) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.routing == *routing)
    }

    /// Seeds on which `a` beat `b` and seeds where both finished.
    pub fn seed_wins(&self, a: &RoutingConfig, b: &RoutingConfig) -> Option<(usize, usize)> {
        let (ra, rb) = (self.row(a)?, self.row(b)?);
        let pairs: Vec<(f64, f64)> = ra
            .per_seed
            .iter()
            .zip(&rb.per_seed)
            .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
            .collect();
        Some((pairs.iter().filter(|(x, y)| x > y).count(), pairs.len()))
    }

    /// One row per model variant; per-seed accuracy columns, their mean and
    /// the seeds excluded for divergence.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,config");
        for s in &self.seeds {
            let _ = write!(out, ",{}_seed{s}", self.dataset);
        }
        let _ = writeln!(out, ",{}_mean,diverged_seeds", self.dataset);
        for row in &self.rows {
            let _ = write!(out, "{},{}", row.routing.model_name(), row.routing.label());
            for acc in &row.per_seed {
                let _ = write!(out, ",{}", acc.map(format_f64).unwrap_or_default());
            }
            let diverged: Vec<String> = row.diverged_seeds(&self.seeds).iter().map(u64::to_string).collect();
            let _ = writeln!(out, ",{},{}", row.mean.map(format_f64).unwrap_or_default(), diverged.join(";"));
        }
        out
    }
}

pub struct ComparisonSpec<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub arch: ArchConfig,
    pub configs: Vec<RoutingConfig>,
    pub train_config: TrainConfig,
    pub seeds: Vec<u64>,
    pub clock: Clock,
    /// Directory for per-run metrics CSVs.
    pub curves_dir: Option<PathBuf>,
}

/// Trains every (config, seed) pair on the same data and budget and averages
/// final test accuracy over seeds. Diverged runs are excluded from means.
pub fn run_comparison(spec: &ComparisonSpec) -> Result<ComparisonReport, AnalysisError> {
    if spec.seeds.is_empty() || spec.configs.is_empty() {
        return Err(AnalysisError::Invalid("a comparison needs at least one config and one seed".into()));
    }
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut curve_paths = Vec::new();
    for routing in &spec.configs {
        let mut per_seed = Vec::new();
        for &seed in &spec.seeds {
            let run_id = format!("{}-seed{seed}", routing.label());
            let result = train_run(&RunSpec {
                run_id: run_id.clone(),
                train: spec.train,
                test: spec.test,
                arch: spec.arch,
                routing: *routing,
                train_config: TrainConfig {
                    seed,
                    ..spec.train_config
                },
                clock: spec.clock,
            })?;
            if let Some(dir) = &spec.curves_dir {
                let path = dir.join(format!("{run_id}.csv"));
                write_text(&path, &metrics_csv(&result.records))?;
                curve_paths.push(path);
            }
            per_seed.push(result.final_test.map(|e| e.accuracy));
            records.extend(result.records);
        }
        let finished: Vec<f64> = per_seed.iter().flatten().copied().collect();
        let mean = (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / finished.len() as f64);
        rows.push(ComparisonRow {
            routing: *routing,
            per_seed,
            mean,
        });
    }
    Ok(ComparisonReport {
        dataset: spec.train.name.clone(),
        seeds: spec.seeds.clone(),
        rows,
        records,
        curve_paths,
    })
}

/// Coupling dynamics of one config on one random prediction tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityRow {
    pub routing: RoutingConfig,
    pub trial: usize,
    /// Iteration whose couplings are compared with the previous one.
    pub iteration: usize,
    pub c0: f64,
    pub mean_abs_change: f64,
    pub max_abs_change: f64,
    pub mean_relative_change: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityReport {
    pub spec: CapsLayerSpec,
    pub iterations: usize,
    pub num_trials: usize,
    pub rows: Vec<SensitivityRow>,
}

pub const SENSITIVITY_HEADER: &str = "config,model,trial,iteration,c0,mean_abs_dc,max_abs_dc,mean_rel_dc";

impl SensitivityReport {
    /// Mean of the per-iteration mean `|dc|` for one config and trial.
    pub fn trial_mean_change(&self, routing: &RoutingConfig, trial: usize) -> Option<f64> {
        let values: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.routing == *routing && r.trial == trial)
            .map(|r| r.mean_abs_change)
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    /// Fraction of trials in which `a` changes its couplings more than `b`.
    pub fn fraction_faster(&self, a: &RoutingConfig, b: &RoutingConfig) -> Option<f64> {
        let mut wins = 0;
        for trial in 0..self.num_trials {
            if self.trial_mean_change(a, trial)? > self.trial_mean_change(b, trial)? {
                wins += 1;
            }
        }
        Some(wins as f64 / self.num_trials as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{SENSITIVITY_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.routing.label(),
                r.routing.model_name(),
                r.trial,
                r.iteration,
                format_f64(r.c0),
                format_f64(r.mean_abs_change),
                format_f64(r.max_abs_change),
                format_f64(r.mean_relative_change),
            );
        }
        out
    }

    /// Per config: c0, then mean |dc| averaged over trials for each iteration.
    pub fn summary_csv(&self, configs: &[RoutingConfig]) -> String {
        let mut out = String::from("config,model,c0");
        for it in 1..self.iterations {
            let _ = write!(out, ",mean_abs_dc_iter{it}");
        }
        out.push('\n');
        for routing in configs {
            let rows: Vec<&SensitivityRow> = self.rows.iter().filter(|r| r.routing == *routing).collect();
            let Some(first) = rows.first() else { continue };
            let _ = write!(out, "{},{},{}", routing.label(), routing.model_name(), format_f64(first.c0));
            for it in 1..self.iterations {
                let at: Vec<f64> = rows.iter().filter(|r| r.iteration == it).map(|r| r.mean_abs_change).collect();
                let _ = write!(out, ",{}", format_f64(at.iter().sum::<f64>() / at.len() as f64));
            }
            out.push('\n');
        }
        out
    }
}

pub const MIN_SENSITIVITY_TRIALS: usize = 10;

/// Routes the same unit-scale Gaussian predictions under each config with
/// trace capture and records how much the couplings move per iteration.
pub fn init_sensitivity_study(
    spec: &CapsLayerSpec,
    configs: &[RoutingConfig],
    num_trials: usize,
    seed: u64,
) -> Result<SensitivityReport, AnalysisError> {
    if num_trials < MIN_SENSITIVITY_TRIALS {
        return Err(AnalysisError::Invalid(format!(
            "need at least {MIN_SENSITIVITY_TRIALS} trials, got {num_trials}"
        )));
    }
    let iterations = configs.first().map(|c| c.iterations).unwrap_or(0);
    if configs.is_empty() || configs.iter().any(|c| c.iterations != iterations) || iterations < 2 {
        return Err(AnalysisError::Invalid(
            "configs must share an iteration count of at least 2".into(),
        ));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::data(seed));
    let mut rows = Vec::new();
    for trial in 0..num_trials {
        let u_hat = Tensor::randn(&[1, spec.num_upper, spec.num_lower, spec.dim_upper], 1.0, &mut rng);
        rows.extend(sensitivity_rows(&u_hat, spec, configs, trial)?);
    }
    Ok(SensitivityReport {
        spec: *spec,
        iterations,
        num_trials,
        rows,
    })
}

/// Coupling-change rows for one upper-major prediction tensor
/// `[1, num_upper, num_lower, dim_upper]`.
pub fn sensitivity_rows(
    u_hat: &Tensor,
    spec: &CapsLayerSpec,
    configs: &[RoutingConfig],
    trial: usize,
) -> Result<Vec<SensitivityRow>, AnalysisError> {
    let mut rows = Vec::new();
    for routing in configs {
        let tape = Tape::new();
        let pred = PredictionTensor::from_upper_major(tape.constant(u_hat.clone()));
        let trace = route(&pred, spec, routing, true)?.trace.expect("trace requested");
        for row in rate_of_change_report(&trace)? {
            rows.push(SensitivityRow {
                routing: *routing,
                trial,
                iteration: row.iteration,
                c0: row.initial_coupling,
                mean_abs_change: row.mean_abs_change,
                max_abs_change: row.max_abs_change,
                mean_relative_change: row.mean_relative_change,
            });
        }
    }
    Ok(rows)
}

/// Combined-capsule reconstruction followed by one reconstruction per type.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionGrid {
    pub label: usize,
    /// `[num_classes, digit_dim]` capsules `v_j` that produced panel 0.
    pub combined: Tensor,
    /// `[types, num_classes, digit_dim]` capsules `v_jm` behind panels 1..
    pub per_type: Tensor,
    /// `1 + types` images of `height * width` pixels in `[0, 1]`; channels
    /// are stacked vertically.
    pub panels: Vec<Vec<f64>>,
    pub height: usize,
    pub width: usize,
}

/// Panels per row in the written raster.
pub const GRID_COLUMNS: usize = 11;
const GRID_GAP: usize = 2;

impl ReconstructionGrid {
    /// Binary PGM (P5) with the panels laid out row-major, separated by
    /// black gaps.
    pub fn to_pgm(&self) -> Vec<u8> {
        let cols = GRID_COLUMNS.min(self.panels.len());
        let rows = self.panels.len().div_ceil(cols);
        let width = cols * self.width + (cols - 1) * GRID_GAP;
        let height = rows * self.height + (rows - 1) * GRID_GAP;
        let mut pixels = vec![0u8; width * height];
        for (k, panel) in self.panels.iter().enumerate() {
            let (top, left) = ((k / cols) * (self.height + GRID_GAP), (k % cols) * (self.width + GRID_GAP));
            for y in 0..self.height {
                for x in 0..self.width {
                    let p = panel[y * self.width + x];
                    pixels[(top + y) * width + left + x] = (p * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
        out.extend(pixels);
        out
    }
}

/// Decodes the combined digit capsules and every per-type capsule set of one
/// image through the shared decoder, masked to `label` (the predicted class
/// when `None`).
pub fn reconstruction_grid(model: &Model, image: &Tensor, label: Option<usize>) -> Result<ReconstructionGrid, AnalysisError> {
    if !model.routing.is_grouped() {
        return Err(NetError::NotGrouped("per-type reconstruction").into());
    }
    let (c, h, w) = model.arch.input;
    let image = image.clone().reshaped(&[1, c, h, w]).map_err(NetError::from)?;
    let inference = model.infer(&image)?;
    let label = label.unwrap_or_else(|| inference.predictions()[0]);
    let classes = model.arch.num_classes;
    if label >= classes {
        return Err(AnalysisError::Invalid(format!("label {label} outside 0..{classes}")));
    }
    let per_type = inference.per_type.expect("grouped routing exposes per-type capsules");
    let types = per_type.shape()[1];
    let dim = model.arch.digit_dim;
    let per_type = per_type.reshaped(&[types, classes, dim]).map_err(NetError::from)?;
    let combined = inference.digit_caps.reshaped(&[classes, dim]).map_err(NetError::from)?;

    // decode the combined capsules and every type in one batch
    let mut batch = combined.data().to_vec();
    batch.extend_from_slice(per_type.data());
    let batch = Tensor::new(&[1 + types, classes, dim], batch).map_err(NetError::from)?;
    let mask = one_hot(&vec![label; 1 + types], classes);
    let decoded = model.reconstruct(&batch, &mask)?;
    let panels = decoded.data().chunks(c * h * w).map(<[f64]>::to_vec).collect();
    Ok(ReconstructionGrid {
        label,
        combined,
        per_type,
        panels,
        height: h * c,
        width: w,
    })
}
