//! Dataset directories, single runs, multi-run comparison and λ sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::config::{DataConfig, ExperimentConfig};
use crate::eval::{self, EvalError, EvalReport};
use crate::exec::Exec;
use crate::losses::SizeBounds;
use crate::synthdata::{
    self, apply_erosion, calibrate_erosion, gen_samples, Calibration, DataError,
    ReferenceMaskPool, SegSample, StructuringElement,
};
use crate::trainer::{self, checkpoint, Seeds, TrainError, TrainOutcome, Variant};

pub const MANIFEST: &str = "manifest.csv";
pub const CALIBRATION: &str = "calibration.txt";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("{path}: {detail}")]
    Manifest { path: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn create_dir(path: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SegSample>,
    pub test: Vec<SegSample>,
    pub calibration: Calibration,
    pub element: StructuringElement,
}

impl Dataset {
    /// Generates `train_count + test_count` samples and erodes every weak
    /// mask by the count calibrated on the training split.
    pub fn generate(data: &DataConfig, seed: u64, exec: Exec) -> Result<Self, DataError> {
        let n = data.train_count + data.test_count;
        let mut samples = gen_samples(&data.shape, 0..n, seed, exec)?;
        let calibration =
            calibrate_erosion(&samples[..data.train_count], data.annotation_ratio, data.element)?;
        apply_erosion(&mut samples, data.element, calibration.iterations)?;
        let test = samples.split_off(data.train_count);
        Ok(Self {
            train: samples,
            test,
            calibration,
            element: data.element,
        })
    }

    /// Writes every sample, `manifest.csv` (`id,split,annotation_ratio`) and
    /// the calibration summary.
    pub fn save(&self, dir: &Path) -> Result<(), ExperimentError> {
        create_dir(dir)?;
        let mut manifest = String::from("id,split,annotation_ratio\n");
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            for s in samples.iter() {
                synthdata::save_sample(s, dir)?;
                let _ = writeln!(
                    manifest,
                    "{},{split},{}",
                    s.id,
                    synthdata::annotation_ratio(&s.weak)
                );
            }
        }
        let cal = format!(
            "element={}\nerosion_iterations={}\nachieved_ratio={}\n",
            self.element, self.calibration.iterations, self.calibration.achieved_ratio
        );
        write_atomic(&dir.join(CALIBRATION), cal.as_bytes())?;
        write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self, ExperimentError> {
        let path = dir.join(MANIFEST);
        let bad = |detail: String| ExperimentError::Manifest {
            path: path.display().to_string(),
            detail,
        };
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut lines = text.lines();
        if lines.next() != Some("id,split,annotation_ratio") {
            return Err(bad("missing header `id,split,annotation_ratio`".into()));
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            let [id, split, _] = fields[..] else {
                return Err(bad(format!("line {}: expected 3 fields", i + 2)));
            };
            let id: usize = id
                .parse()
                .map_err(|_| bad(format!("line {}: bad id `{id}`", i + 2)))?;
            let sample = synthdata::load_sample(dir, id)?;
            match split {
                "train" => train.push(sample),
                "test" => test.push(sample),
                other => return Err(bad(format!("line {}: unknown split `{other}`", i + 2))),
            }
        }
        if train.is_empty() {
            return Err(bad("no training samples".into()));
        }
        let cal_path = dir.join(CALIBRATION);
        let cal = fs::read_to_string(&cal_path).map_err(io_err(&cal_path))?;
        let field = |key: &str| {
            cal.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .map(str::trim)
                .ok_or_else(|| ExperimentError::Manifest {
                    path: cal_path.display().to_string(),
                    detail: format!("missing {key}"),
                })
        };
        let parse_err = |key: &str| ExperimentError::Manifest {
            path: cal_path.display().to_string(),
            detail: format!("cannot parse {key}"),
        };
        Ok(Self {
            train,
            test,
            calibration: Calibration {
                iterations: field("erosion_iterations")?
                    .parse()
                    .map_err(|_| parse_err("erosion_iterations"))?,
                achieved_ratio: field("achieved_ratio")?
                    .parse()
                    .map_err(|_| parse_err("achieved_ratio"))?,
            },
            element: field("element")?.parse().map_err(|_| parse_err("element"))?,
        })
    }

    /// Size prior estimated from the training split's full masks.
    pub fn train_bounds(&self) -> Result<SizeBounds, EvalError> {
        eval::size_bounds(self.train.iter().map(|s| &s.full))
    }

    /// Test split, or the training split when no test samples exist.
    pub fn eval_set(&self) -> &[SegSample] {
        if self.test.is_empty() {
            &self.train
        } else {
            &self.test
        }
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub variant: Variant,
    pub seeds: Seeds,
    pub lambda_a: f64,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Trains one variant and scores it on the evaluation split.
pub fn run_variant(
    cfg: &ExperimentConfig,
    data: &Dataset,
    variant: Variant,
    seeds: Option<Seeds>,
    lambda_a: Option<f64>,
) -> Result<RunResult, ExperimentError> {
    let mut tc = cfg.train_config(variant, seeds);
    if let Some(la) = lambda_a {
        tc.lambda_a = la;
    }
    let bounds = data.train_bounds()?;
    if variant == Variant::Sccl {
        tc.bounds = Some(bounds);
    }
    let pool = variant
        .pool_mode()
        .map(|mode| ReferenceMaskPool::build(&data.train, mode, tc.seeds.pool_shuffle))
        .transpose()?;
    let outcome = trainer::train_variant(&tc, &data.train, data.eval_set(), pool.as_ref())?;
    let mut report = eval::evaluate(&outcome.model, data.eval_set(), Exec::Sequential)?;
    if variant == Variant::Sccl {
        report.bounds = Some(bounds);
    }
    Ok(RunResult {
        variant,
        seeds: tc.seeds,
        lambda_a: tc.lambda_a,
        outcome,
        report,
    })
}

/// Saves `metrics.csv` and `model.ckpt` for one run.
pub fn save_run(run: &RunResult, dir: &Path) -> Result<(), ExperimentError> {
    create_dir(dir)?;
    write_atomic(
        &dir.join("metrics.csv"),
        trainer::metrics_csv(&run.outcome.metrics).as_bytes(),
    )?;
    write_atomic(
        &dir.join("model.ckpt"),
        &checkpoint::encode(run.outcome.model.params()),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub variant: Variant,
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    /// Sample standard deviation over seeds; zero for a single seed.
    pub std_dice: f64,
    pub mean_expansion: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Every `(variant, seed)` pair as an independent run; runs are distributed
/// by `exec`, results come back in `variants × seeds` order.
pub fn compare(
    cfg: &ExperimentConfig,
    data: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    exec: Exec,
) -> Result<(Vec<RunResult>, Vec<CompareRow>), ExperimentError> {
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = exec
        .map(&jobs, |&(v, s)| {
            run_variant(cfg, data, v, Some(Seeds::from_run_seed(s)), None)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let rows = variants
        .iter()
        .map(|&v| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == v).collect();
            let dice: Vec<f64> = mine.iter().map(|r| r.report.mean_dice).collect();
            let exp: Vec<f64> = mine.iter().map(|r| r.report.mean_expansion).collect();
            let (mean_dice, std_dice) = mean_std(&dice);
            CompareRow {
                variant: v,
                mean_dice,
                std_dice,
                mean_expansion: mean_std(&exp).0,
                dice,
            }
        })
        .collect();
    Ok((runs, rows))
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("variant,mean_dice,std_dice,mean_expansion\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.variant, r.mean_dice, r.std_dice, r.mean_expansion
        );
    }
    out
}

pub fn run_dir_name(variant: Variant, seed: u64) -> String {
    format!("{variant}_seed{seed}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda_a: f64,
    pub mean_dice: f64,
    /// Mean predicted soft foreground size on the evaluation split.
    pub mean_soft_size: f64,
}

/// Trains `variant` once per `(λ_a, seed)`; without `seeds` the config's
/// own seeds are used. Rows are seed-averaged, in `lambdas` order.
pub fn sweep(
    cfg: &ExperimentConfig,
    data: &Dataset,
    variant: Variant,
    lambdas: &[f64],
    seeds: Option<&[u64]>,
    exec: Exec,
) -> Result<(Vec<RunResult>, Vec<SweepRow>), ExperimentError> {
    let seed_list: Vec<Option<Seeds>> = match seeds {
        Some(s) => s.iter().map(|&s| Some(Seeds::from_run_seed(s))).collect(),
        None => vec![None],
    };
    let jobs: Vec<(usize, Option<Seeds>)> = (0..lambdas.len())
        .flat_map(|i| seed_list.iter().map(move |&s| (i, s)))
        .collect();
    let runs = exec
        .map(&jobs, |&(i, s)| run_variant(cfg, data, variant, s, Some(lambdas[i])))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let per = seed_list.len();
    let rows = lambdas
        .iter()
        .enumerate()
        .map(|(i, &lambda_a)| {
            let chunk = &runs[i * per..(i + 1) * per];
            let dice: Vec<f64> = chunk.iter().map(|r| r.report.mean_dice).collect();
            let soft: Vec<f64> = chunk.iter().map(|r| r.report.mean_soft_size).collect();
            SweepRow {
                lambda_a,
                mean_dice: mean_std(&dice).0,
                mean_soft_size: mean_std(&soft).0,
            }
        })
        .collect();
    Ok((runs, rows))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda_a,mean_dice,mean_soft_size\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.lambda_a, r.mean_dice, r.mean_soft_size);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.shape.side = 16;
        cfg.data.shape.radius = (3.0, 5.0);
        cfg.data.shape.halo_width = 1.0;
        cfg.data.train_count = 4;
        cfg.data.test_count = 2;
        cfg.data.annotation_ratio = 0.05;
        cfg.net.unet_depth = 2;
        cfg.net.base_channels = 4;
        cfg.net.disc_layers = 2;
        cfg.train.epochs = 2;
        cfg
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let cfg = tiny();
        let ds = Dataset::generate(&cfg.data, 3, Exec::Sequential).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (4, 2));
        assert!(ds.calibration.achieved_ratio <= 0.05);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.calibration, ds.calibration);
        assert_eq!(back.train.len(), 4);
        for (a, b) in back.train.iter().zip(&ds.train) {
            assert_eq!((a.id, &a.full, &a.weak), (b.id, &b.full, &b.weak));
        }
        assert!(!dir.path().join("manifest.csv.partial").exists());
    }

    #[test]
    fn compare_is_scheduling_independent() {
        let cfg = tiny();
        let ds = Dataset::generate(&cfg.data, 3, Exec::Sequential).unwrap();
        let variants = [Variant::PartialCe, Variant::AcclPaired];
        let (_, a) = compare(&cfg, &ds, &variants, &[0, 1], Exec::Sequential).unwrap();
        let (_, b) = compare(&cfg, &ds, &variants, &[0, 1], Exec::Parallel).unwrap();
        assert_eq!(compare_csv(&a), compare_csv(&b));
        assert_eq!(a[1].dice.len(), 2);
    }

    #[test]
    fn sweep_rows_follow_lambda_order() {
        let cfg = tiny();
        let ds = Dataset::generate(&cfg.data, 3, Exec::Sequential).unwrap();
        let (runs, rows) = sweep(&cfg, &ds, Variant::AcclPaired, &[0.0, 0.5], None, Exec::default())
            .unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(rows.iter().map(|r| r.lambda_a).collect::<Vec<_>>(), vec![0.0, 0.5]);
        assert!(sweep_csv(&rows).starts_with("lambda_a,mean_dice,mean_soft_size\n0,"));
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }
}
