//! End-to-end runs: data generation, two-step training, evaluation and
//! parameter sweeps.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{choose_known_ids, generate_blobs, split_open_set, Dataset, OpenSplit};
use crate::error::{Error, Result};
use crate::metrics::{auroc, closed_accuracy, macro_f1, oscr_curve, area_under, CurvePoint};
use crate::model::train::TrainState;
use crate::model::{classify, softmax, ModelParams};
use crate::openset::{argmax, fit_thresholds, predict_open, ThresholdTable};
use crate::UNKNOWN;

/// Row counts and class ids of a generated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub dim: usize,
    pub known_ids: Vec<usize>,
    pub unknown_ids: Vec<usize>,
    pub train_rows: usize,
    pub test_known_rows: usize,
    pub test_unknown_rows: usize,
}

pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_KNOWN_CSV: &str = "test_known.csv";
pub const TEST_UNKNOWN_CSV: &str = "test_unknown.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

/// Blob dataset and open-set split for `cfg`.
pub fn build_split(cfg: &TrainConfig) -> Result<OpenSplit> {
    cfg.validate()?;
    let ds = generate_blobs(cfg.classes, cfg.per_class, cfg.dim, cfg.spread, cfg.seed)?;
    let known = choose_known_ids(cfg.classes, cfg.known_classes, cfg.seed)?;
    split_open_set(&ds, &known, cfg.test_fraction, cfg.seed)
}

/// Writes the three split CSVs and `manifest.json` into `dir`.
pub fn write_split(split: &OpenSplit, seed: u64, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    split.train.write_csv(&dir.join(TRAIN_CSV))?;
    split.test_known.write_csv(&dir.join(TEST_KNOWN_CSV))?;
    split.test_unknown.write_csv(&dir.join(TEST_UNKNOWN_CSV))?;
    let manifest = Manifest {
        seed,
        dim: split.train.dim(),
        known_ids: split.known_ids.clone(),
        unknown_ids: split.unknown_ids.clone(),
        train_rows: split.train.len(),
        test_known_rows: split.test_known.len(),
        test_unknown_rows: split.test_unknown.len(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(dir.join(MANIFEST_JSON), text + "\n")?;
    Ok(manifest)
}

/// Reads a split written by [`write_split`].
pub fn read_split(dir: &Path) -> Result<OpenSplit> {
    let path = dir.join(MANIFEST_JSON);
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let k = manifest.known_ids.len();
    let relabel = |ds: Dataset| Dataset::new(ds.features().clone(), ds.labels().to_vec(), k);
    let train = relabel(Dataset::read_csv(&dir.join(TRAIN_CSV))?)?;
    let test_known = relabel(Dataset::read_csv(&dir.join(TEST_KNOWN_CSV))?)?;
    let test_unknown = Dataset::read_csv(&dir.join(TEST_UNKNOWN_CSV))?;
    if test_unknown.class_count() != 0 {
        return Err(Error::Format {
            path: dir.join(TEST_UNKNOWN_CSV).display().to_string(),
            detail: "unknown rows must all carry label 0".into(),
        });
    }
    let counts = [train.len(), test_known.len(), test_unknown.len()];
    if counts != [manifest.train_rows, manifest.test_known_rows, manifest.test_unknown_rows] {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("row counts {counts:?} disagree with the manifest"),
        });
    }
    Ok(OpenSplit {
        train,
        test_known,
        test_unknown,
        known_ids: manifest.known_ids,
        unknown_ids: manifest.unknown_ids,
    })
}

/// Both training steps from a fresh initialisation.
pub fn train(split: &OpenSplit, cfg: &TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(cfg)?;
    state.run(split, cfg)?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub oscr: f64,
    pub macro_f1: f64,
    pub closed_accuracy: f64,
    pub thresholds: ThresholdTable,
    pub config: TrainConfig,
    pub seconds: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// A report plus the OSCR curve behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub curve: Vec<CurvePoint>,
}

/// Classifier posteriors `softmax(f(E(x)))`.
pub fn posteriors(params: &ModelParams, x: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(softmax(&classify(params, x)?))
}

/// Test-set metrics of `params` with thresholds fitted on the training rows.
pub fn evaluate(params: &ModelParams, split: &OpenSplit, cfg: &TrainConfig) -> Result<Evaluation> {
    let start = Instant::now();
    let k = split.known_classes();
    if params.classes() != k {
        return Err(Error::invalid(format!(
            "model has {} classes, split has {k}",
            params.classes()
        )));
    }
    let train_post = posteriors(params, split.train.features())?;
    let thresholds = fit_thresholds(
        &train_post,
        split.train.labels(),
        cfg.percentile,
        cfg.threshold_mode,
        cfg.threshold_rows,
    )?;
    let known_post = posteriors(params, split.test_known.features())?;
    let unknown_post = posteriors(params, split.test_unknown.features())?;
    let max_conf = |p: &Array2<f64>| p.axis_iter(Axis(0)).map(|r| argmax(r).1).collect::<Vec<_>>();

    let auroc = auroc(&max_conf(&known_post), &max_conf(&unknown_post))?;
    let curve = oscr_curve(&known_post, split.test_known.labels(), &unknown_post)?;
    let closed: Vec<usize> = known_post.axis_iter(Axis(0)).map(|r| argmax(r).0).collect();
    let closed_accuracy = closed_accuracy(&closed, split.test_known.labels())?;

    let mut predicted = Vec::with_capacity(known_post.nrows() + unknown_post.nrows());
    for row in known_post.outer_iter().chain(unknown_post.outer_iter()) {
        predicted.push(predict_open(row, &thresholds)?.label);
    }
    let truth: Vec<usize> = split
        .test_known
        .labels()
        .iter()
        .copied()
        .chain(std::iter::repeat_n(UNKNOWN, unknown_post.nrows()))
        .collect();
    let macro_f1 = macro_f1(&predicted, &truth, k)?;

    Ok(Evaluation {
        report: EvalReport {
            auroc,
            oscr: area_under(&curve),
            macro_f1,
            closed_accuracy,
            thresholds,
            config: cfg.clone(),
            seconds: start.elapsed().as_secs_f64(),
        },
        curve,
    })
}

/// Generate, train and evaluate in one go. `seconds` covers the whole run.
pub fn run(cfg: &TrainConfig) -> Result<Evaluation> {
    let start = Instant::now();
    let split = build_split(cfg)?;
    let state = train(&split, cfg)?;
    let mut eval = evaluate(&state.params, &split, cfg)?;
    eval.report.seconds = start.elapsed().as_secs_f64();
    Ok(eval)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKey {
    Lambda,
    Gamma,
    Scheme,
    Percentile,
}

impl SweepKey {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::Gamma => "gamma",
            Self::Scheme => "scheme",
            Self::Percentile => "percentile",
        }
    }

    /// Values swept when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::Lambda => &["0.1", "0.3", "0.5", "0.7", "0.9"],
            Self::Gamma => &["0", "0.5", "1", "2"],
            Self::Scheme => &["k_plus_one", "k_plus_k", "none"],
            Self::Percentile => &["1", "5", "10", "20"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl FromStr for SweepKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Self::Lambda),
            "gamma" => Ok(Self::Gamma),
            "scheme" => Ok(Self::Scheme),
            "percentile" => Ok(Self::Percentile),
            other => Err(Error::Config(format!(
                "unknown sweep `{other}`; expected lambda, gamma, scheme or percentile"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub key: SweepKey,
    pub value: String,
    pub seed: u64,
    pub report: EvalReport,
}

/// Mean metrics of all rows sharing one sweep value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: String,
    pub runs: usize,
    pub auroc: f64,
    pub oscr: f64,
    pub macro_f1: f64,
    pub closed_accuracy: f64,
}

/// Runs `base` once per `(value, seed)`, in parallel, and returns the rows
/// in value-major input order.
///
/// A percentile sweep trains one model per seed and only refits thresholds.
pub fn ablate(base: &TrainConfig, key: SweepKey, values: &[String], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let configs: Vec<(String, u64, TrainConfig)> = values
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v.clone(), s)))
        .map(|(v, s)| {
            let mut cfg = base.clone();
            cfg.seed = s;
            cfg.set(&format!("{}={v}", key.as_str()))?;
            Ok((v, s, cfg))
        })
        .collect::<Result<_>>()?;

    let reports: Vec<EvalReport> = if key == SweepKey::Percentile {
        let trained: Vec<(OpenSplit, TrainState, f64)> = seeds
            .par_iter()
            .map(|&s| {
                let start = Instant::now();
                let cfg = TrainConfig { seed: s, ..base.clone() };
                let split = build_split(&cfg)?;
                let state = train(&split, &cfg)?;
                Ok((split, state, start.elapsed().as_secs_f64()))
            })
            .collect::<Result<_>>()?;
        configs
            .par_iter()
            .enumerate()
            .map(|(i, (_, _, cfg))| {
                let (split, state, train_secs) = &trained[i % seeds.len()];
                let mut r = evaluate(&state.params, split, cfg)?.report;
                r.seconds += train_secs;
                Ok(r)
            })
            .collect::<Result<_>>()?
    } else {
        configs
            .par_iter()
            .map(|(_, _, cfg)| run(cfg).map(|e| e.report))
            .collect::<Result<_>>()?
    };

    Ok(configs
        .into_iter()
        .zip(reports)
        .map(|((value, seed, _), report)| SweepRow { key, value, seed, report })
        .collect())
}

/// Per-value means, in first-appearance order.
pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.value.as_str()) {
            order.push(&r.value);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let group: Vec<&EvalReport> = rows.iter().filter(|r| r.value == v).map(|r| &r.report).collect();
            let n = group.len() as f64;
            let mean = |f: fn(&EvalReport) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            SweepSummary {
                value: v.to_string(),
                runs: group.len(),
                auroc: mean(|r| r.auroc),
                oscr: mean(|r| r.oscr),
                macro_f1: mean(|r| r.macro_f1),
                closed_accuracy: mean(|r| r.closed_accuracy),
            }
        })
        .collect()
}

/// `sweep,value,seed,auroc,oscr,macro_f1,closed_accuracy,seconds`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "sweep,value,seed,auroc,oscr,macro_f1,closed_accuracy,seconds")?;
    for r in rows {
        let m = &r.report;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.key.as_str(),
            r.value,
            r.seed,
            m.auroc,
            m.oscr,
            m.macro_f1,
            m.closed_accuracy,
            m.seconds
        )?;
    }
    Ok(())
}

/// `value,runs,auroc,oscr,macro_f1,closed_accuracy`.
pub fn write_summary_csv<W: Write>(summary: &[SweepSummary], mut w: W) -> std::io::Result<()> {
    writeln!(w, "value,runs,auroc,oscr,macro_f1,closed_accuracy")?;
    for s in summary {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.value, s.runs, s.auroc, s.oscr, s.macro_f1, s.closed_accuracy
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            classes: 4,
            known_classes: 2,
            per_class: 30,
            dim: 3,
            hidden: vec![8],
            proj_dim: 4,
            batch_size: 32,
            epochs_contrastive: 2,
            epochs_classifier: 2,
            warmup_epochs: 1,
            ..TrainConfig::default()
        }
    }

    fn strip(mut r: EvalReport) -> EvalReport {
        r.seconds = 0.0;
        r
    }

    #[test]
    fn split_round_trips_through_csv() {
        let cfg = tiny();
        let split = build_split(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_split(&split, cfg.seed, dir.path()).unwrap();
        assert_eq!(m.train_rows + m.test_known_rows + m.test_unknown_rows, 120);
        let back = read_split(dir.path()).unwrap();
        assert_eq!(back, split);
    }

    #[test]
    fn metrics_are_in_unit_interval_and_echo_config() {
        let cfg = tiny();
        let eval = run(&cfg).unwrap();
        let r = &eval.report;
        for m in [r.auroc, r.oscr, r.macro_f1, r.closed_accuracy] {
            assert!((0.0..=1.0).contains(&m), "{r:?}");
        }
        assert_eq!(r.config, cfg);
        assert_eq!(r.thresholds.thresholds.len(), 2);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["config"]["per_class"], 30);
    }

    #[test]
    fn single_value_sweep_matches_plain_run() {
        let cfg = tiny();
        let rows = ablate(&cfg, SweepKey::Lambda, &["0.5".into()], &[cfg.seed]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(strip(rows[0].report.clone()), strip(run(&cfg).unwrap().report));
    }

    #[test]
    fn sweep_rows_follow_input_order() {
        let cfg = tiny();
        let values = SweepKey::Percentile.default_values();
        let rows = ablate(&cfg, SweepKey::Percentile, &values, &[1, 2]).unwrap();
        let got: Vec<(String, u64)> = rows.iter().map(|r| (r.value.clone(), r.seed)).collect();
        let want: Vec<(String, u64)> = values.iter().flat_map(|v| [(v.clone(), 1), (v.clone(), 2)]).collect();
        assert_eq!(got, want);
        for r in &rows {
            assert_eq!(r.report.thresholds.percentile, r.value.parse::<f64>().unwrap());
        }
        let summary = summarize(&rows);
        assert_eq!(summary.len(), values.len());
        assert!(summary.iter().all(|s| s.runs == 2));
    }

    #[test]
    fn bad_sweeps_are_config_errors() {
        assert!(matches!("tau".parse::<SweepKey>(), Err(Error::Config(_))));
        let cfg = tiny();
        assert!(ablate(&cfg, SweepKey::Lambda, &[], &[0]).is_err());
        assert!(ablate(&cfg, SweepKey::Lambda, &["2".into()], &[0]).is_err());
    }
}
