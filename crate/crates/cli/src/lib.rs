//! Experiment runner: JSON configs in, per-seed records and summary tables out.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use deepdp::{build_problem, ProblemInstance, ProblemParams, Scheme, TimeGrid, TrainConfig, TrainError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no successful records to summarize")]
    EmptySummary,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub id: String,
    #[serde(default)]
    pub params: ProblemParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub steps: usize,
    pub kappa_hat: usize,
    /// Overrides the problem's maturity.
    pub maturity: Option<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            steps: 20,
            kappa_hat: 4,
            maturity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub scheme: Scheme,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub training: TrainConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    fn params(&self) -> ProblemParams {
        let mut p = self.problem.params.clone();
        if let Some(t) = self.grid.maturity {
            p.maturity = Some(t);
        }
        p
    }

    /// SHA-256 of the canonical JSON of everything except seeds and output location.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("object");
        obj.remove("seeds");
        obj.remove("output_dir");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    /// Checks everything that can fail before any training starts.
    pub fn prepare(&self) -> Result<Prepared, CliError> {
        let cfg_err = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must be nonempty".into()));
        }
        if self.grid.maturity.is_some() && self.problem.params.maturity.is_some() {
            return Err(CliError::Config("maturity given both in grid and problem params".into()));
        }
        self.training.validate().map_err(|e| cfg_err(&e))?;
        let instance = build_problem(&self.problem.id, &self.params()).map_err(|e| cfg_err(&e))?;
        let grid = match &instance {
            ProblemInstance::Pde(p) => {
                if self.scheme.is_control() {
                    return Err(CliError::Config(format!("{} needs a control problem", self.scheme)));
                }
                if self.scheme.is_semilinear() != matches!(p.driver, deepdp::Driver::Semilinear(_)) {
                    return Err(CliError::Config(format!("{} does not apply to {}", self.scheme, p.id)));
                }
                Some(TimeGrid::new(p.maturity, self.grid.steps, self.grid.kappa_hat).map_err(|e| cfg_err(&e))?)
            }
            ProblemInstance::Control(_) => {
                if !self.scheme.is_control() {
                    return Err(CliError::Config(format!("{} needs a PDE problem", self.scheme)));
                }
                None
            }
        };
        Ok(Prepared { instance, grid })
    }
}

pub struct Prepared {
    pub instance: ProblemInstance,
    pub grid: Option<TimeGrid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Diverged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub problem: String,
    pub scheme: String,
    pub dim: usize,
    #[serde(rename = "N")]
    pub steps: usize,
    pub kappa_hat: usize,
    pub seed: u64,
    pub estimate: f64,
    pub runtime_s: f64,
    pub status: Status,
    pub reference: Option<f64>,
    #[serde(skip)]
    pub losses: Vec<f64>,
    #[serde(skip)]
    pub error: Option<String>,
}

struct Outcome {
    estimate: f64,
    runtime_s: f64,
    losses: Vec<f64>,
}

fn solve_once(prep: &Prepared, scheme: Scheme, cfg: &TrainConfig) -> Result<Outcome, TrainError> {
    match (&prep.instance, &prep.grid) {
        (ProblemInstance::Pde(p), Some(grid)) => {
            let r = if scheme.is_semilinear() {
                deepdp::semilinear::solve(p, grid, scheme, cfg)?
            } else {
                deepdp::fully_nonlinear::solve(p, grid, scheme, cfg)?
            };
            Ok(Outcome {
                estimate: r.estimate_y0,
                runtime_s: r.runtime_s,
                losses: r.step_losses,
            })
        }
        (ProblemInstance::Control(c), _) => {
            let r = deepdp::control::solve(c, scheme, cfg)?;
            Ok(Outcome {
                estimate: r.estimate,
                runtime_s: r.runtime_s,
                losses: r.policy_losses,
            })
        }
        _ => Err(TrainError::Config("PDE problem without a grid".into())),
    }
}

/// Trains one seed; never panics.
pub fn run_seed(config: &ExperimentConfig, prep: &Prepared, hash: &str, seed: u64) -> RunRecord {
    let cfg = TrainConfig {
        seed,
        ..config.training.clone()
    };
    let (steps, kappa_hat) = match &prep.grid {
        Some(g) => (g.steps(), g.kappa_hat()),
        None => match &prep.instance {
            ProblemInstance::Control(c) => (deepdp::ControlProblem::horizon(c), 1),
            ProblemInstance::Pde(_) => unreachable!("validated"),
        },
    };
    let mut rec = RunRecord {
        config_hash: hash.to_string(),
        problem: config.problem.id.clone(),
        scheme: config.scheme.id().to_string(),
        dim: prep.instance.dim(),
        steps,
        kappa_hat,
        seed,
        estimate: f64::NAN,
        runtime_s: 0.0,
        status: Status::Ok,
        reference: prep.instance.reference_value(),
        losses: Vec::new(),
        error: None,
    };
    match catch_unwind(AssertUnwindSafe(|| solve_once(prep, config.scheme, &cfg))) {
        Ok(Ok(out)) if out.estimate.is_finite() => {
            rec.estimate = out.estimate;
            rec.runtime_s = out.runtime_s;
            rec.losses = out.losses;
        }
        Ok(Ok(_)) => {
            rec.status = Status::Diverged;
            rec.error = Some("non-finite estimate".into());
        }
        Ok(Err(e)) => {
            rec.status = if e.is_divergence() { Status::Diverged } else { Status::Failed };
            rec.error = Some(e.to_string());
        }
        Err(_) => {
            rec.status = Status::Failed;
            rec.error = Some("solver panicked".into());
        }
    }
    rec
}

/// One record per seed, in seed order. Seeds run on the rayon pool.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>, CliError> {
    let prep = config.prepare()?;
    let hash = config.hash();
    Ok(config.seeds.par_iter().map(|&s| run_seed(config, &prep, &hash, s)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub problem: String,
    pub scheme: String,
    pub dim: usize,
    pub mean: f64,
    pub sd: f64,
    pub rel_err_pct: Option<f64>,
    pub n_runs: usize,
}

/// Mean, sample standard deviation and relative error per (problem, scheme, dim),
/// over successful records.
pub fn aggregate(records: &[RunRecord]) -> Result<Vec<SummaryRow>, CliError> {
    let mut groups: BTreeMap<(String, String, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status == Status::Ok) {
        groups.entry((r.problem.clone(), r.scheme.clone(), r.dim)).or_default().push(r);
    }
    if groups.is_empty() {
        return Err(CliError::EmptySummary);
    }
    Ok(groups
        .into_iter()
        .map(|((problem, scheme, dim), rs)| {
            let xs: Vec<f64> = rs.iter().map(|r| r.estimate).collect();
            let (mean, var) = deepdp::train::mean_var(&xs);
            let rel_err_pct = rs[0].reference.map(|r| 100.0 * (mean - r).abs() / r.abs());
            SummaryRow {
                problem,
                scheme,
                dim,
                mean,
                sd: var.sqrt(),
                rel_err_pct,
                n_runs: xs.len(),
            }
        })
        .collect())
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub const RECORD_COLUMNS: [&str; 11] = [
    "config_hash",
    "problem",
    "scheme",
    "dim",
    "N",
    "kappa_hat",
    "seed",
    "estimate",
    "runtime_s",
    "status",
    "reference",
];
pub const SUMMARY_COLUMNS: [&str; 7] = ["problem", "scheme", "dim", "mean", "sd", "rel_err_pct", "n_runs"];

/// Writes `records.csv`, `summary.csv` and `summary.json` into `out_dir`.
pub fn emit_outputs(summaries: &[SummaryRow], records: &[RunRecord], out_dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(|source| CliError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    write_csv(&out_dir.join("records.csv"), &RECORD_COLUMNS, records)?;
    write_csv(&out_dir.join("summary.csv"), &SUMMARY_COLUMNS, summaries)?;
    let path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(summaries).map_err(|source| CliError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(|source| CliError::Io { path, source })
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err(path))
}

/// 0 when every seed succeeded, 2 otherwise.
pub fn exit_code(records: &[RunRecord]) -> i32 {
    if records.iter().all(|r| r.status == Status::Ok) {
        0
    } else {
        2
    }
}

pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<12} {:<15} {:>4} {:>12} {:>11} {:>9} {:>6}\n",
        "problem", "scheme", "dim", "mean", "sd", "rel_err%", "runs"
    );
    for r in rows {
        let rel = r.rel_err_pct.map_or("-".to_string(), |v| format!("{v:.3}"));
        s += &format!(
            "{:<12} {:<15} {:>4} {:>12.6} {:>11.3e} {:>9} {:>6}\n",
            r.problem, r.scheme, r.dim, r.mean, r.sd, rel, r.n_runs
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(problem: &str, dim: usize, estimate: f64, reference: Option<f64>) -> RunRecord {
        RunRecord {
            config_hash: "h".into(),
            problem: problem.into(),
            scheme: "dbdp1".into(),
            dim,
            steps: 20,
            kappa_hat: 4,
            seed: 0,
            estimate,
            runtime_s: 1.0,
            status: Status::Ok,
            reference,
            losses: vec![],
            error: None,
        }
    }

    #[test]
    fn aggregate_hand_values() {
        let rs: Vec<_> = [1.0, 2.0, 3.0].iter().map(|&e| record("p", 1, e, None)).collect();
        let s = aggregate(&rs).unwrap();
        assert_eq!((s[0].mean, s[0].sd, s[0].n_runs, s[0].rel_err_pct), (2.0, 1.0, 3, None));

        let one = aggregate(&[record("p", 1, 0.5, Some(0.4))]).unwrap();
        assert_eq!(one[0].sd, 0.0);
        assert!((one[0].rel_err_pct.unwrap() - 25.0).abs() < 1e-12);

        let merton: Vec<_> = (0..10).map(|_| record("merton", 1, -0.50673, Some(-0.50662))).collect();
        let m = aggregate(&merton).unwrap();
        assert!((m[0].rel_err_pct.unwrap() - 0.0217).abs() < 1e-3);
    }

    #[test]
    fn aggregate_skips_failures_and_rejects_empty() {
        let mut bad = record("p", 1, f64::NAN, None);
        bad.status = Status::Diverged;
        assert!(matches!(aggregate(&[bad.clone()]), Err(CliError::EmptySummary)));
        assert!(matches!(aggregate(&[]), Err(CliError::EmptySummary)));
        let s = aggregate(&[bad, record("p", 1, 4.0, None)]).unwrap();
        assert_eq!((s[0].mean, s[0].n_runs), (4.0, 1));
    }

    #[test]
    fn one_row_per_dimension() {
        let rs = vec![
            record("cva", 1, 0.06, Some(0.0595)),
            record("cva", 3, 0.18, Some(0.17797)),
            record("cva", 1, 0.059, Some(0.0595)),
        ];
        let s = aggregate(&rs).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].dim, s[0].n_runs, s[1].dim, s[1].n_runs), (1, 2, 3, 1));
        assert_eq!(s[1], aggregate(&rs[1..2]).unwrap()[0]);
    }

    #[test]
    fn hash_ignores_field_order_and_seeds() {
        let a = ExperimentConfig::from_json(r#"{"problem":{"id":"lq"},"scheme":"hybrid_now","seeds":[1]}"#).unwrap();
        let b = ExperimentConfig::from_json(
            r#"{"seeds":[4,5],"output_dir":"x","scheme":"hybrid_now","problem":{"params":{},"id":"lq"},"grid":{"kappa_hat":4,"steps":20}}"#,
        )
        .unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_json(r#"{"problem":{"id":"lq"},"scheme":"nncontpi","seeds":[1]}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn config_errors() {
        let bad = [
            r#"{"problem":{"id":"lq"},"scheme":"hybrid_now","seeds":[1],"typo":1}"#,
            r#"{"problem":{"id":"lq","params":{"dimm":2}},"scheme":"hybrid_now","seeds":[1]}"#,
            r#"{"problem":{"id":"lq"},"scheme":"hybrid_now","seeds":[1],"training":{"batchsize":5}}"#,
            r#"{"problem":{"id":"lq"},"scheme":"nope","seeds":[1]}"#,
        ];
        for b in bad {
            assert!(matches!(ExperimentConfig::from_json(b), Err(CliError::Config(_))), "{b}");
        }
        let invalid = [
            r#"{"problem":{"id":"lq"},"scheme":"hybrid_now","seeds":[]}"#,
            r#"{"problem":{"id":"nope"},"scheme":"dbdp1","seeds":[1]}"#,
            r#"{"problem":{"id":"cva"},"scheme":"dbdp1","seeds":[1],"grid":{"steps":10,"kappa_hat":3}}"#,
            r#"{"problem":{"id":"cva"},"scheme":"dbdp1","seeds":[1],"training":{"batch_size":0}}"#,
            r#"{"problem":{"id":"cva"},"scheme":"2mdbdp","seeds":[1]}"#,
            r#"{"problem":{"id":"merton"},"scheme":"dbdp1","seeds":[1]}"#,
            r#"{"problem":{"id":"lq"},"scheme":"dbdp1","seeds":[1]}"#,
            r#"{"problem":{"id":"cva"},"scheme":"nncontpi","seeds":[1]}"#,
        ];
        for b in invalid {
            let c = ExperimentConfig::from_json(b).unwrap();
            assert!(matches!(c.prepare(), Err(CliError::Config(_))), "{b}");
        }
    }

    #[test]
    fn defaults_follow_desk_scale() {
        let c = ExperimentConfig::from_json(r#"{"problem":{"id":"cva"},"scheme":"dbdp1","seeds":[0]}"#).unwrap();
        assert_eq!((c.grid.steps, c.grid.kappa_hat), (20, 4));
        assert_eq!(c.training.batch_size, 1000);
        assert_eq!((c.training.iters_per_step, c.training.first_step_iters), (400, 4000));
    }
}
