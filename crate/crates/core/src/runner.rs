//! Experiment plumbing: run a config end to end, write artifacts, compare
//! summaries and score embedding dumps.
//!
//! A run directory holds
//!
//! - `trace.csv`: one row per validation evaluation (`kind = eval`) and one
//!   per finished projection (`kind = projection`), columns [`TRACE_HEADER`];
//! - `summary.json`: [`Summary`];
//! - `embeddings.csv`: `index,label,split,e0,…,e{D-1}` for every sample,
//!   embedded by the best network;
//! - `model.ckpt`: the best network.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ccp::{self, TraceRow};
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::metrics::{self, RetrievalReport};
use crate::net::EmbeddingNetwork;
use crate::{Error, Result};

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

pub const TRACE_HEADER: [&str; 10] = [
    "kind",
    "step",
    "projection",
    "train_loss",
    "val_p_at_1",
    "val_p_at_r",
    "val_map_at_r",
    "violation_rate",
    "avg_covering_radius",
    "min_proxy_distance",
];

/// Write to a temporary sibling and rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::file(path, e));
    }
    Ok(())
}

pub fn trace_csv(rows: &[TraceRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(TRACE_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(e.into_error()))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_HEADER {
        return Err(Error::InvalidArgument(format!("{}: unexpected trace header", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    /// Flat config echo; parses back with [`ExperimentConfig::from_pairs`].
    pub config: BTreeMap<String, String>,
    pub steps: usize,
    pub projections: usize,
    pub best_val_map_at_r: Option<f64>,
    /// Test-split metrics of the best network.
    pub best: RetrievalReport,
    /// Test-split metrics of the parameters at the end of training.
    pub last: RetrievalReport,
    /// `√2·ω^L` of the best network.
    pub lipschitz_bound: f64,
    pub wall_time_secs: f64,
}

impl Summary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_pairs(self.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }
}

/// Test metrics with violation and covering-radius diagnostics.
pub fn test_report(net: &EmbeddingNetwork, dataset: &Dataset, alpha: f64, beta: f64) -> Result<RetrievalReport> {
    let subset = if dataset.test.is_empty() { &dataset.val } else { &dataset.test };
    let emb = net.embed_batch(&dataset.gather(subset))?;
    let labels = dataset.gather_labels(subset);
    let d = net.output_dim();
    let mut report = metrics::evaluate(&emb, &labels, d)?;
    report.per_query = None;
    report.violation = Some(metrics::violation_stats(&emb, &labels, d, alpha, beta)?);
    report.avg_covering_radius = Some(metrics::class_average_covering_radius(&emb, &labels, d)?);
    Ok(report)
}

fn split_name(dataset: &Dataset) -> Vec<&'static str> {
    let mut names = vec!["unused"; dataset.len()];
    for (split, name) in [(&dataset.train, "train"), (&dataset.val, "val"), (&dataset.test, "test")] {
        for &i in split {
            names[i] = name;
        }
    }
    names
}

pub fn embeddings_csv(net: &EmbeddingNetwork, dataset: &Dataset) -> Result<Vec<u8>> {
    let d = net.output_dim();
    let emb = net.embed_batch(dataset.inputs())?;
    let names = split_name(dataset);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["index".to_string(), "label".into(), "split".into()];
    header.extend((0..d).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut rec = vec![i.to_string(), dataset.labels()[i].to_string(), names[i].to_string()];
        rec.extend(emb[i * d..(i + 1) * d].iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    pub summary: Summary,
    pub trace: Vec<TraceRow>,
}

/// Train per `config` and write all artifacts into `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput> {
    let start = Instant::now();
    config.validate()?;
    let dataset = config.load_dataset()?;
    let train = config.training_config();
    let outcome = ccp::run_ccp(&train, &dataset)?;
    let (a, b) = (train.constraint_alpha, train.constraint_beta);
    let best = test_report(&outcome.net, &dataset, a, b)?;
    let mut last_net = outcome.net.clone();
    last_net.set_params(&outcome.final_params)?;
    let last = test_report(&last_net, &dataset, a, b)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    write_atomic(&out_dir.join(TRACE_FILE), &trace_csv(&outcome.trace)?)?;
    write_atomic(&out_dir.join(EMBEDDINGS_FILE), &embeddings_csv(&outcome.net, &dataset)?)?;
    outcome.net.save_checkpoint(&out_dir.join(CHECKPOINT_FILE))?;
    let summary = Summary {
        mode: config.mode.as_str().to_string(),
        config: config.to_pairs().into_iter().collect(),
        steps: outcome.steps,
        projections: outcome.projections.len(),
        best_val_map_at_r: outcome.best_val_map_at_r,
        best,
        last,
        lipschitz_bound: outcome.net.pair_loss_lipschitz_bound(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    write_atomic(&out_dir.join(SUMMARY_FILE), &json)?;
    Ok(RunOutput {
        out_dir: out_dir.to_path_buf(),
        summary,
        trace: outcome.trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b − a`.
    pub delta: f64,
    pub higher_is_better: bool,
    /// `a`, `b` or `tie`.
    pub winner: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub metrics: Vec<MetricDelta>,
    /// Set when the two runs used different data settings or seeds.
    pub dataset_mismatch: bool,
    pub warnings: Vec<String>,
}

fn summary_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(SUMMARY_FILE)
    } else {
        p.to_path_buf()
    }
}

/// Compare the best-network test metrics of two runs (summary files or run
/// directories).
pub fn compare(a: &Path, b: &Path) -> Result<Comparison> {
    let (pa, pb) = (summary_path(a), summary_path(b));
    let (sa, sb) = (Summary::load(&pa)?, Summary::load(&pb)?);
    Ok(compare_summaries(&sa, &sb, &pa.display().to_string(), &pb.display().to_string()))
}

pub fn compare_summaries(sa: &Summary, sb: &Summary, name_a: &str, name_b: &str) -> Comparison {
    let pick = |s: &Summary| {
        vec![
            ("p_at_1", s.best.p_at_1, true),
            ("p_at_r", s.best.p_at_r, true),
            ("map_at_r", s.best.map_at_r, true),
            ("avg_covering_radius", s.best.avg_covering_radius.unwrap_or(f64::NAN), false),
            ("violation_rate", s.best.violation.map_or(f64::NAN, |v| v.violation_rate), false),
        ]
    };
    let metrics = pick(sa)
        .into_iter()
        .zip(pick(sb))
        .map(|((metric, a, hib), (_, b, _))| {
            let delta = b - a;
            let winner = if delta == 0.0 || delta.is_nan() {
                "tie"
            } else if (delta > 0.0) == hib {
                "b"
            } else {
                "a"
            };
            MetricDelta {
                metric: metric.to_string(),
                a,
                b,
                delta,
                higher_is_better: hib,
                winner: winner.to_string(),
            }
        })
        .collect();
    let data_keys = |s: &Summary| -> Vec<(String, String)> {
        s.config
            .iter()
            .filter(|(k, _)| k.starts_with("data.") || *k == "seed")
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    };
    let (ka, kb) = (data_keys(sa), data_keys(sb));
    let mut warnings = Vec::new();
    if ka != kb {
        let keys: std::collections::BTreeSet<&String> = ka.iter().chain(&kb).map(|(k, _)| k).collect();
        let get = |v: &[(String, String)], k: &String| v.iter().find(|(x, _)| x == k).map(|(_, v)| v.clone());
        for k in keys {
            let (x, y) = (get(&ka, k), get(&kb, k));
            if x != y {
                warnings.push(format!(
                    "{k} differs: {} vs {}",
                    x.as_deref().unwrap_or("<unset>"),
                    y.as_deref().unwrap_or("<unset>")
                ));
            }
        }
    }
    Comparison {
        a: name_a.to_string(),
        b: name_b.to_string(),
        metrics,
        dataset_mismatch: ka != kb,
        warnings,
    }
}

/// Metrics of an `embeddings.csv` dump, optionally restricted to one split.
pub fn eval_embeddings(path: &Path, split: Option<&str>) -> Result<RetrievalReport> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("{}: no {name} column", path.display())))
    };
    let (label_col, split_col) = (col("label")?, col("split").ok());
    let emb_cols: Vec<usize> = (0..)
        .map_while(|j| header.iter().position(|h| h == format!("e{j}")))
        .collect();
    if emb_cols.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: no embedding columns", path.display())));
    }
    let mut emb = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if let (Some(want), Some(c)) = (split, split_col) {
            if &rec[c] != want {
                continue;
            }
        }
        let parse = |c: usize| -> Result<f64> {
            rec[c]
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad number {:?}", &rec[c])))
        };
        labels.push(parse(label_col)? as usize);
        for &c in &emb_cols {
            emb.push(parse(c)?);
        }
    }
    if labels.is_empty() {
        return Err(Error::Empty("embedding rows"));
    }
    let mut report = metrics::evaluate(&emb, &labels, emb_cols.len())?;
    report.per_query = None;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::from_text(
            "data.classes = 3\ndata.per_class = 30\ndata.dim = 4\nnet.dims = 4, 8, 2\n\
             ccp.max_steps = 60\nccp.eval_every = 10\nccp.proxies_per_class = 2\nccp.pool_budget = 4\n\
             sampler.batch_size = 6\nsampler.samples_per_class = 2\n",
        )
        .unwrap()
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn artifacts_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&tiny(), dir.path()).unwrap();
        let trace = read_trace(&dir.path().join(TRACE_FILE)).unwrap();
        assert_eq!(trace, out.trace);
        let summary = Summary::load(&dir.path().join(SUMMARY_FILE)).unwrap();
        assert_eq!(summary.config().unwrap(), tiny());
        let cmp = compare(dir.path(), dir.path()).unwrap();
        assert!(cmp.metrics.iter().all(|m| m.delta == 0.0 && m.winner == "tie"));
        assert!(!cmp.dataset_mismatch);
        let report = eval_embeddings(&dir.path().join(EMBEDDINGS_FILE), Some("test")).unwrap();
        assert!((report.map_at_r - summary.best.map_at_r).abs() < 1e-9);
        EmbeddingNetwork::load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    }

    #[test]
    fn mismatched_data_is_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let a = run(&tiny(), &dir.path().join("a")).unwrap().summary;
        let mut b = a.clone();
        b.config.insert("data.spread".into(), "0.3".into());
        let cmp = compare_summaries(&a, &b, "a", "b");
        assert!(cmp.dataset_mismatch);
        assert_eq!(cmp.warnings.len(), 1);
    }

    #[test]
    fn empty_trace_has_header() {
        let bytes = trace_csv(&[]).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap().trim(), TRACE_HEADER.join(","));
    }
}
