//! Whole runs: generate scenes, train, evaluate. Also the method x seed comparison grid.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{OpisError, Result};
use crate::eval::{evaluate, MetricsReport, SceneDetection};
use crate::harness::{train, Method, ToyModel, TrainLog};

/// A trained model together with the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub config: ExperimentConfig,
    pub model: ToyModel,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: ToyModel,
    pub log: TrainLog,
}

pub fn run_training(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (model, log) = train(&cfg.train_config(), &cfg.train_set()?)?;
    Ok(RunOutput { model, log })
}

pub fn run_evaluation(cfg: &ExperimentConfig, model: &ToyModel, dataset_seed: u64) -> Result<(MetricsReport, Vec<SceneDetection>)> {
    evaluate(model, &cfg.eval_set_from(dataset_seed)?, cfg.eval.nms_iou, cfg.eval.score_floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: Method,
    pub seed: u64,
    pub map: f64,
    pub corloc: f64,
}

/// Trains and evaluates one (method, seed) cell; the seed replaces the configured root seed.
pub fn run_cell(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<CompareRow> {
    let mut cfg = cfg.clone();
    cfg.train.method = method;
    cfg.train.seed = seed;
    let out = run_training(&cfg)?;
    let (report, _) = run_evaluation(&cfg, &out.model, crate::config::eval_dataset_seed(seed))?;
    Ok(CompareRow { method, seed, map: report.map, corloc: report.corloc })
}

/// Runs every (method, seed) cell on up to `threads` workers. Rows come back in grid order
/// (methods outer, seeds inner) whatever the thread count.
pub fn compare(cfg: &ExperimentConfig, methods: &[Method], seeds: &[u64], threads: usize) -> Result<Vec<CompareRow>> {
    let cells: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let threads = threads.clamp(1, cells.len().max(1));
    let per_worker = cells.len().div_ceil(threads).max(1);
    let mut results: Vec<Option<Result<CompareRow>>> = vec![None; cells.len()];
    thread::scope(|scope| {
        for (w, chunk) in results.chunks_mut(per_worker).enumerate() {
            let start = w * per_worker;
            let cells = &cells;
            scope.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    let (m, s) = cells[start + i];
                    *slot = Some(run_cell(cfg, m, s));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(OpisError::Consistency("compare cell not run".into()))))
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-method medians of mAP and CorLoc.
pub fn medians(rows: &[CompareRow]) -> BTreeMap<Method, (f64, f64)> {
    let mut by_method: BTreeMap<Method, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let e = by_method.entry(r.method).or_default();
        e.0.push(r.map);
        e.1.push(r.corloc);
    }
    by_method
        .into_iter()
        .map(|(m, (a, c))| (m, (median(&a), median(&c))))
        .collect()
}

/// `method,seed,mAP,CorLoc` rows followed by `method,median,mAP,CorLoc` rows.
pub fn write_compare_csv<W: Write>(rows: &[CompareRow], mut w: W) -> io::Result<()> {
    writeln!(w, "method,seed,mAP,CorLoc")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.method, r.seed, r.map, r.corloc)?;
    }
    for (m, (map, corloc)) in medians(rows) {
        writeln!(w, "{m},median,{map},{corloc}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn compare_order_is_independent_of_threads() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.num_proposals = 30;
        cfg.train.iterations = 20;
        cfg.train.train_scenes = 4;
        cfg.train.eval_scenes = 3;
        let methods = [Method::Baseline, Method::Opis];
        let one = compare(&cfg, &methods, &[0, 1], 1).unwrap();
        let three = compare(&cfg, &methods, &[0, 1], 3).unwrap();
        assert_eq!(one, three);
        let grid: Vec<_> = one.iter().map(|r| (r.method, r.seed)).collect();
        assert_eq!(grid, [(Method::Baseline, 0), (Method::Baseline, 1), (Method::Opis, 0), (Method::Opis, 1)]);
        let mut buf = Vec::new();
        write_compare_csv(&one, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 + 2);
        assert!(text.contains("opis,median,"));
    }
}
