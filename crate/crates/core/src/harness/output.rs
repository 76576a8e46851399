//! Artifact writers. Numbers go out with 17 significant digits so reruns are
//! byte-identical and values round-trip.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::value::RawValue;

use super::runs::{
    CurveOutput, HeteroOutcome, HeteroSummary, MethodReport, MethodSummary, SeedData, Stat,
};
use super::ExperimentConfig;
use crate::error::Result;
use crate::federation::Checkpoint;

/// `{:.16e}` for finite values, `NaN`/`inf`/`-inf` otherwise.
pub fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn num(x: f64) -> Box<RawValue> {
    let text = if x.is_finite() {
        fmt_num(x)
    } else {
        "null".to_string()
    };
    RawValue::from_string(text).expect("formatted number is valid JSON")
}

fn opt_num(x: Option<f64>) -> Box<RawValue> {
    x.map_or_else(
        || RawValue::from_string("null".into()).expect("null is valid JSON"),
        num,
    )
}

#[derive(Serialize)]
struct StatJson {
    mean: Box<RawValue>,
    std: Box<RawValue>,
}

impl From<Stat> for StatJson {
    fn from(s: Stat) -> Self {
        Self {
            mean: num(s.mean),
            std: opt_num(s.std),
        }
    }
}

#[derive(Serialize)]
struct SeedJson<'a> {
    seed: u64,
    partition_hash: &'a str,
    best_round: usize,
    validation: Box<RawValue>,
    test: Box<RawValue>,
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    config_hash: &'a str,
    method: &'a str,
    inference: &'a str,
    seeds: Vec<SeedJson<'a>>,
    validation: StatJson,
    test: StatJson,
}

fn summary_json<'a>(hash: &'a str, s: &'a MethodSummary) -> SummaryJson<'a> {
    SummaryJson {
        config_hash: hash,
        method: s.method.name(),
        inference: &s.inference,
        seeds: s
            .seeds
            .iter()
            .map(|x| SeedJson {
                seed: x.seed,
                partition_hash: &x.partition_hash,
                best_round: x.best_round,
                validation: num(x.validation),
                test: num(x.test),
            })
            .collect(),
        validation: s.validation.into(),
        test: s.test.into(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// `metrics.csv`, `clients.csv`, `summary.json` and one best checkpoint per
/// seed, under `dir`.
pub fn write_method_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    report: &MethodReport,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let hash = cfg.hash_hex();
    let name = report.method.name();

    let mut metrics = create(&dir.join("metrics.csv"))?;
    writeln!(metrics, "config_hash,seed,method,round,split,mean_acc")?;
    let mut clients = create(&dir.join("clients.csv"))?;
    writeln!(
        clients,
        "config_hash,seed,method,round,split,client,correct,count,accuracy"
    )?;
    for o in &report.outcomes {
        for r in &o.run.rounds {
            writeln!(
                metrics,
                "{hash},{},{name},{},validation,{}",
                o.seed,
                r.round,
                fmt_num(r.mean_validation)
            )?;
        }
        writeln!(
            metrics,
            "{hash},{},{name},{},test,{}",
            o.seed,
            o.run.best.round,
            fmt_num(o.test)
        )?;
        let records = o
            .run
            .rounds
            .iter()
            .flat_map(|r| &r.records)
            .chain(&o.test_records);
        for e in records {
            writeln!(
                clients,
                "{hash},{},{name},{},{},{},{},{},{}",
                o.seed,
                e.round,
                e.split.as_str(),
                e.client,
                e.correct,
                e.count,
                fmt_num(e.accuracy)
            )?;
        }
        let ck = Checkpoint {
            config_hash: cfg.hash(),
            seed: o.seed,
            round: o.run.best.round,
            model: o.run.best.model.clone(),
        };
        let mut f = create(&dir.join(format!("checkpoint-seed{}.ftck", o.seed)))?;
        ck.write_to(&mut f)?;
        f.flush()?;
    }
    metrics.flush()?;
    clients.flush()?;
    write_json(
        &dir.join("summary.json"),
        &summary_json(&hash, &report.summary),
    )
}

/// Per-method outputs in subdirectories plus `compare.csv` and `compare.json`.
pub fn write_compare(dir: &Path, cfg: &ExperimentConfig, reports: &[MethodReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in reports {
        write_method_outputs(&dir.join(r.method.name()), cfg, r)?;
    }
    let hash = cfg.hash_hex();
    let mut csv = create(&dir.join("compare.csv"))?;
    writeln!(
        csv,
        "config_hash,method,seeds,validation_mean,validation_std,test_mean,test_std,inference"
    )?;
    for r in reports {
        let s = &r.summary;
        let std = |x: Option<f64>| x.map_or_else(String::new, fmt_num);
        writeln!(
            csv,
            "{hash},{},{},{},{},{},{},\"{}\"",
            s.method.name(),
            s.seeds.len(),
            fmt_num(s.validation.mean),
            std(s.validation.std),
            fmt_num(s.test.mean),
            std(s.test.std),
            s.inference
        )?;
    }
    csv.flush()?;
    let rows: Vec<SummaryJson> = reports
        .iter()
        .map(|r| summary_json(&hash, &r.summary))
        .collect();
    write_json(&dir.join("compare.json"), &rows)
}

/// Human-readable table: one row per method, accuracies in percent.
pub fn compare_table(summaries: &[&MethodSummary]) -> String {
    let pct = |s: Stat| match s.std {
        Some(d) => format!("{:6.2} ± {:5.2}", 100.0 * s.mean, 100.0 * d),
        None => format!("{:6.2}        ", 100.0 * s.mean),
    };
    let mut out = format!(
        "{:<12} {:>15} {:>15}  {}\n",
        "method", "validation", "test", "inference"
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<12} {:>15} {:>15}  {}",
            s.method.name(),
            pct(s.validation),
            pct(s.test),
            s.inference
        );
    }
    out
}

/// `step,accuracy,personalization_loss,entropy` per step, plus the stop and
/// selected steps on every row.
pub fn write_curve(path: &Path, cfg: &ExperimentConfig, curve: &CurveOutput) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let hash = cfg.hash_hex();
    let mut f = create(path)?;
    writeln!(
        f,
        "config_hash,seed,client,step,accuracy,personalization_loss,entropy,stop_step,selected_step"
    )?;
    for r in &curve.rows {
        writeln!(
            f,
            "{hash},{},{},{},{},{},{},{},{}",
            curve.seed,
            curve.client,
            r.step,
            r.accuracy.map_or_else(String::new, fmt_num),
            fmt_num(r.personalization_loss),
            fmt_num(r.entropy),
            curve.stopped_at,
            curve.selected_step
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Every client's dataset as an `FTDS` file and a `partition.csv` index.
pub fn write_partition(dir: &Path, cfg: &ExperimentConfig, data: &SeedData) -> Result<()> {
    fs::create_dir_all(dir)?;
    let hash = cfg.hash_hex();
    let mut index = create(&dir.join("partition.csv"))?;
    writeln!(
        index,
        "config_hash,seed,partition_hash,role,client,samples,class_counts,file"
    )?;
    for (role, sets) in [("train", &data.train), ("test", &data.test)] {
        for (i, d) in sets.iter().enumerate() {
            let file = format!("{role}-{i:03}.ftds");
            let mut f = create(&dir.join(&file))?;
            d.write_to(&mut f)?;
            f.flush()?;
            let counts: Vec<String> = d.class_counts().iter().map(|c| c.to_string()).collect();
            writeln!(
                index,
                "{hash},{},{},{role},{i},{},{},{file}",
                data.seed,
                data.partition_hash,
                d.len(),
                counts.join(";")
            )?;
        }
    }
    index.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct HeteroJson<'a> {
    config_hash: &'a str,
    lambda: Box<RawValue>,
    seeds: &'a [u64],
    validation: Vec<Box<RawValue>>,
    test: Vec<Box<RawValue>>,
    validation_stat: StatJson,
    test_stat: StatJson,
}

/// `hetero_rounds.csv`, `hetero_summary.json` and the final knowledge of
/// every run as `FTEK` files.
pub fn write_hetero(
    dir: &Path,
    cfg: &ExperimentConfig,
    outcomes: &[HeteroOutcome],
    summaries: &[HeteroSummary],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let hash = cfg.hash_hex();
    let mut rounds = create(&dir.join("hetero_rounds.csv"))?;
    writeln!(
        rounds,
        "config_hash,seed,lambda,round,mean_validation,mean_digest_kl"
    )?;
    for o in outcomes {
        for r in &o.rounds {
            writeln!(
                rounds,
                "{hash},{},{},{},{},{}",
                o.seed,
                fmt_num(o.lambda),
                r.round,
                fmt_num(r.mean_validation),
                fmt_num(r.mean_digest_kl)
            )?;
        }
        let mut f = create(&dir.join(format!("knowledge-lambda{}-seed{}.ftek", o.lambda, o.seed)))?;
        o.knowledge.write_to(&mut f)?;
        f.flush()?;
    }
    rounds.flush()?;
    let rows: Vec<HeteroJson> = summaries
        .iter()
        .map(|s| HeteroJson {
            config_hash: &hash,
            lambda: num(s.lambda),
            seeds: &s.seeds,
            validation: s.validation.iter().map(|v| num(*v)).collect(),
            test: s.test.iter().map(|v| num(*v)).collect(),
            validation_stat: s.validation_stat.into(),
            test_stat: s.test_stat.into(),
        })
        .collect();
    write_json(&dir.join("hetero_summary.json"), &rows)
}
