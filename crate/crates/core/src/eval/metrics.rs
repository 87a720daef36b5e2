use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::sim::{StepReport, World};

/// What one simulation step contributes to the evaluation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    /// Slow vehicles in the control zones, summed over the 8 directions.
    pub queued: usize,
    /// Accumulated wait of each vehicle that completed its route this step.
    pub waits: Vec<f64>,
    pub collisions: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub steps: Vec<StepLog>,
}

impl EpisodeLog {
    pub fn new(seed: u64) -> Self {
        Self { seed, steps: Vec::new() }
    }

    /// Appends the step just taken; call after `World::step`.
    pub fn record(&mut self, world: &World, report: &StepReport) {
        self.steps.push(StepLog {
            step: world.steps(),
            queued: world.queue().iter().sum(),
            waits: report.arrivals.iter().map(|a| a.wait).collect(),
            collisions: report.collisions.len(),
        });
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{}", serde_json::json!({ "seed": self.seed }))?;
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            writeln!(w)?;
        }
        w.flush()
    }

    pub fn read_jsonl(path: &Path) -> std::io::Result<Self> {
        let bad = |e: serde_json::Error| std::io::Error::new(std::io::ErrorKind::InvalidData, e);
        let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
        let head: serde_json::Value = match lines.next() {
            Some(l) => serde_json::from_str(&l?).map_err(bad)?,
            None => return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "empty log")),
        };
        let seed = head["seed"].as_u64().unwrap_or(0);
        let mut steps = Vec::new();
        for l in lines {
            let l = l?;
            if !l.trim().is_empty() {
                steps.push(serde_json::from_str(&l).map_err(bad)?);
            }
        }
        Ok(Self { seed, steps })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Average waiting time per completed vehicle, seconds.
    pub awt: f64,
    /// Time-averaged number of queued vehicles.
    pub aql: f64,
    /// Collisions per 100 completed vehicles; absent with zero throughput.
    pub cr: Option<f64>,
    pub throughput: usize,
    pub collisions: usize,
    pub steps: usize,
    pub seed: u64,
}

pub fn compute_metrics(log: &EpisodeLog) -> MetricsReport {
    let waits: Vec<f64> = log.steps.iter().flat_map(|s| s.waits.iter().copied()).collect();
    let throughput = waits.len();
    let collisions: usize = log.steps.iter().map(|s| s.collisions).sum();
    let awt = if throughput == 0 { 0.0 } else { waits.iter().sum::<f64>() / throughput as f64 };
    let steps = log.steps.len();
    let aql = if steps == 0 { 0.0 } else { log.steps.iter().map(|s| s.queued as f64).sum::<f64>() / steps as f64 };
    let cr = (throughput > 0).then(|| 100.0 * collisions as f64 / throughput as f64);
    MetricsReport { awt, aql, cr, throughput, collisions, steps, seed: log.seed }
}

/// Mean of each metric over several reports. CR averages the seeds where it is defined.
pub fn average(reports: &[MetricsReport]) -> Option<MetricsReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let crs: Vec<f64> = reports.iter().filter_map(|r| r.cr).collect();
    Some(MetricsReport {
        awt: reports.iter().map(|r| r.awt).sum::<f64>() / n,
        aql: reports.iter().map(|r| r.aql).sum::<f64>() / n,
        cr: (!crs.is_empty()).then(|| crs.iter().sum::<f64>() / crs.len() as f64),
        throughput: reports.iter().map(|r| r.throughput).sum::<usize>() / reports.len(),
        collisions: reports.iter().map(|r| r.collisions).sum::<usize>() / reports.len(),
        steps: reports[0].steps,
        seed: reports[0].seed,
    })
}

pub const CSV_HEADER: &str = "label,seed,awt,aql,cr,throughput,collisions,steps";

pub fn csv_row(label: &str, r: &MetricsReport) -> String {
    let cr = r.cr.map(|c| format!("{c:.6}")).unwrap_or_default();
    format!("{label},{},{:.6},{:.6},{cr},{},{},{}", r.seed, r.awt, r.aql, r.throughput, r.collisions, r.steps)
}
