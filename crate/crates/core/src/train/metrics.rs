//! JSONL metrics: one object per logging event.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub split: String,
    pub modality: Option<String>,
    pub metric: String,
    pub value: f64,
}

/// Collects records in memory and optionally streams them to a file.
#[derive(Default)]
pub struct Metrics {
    pub records: Vec<MetricRecord>,
    sink: Option<BufWriter<File>>,
    stage: String,
}

impl Metrics {
    pub fn in_memory(stage: &str) -> Self {
        Self {
            records: Vec::new(),
            sink: None,
            stage: stage.into(),
        }
    }

    pub fn to_file(stage: &str, path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(File::create(path)?)),
            stage: stage.into(),
        })
    }

    pub fn set_stage(&mut self, stage: &str) {
        self.stage = stage.into();
    }

    pub fn log(
        &mut self,
        epoch: usize,
        step: usize,
        split: &str,
        modality: Option<&str>,
        metric: &str,
        value: f64,
    ) -> std::io::Result<()> {
        let r = MetricRecord {
            stage: self.stage.clone(),
            epoch,
            step,
            split: split.into(),
            modality: modality.map(Into::into),
            metric: metric.into(),
            value,
        };
        if let Some(w) = &mut self.sink {
            serde_json::to_writer(&mut *w, &r)?;
            writeln!(w)?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        if let Some(w) = &mut self.sink {
            w.flush()?;
        }
        Ok(())
    }

    /// Values of `metric` on `split` (and `modality`, if given) in log order.
    pub fn series(&self, split: &str, modality: Option<&str>, metric: &str) -> Vec<(usize, usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.metric == metric && (modality.is_none() || r.modality.as_deref() == modality))
            .map(|r| (r.epoch, r.step, r.value))
            .collect()
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, super::TrainError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}
