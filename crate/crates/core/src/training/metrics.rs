//! Per-step loss record and its append-only CSV log.

use std::fs::{File, OpenOptions};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::ObjectiveTerms;
use crate::tensor::{Graph, Var};

/// Unweighted loss components of one step, averaged over the batch.
/// `g_total` is the weighted objective actually minimised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub d_total: f64,
    pub g_total: f64,
    pub gan_ab: f64,
    pub gan_ba: f64,
    pub feature_matching: f64,
    pub identity: f64,
    pub cycle: f64,
    pub texture: f64,
    /// Seconds spent in the step.
    pub wall_time: f64,
}

impl StepMetrics {
    pub(crate) fn accumulate(&mut self, g: &Graph<f32>, terms: &ObjectiveTerms, total: Var) {
        let v = |x: Var| g.scalar_value(x) as f64;
        let sum = |xs: &[Var]| xs.iter().map(|&x| v(x)).sum::<f64>();
        self.gan_ab += sum(&terms.gan_ab);
        self.gan_ba += sum(&terms.gan_ba);
        self.feature_matching += sum(&terms.feature_matching);
        self.identity += terms.identity.map_or(0.0, v);
        self.cycle += terms.cycle.map_or(0.0, v);
        self.texture += terms.texture.map_or(0.0, v);
        self.g_total += v(total);
    }

    pub(crate) fn scale(&mut self, k: f64) {
        for x in [
            &mut self.g_total,
            &mut self.gan_ab,
            &mut self.gan_ba,
            &mut self.feature_matching,
            &mut self.identity,
            &mut self.cycle,
            &mut self.texture,
        ] {
            *x *= k;
        }
    }

    pub fn named_losses(&self) -> [(&'static str, f64); 8] {
        [
            ("d_total", self.d_total),
            ("g_total", self.g_total),
            ("gan_ab", self.gan_ab),
            ("gan_ba", self.gan_ba),
            ("feature_matching", self.feature_matching),
            ("identity", self.identity),
            ("cycle", self.cycle),
            ("texture", self.texture),
        ]
    }

    /// The record with timing zeroed, for run-to-run comparison.
    pub fn without_time(mut self) -> Self {
        self.wall_time = 0.0;
        self
    }
}

/// Appends rows to a CSV file, writing the header only when the file is new.
pub struct MetricsLog {
    writer: csv::Writer<File>,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { writer })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        self.writer.serialize(m)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<StepMetrics>> {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize().map(|row| Ok(row?)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appends_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = |s| StepMetrics {
            step: s,
            g_total: 1.5,
            ..Default::default()
        };
        MetricsLog::open(&path).unwrap().append(&row(1)).unwrap();
        MetricsLog::open(&path).unwrap().append(&row(2)).unwrap();
        let rows = MetricsLog::read(&path).unwrap();
        assert_eq!(rows, vec![row(1), row(2)]);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,d_total,g_total,gan_ab,gan_ba,feature_matching,identity,cycle,texture,wall_time"));
        assert_eq!(text.matches("step").count(), 1);
    }
}
