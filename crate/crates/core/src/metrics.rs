//! Accuracy matrix and the average performance / forgetting summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("accuracy of an empty split".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// `a[i][j]`: accuracy on task `j` after training task `i`, `j ≤ i`,
/// zero-based.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push(r)?;
        }
        Ok(m)
    }

    /// Appends the next stage; it must score exactly the tasks seen so far.
    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Invalid(format!(
                "stage {} needs {} accuracies, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(a) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Invalid(format!("accuracy {a} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Mean accuracy over the tasks seen at `stage` (one-based).
    pub fn ap(&self, stage: usize) -> f64 {
        let r = &self.rows[stage - 1];
        r.iter().sum::<f64>() / r.len() as f64
    }

    /// Mean drop from each earlier task's best accuracy up to `stage`;
    /// `None` at the first stage.
    pub fn af(&self, stage: usize) -> Option<f64> {
        if stage < 2 {
            return None;
        }
        let i = stage - 1;
        let total: f64 = (0..i)
            .map(|j| {
                let best = (j..=i).map(|k| self.rows[k][j]).fold(f64::NEG_INFINITY, f64::max);
                best - self.rows[i][j]
            })
            .sum();
        Some(total / i as f64)
    }

    pub fn report(&self) -> MetricReport {
        let stages: Vec<StageMetrics> = (1..=self.stages())
            .map(|s| StageMetrics {
                stage: s,
                accuracy: self.rows[s - 1].clone(),
                ap: self.ap(s),
                af: self.af(s),
            })
            .collect();
        MetricReport {
            final_ap: stages.last().map(|s| s.ap),
            final_af: stages.last().and_then(|s| s.af),
            stages,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: usize,
    /// Accuracy on each task trained so far.
    pub accuracy: Vec<f64>,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AF")]
    pub af: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub stages: Vec<StageMetrics>,
    #[serde(rename = "final_AP")]
    pub final_ap: Option<f64>,
    #[serde(rename = "final_AF")]
    pub final_af: Option<f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Long format: one `stage,task,accuracy` row per cell, then one
    /// `stage,,,AP,AF` summary row per stage. Stages and tasks are one-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,task,accuracy,AP,AF\n");
        for s in &self.stages {
            for (j, a) in s.accuracy.iter().enumerate() {
                out.push_str(&format!("{},{},{},,\n", s.stage, j + 1, a));
            }
        }
        for s in &self.stages {
            let af = s.af.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},,,{},{}\n", s.stage, s.ap, af));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_stage_example() {
        let m = AccuracyMatrix::from_rows(vec![vec![1.0], vec![0.8, 0.9]]).unwrap();
        // 0.8 + 0.9 rounds up in binary, so compare bitwise against the
        // formula and within two ulps against the decimal value
        assert_eq!(m.ap(2), (0.8 + 0.9) / 2.0);
        assert_eq!(m.af(2).unwrap(), 1.0 - 0.8);
        assert!((m.ap(2) - 0.85).abs() <= 2.0 * f64::EPSILON * 0.85);
        assert!((m.af(2).unwrap() - 0.2).abs() <= 2.0 * f64::EPSILON * 0.2);
        assert_eq!(m.af(1), None);
    }

    #[test]
    fn rejects_ragged_rows() {
        assert!(AccuracyMatrix::from_rows(vec![vec![1.0, 0.5]]).is_err());
        assert!(AccuracyMatrix::from_rows(vec![vec![1.5]]).is_err());
    }

    #[test]
    fn accuracy_counts_hits() {
        assert_eq!(accuracy(&[1, 2, 3, 3], &[1, 2, 0, 3]).unwrap(), 0.75);
        assert!(accuracy::<usize>(&[], &[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = AccuracyMatrix::from_rows(vec![vec![1.0], vec![0.5, 0.75]]).unwrap();
        let csv = m.report().to_csv();
        assert_eq!(
            csv,
            "stage,task,accuracy,AP,AF\n1,1,1,,\n2,1,0.5,,\n2,2,0.75,,\n1,,,1,\n2,,,0.625,0.5\n"
        );
    }
}
