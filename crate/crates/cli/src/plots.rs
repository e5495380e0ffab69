//! Plot data: summary rows reshaped into `(x, mean, sem)` series.

use crate::CliError;
use bope_core::runner::SummaryRow;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// True utility of the model's best guess, at comparison checkpoints.
    BestGuess,
    /// Highest true utility among evaluated designs, at batch checkpoints.
    MaxObserved,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::BestGuess => "best-guess",
            Metric::MaxObserved => "max-observed",
        }
    }

    fn checkpoint_type(self) -> &'static str {
        match self {
            Metric::BestGuess => "comparison",
            Metric::MaxObserved => "batch",
        }
    }
}

impl FromStr for Metric {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "best-guess" => Ok(Metric::BestGuess),
            "max-observed" => Ok(Metric::MaxObserved),
            _ => Err(CliError::Validation(format!("unknown metric '{s}'; valid: best-guess, max-observed"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XAxis {
    Comparisons,
    Evaluations,
    Checkpoint,
}

impl XAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            XAxis::Comparisons => "comparisons",
            XAxis::Evaluations => "evaluations",
            XAxis::Checkpoint => "checkpoint",
        }
    }

    /// The natural axis of a metric.
    pub fn for_metric(metric: Metric) -> Self {
        match metric {
            Metric::BestGuess => XAxis::Comparisons,
            Metric::MaxObserved => XAxis::Checkpoint,
        }
    }
}

impl FromStr for XAxis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "comparisons" => Ok(XAxis::Comparisons),
            "evaluations" => Ok(XAxis::Evaluations),
            "checkpoint" => Ok(XAxis::Checkpoint),
            _ => Err(CliError::Validation(format!("unknown x axis '{s}'; valid: comparisons, evaluations, checkpoint"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub problem: String,
    pub utility: String,
    pub strategy: String,
    pub schedule: String,
    pub x: f64,
    pub mean: f64,
    pub sem: f64,
}

/// One point per summary row carrying `metric`, ordered by series then x.
pub fn plot_points(rows: &[SummaryRow], metric: Metric, axis: XAxis) -> Vec<PlotPoint> {
    let mut points: Vec<PlotPoint> = rows
        .iter()
        .filter(|r| r.checkpoint_type == metric.checkpoint_type())
        .filter_map(|r| {
            let (mean, sem) = match metric {
                Metric::BestGuess => (r.best_guess_mean?, r.best_guess_sem.unwrap_or(0.0)),
                Metric::MaxObserved => (r.max_observed_mean?, r.max_observed_sem.unwrap_or(0.0)),
            };
            let x = match axis {
                XAxis::Comparisons => r.comparisons,
                XAxis::Evaluations => r.evaluations,
                XAxis::Checkpoint => r.checkpoint_index,
            } as f64;
            Some(PlotPoint {
                problem: r.problem.clone(),
                utility: r.utility.clone(),
                strategy: r.strategy.clone(),
                schedule: r.schedule.clone(),
                x,
                mean,
                sem,
            })
        })
        .collect();
    points.sort_by(|a, b| {
        (&a.problem, &a.utility, &a.strategy, &a.schedule)
            .cmp(&(&b.problem, &b.utility, &b.strategy, &b.schedule))
            .then(a.x.total_cmp(&b.x))
    });
    points
}

pub fn summary_from_csv(text: &str) -> Result<Vec<SummaryRow>, CliError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader.deserialize().map(|r| r.map_err(CliError::from)).collect()
}

pub fn points_to_csv(points: &[PlotPoint]) -> Result<String, CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["problem", "utility", "strategy", "schedule", "x", "mean", "sem"])?;
    for p in points {
        w.serialize(p)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Runtime(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(strategy: &str, kind: &str, idx: usize, mean: Option<f64>) -> SummaryRow {
        SummaryRow {
            problem: "p".into(),
            utility: "u".into(),
            strategy: strategy.into(),
            schedule: "interleaved".into(),
            checkpoint_type: kind.into(),
            checkpoint_index: idx,
            comparisons: idx * 5,
            evaluations: 16 + idx * 8,
            n_reps: 3,
            best_guess_mean: mean,
            best_guess_sem: mean.map(|_| 0.1),
            max_observed_mean: Some(idx as f64),
            max_observed_sem: Some(0.2),
            seconds_acq_mean: 0.0,
        }
    }

    #[test]
    fn points_follow_metric_and_axis() {
        let rows = vec![
            row("b", "comparison", 2, Some(0.5)),
            row("a", "comparison", 1, Some(0.4)),
            row("a", "comparison", 0, None),
            row("a", "batch", 1, None),
        ];
        let bg = plot_points(&rows, Metric::BestGuess, XAxis::Comparisons);
        assert_eq!(bg.len(), 2);
        assert_eq!((bg[0].strategy.as_str(), bg[0].x, bg[0].mean), ("a", 5.0, 0.4));
        let mo = plot_points(&rows, Metric::MaxObserved, XAxis::Evaluations);
        assert_eq!(mo.len(), 1);
        assert_eq!((mo[0].x, mo[0].mean, mo[0].sem), (24.0, 1.0, 0.2));
        let text = points_to_csv(&mo).unwrap();
        assert!(text.starts_with("problem,utility,strategy,schedule,x,mean,sem\n"));
        assert_eq!(text.matches("problem,").count(), 1);
    }

    #[test]
    fn summary_csv_round_trips() {
        let rows = vec![row("a", "comparison", 1, None), row("a", "batch", 2, Some(0.3))];
        let text = bope_core::runner::summary_to_csv(&rows).unwrap();
        assert_eq!(summary_from_csv(&text).unwrap(), rows);
        assert!("nope".parse::<Metric>().is_err());
        assert!("x".parse::<XAxis>().is_err());
    }
}
