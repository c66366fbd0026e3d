use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::stats::{mean, std_dev};
use crate::error::{FaceError, Result};

/// One adaptation trial on one target subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub subject: String,
    pub trial: usize,
    pub seed: u64,
    pub shots: usize,
    /// Query samples scored (every target sample outside the support set).
    pub query_size: usize,
    pub correct: usize,
    /// `correct / query_size` after adaptation.
    pub accuracy: f64,
    /// Same query, meta-trained model before adaptation.
    pub unadapted_accuracy: f64,
    /// Same query, pretrained model with neither meta-training nor adaptation.
    pub pretrain_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub subject: String,
    pub shots: usize,
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
    pub unadapted_mean: f64,
    pub pretrain_mean: f64,
}

/// Aggregate over target subjects for one shot count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotSummary {
    pub shots: usize,
    pub subjects: usize,
    /// Mean of per-subject means.
    pub mean: f64,
    /// Standard deviation of per-subject means.
    pub std: f64,
    /// Mean over all trials regardless of subject.
    pub pooled_mean: f64,
    pub unadapted_mean: f64,
    pub pretrain_mean: f64,
}

/// Protocol checks made while the run executed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub splits_checked: usize,
    pub trials_checked: usize,
    /// Support indices that also appeared in the trial's query set.
    pub support_query_overlaps: usize,
    /// Training subjects whose id equals the split's target.
    pub target_subjects_in_training: usize,
    /// Training samples bitwise equal to some target sample.
    pub target_samples_in_training: usize,
}

impl Audit {
    pub fn is_clean(&self) -> bool {
        self.support_query_overlaps == 0
            && self.target_subjects_in_training == 0
            && self.target_samples_in_training == 0
    }

    pub fn merge(&mut self, other: &Audit) {
        self.splits_checked += other.splits_checked;
        self.trials_checked += other.trials_checked;
        self.support_query_overlaps += other.support_query_overlaps;
        self.target_subjects_in_training += other.target_subjects_in_training;
        self.target_samples_in_training += other.target_samples_in_training;
    }
}

/// Training diagnostics of one LOSO split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitLog {
    pub target: String,
    pub sources: Vec<String>,
    pub pretrain_final_loss: Option<f64>,
    pub pretrain_final_accuracy: Option<f64>,
    pub meta_final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub config: RunConfig,
    pub trials: Vec<TrialResult>,
    pub subjects: Vec<SubjectSummary>,
    pub summary: Vec<ShotSummary>,
    pub splits: Vec<SplitLog>,
    pub audit: Audit,
    /// Set when the run stopped early; the report then covers finished splits.
    pub aborted: Option<String>,
}

impl RunReport {
    pub fn new(label: impl Into<String>, config: RunConfig) -> Self {
        Self {
            label: label.into(),
            config,
            trials: Vec::new(),
            subjects: Vec::new(),
            summary: Vec::new(),
            splits: Vec::new(),
            audit: Audit::default(),
            aborted: None,
        }
    }

    /// Recomputes the subject and shot summaries from the trial records.
    pub fn summarize(&mut self) {
        let mut shots: Vec<usize> = self.trials.iter().map(|t| t.shots).collect();
        shots.sort_unstable();
        shots.dedup();
        let mut order: Vec<&str> = Vec::new();
        for t in &self.trials {
            if !order.contains(&t.subject.as_str()) {
                order.push(&t.subject);
            }
        }
        let mut subjects = Vec::new();
        let mut summary = Vec::new();
        for &k in &shots {
            let mut per_subject = Vec::new();
            for &s in &order {
                let ts: Vec<&TrialResult> = self
                    .trials
                    .iter()
                    .filter(|t| t.shots == k && t.subject == s)
                    .collect();
                if ts.is_empty() {
                    continue;
                }
                let acc: Vec<f64> = ts.iter().map(|t| t.accuracy).collect();
                let un: Vec<f64> = ts.iter().map(|t| t.unadapted_accuracy).collect();
                let pre: Vec<f64> = ts.iter().map(|t| t.pretrain_accuracy).collect();
                per_subject.push(SubjectSummary {
                    subject: s.to_string(),
                    shots: k,
                    trials: ts.len(),
                    mean: mean(&acc),
                    std: std_dev(&acc),
                    unadapted_mean: mean(&un),
                    pretrain_mean: mean(&pre),
                });
            }
            let means: Vec<f64> = per_subject.iter().map(|s| s.mean).collect();
            let pooled: Vec<f64> = self
                .trials
                .iter()
                .filter(|t| t.shots == k)
                .map(|t| t.accuracy)
                .collect();
            summary.push(ShotSummary {
                shots: k,
                subjects: per_subject.len(),
                mean: mean(&means),
                std: std_dev(&means),
                pooled_mean: mean(&pooled),
                unadapted_mean: mean(&per_subject.iter().map(|s| s.unadapted_mean).collect::<Vec<_>>()),
                pretrain_mean: mean(&per_subject.iter().map(|s| s.pretrain_mean).collect::<Vec<_>>()),
            });
            subjects.extend(per_subject);
        }
        self.subjects = subjects;
        self.summary = summary;
    }

    pub fn summary_for(&self, shots: usize) -> Option<&ShotSummary> {
        self.summary.iter().find(|s| s.shots == shots)
    }

    /// Per-subject mean accuracies at `shots`, in subject order.
    pub fn subject_means(&self, shots: usize) -> Vec<(String, f64)> {
        self.subjects
            .iter()
            .filter(|s| s.shots == shots)
            .map(|s| (s.subject.clone(), s.mean))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = FaceError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(FaceError::Config(format!("unknown report format `{other}`"))),
        }
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    row: &'static str,
    subject: &'a str,
    shots: usize,
    trial: Option<usize>,
    seed: Option<u64>,
    query_size: Option<usize>,
    correct: Option<usize>,
    accuracy: f64,
    std: Option<f64>,
    unadapted_accuracy: f64,
    pretrain_accuracy: f64,
}

const CSV_HEADER: [&str; 11] = [
    "row",
    "subject",
    "shots",
    "trial",
    "seed",
    "query_size",
    "correct",
    "accuracy",
    "std",
    "unadapted_accuracy",
    "pretrain_accuracy",
];

fn csv_bytes(report: &RunReport) -> std::result::Result<Vec<u8>, csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for t in &report.trials {
        w.serialize(CsvRow {
            row: "trial",
            subject: &t.subject,
            shots: t.shots,
            trial: Some(t.trial),
            seed: Some(t.seed),
            query_size: Some(t.query_size),
            correct: Some(t.correct),
            accuracy: t.accuracy,
            std: None,
            unadapted_accuracy: t.unadapted_accuracy,
            pretrain_accuracy: t.pretrain_accuracy,
        })?;
    }
    for s in &report.subjects {
        w.serialize(CsvRow {
            row: "subject",
            subject: &s.subject,
            shots: s.shots,
            trial: None,
            seed: None,
            query_size: None,
            correct: None,
            accuracy: s.mean,
            std: Some(s.std),
            unadapted_accuracy: s.unadapted_mean,
            pretrain_accuracy: s.pretrain_mean,
        })?;
    }
    for s in &report.summary {
        w.serialize(CsvRow {
            row: "grand",
            subject: "*",
            shots: s.shots,
            trial: None,
            seed: None,
            query_size: None,
            correct: None,
            accuracy: s.mean,
            std: Some(s.std),
            unadapted_accuracy: s.unadapted_mean,
            pretrain_accuracy: s.pretrain_mean,
        })?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

/// Writes `report` deterministically as JSON or CSV.
pub fn emit_report(report: &RunReport, path: &Path, format: ReportFormat) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).map_err(|e| FaceError::json(path, e))?;
            s.push('\n');
            s.into_bytes()
        }
        ReportFormat::Csv => csv_bytes(report).map_err(|e| {
            FaceError::io(path, std::io::Error::new(std::io::ErrorKind::Other, e))
        })?,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| FaceError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| FaceError::io(path, e))
}

/// Reads a JSON report written by [`emit_report`].
pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| FaceError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FaceError::json(path, e))
}
