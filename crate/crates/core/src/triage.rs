//! Expert cluster labels, radius-vote propagation to field windows,
//! recording verdicts and evaluation against ground truth.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cluster::{squared_distance, ClusterAssignment};
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::par;

/// Positive windows a recording needs to be called positive.
pub const MIN_POSITIVE_WINDOWS: usize = 2;
/// Neighbour rank used by radius calibration.
pub const CALIBRATION_RANK: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClusterLabel {
    Call,
    Noise,
    #[default]
    Unlabeled,
}

impl std::str::FromStr for ClusterLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "call" => Ok(ClusterLabel::Call),
            "noise" => Ok(ClusterLabel::Noise),
            "unlabeled" => Ok(ClusterLabel::Unlabeled),
            other => Err(Error::invalid(format!("unknown cluster label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LabelEntry {
    pub label: ClusterLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
    /// Seconds since the Unix epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLabelMap {
    pub k: usize,
    pub labels: BTreeMap<usize, LabelEntry>,
}

impl ClusterLabelMap {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            labels: (0..k).map(|c| (c, LabelEntry::default())).collect(),
        }
    }

    pub fn get(&self, cluster: usize) -> ClusterLabel {
        self.labels.get(&cluster).map_or(ClusterLabel::Unlabeled, |e| e.label)
    }

    /// Records a label. Re-submitting the current label leaves the entry,
    /// including its timestamp, untouched; returns whether anything changed.
    pub fn set(
        &mut self,
        cluster: usize,
        label: ClusterLabel,
        annotator: Option<String>,
        timestamp: Option<u64>,
    ) -> Result<bool> {
        if cluster >= self.k {
            return Err(Error::NotFound(format!("cluster {cluster}")));
        }
        let entry = self.labels.entry(cluster).or_default();
        if entry.label == label && entry.annotator == annotator {
            return Ok(false);
        }
        *entry = LabelEntry {
            label,
            annotator,
            timestamp,
        };
        Ok(true)
    }

    pub fn any_labeled(&self) -> bool {
        self.labels.values().any(|e| e.label != ClusterLabel::Unlabeled)
    }

    pub fn unlabeled(&self) -> Vec<usize> {
        (0..self.k)
            .filter(|&c| self.get(c) == ClusterLabel::Unlabeled)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub radius: Option<f64>,
    pub auto_calibrate: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            radius: None,
            auto_calibrate: true,
        }
    }
}

impl PropagationConfig {
    /// The radius to use: an explicit value wins, otherwise the calibrated one.
    pub fn resolve(&self, reference: &EmbeddingMatrix) -> Result<f64> {
        match self.radius {
            Some(r) if r > 0.0 && r.is_finite() => Ok(r),
            Some(r) => Err(Error::Config(format!("propagation radius must be positive, got {r}"))),
            None if self.auto_calibrate => calibrate_radius(&reference.to_f64_rows()),
            None => Err(Error::Config(
                "no propagation radius set and auto-calibration disabled".into(),
            )),
        }
    }
}

/// Median over points of the distance to their 5th nearest neighbour.
pub fn calibrate_radius(rows: &[Vec<f64>]) -> Result<f64> {
    let n = rows.len();
    if n <= CALIBRATION_RANK {
        return Err(Error::invalid(format!(
            "radius calibration needs at least {} points, got {n}",
            CALIBRATION_RANK + 1
        )));
    }
    let mut kth = par::map_range(n, |i| {
        let mut d: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| squared_distance(&rows[i], &rows[j]))
            .collect();
        let (_, v, _) = d.select_nth_unstable_by(CALIBRATION_RANK - 1, f64::total_cmp);
        v.sqrt()
    });
    kth.sort_by(f64::total_cmp);
    let tau = if n % 2 == 1 {
        kth[n / 2]
    } else {
        0.5 * (kth[n / 2 - 1] + kth[n / 2])
    };
    if tau <= 0.0 {
        return Err(Error::invalid("calibrated radius is 0 (duplicated reference points)"));
    }
    Ok(tau)
}

/// Field windows with their propagated cluster (`None` = unassigned).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldAssignment {
    pub window_ids: Vec<String>,
    pub clusters: Vec<Option<usize>>,
    pub radius_bits: u64,
}

impl FieldAssignment {
    pub fn radius(&self) -> f64 {
        f64::from_bits(self.radius_bits)
    }

    pub fn assigned(&self) -> usize {
        self.clusters.iter().filter(|c| c.is_some()).count()
    }

    pub fn unassigned(&self) -> usize {
        self.clusters.len() - self.assigned()
    }
}

/// Modal cluster among `(cluster, squared distance, window_id)` votes. A tie
/// between modal clusters goes to the nearest vote among those clusters, and
/// equal distances to the lexicographically lowest window id.
pub fn modal_cluster<'a>(votes: impl IntoIterator<Item = (usize, f64, &'a str)>) -> Option<usize> {
    let votes: Vec<(usize, f64, &str)> = votes.into_iter().collect();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for v in &votes {
        *counts.entry(v.0).or_default() += 1;
    }
    let top = *counts.values().max()?;
    let tied: BTreeSet<usize> = counts.iter().filter(|(_, &n)| n == top).map(|(&c, _)| c).collect();
    if tied.len() == 1 {
        return tied.first().copied();
    }
    votes
        .iter()
        .filter(|v| tied.contains(&v.0))
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.2.cmp(b.2)))
        .map(|v| v.0)
}

/// Assigns each field window the modal reference cluster within `radius`.
pub fn propagate(
    field: &EmbeddingMatrix,
    reference: &EmbeddingMatrix,
    ref_assign: &ClusterAssignment,
    radius: f64,
) -> Result<FieldAssignment> {
    if field.dim != reference.dim {
        return Err(Error::Config(format!(
            "field embeddings have dim {} but reference has {}",
            field.dim, reference.dim
        )));
    }
    if field.backend != reference.backend {
        return Err(Error::Config(format!(
            "field embeddings come from {} but reference from {}",
            field.backend.as_str(),
            reference.backend.as_str()
        )));
    }
    if ref_assign.window_ids != reference.window_ids {
        return Err(Error::Config(
            "cluster assignment is not aligned with reference embeddings".into(),
        ));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!(
            "propagation radius must be positive, got {radius}"
        )));
    }
    let r2 = radius * radius;
    let refs = reference.to_f64_rows();
    let clusters = par::map_range(field.rows(), |i| {
        let x: Vec<f64> = field.row(i).iter().map(|&v| f64::from(v)).collect();
        let votes = refs.iter().enumerate().filter_map(|(j, r)| {
            let d2 = squared_distance(&x, r);
            (d2 <= r2).then(|| (ref_assign.clusters[j], d2, reference.window_ids[j].as_str()))
        });
        modal_cluster(votes)
    });
    Ok(FieldAssignment {
        window_ids: field.window_ids.clone(),
        clusters,
        radius_bits: radius.to_bits(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowVerdict {
    pub window_id: String,
    pub cluster: Option<usize>,
    pub verdict: Verdict,
}

pub fn window_verdict(window_id: &str, cluster: Option<usize>, labels: &ClusterLabelMap) -> WindowVerdict {
    let positive = cluster.is_some_and(|c| labels.get(c) == ClusterLabel::Call);
    WindowVerdict {
        window_id: window_id.to_string(),
        cluster,
        verdict: if positive { Verdict::Positive } else { Verdict::Negative },
    }
}

pub fn window_verdicts(assignment: &FieldAssignment, labels: &ClusterLabelMap) -> Vec<WindowVerdict> {
    assignment
        .window_ids
        .iter()
        .zip(&assignment.clusters)
        .map(|(id, &c)| window_verdict(id, c, labels))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingVerdict {
    pub recording_id: String,
    pub positive_window_count: usize,
    pub verdict: Verdict,
}

pub fn recording_verdict<'a>(
    windows: impl IntoIterator<Item = &'a WindowVerdict>,
    recording_id: &str,
) -> RecordingVerdict {
    let positive_window_count = windows.into_iter().filter(|w| w.verdict == Verdict::Positive).count();
    RecordingVerdict {
        recording_id: recording_id.to_string(),
        positive_window_count,
        verdict: if positive_window_count >= MIN_POSITIVE_WINDOWS {
            Verdict::Positive
        } else {
            Verdict::Negative
        },
    }
}

/// One verdict per recording in `recordings`, grouping windows through
/// `recording_of`. Recordings without any surviving window are negative.
pub fn recording_verdicts(
    windows: &[WindowVerdict],
    recording_of: &BTreeMap<String, String>,
    recordings: &[String],
) -> Result<Vec<RecordingVerdict>> {
    let mut grouped: BTreeMap<&str, Vec<&WindowVerdict>> = BTreeMap::new();
    for w in windows {
        let rec = recording_of
            .get(&w.window_id)
            .ok_or_else(|| Error::NotFound(format!("window {}", w.window_id)))?;
        grouped.entry(rec.as_str()).or_default().push(w);
    }
    Ok(recordings
        .iter()
        .map(|r| recording_verdict(grouped.get(r.as_str()).into_iter().flatten().copied(), r))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    /// False when nothing was predicted positive and precision is reported as 0.
    pub precision_defined: bool,
    pub recall: f64,
    pub baseline_precision: f64,
    pub precision_improvement: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion counts and ratios at recording level.
pub fn evaluate(verdicts: &[RecordingVerdict], truth: &BTreeMap<String, bool>) -> Result<MetricsReport> {
    let missing: Vec<String> = verdicts
        .iter()
        .filter(|v| !truth.contains_key(&v.recording_id))
        .map(|v| v.recording_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTruth(missing));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for v in verdicts {
        match (v.verdict == Verdict::Positive, truth[&v.recording_id]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let n = verdicts.len();
    let precision = ratio(tp, tp + fp);
    let baseline_precision = ratio(tp + fn_, n);
    Ok(MetricsReport {
        tp,
        fp,
        fn_,
        tn,
        accuracy: ratio(tp + tn, n),
        precision,
        precision_defined: tp + fp > 0,
        recall: ratio(tp, tp + fn_),
        baseline_precision,
        precision_improvement: precision - baseline_precision,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    recording_id: String,
    true_positive: u8,
}

/// Parses `recording_id,true_positive` CSV (header required, values 0/1).
pub fn parse_truth_csv(text: &str) -> Result<BTreeMap<String, bool>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut truth = BTreeMap::new();
    for (line, row) in reader.deserialize::<TruthRow>().enumerate() {
        let row = row.map_err(|e| Error::Decode(format!("truth csv row {}: {e}", line + 2)))?;
        let value = match row.true_positive {
            0 => false,
            1 => true,
            v => {
                return Err(Error::Decode(format!(
                    "truth csv row {}: true_positive must be 0 or 1, got {v}",
                    line + 2
                )))
            }
        };
        truth.insert(row.recording_id, value);
    }
    Ok(truth)
}

pub fn truth_csv(truth: &BTreeMap<String, bool>) -> String {
    let mut out = String::from("recording_id,true_positive\n");
    for (id, &v) in truth {
        out.push_str(&format!("{id},{}\n", u8::from(v)));
    }
    out
}
