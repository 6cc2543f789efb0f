//! On-disk project directory.
//!
//! ```text
//! config.json          ProjectConfig
//! status.json          stage records (see Stage)
//! corpus/reference/    *.wav
//! corpus/field/        *.wav
//! windows.jsonl        one WindowRecord per window, both roles
//! specs.bin            AEMB1, 10000 columns, rows aligned with windows.jsonl
//! detector.jsonl       detector score and keep flag per window
//! embeddings/          {reference,field}.aemb (+ manifests), backend.json, autoencoder.ckpt
//! clusters/            assignment.jsonl, centroids.aemb, header.json, propagation.json
//! labels.json          ClusterLabelMap
//! projection.jsonl     ProjectionRow per window and method
//! verdicts.json        window and recording verdicts
//! truth.csv            optional ground truth
//! metrics.json         MetricsReport
//! ```
//!
//! Every stage records a sequence number and the sequence numbers of its
//! inputs when it completes. Re-running a stage leaves downstream artifacts on
//! disk but makes them stale, and loading a stale artifact is a dependency
//! error.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoenc::{Arch, TrainConfig, TrainReport};
use crate::cluster::{ClusterAssignment, KMeansModel};
use crate::dsp::{DetectorConfig, MelConfig, MelSpectrogram, StftConfig, SPEC_PIXELS};
use crate::embed::{export_embeddings, import_embeddings, BackendSpec, BackendTag, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, jsonl_bytes, read_jsonl};
use crate::ingest::{CorpusRole, WindowConfig, PIPELINE_SAMPLE_RATE};
use crate::project2d::{ProjectionMethod, UmapConfig};
use crate::synthlab::EventAnnotation;
use crate::triage::{
    parse_truth_csv, truth_csv, ClusterLabelMap, FieldAssignment, MetricsReport, PropagationConfig, RecordingVerdict,
    WindowVerdict,
};

pub const CONFIG_FILE: &str = "config.json";
pub const STATUS_FILE: &str = "status.json";
pub const WINDOWS_FILE: &str = "windows.jsonl";
pub const SPECS_FILE: &str = "specs.bin";
pub const DETECTOR_FILE: &str = "detector.jsonl";
pub const LABELS_FILE: &str = "labels.json";
pub const PROJECTION_FILE: &str = "projection.jsonl";
pub const VERDICTS_FILE: &str = "verdicts.json";
pub const TRUTH_FILE: &str = "truth.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CHECKPOINT_FILE: &str = "embeddings/autoencoder.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSettings {
    pub k: usize,
    pub n_init: usize,
    pub max_iter: usize,
    /// Cluster on unit-normalised rows instead of raw embeddings.
    pub l2_normalize: bool,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        Self {
            k: crate::cluster::DEFAULT_K,
            n_init: 8,
            max_iter: 300,
            l2_normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub sample_rate: u32,
    pub window: WindowConfig,
    pub stft: StftConfig,
    pub mel: MelConfig,
    pub detector: DetectorConfig,
    pub backend: BackendSpec,
    pub autoencoder: Arch,
    pub train: TrainConfig,
    pub cluster: ClusterSettings,
    pub umap: UmapConfig,
    pub propagation: PropagationConfig,
    /// Default seed for stochastic stages when none is given.
    pub seed: u64,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            sample_rate: PIPELINE_SAMPLE_RATE,
            window: WindowConfig::default(),
            stft: StftConfig::default(),
            mel: MelConfig::default(),
            detector: DetectorConfig::default(),
            backend: BackendSpec::BaselineFlatten,
            autoencoder: Arch::FULL,
            train: TrainConfig::default(),
            cluster: ClusterSettings::default(),
            umap: UmapConfig::default(),
            propagation: PropagationConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingested,
    Spectrogrammed,
    Embedded,
    Clustered,
    Projected,
    Labeled,
    Propagated,
    Evaluated,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingested,
        Stage::Spectrogrammed,
        Stage::Embedded,
        Stage::Clustered,
        Stage::Projected,
        Stage::Labeled,
        Stage::Propagated,
        Stage::Evaluated,
    ];

    pub fn inputs(self) -> &'static [Stage] {
        match self {
            Stage::Ingested => &[],
            Stage::Spectrogrammed => &[Stage::Ingested],
            Stage::Embedded => &[Stage::Spectrogrammed],
            Stage::Clustered | Stage::Projected => &[Stage::Embedded],
            Stage::Labeled => &[Stage::Clustered],
            Stage::Propagated => &[Stage::Labeled],
            Stage::Evaluated => &[Stage::Propagated],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingested => "ingested",
            Stage::Spectrogrammed => "spectrogrammed",
            Stage::Embedded => "embedded",
            Stage::Clustered => "clustered",
            Stage::Projected => "projected",
            Stage::Labeled => "labeled",
            Stage::Propagated => "propagated",
            Stage::Evaluated => "evaluated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seq: u64,
    pub inputs: BTreeMap<Stage, u64>,
    /// Whatever the stage runner chose to record (seed, k, radius, ...).
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub next_seq: u64,
    pub stages: BTreeMap<Stage, StageRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageState {
    Missing,
    Stale,
    Complete,
}

impl Status {
    /// The first stage, walking inputs depth first, that is missing or was
    /// produced from inputs that have since changed.
    pub fn first_unmet(&self, stage: Stage) -> Option<Stage> {
        for &dep in stage.inputs() {
            if let Some(s) = self.first_unmet(dep) {
                return Some(s);
            }
        }
        let Some(rec) = self.stages.get(&stage) else {
            return Some(stage);
        };
        let current = stage
            .inputs()
            .iter()
            .all(|d| self.stages.get(d).map(|r| r.seq) == rec.inputs.get(d).copied());
        if current {
            None
        } else {
            Some(stage)
        }
    }

    pub fn state(&self, stage: Stage) -> StageState {
        if !self.stages.contains_key(&stage) {
            StageState::Missing
        } else if self.first_unmet(stage).is_some() {
            StageState::Stale
        } else {
            StageState::Complete
        }
    }

    pub fn states(&self) -> BTreeMap<Stage, StageState> {
        Stage::ALL.iter().map(|&s| (s, self.state(s))).collect()
    }
}

/// Manifest entry for one analysis window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub window_id: String,
    pub recording_id: String,
    pub start_s: f64,
    pub corpus_role: CorpusRole,
    #[serde(default)]
    pub padded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorRecord {
    pub window_id: String,
    pub score: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingInfo {
    pub backend: BackendTag,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterHeader {
    pub k: usize,
    pub dim: usize,
    pub inertia: f64,
    pub seed: u64,
    pub iterations: usize,
    pub backend: BackendTag,
    pub l2_normalize: bool,
    pub silhouette: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AssignmentRow {
    window_id: String,
    cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub window_id: String,
    pub x: f64,
    pub y: f64,
    pub corpus_role: CorpusRole,
    pub method: ProjectionMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationRecord {
    pub radius: f64,
    pub calibrated: bool,
    /// Sequence number of the clustering the assignment was computed from.
    pub clustered_seq: u64,
    pub assignment: FieldAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictsReport {
    pub radius: f64,
    pub assigned: usize,
    pub unassigned: usize,
    pub windows: Vec<WindowVerdict>,
    pub recordings: Vec<RecordingVerdict>,
}

#[derive(Debug, Clone)]
pub struct Project {
    root: PathBuf,
    pub config: ProjectConfig,
    status: Status,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => e.into(),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

impl Project {
    /// Creates the directory layout under `root`, which must be absent or empty.
    pub fn init(root: &Path, config: ProjectConfig) -> Result<Project> {
        if root.exists() && fs::read_dir(root)?.next().is_some() {
            return Err(Error::NotEmpty(root.to_path_buf()));
        }
        for dir in ["corpus/reference", "corpus/field", "embeddings", "clusters"] {
            fs::create_dir_all(root.join(dir))?;
        }
        let project = Project {
            root: root.to_path_buf(),
            config,
            status: Status::default(),
        };
        project.save_config()?;
        write_json(&project.path(STATUS_FILE), &project.status)?;
        Ok(project)
    }

    pub fn open(root: &Path) -> Result<Project> {
        let config_path = root.join(CONFIG_FILE);
        if !config_path.exists() {
            return Err(Error::NotFound(format!("no project at {}", root.display())));
        }
        Ok(Project {
            root: root.to_path_buf(),
            config: read_json(&config_path)?,
            status: read_json(&root.join(STATUS_FILE))?,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn corpus_dir(&self, role: CorpusRole) -> PathBuf {
        self.root.join("corpus").join(role.as_str())
    }

    fn embedding_path(&self, role: CorpusRole) -> PathBuf {
        self.root.join("embeddings").join(format!("{}.aemb", role.as_str()))
    }

    pub fn save_config(&self) -> Result<()> {
        write_json(&self.path(CONFIG_FILE), &self.config)
    }

    pub fn status(&self) -> &Status {
        &self.status
    }

    /// Re-reads `status.json`, picking up stages completed by another process.
    pub fn reload_status(&mut self) -> Result<()> {
        self.status = read_json(&self.path(STATUS_FILE))?;
        Ok(())
    }

    /// Fails unless `stage` and everything it depends on is current.
    pub fn require(&self, stage: Stage, needed_by: &str) -> Result<()> {
        match self.status.first_unmet(stage) {
            None => Ok(()),
            Some(missing) => Err(Error::Dependency {
                stage: needed_by.to_string(),
                missing: missing.as_str().to_string(),
            }),
        }
    }

    fn require_inputs(&self, stage: Stage) -> Result<()> {
        for &dep in stage.inputs() {
            self.require(dep, stage.as_str())?;
        }
        Ok(())
    }

    fn mark(&mut self, stage: Stage, params: serde_json::Value) -> Result<()> {
        let inputs = stage
            .inputs()
            .iter()
            .filter_map(|d| self.status.stages.get(d).map(|r| (*d, r.seq)))
            .collect();
        let seq = self.status.next_seq;
        self.status.next_seq += 1;
        self.status.stages.insert(stage, StageRecord { seq, inputs, params });
        write_json(&self.path(STATUS_FILE), &self.status)
    }

    pub fn save_windows(&mut self, windows: &[WindowRecord], params: serde_json::Value) -> Result<()> {
        let mut seen = HashSet::new();
        for w in windows {
            if !seen.insert(w.window_id.as_str()) {
                return Err(Error::invalid(format!("duplicate window id `{}`", w.window_id)));
            }
        }
        atomic_write(&self.path(WINDOWS_FILE), &jsonl_bytes(windows)?)?;
        self.mark(Stage::Ingested, params)
    }

    pub fn load_windows(&self) -> Result<Vec<WindowRecord>> {
        self.require(Stage::Ingested, "windows")?;
        read_jsonl(&self.path(WINDOWS_FILE))
    }

    /// Spectrograms and detector results, both aligned with `windows.jsonl`.
    pub fn save_spectrograms(
        &mut self,
        specs: &[MelSpectrogram],
        detector: &[DetectorRecord],
        params: serde_json::Value,
    ) -> Result<()> {
        self.require_inputs(Stage::Spectrogrammed)?;
        let windows = self.load_windows()?;
        check_aligned(&windows, specs.iter().map(|s| s.window_id.as_str()), SPECS_FILE)?;
        check_aligned(&windows, detector.iter().map(|d| d.window_id.as_str()), DETECTOR_FILE)?;
        let data: Vec<f32> = specs.iter().flat_map(|s| s.values.iter().copied()).collect();
        let matrix = EmbeddingMatrix::new(
            specs.iter().map(|s| s.window_id.clone()).collect(),
            SPEC_PIXELS,
            data,
            BackendTag::BaselineFlatten,
        )?;
        atomic_write(&self.path(DETECTOR_FILE), &jsonl_bytes(detector)?)?;
        export_embeddings(&matrix, &self.path(SPECS_FILE))?;
        self.mark(Stage::Spectrogrammed, params)
    }

    pub fn load_spectrograms(&self) -> Result<Vec<MelSpectrogram>> {
        self.require(Stage::Spectrogrammed, "spectrograms")?;
        let windows = self.load_windows()?;
        let matrix = import_embeddings(&self.path(SPECS_FILE))?;
        if matrix.dim != SPEC_PIXELS {
            return Err(Error::format(
                6,
                format!("{SPECS_FILE} has {} columns, expected {SPEC_PIXELS}", matrix.dim),
            ));
        }
        check_aligned(&windows, matrix.window_ids.iter().map(String::as_str), SPECS_FILE)?;
        (0..matrix.rows())
            .map(|i| MelSpectrogram::new(matrix.window_ids[i].clone(), matrix.row(i).to_vec()))
            .collect()
    }

    pub fn load_detector(&self) -> Result<Vec<DetectorRecord>> {
        self.require(Stage::Spectrogrammed, "detector scores")?;
        read_jsonl(&self.path(DETECTOR_FILE))
    }

    /// Windows of `role` that passed the detector, in manifest order.
    pub fn kept_windows(&self, role: CorpusRole) -> Result<Vec<WindowRecord>> {
        let windows = self.load_windows()?;
        let detector = self.load_detector()?;
        check_aligned(&windows, detector.iter().map(|d| d.window_id.as_str()), DETECTOR_FILE)?;
        Ok(windows
            .into_iter()
            .zip(detector)
            .filter(|(w, d)| w.corpus_role == role && d.kept)
            .map(|(w, _)| w)
            .collect())
    }

    pub fn save_embeddings(
        &mut self,
        reference: &EmbeddingMatrix,
        field: &EmbeddingMatrix,
        params: serde_json::Value,
    ) -> Result<()> {
        self.require_inputs(Stage::Embedded)?;
        if reference.dim != field.dim || reference.backend != field.backend {
            return Err(Error::Config(
                "reference and field embeddings disagree on backend or dimension".into(),
            ));
        }
        for (role, matrix) in [(CorpusRole::Reference, reference), (CorpusRole::Field, field)] {
            let kept = self.kept_windows(role)?;
            check_aligned(&kept, matrix.window_ids.iter().map(String::as_str), role.as_str())?;
        }
        for (role, matrix) in [(CorpusRole::Reference, reference), (CorpusRole::Field, field)] {
            export_embeddings(matrix, &self.embedding_path(role))?;
        }
        write_json(
            &self.path("embeddings/backend.json"),
            &EmbeddingInfo {
                backend: reference.backend,
                dim: reference.dim,
            },
        )?;
        self.mark(Stage::Embedded, params)
    }

    pub fn load_embeddings(&self, role: CorpusRole) -> Result<EmbeddingMatrix> {
        self.require(Stage::Embedded, "embeddings")?;
        let info: EmbeddingInfo = read_json(&self.path("embeddings/backend.json"))?;
        let mut matrix = import_embeddings(&self.embedding_path(role))?;
        matrix.backend = info.backend;
        let kept = self.kept_windows(role)?;
        check_aligned(&kept, matrix.window_ids.iter().map(String::as_str), role.as_str())?;
        Ok(matrix)
    }

    pub fn save_checkpoint(&self, checkpoint: &[u8], report: &TrainReport) -> Result<()> {
        write_json(&self.path("embeddings/train_report.json"), report)?;
        atomic_write(&self.path(CHECKPOINT_FILE), checkpoint)
    }

    /// Persists a clustering and resets the labels for the new cluster ids.
    pub fn save_clusters(
        &mut self,
        model: &KMeansModel,
        assignment: &ClusterAssignment,
        header: &ClusterHeader,
    ) -> Result<()> {
        self.require_inputs(Stage::Clustered)?;
        let kept = self.kept_windows(CorpusRole::Reference)?;
        check_aligned(
            &kept,
            assignment.window_ids.iter().map(String::as_str),
            "cluster assignment",
        )?;
        let rows = assignment
            .window_ids
            .iter()
            .zip(&assignment.clusters)
            .map(|(w, &c)| AssignmentRow {
                window_id: w.clone(),
                cluster: c,
            });
        atomic_write(&self.path("clusters/assignment.jsonl"), &jsonl_bytes(rows)?)?;
        let centroids = EmbeddingMatrix::new(
            (0..model.k).map(|c| format!("centroid_{c:02}")).collect(),
            model.dim,
            model.centroids.iter().map(|&v| v as f32).collect(),
            header.backend,
        )?;
        export_embeddings(&centroids, &self.path("clusters/centroids.aemb"))?;
        write_json(&self.path("clusters/header.json"), header)?;
        write_json(&self.path(LABELS_FILE), &ClusterLabelMap::new(model.k))?;
        let params = serde_json::json!({ "k": header.k, "seed": header.seed, "l2_normalize": header.l2_normalize });
        self.mark(Stage::Clustered, params)
    }

    pub fn load_clusters(&self) -> Result<(ClusterHeader, ClusterAssignment)> {
        self.require(Stage::Clustered, "clusters")?;
        let header: ClusterHeader = read_json(&self.path("clusters/header.json"))?;
        let rows: Vec<AssignmentRow> = read_jsonl(&self.path("clusters/assignment.jsonl"))?;
        let kept = self.kept_windows(CorpusRole::Reference)?;
        check_aligned(&kept, rows.iter().map(|r| r.window_id.as_str()), "cluster assignment")?;
        if let Some(r) = rows.iter().find(|r| r.cluster >= header.k) {
            return Err(Error::format(
                0,
                format!("window `{}` assigned to cluster {} >= k", r.window_id, r.cluster),
            ));
        }
        let assignment = ClusterAssignment {
            window_ids: rows.iter().map(|r| r.window_id.clone()).collect(),
            clusters: rows.iter().map(|r| r.cluster).collect(),
            k: header.k,
        };
        Ok((header, assignment))
    }

    /// Current labels; every cluster starts out unlabeled.
    pub fn load_labels(&self) -> Result<ClusterLabelMap> {
        self.require(Stage::Clustered, "labels")?;
        let labels: ClusterLabelMap = read_json(&self.path(LABELS_FILE))?;
        let header: ClusterHeader = read_json(&self.path("clusters/header.json"))?;
        if labels.k != header.k {
            return Err(Error::Config(format!(
                "{LABELS_FILE} is for k={}, clustering has k={}",
                labels.k, header.k
            )));
        }
        Ok(labels)
    }

    pub fn save_labels(&mut self, labels: &ClusterLabelMap) -> Result<()> {
        self.require_inputs(Stage::Labeled)?;
        write_json(&self.path(LABELS_FILE), labels)?;
        if labels.any_labeled() {
            self.mark(Stage::Labeled, serde_json::Value::Null)
        } else {
            self.status.stages.remove(&Stage::Labeled);
            write_json(&self.path(STATUS_FILE), &self.status)
        }
    }

    /// Replaces the rows for `method`; rows for the other method survive
    /// only if they were computed from the current embeddings.
    pub fn save_projection(
        &mut self,
        method: ProjectionMethod,
        rows: &[ProjectionRow],
        params: serde_json::Value,
    ) -> Result<()> {
        self.require_inputs(Stage::Projected)?;
        if rows.iter().any(|r| r.method != method) {
            return Err(Error::invalid("projection rows disagree on method"));
        }
        let mut all: Vec<ProjectionRow> = match self.status.state(Stage::Projected) {
            StageState::Complete => read_jsonl::<ProjectionRow>(&self.path(PROJECTION_FILE))?
                .into_iter()
                .filter(|r| r.method != method)
                .collect(),
            _ => Vec::new(),
        };
        all.extend_from_slice(rows);
        atomic_write(&self.path(PROJECTION_FILE), &jsonl_bytes(&all)?)?;
        self.mark(Stage::Projected, params)
    }

    pub fn load_projection(&self, method: ProjectionMethod) -> Result<Vec<ProjectionRow>> {
        self.require(Stage::Projected, "projection")?;
        let rows: Vec<ProjectionRow> = read_jsonl::<ProjectionRow>(&self.path(PROJECTION_FILE))?
            .into_iter()
            .filter(|r| r.method == method)
            .collect();
        if rows.is_empty() {
            return Err(Error::NotFound(format!("no {} projection computed", method.as_str())));
        }
        Ok(rows)
    }

    pub fn save_propagation(&mut self, record: &PropagationRecord, verdicts: &VerdictsReport) -> Result<()> {
        self.require_inputs(Stage::Propagated)?;
        write_json(&self.path("clusters/propagation.json"), record)?;
        write_json(&self.path(VERDICTS_FILE), verdicts)?;
        let params = serde_json::json!({ "radius": record.radius, "calibrated": record.calibrated });
        self.mark(Stage::Propagated, params)
    }

    /// The stored field assignment, valid as long as the clustering it was
    /// computed from is current. Labels may have changed since.
    pub fn load_propagation(&self) -> Result<PropagationRecord> {
        self.require(Stage::Clustered, "propagation")?;
        let path = self.path("clusters/propagation.json");
        let stale = || Error::Dependency {
            stage: "verdict".into(),
            missing: Stage::Propagated.as_str().into(),
        };
        if !path.exists() {
            return Err(stale());
        }
        let record: PropagationRecord = read_json(&path)?;
        if Some(record.clustered_seq) != self.status.stages.get(&Stage::Clustered).map(|r| r.seq) {
            return Err(stale());
        }
        Ok(record)
    }

    pub fn clustered_seq(&self) -> Option<u64> {
        self.status.stages.get(&Stage::Clustered).map(|r| r.seq)
    }

    pub fn load_verdicts(&self) -> Result<VerdictsReport> {
        self.require(Stage::Propagated, "verdicts")?;
        read_json(&self.path(VERDICTS_FILE))
    }

    pub fn save_truth(&self, truth: &BTreeMap<String, bool>) -> Result<()> {
        atomic_write(&self.path(TRUTH_FILE), truth_csv(truth).as_bytes())
    }

    pub fn load_truth(&self) -> Result<Option<BTreeMap<String, bool>>> {
        let path = self.path(TRUTH_FILE);
        if !path.exists() {
            return Ok(None);
        }
        parse_truth_csv(&fs::read_to_string(path)?).map(Some)
    }

    pub fn load_events(&self) -> Result<Option<Vec<EventAnnotation>>> {
        let path = self.path(EVENTS_FILE);
        if !path.exists() {
            return Ok(None);
        }
        read_jsonl(&path).map(Some)
    }

    pub fn save_metrics(&mut self, metrics: &MetricsReport) -> Result<()> {
        self.require_inputs(Stage::Evaluated)?;
        write_json(&self.path(METRICS_FILE), metrics)?;
        self.mark(Stage::Evaluated, serde_json::Value::Null)
    }

    pub fn load_metrics(&self) -> Result<MetricsReport> {
        self.require(Stage::Evaluated, "metrics")?;
        read_json(&self.path(METRICS_FILE))
    }
}

fn check_aligned<'a>(expected: &[WindowRecord], ids: impl ExactSizeIterator<Item = &'a str>, what: &str) -> Result<()> {
    if ids.len() != expected.len() {
        return Err(Error::format(
            0,
            format!("{what} has {} rows, manifest has {}", ids.len(), expected.len()),
        ));
    }
    for (row, (w, id)) in expected.iter().zip(ids).enumerate() {
        if w.window_id != id {
            return Err(Error::format(
                0,
                format!("{what} row {row} is `{id}`, manifest expects `{}`", w.window_id),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn windows(n: usize) -> Vec<WindowRecord> {
        (0..n)
            .map(|i| WindowRecord {
                window_id: format!("r_w{i:04}"),
                recording_id: "r".into(),
                start_s: i as f64 * 0.5,
                corpus_role: CorpusRole::Reference,
                padded: false,
            })
            .collect()
    }

    #[test]
    fn default_config_values() {
        let v = serde_json::to_value(ProjectConfig::default()).unwrap();
        assert_eq!(v["cluster"]["k"], 12);
        assert_eq!(v["stft"]["taper_len"], 1024);
        assert_eq!(v["mel"]["log_eps"], 0.001);
        assert_eq!(v["detector"]["field_min_score"], 0.1);
        assert_eq!(v["detector"]["reference_min_score"], 0.3);
    }

    #[test]
    fn init_open_round_trip_and_no_clobber() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("p");
        let mut cfg = ProjectConfig::default();
        cfg.seed = 9;
        Project::init(&root, cfg.clone()).unwrap();
        assert_eq!(Project::open(&root).unwrap().config, cfg);
        assert!(matches!(Project::init(&root, cfg), Err(Error::NotEmpty(_))));
    }

    #[test]
    fn staleness_follows_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Project::init(dir.path(), ProjectConfig::default()).unwrap();
        let err = p.load_spectrograms().unwrap_err();
        assert!(
            matches!(&err, Error::Dependency { missing, .. } if missing == "ingested"),
            "{err}"
        );
        let w = windows(2);
        p.save_windows(&w, serde_json::Value::Null).unwrap();
        let specs: Vec<_> = w.iter().map(|w| MelSpectrogram::zeros(&w.window_id)).collect();
        let det: Vec<_> = w
            .iter()
            .map(|w| DetectorRecord {
                window_id: w.window_id.clone(),
                score: 0.5,
                kept: true,
            })
            .collect();
        p.save_spectrograms(&specs, &det, serde_json::Value::Null).unwrap();
        assert_eq!(p.load_spectrograms().unwrap(), specs);
        assert_eq!(p.status().state(Stage::Spectrogrammed), StageState::Complete);

        p.save_windows(&w, serde_json::Value::Null).unwrap();
        assert_eq!(p.status().state(Stage::Spectrogrammed), StageState::Stale);
        let err = p.load_spectrograms().unwrap_err();
        assert!(matches!(&err, Error::Dependency { missing, .. } if missing == "spectrogrammed"));
        // status survives a reopen
        let q = Project::open(dir.path()).unwrap();
        assert_eq!(q.status(), p.status());
    }

    #[test]
    fn misaligned_spectrograms_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Project::init(dir.path(), ProjectConfig::default()).unwrap();
        let w = windows(2);
        p.save_windows(&w, serde_json::Value::Null).unwrap();
        let specs = vec![
            MelSpectrogram::zeros(&w[1].window_id),
            MelSpectrogram::zeros(&w[0].window_id),
        ];
        let det: Vec<_> = w
            .iter()
            .map(|w| DetectorRecord {
                window_id: w.window_id.clone(),
                score: 0.0,
                kept: false,
            })
            .collect();
        assert!(matches!(
            p.save_spectrograms(&specs, &det, serde_json::Value::Null),
            Err(Error::Format { .. })
        ));
    }
}
