//! Stage runners over a [`Project`], shared by the CLI and the service.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoenc::{self, Arch, Autoencoder, TrainConfig, TrainReport};
use crate::cluster::{fit_matrix, prepare_rows, silhouette, KMeansConfig};
use crate::dsp::{detector_score_grid, MelSpectrogram, SpectrogramExtractor, SPEC_SIZE};
use crate::embed::{embed_batch, BackendSpec, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::ingest::{decode_wav, resample, window, AudioClip, CorpusRole, WindowedClip};
use crate::project2d::{pca2, umap2, ProjectionMethod, UmapConfig};
use crate::store::{
    ClusterHeader, DetectorRecord, Project, ProjectionRow, PropagationRecord, Stage, StageState, VerdictsReport,
    WindowRecord, CHECKPOINT_FILE,
};
use crate::synthlab::{gen_corpus, write_corpus, EventAnnotation, EventKind, SynthSpec};
use crate::triage::{
    evaluate, propagate as propagate_windows, recording_verdicts, window_verdicts, ClusterLabel, ClusterLabelMap,
    FieldAssignment, MetricsReport, PropagationConfig,
};

/// Silhouette is computed on at most this many reference windows.
pub const SILHOUETTE_SAMPLE_CAP: usize = 2000;

const ROLES: [CorpusRole; 2] = [CorpusRole::Reference, CorpusRole::Field];

fn now_s() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub reference_recordings: usize,
    pub field_recordings: usize,
    pub positives: usize,
}

/// Writes a synthetic corpus, its ground truth and event annotations into
/// an otherwise empty project corpus.
pub fn synth(project: &Project, spec: &SynthSpec) -> Result<SynthSummary> {
    for role in ROLES {
        if !list_recordings(&project.corpus_dir(role))?.is_empty() {
            return Err(Error::invalid(format!("corpus/{role} already contains recordings")));
        }
    }
    let corpus = gen_corpus(spec)?;
    write_corpus(
        &corpus,
        &project.corpus_dir(CorpusRole::Reference),
        &project.corpus_dir(CorpusRole::Field),
        &project.path(crate::store::TRUTH_FILE),
        &project.path(crate::store::EVENTS_FILE),
    )?;
    Ok(SynthSummary {
        reference_recordings: corpus.reference.len(),
        field_recordings: corpus.field.len(),
        positives: corpus.truth.values().filter(|&&t| t).count(),
    })
}

/// `*.wav` files in `dir`, sorted by name.
pub fn list_recordings(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if is_wav && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn recording_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn load_clip(path: &Path, sample_rate: u32) -> Result<AudioClip> {
    let bytes = fs::read(path)?;
    let clip = decode_wav(&bytes, &recording_id(path)).map_err(|e| match e {
        Error::Decode(m) => Error::Decode(format!("{}: {m}", path.display())),
        other => other,
    })?;
    resample(&clip, sample_rate)
}

fn recordings(project: &Project) -> Result<Vec<(CorpusRole, PathBuf)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for role in ROLES {
        for path in list_recordings(&project.corpus_dir(role))? {
            let id = recording_id(&path);
            if !seen.insert(id.clone()) {
                return Err(Error::invalid(format!("recording id `{id}` appears more than once")));
            }
            out.push((role, path));
        }
    }
    Ok(out)
}

fn windows_of(project: &Project, role: CorpusRole, path: &Path) -> Result<Vec<WindowedClip>> {
    let clip = load_clip(path, project.config.sample_rate)?;
    window(&clip, &project.config.window, role)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub reference_recordings: usize,
    pub field_recordings: usize,
    pub windows: usize,
}

/// Decodes every corpus recording and writes the window manifest.
pub fn ingest(project: &mut Project) -> Result<IngestSummary> {
    let recs = recordings(project)?;
    if recs.is_empty() {
        return Err(Error::invalid("the project corpus has no .wav recordings"));
    }
    let per_file = crate::par::map(&recs, |(role, path)| windows_of(project, *role, path));
    let mut records = Vec::new();
    for windows in per_file {
        records.extend(windows?.into_iter().map(|w| WindowRecord {
            window_id: w.window_id,
            recording_id: w.recording_id,
            start_s: w.start_s,
            corpus_role: w.corpus_role,
            padded: w.padded,
        }));
    }
    let count = |r: CorpusRole| recs.iter().filter(|(role, _)| *role == r).count();
    let summary = IngestSummary {
        reference_recordings: count(CorpusRole::Reference),
        field_recordings: count(CorpusRole::Field),
        windows: records.len(),
    };
    let params = serde_json::json!({ "sample_rate": project.config.sample_rate, "window": project.config.window });
    project.save_windows(&records, params)?;
    Ok(summary)
}

/// Audio of one window, re-cut from its recording.
pub fn window_audio(project: &Project, record: &WindowRecord) -> Result<Vec<f32>> {
    let path = project
        .corpus_dir(record.corpus_role)
        .join(format!("{}.wav", record.recording_id));
    windows_of(project, record.corpus_role, &path)?
        .into_iter()
        .find(|w| w.window_id == record.window_id)
        .map(|w| w.samples)
        .ok_or_else(|| Error::NotFound(format!("window `{}`", record.window_id)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramSummary {
    pub windows: usize,
    pub kept_reference: usize,
    pub kept_field: usize,
}

/// Computes every window's spectrogram and detector score.
pub fn spectrogram(project: &mut Project) -> Result<SpectrogramSummary> {
    let windows = project.load_windows()?;
    let cfg = project.config.clone();
    let extractor = SpectrogramExtractor::new(cfg.stft, cfg.mel, cfg.sample_rate)?;
    let mut by_recording: Vec<(CorpusRole, String)> = Vec::new();
    for w in &windows {
        if by_recording.last().is_none_or(|(_, r)| *r != w.recording_id) {
            by_recording.push((w.corpus_role, w.recording_id.clone()));
        }
    }
    let per_rec = crate::par::map(&by_recording, |(role, rec)| {
        let path = project.corpus_dir(*role).join(format!("{rec}.wav"));
        extractor.batch(&windows_of(project, *role, &path)?)
    });
    let mut specs = Vec::with_capacity(windows.len());
    for s in per_rec {
        specs.extend(s?);
    }
    let scores = crate::par::map(&specs, |s: &MelSpectrogram| {
        let grid: Vec<f64> = s.values.iter().map(|&v| f64::from(v)).collect();
        detector_score_grid(&grid, SPEC_SIZE, SPEC_SIZE, cfg.detector.row_factor)
    });
    let detector: Vec<DetectorRecord> = windows
        .iter()
        .zip(&scores)
        .map(|(w, &score)| DetectorRecord {
            window_id: w.window_id.clone(),
            score,
            kept: cfg.detector.keeps(w.corpus_role, score),
        })
        .collect();
    let kept = |role: CorpusRole| {
        windows
            .iter()
            .zip(&detector)
            .filter(|(w, d)| w.corpus_role == role && d.kept)
            .count()
    };
    let summary = SpectrogramSummary {
        windows: windows.len(),
        kept_reference: kept(CorpusRole::Reference),
        kept_field: kept(CorpusRole::Field),
    };
    let params = serde_json::json!({ "stft": cfg.stft, "mel": cfg.mel, "detector": cfg.detector });
    project.save_spectrograms(&specs, &detector, params)?;
    Ok(summary)
}

/// Spectrograms of the detector-kept windows of `role`, in manifest order.
pub fn kept_spectrograms(project: &Project, role: CorpusRole) -> Result<Vec<MelSpectrogram>> {
    let kept: HashSet<String> = project.kept_windows(role)?.into_iter().map(|w| w.window_id).collect();
    Ok(project
        .load_spectrograms()?
        .into_iter()
        .filter(|s| kept.contains(&s.window_id))
        .collect())
}

/// Trains the autoencoder on all kept windows and stores the checkpoint.
pub fn train_ae(project: &Project, arch: Arch, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut specs = kept_spectrograms(project, CorpusRole::Reference)?;
    specs.extend(kept_spectrograms(project, CorpusRole::Field)?);
    if specs.is_empty() {
        return Err(Error::invalid("no detector-kept windows to train on"));
    }
    let images: Vec<&[f32]> = specs.iter().map(|s| s.values.as_slice()).collect();
    let mut net = Autoencoder::<f32>::init(arch, cfg.seed)?;
    let report = autoenc::train(&mut net, &images, cfg)?;
    project.save_checkpoint(&net.to_checkpoint(), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub backend: String,
    pub dim: usize,
    pub reference_rows: usize,
    pub field_rows: usize,
}

/// The autoencoder default checkpoint lives inside the project; other
/// relative paths are taken as given.
pub fn resolve_backend(project: &Project, spec: &BackendSpec) -> BackendSpec {
    match spec {
        BackendSpec::Autoencoder { checkpoint } if checkpoint.is_relative() && !checkpoint.exists() => {
            BackendSpec::Autoencoder {
                checkpoint: project.root().join(checkpoint),
            }
        }
        other => other.clone(),
    }
}

pub fn default_autoencoder_backend() -> BackendSpec {
    BackendSpec::Autoencoder {
        checkpoint: PathBuf::from(CHECKPOINT_FILE),
    }
}

/// Embeds the kept windows of both corpora with `spec`.
pub fn embed(project: &mut Project, spec: &BackendSpec) -> Result<EmbedSummary> {
    project.require(Stage::Spectrogrammed, "embed")?;
    let backend = resolve_backend(project, spec).resolve()?;
    let mut mats: Vec<EmbeddingMatrix> = Vec::new();
    for role in ROLES {
        mats.push(embed_batch(&backend, &kept_spectrograms(project, role)?)?);
    }
    let (reference, field) = (&mats[0], &mats[1]);
    let summary = EmbedSummary {
        backend: backend.tag().as_str().to_string(),
        dim: reference.dim.max(field.dim),
        reference_rows: reference.rows(),
        field_rows: field.rows(),
    };
    project.save_embeddings(reference, field, serde_json::to_value(spec)?)?;
    if project.config.backend != *spec {
        project.config.backend = spec.clone();
        project.save_config()?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: usize,
    pub size: usize,
    pub label: ClusterLabel,
}

/// k-means over the reference embeddings.
pub fn cluster(project: &mut Project, k: usize, seed: u64) -> Result<ClusterHeader> {
    let reference = project.load_embeddings(CorpusRole::Reference)?;
    let settings = project.config.cluster;
    let cfg = KMeansConfig {
        k,
        seed,
        n_init: settings.n_init,
        max_iter: settings.max_iter,
        ..KMeansConfig::default()
    };
    let (model, assignment) = fit_matrix(&reference, &cfg, settings.l2_normalize)?;
    let rows = prepare_rows(&reference, settings.l2_normalize);
    let header = ClusterHeader {
        k: model.k,
        dim: model.dim,
        inertia: model.inertia,
        seed,
        iterations: model.iterations,
        backend: reference.backend,
        l2_normalize: settings.l2_normalize,
        silhouette: silhouette(&rows, &assignment.clusters, SILHOUETTE_SAMPLE_CAP, seed).ok(),
    };
    project.save_clusters(&model, &assignment, &header)?;
    Ok(header)
}

pub fn cluster_summaries(project: &Project) -> Result<Vec<ClusterSummary>> {
    let (header, assignment) = project.load_clusters()?;
    let labels = project.load_labels()?;
    let sizes = assignment.sizes();
    Ok((0..header.k)
        .map(|id| ClusterSummary {
            id,
            size: sizes[id],
            label: labels.get(id),
        })
        .collect())
}

/// Projects reference and field embeddings jointly to 2-D.
pub fn project2d(project: &mut Project, method: ProjectionMethod, seed: u64) -> Result<usize> {
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for role in ROLES {
        let m = project.load_embeddings(role)?;
        rows.extend(m.to_f64_rows());
        ids.extend(m.window_ids.into_iter().map(|id| (id, role)));
    }
    let proj = match method {
        ProjectionMethod::Pca => pca2(&rows)?,
        ProjectionMethod::Umap => umap2(
            &rows,
            &UmapConfig {
                seed,
                ..project.config.umap
            },
        )?,
    };
    let out: Vec<ProjectionRow> = ids
        .into_iter()
        .zip(&proj.coords)
        .map(|((window_id, corpus_role), c)| ProjectionRow {
            window_id,
            x: c[0],
            y: c[1],
            corpus_role,
            method,
        })
        .collect();
    let params = serde_json::json!({ "method": method.as_str(), "seed": proj.seed });
    project.save_projection(method, &out, params)?;
    Ok(out.len())
}

/// Sets one cluster label; returns the label map and whether it changed.
pub fn label(
    project: &mut Project,
    cluster: usize,
    label: ClusterLabel,
    annotator: Option<String>,
) -> Result<(ClusterLabelMap, bool)> {
    let mut labels = project.load_labels()?;
    let changed = labels.set(cluster, label, annotator, Some(now_s()))?;
    if changed {
        project.save_labels(&labels)?;
    }
    Ok((labels, changed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationSummary {
    pub radius: f64,
    pub calibrated: bool,
    pub assigned: usize,
    pub unassigned: usize,
    pub positive_recordings: usize,
    pub recordings: usize,
    /// Present when the project has ground truth.
    pub metrics: Option<MetricsReport>,
}

fn unit_rows(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let data = prepare_rows(matrix, true)
        .concat()
        .into_iter()
        .map(|v| v as f32)
        .collect();
    EmbeddingMatrix::new(matrix.window_ids.clone(), matrix.dim, data, matrix.backend)
}

/// Assigns field windows to reference clusters, derives verdicts and, when
/// ground truth is present, evaluates them.
pub fn propagate(project: &mut Project, radius: Option<f64>) -> Result<PropagationSummary> {
    let labels = project.load_labels()?;
    if !labels.any_labeled() {
        return Err(Error::NoLabels);
    }
    project.require(Stage::Labeled, "propagate")?;
    let (header, assignment) = project.load_clusters()?;
    let mut reference = project.load_embeddings(CorpusRole::Reference)?;
    let mut field = project.load_embeddings(CorpusRole::Field)?;
    if header.l2_normalize {
        reference = unit_rows(&reference)?;
        field = unit_rows(&field)?;
    }
    let cfg = PropagationConfig {
        radius: radius.or(project.config.propagation.radius),
        ..project.config.propagation
    };
    let tau = cfg.resolve(&reference)?;
    let field_assignment = propagate_windows(&field, &reference, &assignment, tau)?;
    let record = PropagationRecord {
        radius: tau,
        calibrated: cfg.radius.is_none(),
        clustered_seq: project.clustered_seq().expect("clusters loaded"),
        assignment: field_assignment,
    };
    let verdicts = verdicts_for(project, &record.assignment, &labels)?;
    project.save_propagation(&record, &verdicts)?;
    let metrics = match project.load_truth()? {
        Some(truth) => {
            let m = evaluate(&verdicts.recordings, &truth)?;
            project.save_metrics(&m)?;
            Some(m)
        }
        None => None,
    };
    Ok(summarize(&record, &verdicts, metrics))
}

fn summarize(
    record: &PropagationRecord,
    verdicts: &VerdictsReport,
    metrics: Option<MetricsReport>,
) -> PropagationSummary {
    PropagationSummary {
        radius: record.radius,
        calibrated: record.calibrated,
        assigned: verdicts.assigned,
        unassigned: verdicts.unassigned,
        positive_recordings: verdicts
            .recordings
            .iter()
            .filter(|r| r.verdict == crate::triage::Verdict::Positive)
            .count(),
        recordings: verdicts.recordings.len(),
        metrics,
    }
}

fn verdicts_for(project: &Project, assignment: &FieldAssignment, labels: &ClusterLabelMap) -> Result<VerdictsReport> {
    let windows = project.load_windows()?;
    let mut recordings = Vec::new();
    let mut recording_of = BTreeMap::new();
    for w in windows.iter().filter(|w| w.corpus_role == CorpusRole::Field) {
        if recordings.last() != Some(&w.recording_id) {
            recordings.push(w.recording_id.clone());
        }
        recording_of.insert(w.window_id.clone(), w.recording_id.clone());
    }
    let wv = window_verdicts(assignment, labels);
    let rv = recording_verdicts(&wv, &recording_of, &recordings)?;
    Ok(VerdictsReport {
        radius: assignment.radius(),
        assigned: assignment.assigned(),
        unassigned: assignment.unassigned(),
        windows: wv,
        recordings: rv,
    })
}

/// Recomputes verdicts from the stored assignment and the current labels.
pub fn verdict(project: &mut Project) -> Result<PropagationSummary> {
    let labels = project.load_labels()?;
    if !labels.any_labeled() {
        return Err(Error::NoLabels);
    }
    let record = project.load_propagation()?;
    let verdicts = verdicts_for(project, &record.assignment, &labels)?;
    project.save_propagation(&record, &verdicts)?;
    Ok(summarize(&record, &verdicts, None))
}

/// Scores the current verdicts against `truth_csv`, or against the
/// project's stored truth when no file is given.
pub fn evaluate_project(project: &mut Project, truth_csv: Option<&Path>) -> Result<MetricsReport> {
    let truth = match truth_csv {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
            crate::triage::parse_truth_csv(&text)?
        }
        None => project
            .load_truth()?
            .ok_or_else(|| Error::NotFound("no ground truth in project".into()))?,
    };
    let verdicts = project.load_verdicts()?;
    let metrics = evaluate(&verdicts.recordings, &truth)?;
    if truth_csv.is_some() {
        project.save_truth(&truth)?;
    }
    project.save_metrics(&metrics)?;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub stages: BTreeMap<Stage, StageState>,
    pub clusters: Option<ClusterHeader>,
    pub cluster_summaries: Vec<ClusterSummary>,
    pub propagation: Option<PropagationSummary>,
    pub metrics: Option<MetricsReport>,
}

/// Everything currently known about the project; missing parts are omitted.
pub fn report(project: &Project) -> Report {
    let metrics = project.load_metrics().ok();
    let propagation = project
        .load_verdicts()
        .ok()
        .zip(project.load_propagation().ok())
        .map(|(v, r)| summarize(&r, &v, metrics.clone()));
    Report {
        stages: project.status().states(),
        clusters: project.load_clusters().ok().map(|(h, _)| h),
        cluster_summaries: cluster_summaries(project).unwrap_or_default(),
        propagation,
        metrics,
    }
}

/// Whether a window overlaps a call event by more than `min_overlap_s`.
pub fn window_has_call(
    window: &WindowRecord,
    window_len_s: f64,
    events: &[EventAnnotation],
    min_overlap_s: f64,
) -> bool {
    let end = window.start_s + window_len_s;
    events.iter().any(|e| {
        e.kind == EventKind::Call
            && e.recording_id == window.recording_id
            && e.end_s.min(end) - e.start_s.max(window.start_s) > min_overlap_s
    })
}

/// Labels a synthetic project the way an expert would: a cluster is a call
/// cluster when most of its members overlap an annotated call.
pub fn truth_aware_labels(project: &Project) -> Result<BTreeMap<usize, ClusterLabel>> {
    let events = project
        .load_events()?
        .ok_or_else(|| Error::NotFound("no event annotations in project".into()))?;
    let (header, assignment) = project.load_clusters()?;
    let by_id: HashMap<String, WindowRecord> = project
        .load_windows()?
        .into_iter()
        .map(|w| (w.window_id.clone(), w))
        .collect();
    let len = project.config.window.window_len_s;
    let mut calls = vec![0usize; header.k];
    let mut sizes = vec![0usize; header.k];
    for (id, &c) in assignment.window_ids.iter().zip(&assignment.clusters) {
        sizes[c] += 1;
        if window_has_call(&by_id[id], len, &events, 0.1) {
            calls[c] += 1;
        }
    }
    Ok((0..header.k)
        .map(|c| {
            let label = if 2 * calls[c] > sizes[c] {
                ClusterLabel::Call
            } else {
                ClusterLabel::Noise
            };
            (c, label)
        })
        .collect())
}
