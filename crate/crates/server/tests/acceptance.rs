//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test -p calltriage-server --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use calltriage::autoenc::gradcheck::gradient_check;
use calltriage::autoenc::{train, Arch, Autoencoder, Shape, TrainConfig};
use calltriage::cluster::{adjusted_rand_index, distance, kmeans_fit, silhouette, KMeansConfig};
use calltriage::dsp::{detector_score_grid, MelConfig, SpectrogramExtractor, StftConfig};
use calltriage::embed::{export_embeddings, import_embeddings, BackendTag, EmbeddingMatrix};
use calltriage::fsutil::{atomic_write, temp_sibling};
use calltriage::ingest::{window, AudioClip, CorpusRole, WindowConfig};
use calltriage::pipeline;
use calltriage::project2d::{pca2, trustworthiness, umap2, UmapConfig};
use calltriage::store::Project;
use calltriage::synthlab::{gen_corpus, SynthSpec};
use calltriage::triage::{evaluate, recording_verdict, RecordingVerdict, Verdict, WindowVerdict};
use calltriage_server::api::{router, AppState};

const SR: u32 = 32_000;

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

// 1

fn loop_count(n: usize, w: usize, h: usize) -> usize {
    let (mut count, mut start) = (0, 0);
    while start + w <= n {
        count += 1;
        start += h;
    }
    count.max(1)
}

fn windowing() -> Check {
    let clip = |n: usize| AudioClip::new("r", SR, vec![0.1; n]);
    let cfg = WindowConfig::default();
    let five = window(&clip(3 * SR as usize), &cfg, CorpusRole::Field).map_err(|e| e.to_string())?;
    ensure(five.len() == 5, || format!("3 s clip gave {} windows", five.len()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (w, h) = (cfg.window_samples(SR), cfg.hop_samples(SR));
    for _ in 0..1000 {
        let n = rng.random_range(1..SR as usize * 12);
        let got = window(&clip(n), &cfg, CorpusRole::Reference)
            .map_err(|e| e.to_string())?
            .len();
        ensure(got == loop_count(n, w, h), || {
            format!("{n} samples: {got} windows, oracle {}", loop_count(n, w, h))
        })?;
    }
    Ok("3 s -> 5 windows; 1000 random durations match the loop oracle".into())
}

// 2

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// The counting rule written out pixel by pixel.
fn detector_oracle(g: &[f64]) -> f64 {
    let mut hits = 0;
    for r in 0..10 {
        for c in 0..10 {
            let p = g[r * 10 + c];
            let col = median((0..10).map(|i| g[i * 10 + c]).collect());
            let row = median((0..10).map(|j| g[r * 10 + j]).collect());
            if p > col && p > 1.5 * row {
                hits += 1;
            }
        }
    }
    f64::from(hits) / 100.0
}

fn detector() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut transformed = 0;
    for i in 0..1000 {
        // normalised spectrograms have a zero floor; grids are drawn the same way
        let mut g: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
        g.iter_mut().for_each(|v| *v -= lo);
        let score = detector_score_grid(&g, 10, 10, 1.5);
        ensure(score == detector_oracle(&g), || {
            format!("grid {i}: {score} vs oracle {}", detector_oracle(&g))
        })?;
        let (scale, shift) = (rng.random_range(0.01..100.0), rng.random_range(-50.0..50.0));
        let moved: Vec<f64> = g.iter().map(|v| v * scale + shift).collect();
        let moved_score = detector_score_grid(&moved, 10, 10, 1.5);
        ensure(moved_score == score, || {
            format!("grid {i}: {moved_score} after x{scale}+{shift}, {score} before")
        })?;
        transformed += 1;
    }
    for v in [0.0, 0.5, -7.0, 1e12] {
        ensure(detector_score_grid(&[v; 100], 10, 10, 1.5) == 0.0, || {
            format!("constant {v} scored non-zero")
        })?;
    }
    Ok(format!("1000 grids equal the oracle exactly; {transformed} random affine maps leave the score unchanged; constants score 0"))
}

// 3

fn shapes() -> Check {
    let specs = Arch::FULL.validate().map_err(|e| e.to_string())?;
    let dims = |s: Shape| match s {
        Shape::Spatial { h, w, c } => (h, w, c),
        Shape::Flat(n) => (0, 0, n),
    };
    let got: Vec<_> = specs.iter().map(|s| dims(s.out_shape)).collect();
    let want = vec![
        (49, 49, 32),
        (23, 23, 64),
        (10, 10, 128),
        (4, 4, 256),
        (0, 0, 128),
        (0, 0, 4096),
        (7, 7, 128),
        (20, 20, 64),
        (47, 47, 32),
        (100, 100, 1),
    ];
    ensure(got == want, || format!("chain {got:?}"))?;
    ensure(dims(specs[6].in_shape) == (1, 1, 4096), || {
        "decoder input is not 1x1x4096".into()
    })?;
    Ok("49/23/10/4/4096/128 encode, 7/20/47/100 decode".into())
}

/// Windows of the generator's reference recordings, in corpus order.
fn synthetic_spectrograms(n: usize) -> Vec<Vec<f32>> {
    let ex = SpectrogramExtractor::new(StftConfig::default(), MelConfig::default(), SR).unwrap();
    let corpus = gen_corpus(&SynthSpec {
        seed: 5,
        n_positive: 1,
        n_negative: 1,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut out = Vec::with_capacity(n);
    for clip in &corpus.reference {
        for w in window(clip, &WindowConfig::default(), CorpusRole::Reference).unwrap() {
            if out.len() == n {
                return out;
            }
            out.push(ex.window(&w).unwrap().values);
        }
    }
    out
}

// 4

fn gradients() -> Check {
    let start = Instant::now();
    let net = Autoencoder::<f64>::init(Arch::reduced(8), 3).map_err(|e| e.to_string())?;
    let image: Vec<f64> = synthetic_spectrograms(1)[0].iter().map(|&v| f64::from(v)).collect();
    let layers: Vec<usize> = (0..net.layers.len()).collect();
    let report = gradient_check(&net, &image, &layers, 100, 4).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    // layers with fewer than 100 parameters are checked exhaustively
    for (check, layer) in report.layers.iter().zip(&net.layers) {
        let size = layer.weight.len() + layer.bias.len();
        ensure(check.coords >= size.min(100), || {
            format!("layer {} checked {} of {size}", check.layer, check.coords)
        })?;
    }
    let worst = report.max_rel_error();
    ensure(worst < 1e-3, || format!("max relative error {worst:.3e}"))?;
    within(elapsed, Duration::from_secs(120))?;
    Ok(format!(
        "max relative error {worst:.2e} over {} coordinates in {elapsed:.1?}",
        report.total_coords()
    ))
}

// 5

fn training() -> Check {
    let start = Instant::now();
    let data = synthetic_spectrograms(200);
    ensure(data.len() == 200, || format!("only {} spectrograms", data.len()))?;
    let refs: Vec<&[f32]> = data.iter().map(Vec::as_slice).collect();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 64,
        learning_rate: 1e-3,
        seed: 7,
        ..TrainConfig::default()
    };
    let run = || -> Result<_, String> {
        let mut net = Autoencoder::<f32>::init(Arch::FULL, 7).map_err(|e| e.to_string())?;
        train(&mut net, &refs, &cfg).map_err(|e| e.to_string())
    };
    let a = run()?;
    let b = run()?;
    let elapsed = start.elapsed();
    ensure(a == b, || "loss curves differ between runs with the same seed".into())?;
    ensure(a.final_loss() < 0.5 * a.initial_loss, || {
        format!("loss {:.4} -> {:.4}", a.initial_loss, a.final_loss())
    })?;
    within(elapsed, Duration::from_secs(600))?;
    Ok(format!(
        "loss {:.4} -> {:.4} ({:.1}%), identical curves, two runs in {elapsed:.1?}",
        a.initial_loss,
        a.final_loss(),
        100.0 * a.final_loss() / a.initial_loss
    ))
}

// 6

fn blobs(n_per: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let centres = [[0.0, 0.0], [10.0, 0.0], [5.0, 10.0]];
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..n_per {
            rows.push(centre.iter().map(|m| m + noise.sample(&mut rng)).collect());
            labels.push(c);
        }
    }
    (rows, labels)
}

fn silhouette_oracle(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..rows.len() {
        let mut sum = [0.0; 3];
        let mut cnt = [0usize; 3];
        for j in (0..rows.len()).filter(|&j| j != i) {
            sum[labels[j]] += distance(&rows[i], &rows[j]);
            cnt[labels[j]] += 1;
        }
        let a = sum[labels[i]] / cnt[labels[i]] as f64;
        let b = (0..3)
            .filter(|&c| c != labels[i])
            .map(|c| sum[c] / cnt[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / rows.len() as f64
}

fn kmeans() -> Check {
    let (rows, truth) = blobs(100, 3);
    let (_, labels) = kmeans_fit(
        &rows,
        &KMeansConfig {
            k: 3,
            seed: 1,
            ..KMeansConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let ari = adjusted_rand_index(&labels, &truth);
    let sil = silhouette(&rows, &labels, usize::MAX, 0).map_err(|e| e.to_string())?;
    ensure(ari == 1.0, || format!("ARI {ari}"))?;
    ensure(sil > 0.8, || format!("silhouette {sil}"))?;
    let (small, small_truth) = blobs(66, 4);
    let fast = silhouette(&small, &small_truth, usize::MAX, 0).map_err(|e| e.to_string())?;
    let slow = silhouette_oracle(&small, &small_truth);
    ensure((fast - slow).abs() < 1e-9, || {
        format!("silhouette {fast} vs oracle {slow}")
    })?;
    Ok(format!(
        "ARI 1.0, silhouette {sil:.4}; N=198 oracle gap {:.1e}",
        (fast - slow).abs()
    ))
}

// 7 and 12 share one default synthetic project, built once

fn clustered_default() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let spec = SynthSpec {
            seed: 0,
            snr_db: 10.0,
            n_positive: 30,
            n_negative: 30,
            ..SynthSpec::default()
        };
        common::build_clustered(&dir, &spec);
        dir
    })
}

fn copy_default() -> (tempfile::TempDir, Project) {
    let dir = tempfile::tempdir().unwrap();
    common::copy_dir(clustered_default(), dir.path());
    let p = Project::open(dir.path()).unwrap();
    (dir, p)
}

fn end_to_end(rt: &tokio::runtime::Runtime) -> Check {
    let start = Instant::now();
    let (_dir, project) = copy_default();
    let labels = pipeline::truth_aware_labels(&project).map_err(|e| e.to_string())?;
    let app = router(AppState::new(project), None);
    let (summary, metrics) = rt.block_on(async {
        for (c, l) in &labels {
            let r = common::post(&app, &format!("/api/clusters/{c}/label"), json!({ "label": l })).await;
            assert_eq!(r.status, 200);
        }
        let summary = common::post(&app, "/api/propagate", json!({ "radius": null }))
            .await
            .json();
        let metrics = common::get(&app, "/api/metrics").await;
        (summary, metrics)
    });
    let elapsed = start.elapsed();
    ensure(metrics.status == 200, || {
        format!("GET /api/metrics returned {}", metrics.status)
    })?;
    let m = metrics.json();
    let precision = m["precision"].as_f64().unwrap_or(0.0);
    let baseline = m["baseline_precision"].as_f64().unwrap_or(0.0);
    let improvement = m["precision_improvement"].as_f64().unwrap_or(0.0);
    let detail = format!(
        "precision {precision:.3}, baseline {baseline:.3}, improvement {improvement:+.3}, recall {:.3}; {} calls labelled, assigned {} / unassigned {}; {elapsed:.1?} incl. shared build",
        m["recall"].as_f64().unwrap_or(0.0),
        labels.values().filter(|l| **l == calltriage::triage::ClusterLabel::Call).count(),
        summary["assigned"],
        summary["unassigned"],
    );
    ensure(
        precision >= 0.9 && improvement >= 0.3 && (baseline - 0.5).abs() < 1e-12,
        || detail.clone(),
    )?;
    within(elapsed, Duration::from_secs(300))?;
    Ok(detail)
}

// 8

fn baseline_arithmetic() -> Check {
    let truth: BTreeMap<String, bool> = (0..210).map(|i| (format!("r{i:03}"), i < 9)).collect();
    let verdicts: Vec<RecordingVerdict> = truth
        .keys()
        .map(|r| RecordingVerdict {
            recording_id: r.clone(),
            positive_window_count: 0,
            verdict: Verdict::Negative,
        })
        .collect();
    let m = evaluate(&verdicts, &truth).map_err(|e| e.to_string())?;
    let gap = (m.baseline_precision - 9.0 / 210.0).abs();
    ensure(gap <= 1e-12, || format!("baseline {}", m.baseline_precision))?;
    Ok(format!("baseline {:.6} (gap {gap:.1e})", m.baseline_precision))
}

// 9

fn recording_rule() -> Check {
    let window = |positive: bool| WindowVerdict {
        window_id: "w".into(),
        cluster: positive.then_some(0),
        verdict: if positive { Verdict::Positive } else { Verdict::Negative },
    };
    for (pos, expected) in [
        (2, Verdict::Positive),
        (3, Verdict::Positive),
        (1, Verdict::Negative),
        (0, Verdict::Negative),
    ] {
        let windows: Vec<WindowVerdict> = (0..4).map(|i| window(i < pos)).collect();
        let v = recording_verdict(&windows, "r");
        ensure(v.verdict == expected && v.positive_window_count == pos, || {
            format!("{pos} positive windows gave {v:?}")
        })?;
    }
    Ok("2 -> positive, 1 -> negative, 0 -> negative".into())
}

// 10

fn projection() -> Check {
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|i| {
            (0..16)
                .map(|d| if d % 4 == i % 4 { 8.0 } else { 0.0 } + noise.sample(&mut rng))
                .collect()
        })
        .collect();
    let cfg = UmapConfig {
        seed: 7,
        ..UmapConfig::default()
    };
    let a = umap2(&rows, &cfg).map_err(|e| e.to_string())?;
    let b = umap2(&rows, &cfg).map_err(|e| e.to_string())?;
    let bits = |p: &calltriage::project2d::Projection2D| -> Vec<[u64; 2]> {
        p.coords.iter().map(|c| [c[0].to_bits(), c[1].to_bits()]).collect()
    };
    ensure(bits(&a) == bits(&b), || {
        "UMAP differs between runs with one seed".into()
    })?;
    let t = trustworthiness(&rows, &a.coords, 10).map_err(|e| e.to_string())?;
    ensure(t >= 0.8, || format!("trustworthiness {t}"))?;

    let dir = [0.3, -1.2, 2.0, 0.7, -0.4];
    let line: Vec<Vec<f64>> = (0..50)
        .map(|_| {
            let s: f64 = rng.random_range(-5.0..5.0);
            dir.iter().map(|d| 1.5 + s * d).collect()
        })
        .collect();
    let p = pca2(&line).map_err(|e| e.to_string())?;
    let residual = p.coords.iter().map(|c| c[1].abs()).fold(0.0, f64::max);
    ensure(residual < 1e-9, || format!("second-axis residual {residual:.2e}"))?;
    Ok(format!(
        "trustworthiness {t:.4}, UMAP bitwise repeatable, PCA residual {residual:.1e}"
    ))
}

// 11

fn formats() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f32> = (0..40 * 7)
        .map(|_| f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF))
        .collect();
    let m = EmbeddingMatrix::new(
        (0..40).map(|i| format!("w{i}")).collect(),
        7,
        data,
        BackendTag::External,
    )
    .map_err(|e| e.to_string())?;
    let path = dir.path().join("m.aemb");
    export_embeddings(&m, &path).map_err(|e| e.to_string())?;
    let back = import_embeddings(&path).map_err(|e| e.to_string())?;
    let same =
        back.window_ids == m.window_ids && back.data.iter().zip(&m.data).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same && back.data.len() == m.data.len(), || {
        "AEMB1 round trip changed the data".into()
    })?;

    let net = Autoencoder::<f32>::init(Arch::reduced(8), 5).map_err(|e| e.to_string())?;
    let bytes = net.to_checkpoint();
    let restored = Autoencoder::<f32>::from_checkpoint(&bytes).map_err(|e| e.to_string())?;
    ensure(restored == net && restored.to_checkpoint() == bytes, || {
        "checkpoint round trip changed the network".into()
    })?;

    let labels = dir.path().join("labels.json");
    atomic_write(&labels, b"previous").map_err(|e| e.to_string())?;
    fs::create_dir(temp_sibling(&labels)).map_err(|e| e.to_string())?;
    ensure(atomic_write(&labels, b"next").is_err(), || {
        "blocked write reported success".into()
    })?;
    ensure(fs::read(&labels).map_err(|e| e.to_string())? == b"previous", || {
        "interrupted write clobbered the file".into()
    })?;
    Ok("AEMB1 and AECK1 bitwise; interrupted write keeps the previous artifact".into())
}

// 12

fn api_contract(rt: &tokio::runtime::Runtime) -> Check {
    let (_dir, project) = copy_default();
    let app = router(AppState::new(project), None);
    rt.block_on(async {
        let clusters = common::get(&app, "/api/clusters").await.json();
        let n = clusters.as_array().map_or(0, Vec::len);
        ensure(n == 12, || format!("{n} clusters listed"))?;

        let r = common::post(&app, "/api/propagate", json!({ "radius": null })).await;
        ensure(r.status == 409 && r.json()["code"] == "no-labels", || format!("propagate before labelling: {}", r.status))?;

        let first = common::post(&app, "/api/clusters/3/label", json!({ "label": "call" })).await;
        let second = common::post(&app, "/api/clusters/3/label", json!({ "label": "call" })).await;
        ensure(first.status == 200 && first.body == second.body, || "re-posting a label changed the state".into())?;
        let listed = common::get(&app, "/api/clusters").await.json();
        ensure(listed[3]["label"] == "call", || "label not visible in the listing".into())?;
        let bad = common::post(&app, "/api/clusters/3/label", json!({ "label": "bird" })).await;
        ensure(bad.status == 422, || format!("bad label gave {}", bad.status))?;
        let missing = common::post(&app, "/api/clusters/12/label", json!({ "label": "call" })).await;
        ensure(missing.status == 404, || format!("unknown cluster gave {}", missing.status))?;

        let summary = common::post(&app, "/api/propagate", json!({ "radius": null })).await;
        let s = summary.json();
        ensure(summary.status == 200 && s["assigned"].is_u64() && s["unassigned"].is_u64(), || format!("propagate summary {s}"))?;

        let metrics = common::get(&app, "/api/metrics").await;
        let m = metrics.json();
        let keys = ["tp", "fp", "fn", "tn", "accuracy", "precision", "recall", "baseline_precision", "precision_improvement"];
        ensure(metrics.status == 200 && keys.iter().all(|k| m.get(k).is_some()), || format!("metrics payload {m}"))?;

        let samples = common::get(&app, "/api/clusters/3/samples?n=9").await.json();
        for s in samples.as_array().into_iter().flatten() {
            for key in ["spectrogram_url", "audio_url"] {
                let url = s[key].as_str().unwrap_or_default();
                let r = common::get(&app, url).await;
                ensure(r.status == 200, || format!("{url} gave {}", r.status))?;
            }
        }
        Ok(format!(
            "12 clusters, idempotent labels, 409/422/404 errors, propagate {{assigned {}, unassigned {}}}, metrics payload, {} sample media resolve",
            s["assigned"],
            s["unassigned"],
            samples.as_array().map_or(0, Vec::len)
        ))
    })
}

fn main() {
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    let criteria: Vec<Criterion> = vec![
        ("windowing", Box::new(windowing)),
        ("detector oracle and invariance", Box::new(detector)),
        ("autoencoder shape chain", Box::new(shapes)),
        ("gradient check", Box::new(gradients)),
        ("training run", Box::new(training)),
        ("k-means on separated blobs", Box::new(kmeans)),
        ("end-to-end synthetic triage", Box::new(|| end_to_end(&rt))),
        ("baseline precision arithmetic", Box::new(baseline_arithmetic)),
        ("recording rule truth table", Box::new(recording_rule)),
        ("projection quality", Box::new(projection)),
        ("file formats", Box::new(formats)),
        ("API contract", Box::new(|| api_contract(&rt))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    let _ = fs::remove_dir_all(clustered_default());
    if failed > 0 {
        std::process::exit(1);
    }
}
