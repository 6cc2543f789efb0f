use std::collections::BTreeMap;

use calltriage::cluster::ClusterAssignment;
use calltriage::embed::{BackendTag, EmbeddingMatrix};
use calltriage::triage::{
    evaluate, propagate, recording_verdicts, window_verdicts, ClusterLabel, ClusterLabelMap, RecordingVerdict, Verdict,
};
use proptest::prelude::*;

const K: usize = 4;

#[derive(Debug, Clone)]
struct Case {
    reference: Vec<[f32; 2]>,
    clusters: Vec<usize>,
    field: Vec<[f32; 2]>,
    /// recording index of each field window
    recording: Vec<usize>,
    labels: Vec<ClusterLabel>,
}

fn label() -> impl Strategy<Value = ClusterLabel> {
    prop_oneof![
        Just(ClusterLabel::Call),
        Just(ClusterLabel::Noise),
        Just(ClusterLabel::Unlabeled)
    ]
}

fn point() -> impl Strategy<Value = [f32; 2]> {
    // a coarse lattice makes distance ties common
    (0i32..8, 0i32..8).prop_map(|(x, y)| [x as f32, y as f32])
}

fn case() -> impl Strategy<Value = Case> {
    (2usize..30, 1usize..30).prop_flat_map(|(nr, nf)| {
        (
            prop::collection::vec(point(), nr),
            prop::collection::vec(0..K, nr),
            prop::collection::vec(point(), nf),
            prop::collection::vec(0usize..6, nf),
            prop::collection::vec(label(), K),
        )
            .prop_map(|(reference, clusters, field, recording, labels)| Case {
                reference,
                clusters,
                field,
                recording,
                labels,
            })
    })
}

fn matrix(prefix: &str, pts: &[[f32; 2]]) -> EmbeddingMatrix {
    EmbeddingMatrix::new(
        (0..pts.len()).map(|i| format!("{prefix}{i:03}")).collect(),
        2,
        pts.iter().flatten().copied().collect(),
        BackendTag::BaselineFlatten,
    )
    .unwrap()
}

fn label_map(labels: &[ClusterLabel]) -> ClusterLabelMap {
    let mut m = ClusterLabelMap::new(labels.len());
    for (c, &l) in labels.iter().enumerate() {
        m.set(c, l, None, None).unwrap();
    }
    m
}

fn run(case: &Case, radius: f64) -> Vec<RecordingVerdict> {
    let reference = matrix("r", &case.reference);
    let assign = ClusterAssignment {
        window_ids: reference.window_ids.clone(),
        clusters: case.clusters.clone(),
        k: K,
    };
    let field = matrix("f", &case.field);
    let fa = propagate(&field, &reference, &assign, radius).unwrap();
    let wv = window_verdicts(&fa, &label_map(&case.labels));
    let recording_of: BTreeMap<String, String> = field
        .window_ids
        .iter()
        .zip(&case.recording)
        .map(|(w, r)| (w.clone(), format!("rec{r}")))
        .collect();
    let recordings: Vec<String> = (0..6).map(|r| format!("rec{r}")).collect();
    recording_verdicts(&wv, &recording_of, &recordings).unwrap()
}

fn positives(v: &[RecordingVerdict]) -> usize {
    v.iter().filter(|r| r.verdict == Verdict::Positive).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn call_labels_are_monotone(c in case(), flip in 0..K, radius in 0.5f64..4.0) {
        prop_assume!(c.labels[flip] != ClusterLabel::Call);
        let before = positives(&run(&c, radius));
        let mut more = c.clone();
        more.labels[flip] = ClusterLabel::Call;
        prop_assert!(positives(&run(&more, radius)) >= before);
    }

    #[test]
    fn reference_order_does_not_matter(c in case(), radius in 0.5f64..4.0, rot in 0usize..30) {
        let reference = matrix("r", &c.reference);
        let assign = ClusterAssignment { window_ids: reference.window_ids.clone(), clusters: c.clusters.clone(), k: K };
        let field = matrix("f", &c.field);
        let base = propagate(&field, &reference, &assign, radius).unwrap();

        let n = c.reference.len();
        let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).rev().collect();
        let shuffled = reference.select(&order);
        let shuffled_assign = ClusterAssignment {
            window_ids: shuffled.window_ids.clone(),
            clusters: order.iter().map(|&i| c.clusters[i]).collect(),
            k: K,
        };
        let again = propagate(&field, &shuffled, &shuffled_assign, radius).unwrap();
        prop_assert_eq!(again.clusters, base.clusters);
    }

    #[test]
    fn renaming_clusters_keeps_verdicts(c in case(), radius in 0.5f64..4.0) {
        let perm = [3usize, 1, 0, 2];
        let mut renamed = c.clone();
        renamed.clusters = c.clusters.iter().map(|&k| perm[k]).collect();
        for k in 0..K {
            renamed.labels[perm[k]] = c.labels[k];
        }
        prop_assert_eq!(run(&renamed, radius), run(&c, radius));
    }

    #[test]
    fn confusion_counts_cover_every_recording(c in case(), truth in prop::collection::vec(any::<bool>(), 6), radius in 0.5f64..4.0) {
        let verdicts = run(&c, radius);
        let truth: BTreeMap<String, bool> = truth.iter().enumerate().map(|(i, &t)| (format!("rec{i}"), t)).collect();
        let m = evaluate(&verdicts, &truth).unwrap();
        prop_assert_eq!(m.tp + m.fp + m.fn_ + m.tn, verdicts.len());
        let prevalence = truth.values().filter(|&&t| t).count() as f64 / 6.0;
        prop_assert_eq!(m.baseline_precision, prevalence);
        prop_assert!((m.precision_improvement - (m.precision - m.baseline_precision)).abs() < 1e-15);
    }
}

#[test]
fn nine_of_two_hundred_ten() {
    let truth: BTreeMap<String, bool> = (0..210).map(|i| (format!("r{i:03}"), i < 9)).collect();
    let verdicts: Vec<RecordingVerdict> = truth
        .keys()
        .map(|r| RecordingVerdict {
            recording_id: r.clone(),
            positive_window_count: 0,
            verdict: Verdict::Negative,
        })
        .collect();
    let m = evaluate(&verdicts, &truth).unwrap();
    assert!((m.baseline_precision - 9.0 / 210.0).abs() < 1e-12);
    assert!(!m.precision_defined);
    assert_eq!(m.precision, 0.0);
    assert_eq!(m.recall, 0.0);
}
