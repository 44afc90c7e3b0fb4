mod oracles;

use oracles::random_segment;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapnet_core::data::{ProposalRecord, ResultsMap, TemporalSegment};
use rapnet_core::eval::{
    auc, average_recall_curve, curve_csv, curve_svg, emit_report, evaluate, recall_at, EvalSettings, GroundTruth, RecallCurve,
};

fn seg(s: f64, e: f64) -> TemporalSegment {
    TemporalSegment::new(s, e).unwrap()
}

fn rec(vid: &str, s: TemporalSegment, score: f64) -> ProposalRecord {
    ProposalRecord::new(vid, s, score, "t")
}

/// Up to five videos with up to 20 proposals each; scores drawn from a
/// small set so ties occur.
fn random_corpus(rng: &mut impl Rng) -> (ResultsMap, GroundTruth) {
    let mut props = ResultsMap::new();
    let mut gts = GroundTruth::new();
    for v in 0..rng.random_range(1..=5) {
        let vid = format!("v{v}");
        let g: Vec<_> = (0..rng.random_range(0..4)).map(|_| random_segment(rng)).collect();
        let p: Vec<_> = (0..rng.random_range(0..=20))
            .map(|_| {
                let s = if !g.is_empty() && rng.random_bool(0.4) {
                    let t = g[rng.random_range(0..g.len())];
                    let d = rng.random_range(0.0..0.1);
                    TemporalSegment::new((t.start() - d).max(0.0), t.end()).unwrap()
                } else {
                    random_segment(rng)
                };
                rec(&vid, s, rng.random_range(0..5) as f64 / 4.0)
            })
            .collect();
        gts.insert(vid.clone(), g);
        props.insert(vid, p);
    }
    if gts.values().all(Vec::is_empty) {
        gts.insert("extra".into(), vec![seg(0.1, 0.3)]);
    }
    (props, gts)
}

#[test]
fn metrics_equal_exhaustive_oracle_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let settings = EvalSettings::default();
    for _ in 0..300 {
        let (props, gts) = random_corpus(&mut rng);
        let report = evaluate(&props, &gts, &settings).unwrap();
        let expected = oracles::ar_curve(&props, &gts, &settings.tiou_grid, settings.max_an);
        assert_eq!(report.curve.ar_values, expected);
        for an in [1, 5, 10, 100] {
            assert_eq!(report.ar_at[&format!("AR@{an}")].to_bits(), expected[an - 1].to_bits());
        }
        assert_eq!(report.auc.to_bits(), oracles::auc(&expected).to_bits());
        for &t in &settings.tiou_grid {
            for an in [1, 3, 20] {
                assert_eq!(recall_at(&props, &gts, t, an).unwrap(), oracles::recall(&props, &gts, t, an));
            }
        }
    }
}

#[test]
fn crafted_two_video_corpus() {
    let mut gts = GroundTruth::new();
    gts.insert("a".into(), vec![seg(0.2, 0.6), seg(0.7, 0.9)]);
    gts.insert("b".into(), vec![seg(0.0, 0.5)]);
    let mut props = ResultsMap::new();
    props.insert("a".into(), vec![rec("a", seg(0.4, 0.8), 0.9), rec("a", seg(0.2, 0.6), 0.3), rec("a", seg(0.7, 0.88), 0.5)]);
    props.insert("b".into(), vec![rec("b", seg(0.05, 0.5), 0.4)]);
    // at tiou 0.5: rank 1 of a hits nothing, rank 2 (0.7, 0.88) hits gt 2 (IoU 0.9),
    // rank 3 hits gt 1 exactly; b's only proposal has IoU 0.9
    assert_eq!(recall_at(&props, &gts, 0.5, 1).unwrap(), 1.0 / 3.0);
    assert_eq!(recall_at(&props, &gts, 0.5, 2).unwrap(), 2.0 / 3.0);
    assert_eq!(recall_at(&props, &gts, 0.5, 3).unwrap(), 1.0);
    assert_eq!(recall_at(&props, &gts, 0.95, 3).unwrap(), 1.0 / 3.0);

    let single = [("v".to_string(), vec![rec("v", seg(0.4, 0.8), 1.0)])].into();
    let g = [("v".to_string(), vec![seg(0.2, 0.6)])].into();
    assert_eq!(recall_at(&single, &g, 0.5, 1).unwrap(), 0.0);
    assert!(recall_at(&single, &g, 0.5, 0).is_err());
}

#[test]
fn perfect_and_empty_proposals() {
    let mut gts = GroundTruth::new();
    gts.insert("a".into(), vec![seg(0.2, 0.6), seg(0.7, 0.9)]);
    gts.insert("b".into(), vec![seg(0.0, 0.5)]);
    gts.insert("c".into(), vec![]);
    let perfect: ResultsMap = gts
        .iter()
        .map(|(v, segs)| (v.clone(), segs.iter().map(|s| rec(v, *s, 0.5)).collect()))
        .collect();
    let curve = average_recall_curve(&perfect, &gts, &EvalSettings::default()).unwrap();
    assert!(curve.ar_values[1..].iter().all(|&v| v == 1.0));
    let none = average_recall_curve(&ResultsMap::new(), &gts, &EvalSettings::default()).unwrap();
    assert!(none.ar_values.iter().all(|&v| v == 0.0));
    assert_eq!(auc(&none), 0.0);
    assert!(evaluate(&perfect, &GroundTruth::new(), &EvalSettings::default()).is_err());
}

fn curve_of(f: impl Fn(usize) -> f64) -> RecallCurve {
    RecallCurve {
        an_values: (1..=100).collect(),
        ar_values: (1..=100).map(f).collect(),
        tiou_grid: vec![0.5],
    }
}

#[test]
fn auc_arithmetic() {
    assert!((auc(&curve_of(|_| 1.0)) - 100.0).abs() < 1e-12);
    assert!((auc(&curve_of(|_| 0.5)) - 50.0).abs() < 1e-12);
    assert!((auc(&curve_of(|an| (an - 1) as f64 / 99.0)) - 50.0).abs() < 1e-12);
}

#[test]
fn csv_rows_and_stable_svg() {
    let curve = curve_of(|an| if an == 100 { 0.7821 } else { 0.5 });
    let csv = curve_csv(&curve);
    assert!(csv.starts_with("an,ar\n1,0.500000\n"));
    assert!(csv.ends_with("100,0.782100\n"));
    assert_eq!(curve_svg(&curve), curve_svg(&curve.clone()));
    assert!(curve_svg(&curve).starts_with("<svg"));
}

#[test]
fn report_files_are_written_and_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (props, gts) = random_corpus(&mut rng);
    let report = evaluate(&props, &gts, &EvalSettings::default()).unwrap();
    let read = |dir: &std::path::Path| {
        ["metrics.json", "ar_curve.csv", "ar_curve.svg"]
            .map(|f| std::fs::read(dir.join(f)).unwrap())
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    emit_report(&report, d1.path()).unwrap();
    emit_report(&evaluate(&props, &gts, &EvalSettings::default()).unwrap(), d2.path()).unwrap();
    assert_eq!(read(d1.path()), read(d2.path()));
    let json: serde_json::Value = serde_json::from_slice(&read(d1.path())[0]).unwrap();
    assert!(json["AUC"].is_f64());
    assert!(json["ar_at"]["AR@100"].is_f64());

    // no per-video detail still yields valid files
    let mut empty = report.clone();
    empty.per_video.clear();
    let d3 = tempfile::tempdir().unwrap();
    emit_report(&empty, d3.path()).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(d3.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["per_video"], serde_json::json!([]));
    assert!(emit_report(&report, "/proc/definitely/not/writable").is_err());
}

proptest! {
    #[test]
    fn recall_is_monotone(seed in 0u64..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (props, gts) = random_corpus(&mut rng);
        let grid = [0.1, 0.3, 0.5, 0.7, 0.9];
        for &t in &grid {
            let mut prev = 0.0;
            for an in 1..=21 {
                let r = recall_at(&props, &gts, t, an).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
        }
        for an in [1, 5, 20] {
            let mut prev = 1.0;
            for &t in &grid {
                let r = recall_at(&props, &gts, t, an).unwrap();
                prop_assert!(r <= prev);
                prev = r;
            }
        }
    }

    #[test]
    fn metrics_depend_only_on_rank(seed in 0u64..300, factor in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (props, gts) = random_corpus(&mut rng);
        let scaled: ResultsMap = props
            .iter()
            .map(|(v, ps)| {
                let ps = ps.iter().cloned().map(|mut p| { p.score *= factor; p }).collect();
                (v.clone(), ps)
            })
            .collect();
        let a = evaluate(&props, &gts, &EvalSettings::default()).unwrap();
        let b = evaluate(&scaled, &gts, &EvalSettings::default()).unwrap();
        prop_assert_eq!(a.curve, b.curve);
        prop_assert_eq!(a.auc, b.auc);
        prop_assert!((0.0..=100.0).contains(&a.auc));
    }
}
