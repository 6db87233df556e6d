mod common;

use std::path::Path;

use common::{test_image, toy};
use lams_core::backend::ToyMode;
use lams_core::eval::{
    compute_metrics, dedupe_sweep, emit_report, emit_rows, load_manifest, read_report, read_rows, rows_path, run_sweep,
    ClipProvider, EvalError, HashedClip, LpipsProvider, MeanAbsLpips, ProviderError, Providers, ReportFormat,
    SweepConfig, TradeoffPoint, REPORT_COLUMNS,
};
use lams_core::imageio::{quantize, save_png, ImageInput};
use lams_core::pipeline::{EditContext, EditRequest};
use lams_core::trajectory::TrajectoryStore;
use ndarray::Array3;

fn write_manifest(dir: &Path, n: usize) -> std::path::PathBuf {
    let mut lines = Vec::new();
    for i in 0..n {
        let name = format!("img{i}.png");
        save_png(&test_image(16, i), &dir.join(&name)).unwrap();
        lines.push(format!(
            r#"{{"image": "{name}", "original_prompt": "a photo of a cat", "target_prompt": "a photo of a dog"}}"#
        ));
    }
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, lines.join("\n")).unwrap();
    path
}

fn template() -> EditRequest {
    EditRequest::new(ImageInput::Base64(String::new()), "x", "y")
}

fn sweep(dir: &Path, starts: &[usize]) -> lams_core::eval::SweepOutcome {
    let manifest = load_manifest(&write_manifest(dir, 2)).unwrap();
    let mut b = toy(ToyMode::B, 0);
    let store = TrajectoryStore::default();
    let ctx = EditContext::new(&store);
    run_sweep(&manifest, &template(), starts, &mut b, &Providers::stubs(), &ctx, &SweepConfig::default()).unwrap()
}

#[test]
fn four_point_sweep_inverts_once_per_entry_and_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let out = sweep(dir.path(), &[0, 10, 20, 30]);
    assert_eq!(out.inversions, 2);
    assert_eq!(out.points.len(), 4);
    assert_eq!(out.rows.len(), 8);
    assert!(out.rows.iter().all(|r| r.error.is_none()));
    assert_eq!(out.rows.iter().filter(|r| !r.inversion_cache_hit).count(), 2);
    let lpips: Vec<f64> = out.points.iter().map(|p| p.lpips.unwrap()).collect();
    assert!(lpips.windows(2).all(|w| w[1] <= w[0]), "{lpips:?}");
    assert!(out.points.iter().all(|p| p.n == 2 && p.fid.is_none() && p.lpips.unwrap() >= 0.0));

    let report = dir.path().join("report.csv");
    emit_report(&out.points, ReportFormat::Csv, &report).unwrap();
    let back = read_report(ReportFormat::Csv, &report).unwrap();
    assert_eq!(back, out.points);
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 5);
}

#[test]
fn single_value_sweep_aggregates_both_entries() {
    let dir = tempfile::tempdir().unwrap();
    let out = sweep(dir.path(), &[0]);
    assert_eq!(out.points.len(), 1);
    assert_eq!(out.points[0].n, 2);
}

#[test]
fn aggregates_equal_row_file_means() {
    let dir = tempfile::tempdir().unwrap();
    let out = sweep(dir.path(), &[0, 25]);
    let report = dir.path().join("r.json");
    emit_report(&out.points, ReportFormat::Json, &report).unwrap();
    emit_rows(&out.rows, ReportFormat::Json, &rows_path(&report)).unwrap();
    let rows = read_rows(ReportFormat::Json, &rows_path(&report)).unwrap();
    for p in read_report(ReportFormat::Json, &report).unwrap() {
        let at: Vec<_> = rows.iter().filter(|r| r.start_iteration == p.start_iteration).collect();
        let lp = at.iter().map(|r| r.lpips.unwrap()).sum::<f64>() / at.len() as f64;
        let cl = at.iter().map(|r| r.clip.unwrap()).sum::<f64>() / at.len() as f64;
        assert!((lp - p.lpips.unwrap()).abs() <= 1e-12);
        assert!((cl - p.clip.unwrap()).abs() <= 1e-12);
        assert_eq!(at.len(), p.n);
    }
}

#[test]
fn sweeps_are_deterministic() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a, b) = (sweep(d1.path(), &[0, 30]), sweep(d2.path(), &[0, 30]));
    assert_eq!(a.points, b.points);
    let (r1, r2) = (d1.path().join("a.csv"), d2.path().join("a.csv"));
    emit_report(&a.points, ReportFormat::Csv, &r1).unwrap();
    emit_report(&b.points, ReportFormat::Csv, &r2).unwrap();
    assert_eq!(std::fs::read(r1).unwrap(), std::fs::read(r2).unwrap());
}

#[test]
fn duplicate_sweep_values_are_dropped_with_warning() {
    let (values, warning) = dedupe_sweep(&[10, 0, 10, 20, 0]);
    assert_eq!(values, vec![10, 0, 20]);
    assert!(warning.is_some());
    assert!(dedupe_sweep(&[1, 2]).1.is_none());
    let dir = tempfile::tempdir().unwrap();
    let out = sweep(dir.path(), &[5, 5]);
    assert_eq!(out.points.len(), 1);
    assert!(out.warnings.iter().any(|w| w.contains("duplicate")));
}

#[test]
fn out_of_range_sweep_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&write_manifest(dir.path(), 1)).unwrap();
    let mut b = toy(ToyMode::A, 0);
    let store = TrajectoryStore::default();
    let err = run_sweep(
        &manifest,
        &template(),
        &[50],
        &mut b,
        &Providers::stubs(),
        &EditContext::new(&store),
        &SweepConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, EvalError::InvalidSweep(_)));
}

#[test]
fn failing_entries_are_recorded_and_the_sweep_continues() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(dir.path(), 2);
    let mut manifest = load_manifest(&path).unwrap();
    manifest.entries[0].mask_prompt = Some("dog".into());
    let mut b = toy(ToyMode::A, 0);
    let store = TrajectoryStore::default();
    let out = run_sweep(
        &manifest,
        &template(),
        &[0, 40],
        &mut b,
        &Providers::stubs(),
        &EditContext::new(&store),
        &SweepConfig::default(),
    )
    .unwrap();
    assert_eq!(out.rows.iter().filter(|r| r.error.is_some()).count(), 2);
    assert!(out.points.iter().all(|p| p.n == 1));
}

#[test]
fn manifest_loading() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(dir.path(), 3);
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.entries.len(), 3);
    assert_eq!(m.id, "manifest");

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        "{\"image\": \"img0.png\", \"original_prompt\": \"a\", \"target_prompt\": \"b\"}\n{\"image\": \"img1.png\", \"original_prompt\": \"a\"}\n",
    )
    .unwrap();
    assert!(matches!(load_manifest(&bad), Err(EvalError::Manifest { line: 2, .. })));

    let missing = dir.path().join("missing.jsonl");
    std::fs::write(&missing, "{\"image\": \"nope.png\", \"original_prompt\": \"a\", \"target_prompt\": \"b\"}\n")
        .unwrap();
    assert!(matches!(load_manifest(&missing), Err(EvalError::Manifest { line: 1, .. })));

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let e = load_manifest(&empty).unwrap();
    assert!(e.entries.is_empty());
    assert_eq!(e.warnings.len(), 1);

    assert!(matches!(load_manifest(&dir.path().join("absent.jsonl")), Err(EvalError::Io { .. })));
}

#[test]
fn stub_metrics() {
    let img = quantize(&test_image(8, 0));
    let m = compute_metrics(&img, &img, "a cat", &Providers::stubs());
    assert_eq!(m.lpips, Some(0.0));
    assert!(m.lpips_provider.is_some() && m.clip_provider.is_some());
    // Inverted colors: mean |x - (1 - x)| = mean |2x - 1|.
    let inverted = img.mapv(|v| 1.0 - v);
    let expected = img.iter().map(|v| (2.0 * v - 1.0).abs()).sum::<f64>() / img.len() as f64;
    let d = MeanAbsLpips.distance(&img, &inverted).unwrap();
    assert!((d - expected).abs() < 1e-12);
    let clip = HashedClip::default();
    assert_eq!(clip.score(&img, "a cat").unwrap(), clip.score(&img, "a cat").unwrap());
    assert!(MeanAbsLpips.distance(&img, &Array3::zeros((3, 4, 4))).is_err());
}

#[test]
fn provider_failure_marks_metric_unavailable() {
    struct Down;
    impl ClipProvider for Down {
        fn name(&self) -> String {
            "down".into()
        }
        fn version(&self) -> String {
            "0".into()
        }
        fn score(&self, _: &lams_core::tensor::Image, _: &str) -> Result<f64, ProviderError> {
            Err(ProviderError { provider: "down".into(), message: "offline".into() })
        }
    }
    let providers = Providers { clip: Some(Box::new(Down)), ..Providers::stubs() };
    let img = test_image(8, 0);
    let m = compute_metrics(&img, &img, "x", &providers);
    assert_eq!(m.clip, None);
    assert_eq!(m.lpips, Some(0.0));
    assert_eq!(m.errors.len(), 1);
}

#[test]
fn report_formats() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    emit_report(&[], ReportFormat::Csv, &empty).unwrap();
    assert_eq!(std::fs::read_to_string(&empty).unwrap().trim(), REPORT_COLUMNS.join(","));
    assert!(read_report(ReportFormat::Csv, &empty).unwrap().is_empty());

    let points = vec![
        TradeoffPoint {
            label: "lams".into(),
            start_iteration: 0,
            lpips: Some(0.25),
            clip: Some(31.5),
            fid: None,
            n: 2,
        },
        TradeoffPoint {
            label: "lams".into(),
            start_iteration: 10,
            lpips: None,
            clip: Some(30.0),
            fid: Some(12.0),
            n: 1,
        },
    ];
    for name in ["r.csv", "r.json"] {
        let p = dir.path().join(name);
        let fmt = ReportFormat::from_path(&p);
        emit_report(&points, fmt, &p).unwrap();
        assert_eq!(read_report(fmt, &p).unwrap(), points);
    }
    assert_eq!(rows_path(Path::new("/x/r.csv")), Path::new("/x/r.rows.csv"));
    assert!(emit_report(&points, ReportFormat::Csv, Path::new("/nonexistent/dir/r.csv")).is_err());
}
