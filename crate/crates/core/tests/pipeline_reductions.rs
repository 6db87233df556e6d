mod common;

use common::{test_image, toy, wz, WA};
use lams_core::backend::{CountingBackend, DiffusionBackend, LowRankDelta, StyleAdapter, StyleAdapterRef, ToyMode};
use lams_core::imageio::ImageInput;
use lams_core::inversion::invert;
use lams_core::masking::{MaskOptions, Rect, RoiMask, StubRule, StubSegmenter};
use lams_core::pipeline::{
    edit, edit_with_inputs, reconstruct, EditContext, EditInputs, EditRequest, EditResult, PipelineError, Progress,
    SamplerConfig, Stage,
};
use lams_core::schedule::{Decay, SchedulerSpec};
use lams_core::tensor::{bit_identical, max_abs_diff, Image};
use lams_core::trajectory::TrajectoryStore;
use ndarray::Array2;

const SRC: &str = "a photo of a cat";
const TGT: &str = "a photo of a dog";

fn request(src: &str, tgt: &str) -> EditRequest {
    EditRequest::new(ImageInput::Base64(String::new()), src, tgt)
}

fn off() -> SchedulerSpec {
    SchedulerSpec::constant(0.0, 50)
}

fn run(req: &EditRequest, image: &Image, mode: ToyMode, seed: u64) -> EditResult {
    run_masked(req, image, None, mode, seed)
}

fn run_masked(req: &EditRequest, image: &Image, mask: Option<RoiMask>, mode: ToyMode, seed: u64) -> EditResult {
    let mut b = toy(mode, seed);
    let store = TrajectoryStore::default();
    let ctx = EditContext::new(&store);
    let inputs = EditInputs { image: image.clone(), mask };
    edit_with_inputs(req, &inputs, &mut b, &ctx, &mut |_| {}).unwrap()
}

fn inverted_z0(req: &EditRequest, image: &Image, mode: ToyMode, seed: u64) -> Image {
    let b = toy(mode, seed);
    let store = TrajectoryStore::default();
    let ctx = EditContext::new(&store);
    let inv = invert(image, &req.source_prompt, &b, &req.inversion_config(&ctx.site_filter), &store).unwrap();
    (*inv.trajectories.latents.lookup(0).unwrap()).clone()
}

#[test]
fn default_schedules_match_published_arrays() {
    let r = run(&request(SRC, TGT), &test_image(8, 0), ToyMode::A, 0);
    let wa = &r.summary.schedules.attention.weights;
    assert!(wa.iter().zip(WA).all(|(a, b)| (a - b).abs() <= 5e-4));
    assert_eq!(r.summary.schedules.latent.weights, wz());
}

#[test]
fn full_latent_mixing_returns_inverted_start() {
    for mode in [ToyMode::A, ToyMode::B] {
        let img = test_image(16, 1);
        let mut req = request(SRC, TGT);
        req.latent_schedule = SchedulerSpec::new(1.0, 1.0, 50, Decay::Stepped);
        let r = run(&req, &img, mode, 2);
        assert!(bit_identical(&r.latent, &inverted_z0(&req, &img, mode, 2)));
        // The toy codec is the identity, so the output is the input.
        assert!(bit_identical(&r.edited, &img));
    }
}

#[test]
fn empty_mask_returns_inverted_start() {
    let img = test_image(16, 2);
    let req = request(SRC, TGT);
    let mask = RoiMask::from_user(Array2::zeros((16, 16)), [16, 16], MaskOptions::default()).unwrap();
    let r = run_masked(&req, &img, Some(mask), ToyMode::B, 3);
    assert!(bit_identical(&r.latent, &img));
    assert_eq!(r.summary.mask.as_ref().unwrap().latent_coverage, 0.0);
}

#[test]
fn full_mask_equals_no_mask() {
    let img = test_image(8, 2);
    let req = request(SRC, TGT);
    let mask = RoiMask::from_user(Array2::ones((8, 8)), [8, 8], MaskOptions::default()).unwrap();
    let masked = run_masked(&req, &img, Some(mask), ToyMode::B, 3);
    let plain = run(&req, &img, ToyMode::B, 3);
    assert!(bit_identical(&masked.latent, &plain.latent));
}

#[test]
fn partial_mask_keeps_outside_cells() {
    let img = test_image(16, 2);
    let req = request(SRC, TGT);
    let m = Array2::from_shape_fn((16, 16), |(y, _)| u8::from(y < 8));
    let mask = RoiMask::from_user(m, [16, 16], MaskOptions::default()).unwrap();
    let r = run_masked(&req, &img, Some(mask), ToyMode::B, 3);
    for ((c, y, x), v) in r.latent.indexed_iter() {
        if y >= 8 {
            assert_eq!(*v, img[[c, y, x]]);
        }
    }
    assert!(max_abs_diff(&r.latent, &img) > 1e-3);
}

#[test]
fn all_off_identity_prompt_equals_reconstruction() {
    for (mode, guidance) in [(ToyMode::A, 1.0), (ToyMode::A, 7.5), (ToyMode::B, 7.5), (ToyMode::B, 1.0)] {
        for seed in [0, 7] {
            let img = test_image(16, seed as usize);
            let mut req = request(SRC, SRC);
            req.attention_schedule = off();
            req.latent_schedule = off();
            req.sampler = SamplerConfig { guidance, seed, ..SamplerConfig::default() };
            let r = run(&req, &img, mode, seed);
            let b = toy(mode, seed);
            let store = TrajectoryStore::default();
            let plain = reconstruct(&img, SRC, &req.sampler, &b, &EditContext::new(&store)).unwrap();
            assert!(bit_identical(&r.latent, &plain.latent), "{mode:?} g={guidance} seed={seed}");
            assert!(bit_identical(&r.reconstruction_latent, &plain.latent));
            if mode == ToyMode::A && guidance == 1.0 {
                assert!(max_abs_diff(&r.edited, &img) <= 1e-5);
            }
        }
    }
}

#[test]
fn identical_requests_are_bit_identical() {
    let img = test_image(16, 3);
    let req = request(SRC, TGT);
    let a = run(&req, &img, ToyMode::B, 5);
    let b = run(&req, &img, ToyMode::B, 5);
    assert!(bit_identical(&a.edited, &b.edited));
    assert!(bit_identical(&a.reconstruction, &b.reconstruction));
    assert_eq!(a.summary.output_hash, b.summary.output_hash);
    assert_eq!(a.summary.request_hash, b.summary.request_hash);
    assert_eq!(a.edited.dim(), img.dim());
}

#[test]
fn three_predictions_per_iteration() {
    let img = test_image(8, 0);
    for (start, guidance) in [(0, 7.5), (20, 7.5), (0, 1.0)] {
        let mut req = request(SRC, TGT);
        req.start_iteration = start;
        req.sampler.guidance = guidance;
        let mut b = CountingBackend::new(toy(ToyMode::B, 0));
        let counts = b.counts();
        let store = TrajectoryStore::default();
        let ctx = EditContext::new(&store);
        let inputs = EditInputs { image: img.clone(), mask: None };
        let mut iterations = 0;
        edit_with_inputs(&req, &inputs, &mut b, &ctx, &mut |p| {
            if matches!(p, Progress::Iteration { .. }) {
                iterations += 1;
            }
        })
        .unwrap();
        let loop_iters = 50 - start;
        assert_eq!(iterations, loop_iters);
        // Inversion adds one guidance-1 prediction per step.
        assert_eq!(counts.predict(), 50 + 3 * loop_iters);
        let per_predict = if guidance == 1.0 { 1 } else { 2 };
        assert_eq!(counts.branch(), 50 + 3 * loop_iters * per_predict);
    }
}

#[test]
fn start_iteration_begins_from_matching_latent() {
    let img = test_image(8, 1);
    let mut req = request(SRC, TGT);
    req.start_iteration = 49;
    req.latent_schedule = off();
    let r = run(&req, &img, ToyMode::A, 1);
    // One iteration from z*_1: the reconstruction branch is a single DDIM step.
    let b = toy(ToyMode::A, 1);
    let store = TrajectoryStore::default();
    let inv = invert(&img, SRC, &b, &req.inversion_config(&Default::default()), &store).unwrap();
    let z1 = inv.trajectories.latents.lookup(1).unwrap();
    let sched = b.noise_schedule(50).unwrap();
    let cond = b.embed(SRC).unwrap();
    let eps = b.predict(&z1, 1, 50, &cond, 7.5, lams_core::backend::AttentionControl::none()).unwrap().eps;
    assert!(bit_identical(&r.reconstruction_latent, &sched.ddim_step(&z1, &eps, 1).unwrap()));
    assert_eq!(r.summary.timings.per_iteration_ms.len(), 1);

    let mut late = request(SRC, TGT);
    late.start_iteration = 50;
    let errs = late.validate();
    assert!(errs.iter().any(|e| e.field == "start_iteration"));
}

#[test]
fn later_start_stays_closer_to_input() {
    let img = test_image(16, 0);
    let dist = |k: usize| {
        let mut req = request(SRC, TGT);
        req.start_iteration = k;
        max_abs_diff(&run(&req, &img, ToyMode::B, 0).edited, &img)
    };
    let (d0, d20, d40) = (dist(0), dist(20), dist(40));
    assert!(d0 >= d20 && d20 >= d40, "{d0} {d20} {d40}");
}

const GOLDEN_DEFAULT_HASH: &str = "52ba9839629408691fbcbe2ba7ef0b24";

#[test]
fn default_edit_differs_from_input_and_plain_p2p() {
    let img = test_image(16, 4);
    let req = request(SRC, TGT);
    let lams = run(&req, &img, ToyMode::B, 11);
    let mut p2p_only = req.clone();
    p2p_only.attention_schedule = off();
    p2p_only.latent_schedule = off();
    let plain = run(&p2p_only, &img, ToyMode::B, 11);
    assert!(max_abs_diff(&lams.edited, &img) > 1e-3);
    assert!(max_abs_diff(&lams.edited, &plain.edited) > 1e-3);
    assert_eq!(lams.summary.output_hash, GOLDEN_DEFAULT_HASH);
}

fn bias_adapter_file(dir: &std::path::Path) -> std::path::PathBuf {
    let adapter = StyleAdapter {
        name: "warm".into(),
        scale: 1.0,
        deltas: vec![LowRankDelta {
            target: "bias".into(),
            up: Array2::from_shape_vec((3, 1), vec![0.2, 0.0, -0.2]).unwrap(),
            down: Array2::ones((1, 1)),
            alpha: None,
        }],
    };
    let path = dir.join("warm.json");
    std::fs::write(&path, serde_json::to_vec(&adapter).unwrap()).unwrap();
    path
}

#[test]
fn adapter_loads_after_inversion_and_unloads() {
    let dir = tempfile::tempdir().unwrap();
    let path = bias_adapter_file(dir.path());
    let img = test_image(8, 0);
    let mut req = request(SRC, SRC);
    req.adapter = Some(StyleAdapterRef { path: path.display().to_string(), scale: 1.0 });

    let mut b = toy(ToyMode::B, 0);
    let base_id = b.id();
    let store = TrajectoryStore::default();
    let ctx = EditContext::new(&store);
    let inputs = EditInputs { image: img.clone(), mask: None };
    let mut stages = Vec::new();
    let styled = edit_with_inputs(&req, &inputs, &mut b, &ctx, &mut |p| {
        if let Progress::Stage { stage } = p {
            stages.push(stage);
        }
    })
    .unwrap();
    assert_eq!(b.id(), base_id);
    assert!(b.active_adapter().is_none());
    let inv_pos = stages.iter().position(|s| *s == Stage::Invert).unwrap();
    let ad_pos = stages.iter().position(|s| *s == Stage::Adapter).unwrap();
    let dn_pos = stages.iter().position(|s| *s == Stage::Denoise).unwrap();
    assert!(inv_pos < ad_pos && ad_pos < dn_pos);

    // The inversion is shared with the adapter-free run: same key, cache hit.
    let mut plain_req = req.clone();
    plain_req.adapter = None;
    let plain = edit_with_inputs(&plain_req, &inputs, &mut b, &ctx, &mut |_| {}).unwrap();
    assert_eq!(plain.summary.inversion_key, styled.summary.inversion_key);
    assert!(plain.summary.inversion_cache_hit);
    assert!(max_abs_diff(&plain.edited, &styled.edited) > 1e-3);

    // Zero merge scale leaves the result unchanged.
    let mut zero = req.clone();
    zero.adapter = Some(StyleAdapterRef { path: path.display().to_string(), scale: 0.0 });
    let z = edit_with_inputs(&zero, &inputs, &mut b, &ctx, &mut |_| {}).unwrap();
    assert!(bit_identical(&z.edited, &plain.edited));
}

#[test]
fn adapter_failure_names_stage_and_leaves_backend_clean() {
    let img = test_image(8, 0);
    let mut req = request(SRC, TGT);
    req.adapter = Some(StyleAdapterRef { path: "/nonexistent/adapter.json".into(), scale: 1.0 });
    let mut b = toy(ToyMode::A, 0);
    let store = TrajectoryStore::default();
    let ctx = EditContext::new(&store);
    let err = edit_with_inputs(&req, &EditInputs { image: img, mask: None }, &mut b, &ctx, &mut |_| {}).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Adapter));
    assert!(b.active_adapter().is_none());
}

fn png_request(dir: &std::path::Path, img: &Image) -> EditRequest {
    let path = dir.join("input.png");
    lams_core::imageio::save_png(img, &path).unwrap();
    EditRequest::new(ImageInput::Path(path.display().to_string()), SRC, TGT)
}

#[test]
fn mask_prompt_uses_the_segmenter() {
    let dir = tempfile::tempdir().unwrap();
    let img = lams_core::imageio::quantize(&test_image(16, 0));
    let mut req = png_request(dir.path(), &img);
    req.mask_prompt = Some("the dog".into());
    let seg = StubSegmenter::new(vec![StubRule {
        keyword: "dog".into(),
        rects: vec![Rect { top: 0, left: 0, height: 8, width: 16 }],
        score: 0.9,
    }]);
    let store = TrajectoryStore::default();
    let mut ctx = EditContext::new(&store);
    ctx.segmenter = Some(&seg);
    let mut b = toy(ToyMode::B, 0);
    let r = edit(&req, &mut b, &ctx, &mut |_| {}).unwrap();
    let mask = r.mask.as_ref().unwrap();
    assert_eq!(mask.latent.iter().filter(|&&v| v == 1).count(), 8 * 16);
    assert_eq!(r.summary.mask.as_ref().unwrap().latent_coverage, 0.5);
    for ((c, y, x), v) in r.latent.indexed_iter() {
        if y >= 8 {
            assert_eq!(*v, img[[c, y, x]]);
        }
    }

    // A prompt matching nothing gives an empty mask with a warning, so the output is z*_0.
    req.mask_prompt = Some("a tree".into());
    let r = edit(&req, &mut b, &ctx, &mut |_| {}).unwrap();
    assert!(r.summary.mask.as_ref().unwrap().warning.is_some());
    assert!(bit_identical(&r.latent, &img));
}

#[test]
fn unavailable_segmenter_is_retryable() {
    let dir = tempfile::tempdir().unwrap();
    let mut req = png_request(dir.path(), &test_image(8, 0));
    req.mask_prompt = Some("dog".into());
    let store = TrajectoryStore::default();
    let mut b = toy(ToyMode::A, 0);

    let err = edit(&req, &mut b, &EditContext::new(&store), &mut |_| {}).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Mask));
    assert!(err.is_retryable());

    let offline = StubSegmenter::offline();
    let mut ctx = EditContext::new(&store);
    ctx.segmenter = Some(&offline);
    let err = edit(&req, &mut b, &ctx, &mut |_| {}).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Mask));
    assert!(err.is_retryable());
}

#[test]
fn user_mask_file_takes_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let img = lams_core::imageio::quantize(&test_image(8, 0));
    let mut req = png_request(dir.path(), &img);
    let mask_path = dir.path().join("mask.png");
    std::fs::write(&mask_path, lams_core::masking::encode_mask_png(&Array2::zeros((8, 8))).unwrap()).unwrap();
    req.mask = Some(ImageInput::Path(mask_path.display().to_string()));
    req.mask_prompt = Some("dog".into());
    let store = TrajectoryStore::default();
    let mut b = toy(ToyMode::B, 0);
    let r = edit(&req, &mut b, &EditContext::new(&store), &mut |_| {}).unwrap();
    assert!(bit_identical(&r.latent, &img));

    std::fs::write(&mask_path, lams_core::masking::encode_mask_png(&Array2::zeros((4, 8))).unwrap()).unwrap();
    let err = edit(&req, &mut b, &EditContext::new(&store), &mut |_| {}).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Mask));
}

#[test]
fn invalid_requests_list_fields() {
    let mut req = request("", SRC);
    req.target_prompt = "  ".into();
    req.sampler.guidance = -1.0;
    req.attention_schedule = SchedulerSpec::new(0.2, 0.5, 10, Decay::Linear);
    req.latent_schedule = SchedulerSpec::new(0.6, 0.0, 80, Decay::Stepped);
    let mut b = toy(ToyMode::A, 0);
    let store = TrajectoryStore::default();
    let err = edit(&req, &mut b, &EditContext::new(&store), &mut |_| {}).unwrap_err();
    let PipelineError::Invalid(errs) = err else { panic!("expected field errors") };
    let fields: Vec<_> = errs.iter().map(|e| e.field.as_str()).collect();
    for f in ["source_prompt", "target_prompt", "sampler.guidance", "attention_schedule", "latent_schedule"] {
        assert!(fields.contains(&f), "{f} missing from {fields:?}");
    }
}

#[test]
fn load_errors_name_the_stage() {
    let mut req = request(SRC, TGT);
    req.image = ImageInput::Path("/nonexistent.png".into());
    let mut b = toy(ToyMode::A, 0);
    let store = TrajectoryStore::default();
    let err = edit(&req, &mut b, &EditContext::new(&store), &mut |_| {}).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Load));
    assert!(!err.is_retryable());
}
