mod common;

use common::{test_image, toy};
use lams_core::backend::{
    AttentionControl, DiffusionBackend, LowRankDelta, StyleAdapter, ToyAffineBackend, ToyConfig, ToyMode,
};
use lams_core::tensor::{bit_identical, max_abs_diff, Latent};
use lams_core::trajectory::{SiteFilter, SiteKind};
use ndarray::{Array2, Array3};

fn bias_adapter(shift: &[f64], scale: f64) -> StyleAdapter {
    let c = shift.len();
    StyleAdapter {
        name: "bias-shift".into(),
        scale,
        deltas: vec![LowRankDelta {
            target: "bias".into(),
            up: Array2::from_shape_vec((c, 1), shift.to_vec()).unwrap(),
            down: Array2::ones((1, 1)),
            alpha: None,
        }],
    }
}

fn eps(b: &ToyAffineBackend, z: &Latent, prompt: &str, guidance: f64) -> Latent {
    let cond = b.embed(prompt).unwrap();
    b.predict(z, 20, 50, &cond, guidance, AttentionControl::none()).unwrap().eps
}

#[test]
fn guidance_one_is_the_conditional_branch() {
    for mode in [ToyMode::A, ToyMode::B] {
        let b = toy(mode, 3);
        let z = test_image(8, 1);
        let cond = b.embed("a red barn").unwrap();
        let guided = b.predict(&z, 7, 50, &cond, 1.0, AttentionControl::none()).unwrap().eps;
        let mut hook = lams_core::backend::RecordInjectHook::new(AttentionControl::none(), &[]).unwrap();
        let branch = b.predict_branch(&z, 7, 50, &cond, &mut hook).unwrap();
        assert!(bit_identical(&guided, &branch));
    }
}

#[test]
fn guidance_combines_branches_linearly() {
    let b = toy(ToyMode::B, 4);
    let z = test_image(8, 2);
    let e1 = eps(&b, &z, "a dog", 1.0);
    let e0 = eps(&b, &z, "a dog", 0.0);
    let e75 = eps(&b, &z, "a dog", 7.5);
    let expected = &e0 + &((&e1 - &e0) * 7.5);
    assert!(max_abs_diff(&e75, &expected) < 1e-12);
    // Guidance 0 is the unconditional branch.
    assert!(max_abs_diff(&e0, &eps(&b, &z, "", 1.0)) < 1e-15);
}

#[test]
fn self_injection_is_a_fixed_point() {
    for mode in [ToyMode::A, ToyMode::B] {
        let b = toy(mode, 5);
        let z = test_image(16, 0);
        let cond = b.embed("a cat on a mat").unwrap();
        let filter = SiteFilter::all();
        let rec = b.predict(&z, 30, 50, &cond, 7.5, AttentionControl::record(&filter)).unwrap();
        let snap = rec.snapshot.unwrap();
        let inj = b.predict(&z, 30, 50, &cond, 7.5, AttentionControl::inject(&snap)).unwrap();
        assert!(bit_identical(&rec.eps, &inj.eps));
    }
}

#[test]
fn injecting_foreign_maps_changes_eps() {
    let b = toy(ToyMode::A, 5);
    let z = test_image(16, 0);
    let filter = SiteFilter::all();
    let cat = b.embed("a cat").unwrap();
    let dog = b.embed("a dog").unwrap();
    let snap = b.predict(&z, 30, 50, &cat, 1.0, AttentionControl::record(&filter)).unwrap().snapshot.unwrap();
    let plain = b.predict(&z, 30, 50, &dog, 1.0, AttentionControl::none()).unwrap().eps;
    let injected = b.predict(&z, 30, 50, &dog, 1.0, AttentionControl::inject(&snap)).unwrap().eps;
    assert!(max_abs_diff(&plain, &injected) > 1e-6);
}

#[test]
fn injection_rejects_unknown_sites_and_shapes() {
    let b = toy(ToyMode::A, 1);
    let other = ToyAffineBackend::new(ToyConfig {
        sites: vec![lams_core::backend::ToySite { name: "x".into(), kind: SiteKind::Cross, factor: 1, heads: 1 }],
        ..ToyConfig::default()
    })
    .unwrap();
    let z = test_image(8, 0);
    let cond = b.embed("a cat").unwrap();
    let filter = SiteFilter::all();
    let foreign = other.predict(&z, 1, 10, &cond, 1.0, AttentionControl::record(&filter)).unwrap().snapshot.unwrap();
    assert!(b.predict(&z, 1, 10, &cond, 1.0, AttentionControl::inject(&foreign)).is_err());

    let small = b.predict(&test_image(4, 0), 1, 10, &cond, 1.0, AttentionControl::record(&filter)).unwrap();
    let err = b.predict(&z, 1, 10, &cond, 1.0, AttentionControl::inject(&small.snapshot.unwrap()));
    assert!(err.is_err());
}

#[test]
fn mode_a_eps_is_independent_of_z() {
    let b = toy(ToyMode::A, 9);
    let z1 = test_image(8, 0);
    let z2 = test_image(8, 5) * -3.0;
    for t in [1, 25, 50] {
        let cond = b.embed("a bowl of fruit").unwrap();
        let e1 = b.predict(&z1, t, 50, &cond, 7.5, AttentionControl::none()).unwrap().eps;
        let e2 = b.predict(&z2, t, 50, &cond, 7.5, AttentionControl::none()).unwrap().eps;
        assert!(bit_identical(&e1, &e2));
    }
}

#[test]
fn mode_b_coupling_is_contractive() {
    let b = toy(ToyMode::B, 9);
    let z1 = test_image(8, 0);
    let z2 = test_image(8, 3);
    let e1 = eps(&b, &z1, "a bowl of fruit", 1.0);
    let e2 = eps(&b, &z2, "a bowl of fruit", 1.0);
    let dz = (&z1 - &z2).mapv(|v| v * v).sum().sqrt();
    let de = (&e1 - &e2).mapv(|v| v * v).sum().sqrt();
    assert!(de > 0.0);
    assert!(de <= 0.1 * dz + 1e-12, "{de} vs {dz}");
}

#[test]
fn snapshots_are_row_stochastic() {
    for mode in [ToyMode::A, ToyMode::B] {
        let b = toy(mode, 2);
        let cond = b.embed("an old wooden chair").unwrap();
        let filter = SiteFilter::all();
        for size in [8, 12, 16] {
            let z = test_image(size, 1);
            let snap = b.predict(&z, 10, 50, &cond, 7.5, AttentionControl::record(&filter)).unwrap().snapshot.unwrap();
            assert_eq!(snap.len(), 4);
            assert!(snap.max_row_sum_error() <= 1e-5);
            assert!(snap.maps().iter().all(|m| m.iter().all(|&p| p >= 0.0)));
        }
    }
}

#[test]
fn site_filter_limits_recorded_sites() {
    let b = toy(ToyMode::A, 2);
    let cond = b.embed("a chair").unwrap();
    let z = test_image(16, 0);
    let filter = SiteFilter { max_query_tokens: 16, allow: None };
    let snap = b.predict(&z, 10, 50, &cond, 1.0, AttentionControl::record(&filter)).unwrap().snapshot.unwrap();
    let names: Vec<_> = snap.sites().iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["down.self.f4", "mid.cross.f4", "up.cross.f8"]);
}

#[test]
fn zero_scale_adapter_leaves_predictions_unchanged() {
    let mut b = toy(ToyMode::B, 6);
    let z = test_image(8, 1);
    let before = eps(&b, &z, "a cat", 7.5);
    b.load_style_adapter(&bias_adapter(&[0.3, -0.2, 0.5], 0.0)).unwrap();
    assert!(bit_identical(&before, &eps(&b, &z, "a cat", 7.5)));
}

#[test]
fn bias_adapter_shifts_eps_exactly() {
    let mut b = toy(ToyMode::B, 6);
    let z = test_image(8, 1);
    let before = eps(&b, &z, "a cat", 1.0);
    let shift = [0.3, -0.2, 0.5];
    b.load_style_adapter(&bias_adapter(&shift, 1.0)).unwrap();
    let after = eps(&b, &z, "a cat", 1.0);
    let expected = Array3::from_shape_fn(before.dim(), |(c, y, x)| before[[c, y, x]] + shift[c]);
    assert!(max_abs_diff(&after, &expected) < 1e-12);
    // Under guidance both branches shift equally, so the shift survives CFG.
    b.unload_style_adapter();
    let g_before = eps(&b, &z, "a cat", 7.5);
    b.load_style_adapter(&bias_adapter(&shift, 0.5)).unwrap();
    let g_after = eps(&b, &z, "a cat", 7.5);
    let expected = Array3::from_shape_fn(g_before.dim(), |(c, y, x)| g_before[[c, y, x]] + 0.5 * shift[c]);
    assert!(max_abs_diff(&g_after, &expected) < 1e-12);
}

#[test]
fn adapter_load_is_idempotent_and_reversible() {
    let mut b = toy(ToyMode::B, 6);
    let z = test_image(8, 1);
    let base = eps(&b, &z, "a cat", 7.5);
    let base_id = b.id();
    let adapter = bias_adapter(&[0.1, 0.2, 0.3], 0.8);
    b.load_style_adapter(&adapter).unwrap();
    let once = eps(&b, &z, "a cat", 7.5);
    let id_once = b.id();
    b.load_style_adapter(&adapter).unwrap();
    assert!(bit_identical(&once, &eps(&b, &z, "a cat", 7.5)));
    assert_eq!(b.id(), id_once);
    assert_ne!(id_once, base_id);
    b.unload_style_adapter();
    assert!(bit_identical(&base, &eps(&b, &z, "a cat", 7.5)));
    assert_eq!(b.id(), base_id);
}

#[test]
fn adapter_preserves_schedule_shape_and_registry() {
    let mut b = toy(ToyMode::A, 6);
    let sched = b.noise_schedule(50).unwrap();
    let shape = b.latent_shape(16, 16).unwrap();
    let registry = b.site_registry(shape);
    let qk = format!("attn.{}.qk", "mid.cross.f4");
    let adapter = StyleAdapter {
        name: "attn".into(),
        scale: 1.0,
        deltas: vec![LowRankDelta {
            target: qk,
            up: Array2::from_elem((2 * 7, 2), 0.1),
            down: Array2::from_elem((2, 8), 0.2),
            alpha: Some(1.0),
        }],
    };
    b.load_style_adapter(&adapter).unwrap();
    assert_eq!(b.noise_schedule(50).unwrap(), sched);
    assert_eq!(b.latent_shape(16, 16).unwrap(), shape);
    assert_eq!(b.site_registry(shape), registry);
    let img = test_image(16, 0);
    assert!(bit_identical(&b.decode(&b.encode(&img).unwrap()).unwrap(), &img));
}

#[test]
fn adapter_errors() {
    let mut b = toy(ToyMode::A, 6);
    let missing = StyleAdapter {
        name: "m".into(),
        scale: 1.0,
        deltas: vec![LowRankDelta {
            target: "nope".into(),
            up: Array2::ones((3, 1)),
            down: Array2::ones((1, 1)),
            alpha: None,
        }],
    };
    assert!(b.load_style_adapter(&missing).is_err());
    let bad_rank = StyleAdapter {
        name: "r".into(),
        scale: 1.0,
        deltas: vec![LowRankDelta {
            target: "bias".into(),
            up: Array2::ones((3, 2)),
            down: Array2::ones((1, 1)),
            alpha: None,
        }],
    };
    assert!(b.load_style_adapter(&bad_rank).is_err());
    // Codec and schedule are not adaptable.
    let codec = StyleAdapter {
        name: "c".into(),
        scale: 1.0,
        deltas: vec![LowRankDelta {
            target: "mix.channel".into(),
            up: Array2::ones((3, 1)),
            down: Array2::ones((1, 3)),
            alpha: None,
        }],
    };
    assert!(b.load_style_adapter(&codec).is_err());
    assert!(b.active_adapter().is_none());
}

#[test]
fn embeddings_are_deterministic() {
    let b = toy(ToyMode::A, 11);
    let a1 = b.embed("a cat").unwrap();
    let a2 = b.embed("a cat").unwrap();
    assert_eq!(a1, a2);
    let dog = b.embed("a dog").unwrap();
    assert_ne!(a1.vectors.row(2), dog.vectors.row(2));
    assert_eq!(a1.vectors.row(1), dog.vectors.row(1));
    let other_seed = toy(ToyMode::A, 12).embed("a cat").unwrap();
    assert_ne!(a1.vectors, other_seed.vectors);
}

#[test]
fn empty_prompt_is_unconditional() {
    let b = toy(ToyMode::A, 11);
    let u = b.embed("").unwrap();
    assert!(u.is_unconditional);
    assert!(u.words.is_empty());
    assert!(!b.embed("x").unwrap().is_unconditional);
}

#[test]
fn overlong_prompt_is_rejected() {
    let b = toy(ToyMode::A, 11);
    let long = vec!["word"; 40].join(" ");
    assert!(b.embed(&long).is_err());
}

#[test]
fn codec_is_identity_and_checks_shapes() {
    let b = toy(ToyMode::A, 0);
    let img = test_image(8, 3);
    let z = b.encode(&img).unwrap();
    assert!(bit_identical(&z, &img));
    assert!(bit_identical(&b.decode(&z).unwrap(), &img));
    assert!(b.encode(&Array3::zeros((1, 8, 8))).is_err());
    assert!(b.decode(&Array3::zeros((2, 8, 8))).is_err());

    let gray = ToyAffineBackend::new(ToyConfig::mode_a(0).with_channels(1)).unwrap();
    let g = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| (y * 8 + x) as f64 / 64.0);
    let gz = gray.encode(&g).unwrap();
    assert_eq!(gz.dim(), (1, 8, 8));
    assert!(bit_identical(&gray.decode(&gz).unwrap(), &g));
}

#[test]
fn timestep_bounds_are_enforced() {
    let b = toy(ToyMode::A, 0);
    let z = test_image(8, 0);
    let cond = b.embed("a").unwrap();
    assert!(b.predict(&z, 0, 50, &cond, 1.0, AttentionControl::none()).is_err());
    assert!(b.predict(&z, 51, 50, &cond, 1.0, AttentionControl::none()).is_err());
}
