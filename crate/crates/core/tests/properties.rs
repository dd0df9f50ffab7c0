use std::path::PathBuf;

use depthrefine::camera::{
    depth_to_linear, depth_to_reciprocal, relative_transform, Intrinsics, Pose, ProjectionMatrix,
};
use depthrefine::field::{field_eval, field_init, FieldConfig};
use depthrefine::image::{ColorImage, DepthMap};
use depthrefine::imageops::{gaussian_blur5, sobel_edge_image, Plane};
use depthrefine::io::{parse_manifest_str, read_ppm, write_ppm, SceneManifest, ViewRecord};
use depthrefine::losses::{l_geo_map, l_photo, r_edge, r_poisson, r_smooth, ProjectedPoint, Stage};
use depthrefine::meshing::{build_depth_mesh, decimate, grid_dims, FZ_MAX, FZ_MIN};
use depthrefine::metrics::compute_metrics;
use depthrefine::pipeline::{global_align, RefinementState};
use depthrefine::raster::{apply_vertex_params, render, Camera, FieldOutputs, Shading};
use depthrefine::synth::{generate_scene, Preset, SceneSpec};
use depthrefine::PipelineConfig;
use nalgebra::{Matrix4, Vector3};
use proptest::prelude::*;

fn pose_strategy() -> impl Strategy<Value = Pose> {
    (prop::array::uniform4(-1.0f64..1.0), prop::array::uniform3(-5.0f64..5.0))
        .prop_filter("non-degenerate quaternion", |(q, _)| {
            q.iter().map(|v| v * v).sum::<f64>() > 0.01
        })
        .prop_map(|(q, t)| Pose::from_quaternion(q, t).unwrap())
}

/// Smooth positive depth map from a few wave parameters.
fn wavy_depth(w: usize, h: usize, p: [f64; 4]) -> DepthMap {
    DepthMap::from_fn(w, h, |x, y| {
        Some(2.0 + p[0] * (p[1] * x as f64).sin() + p[2] * (p[3] * y as f64).cos())
    })
}

fn camera(w: usize, h: usize) -> Camera {
    let f = 0.9 * w as f64;
    let c = Intrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
    Camera::new(c, Pose::identity(), 0.1, 100.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reciprocal_is_increasing_and_invertible(near in 0.01f64..1.0, span in 2.0f64..1e4, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let far = near * span;
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let z = |t: f64| near * span.powf(t);
        prop_assume!(z(hi) > z(lo));
        let (rl, rh) = (depth_to_reciprocal(z(lo), near, far).unwrap(), depth_to_reciprocal(z(hi), near, far).unwrap());
        prop_assert!(rh >= rl);
        let back = depth_to_linear(rl, near, far).unwrap();
        prop_assert!((back - z(lo)).abs() <= 1e-9 * z(lo));
    }

    #[test]
    fn projection_depth_matches_conversion(near in 0.01f64..1.0, span in 2.0f64..1e4, t in 0.0f64..1.0) {
        let far = near * span;
        let c = Intrinsics::new(100.0, 100.0, 64.0, 48.0, 128, 96).unwrap();
        let p = ProjectionMatrix::from_intrinsics(&c, near, far).unwrap();
        let z = near * span.powf(t);
        let clip = p.clip(&Vector3::new(0.0, 0.0, -z));
        prop_assert!((clip.z / clip.w - depth_to_reciprocal(z, near, far).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn relative_transform_of_itself_is_identity(p in pose_strategy()) {
        prop_assert!((relative_transform(&p, &p) - Matrix4::identity()).amax() < 1e-12);
    }

    #[test]
    fn manifest_text_round_trips(poses in prop::collection::vec(pose_strategy(), 1..5), near in 0.05f64..1.0) {
        let c = Intrinsics::new(50.0, 51.0, 32.0, 24.5, 64, 48).unwrap();
        let views: Vec<ViewRecord> = poses
            .iter()
            .enumerate()
            .map(|(i, p)| ViewRecord {
                id: i as u32 * 3,
                image: PathBuf::from(format!("v{i}.ppm")),
                intrinsics: c,
                quaternion: p.quaternion(),
                translation: p.translation.into(),
            })
            .collect();
        let m = SceneManifest {
            version: 1,
            near,
            far: 100.0,
            ref_view: views[views.len() - 1].id,
            views,
            points: "p.txt".into(),
            mono: "m.pfm".into(),
            gt: None,
            base_dir: PathBuf::from("/data"),
        };
        let back = parse_manifest_str(&m.to_text(), PathBuf::from("/data")).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert!(back.views.iter().any(|v| v.id == back.ref_view));
    }

    #[test]
    fn ppm_round_trip_is_within_quantization(px in prop::collection::vec(prop::array::uniform3(0.0f64..=1.0), 12)) {
        let img = ColorImage::from_pixels(4, 3, px).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn decimation_keeps_original_positions(p in prop::array::uniform4(0.05f64..0.6), r in 0.2f64..1.0) {
        let cam = camera(40, 32);
        let mesh = build_depth_mesh(&wavy_depth(40, 32, p), &ColorImage::new(40, 32), &cam.intrinsics, 4, &cam.proj).unwrap();
        let (gw, gh) = grid_dims(40, 32, 4);
        prop_assert_eq!(mesh.faces.len(), 2 * (gw - 1) * (gh - 1));
        let dec = decimate(&mesh, r).unwrap();
        for (old, new) in dec.remap.iter().enumerate() {
            if let Some(j) = new {
                prop_assert_eq!(mesh.ndc[old], dec.mesh.ndc[*j]);
                prop_assert_eq!(mesh.z_ndc[old].to_bits(), dec.mesh.z_ndc[*j].to_bits());
            }
        }
    }

    #[test]
    fn constant_depth_renders_back(z in 0.5f64..50.0, d in 1usize..6) {
        let cam = camera(24, 18);
        let depth = DepthMap::from_fn(24, 18, |_, _| Some(z));
        let mesh = build_depth_mesh(&depth, &ColorImage::new(24, 18), &cam.intrinsics, d, &cam.proj).unwrap();
        let pos = apply_vertex_params(&mesh, &FieldOutputs::zeros(mesh.len()), &cam.proj).unwrap();
        let out = render(&pos, &mesh, &cam, &cam, Shading::VertexColors);
        prop_assert!(out.depth.valid_count() > 0);
        for v in out.depth.valid_values() {
            prop_assert!((v - z).abs() <= 1e-6 * z);
        }
    }

    #[test]
    fn identity_render_stays_within_block_variation(p in prop::array::uniform4(0.05f64..0.8), d in 2usize..5) {
        let (w, h) = (28, 20);
        let cam = camera(w, h);
        let depth = wavy_depth(w, h, p);
        let mesh = build_depth_mesh(&depth, &ColorImage::new(w, h), &cam.intrinsics, d, &cam.proj).unwrap();
        let pos = apply_vertex_params(&mesh, &FieldOutputs::zeros(mesh.len()), &cam.proj).unwrap();
        let out = render(&pos, &mesh, &cam, &cam, Shading::VertexColors);
        let again = render(&pos, &mesh, &cam, &cam, Shading::VertexColors);
        prop_assert_eq!(out.depth.values(), again.depth.values());
        for y in 0..h {
            for x in 0..w {
                let Some(r) = out.depth.get(x, y) else { continue };
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for yy in y.saturating_sub(d)..(y + d + 1).min(h) {
                    for xx in x.saturating_sub(d)..(x + d + 1).min(w) {
                        let v = depth.get(xx, yy).unwrap();
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                prop_assert!(r >= lo - 1e-9 && r <= hi + 1e-9, "pixel ({}, {}): {} not in [{}, {}]", x, y, r, lo, hi);
            }
        }
    }

    #[test]
    fn sobel_and_blur_ranges(p in prop::array::uniform4(0.0f64..3.0), tau in 0.01f64..2.0) {
        let img = Plane::from_fn(12, 9, |x, y| p[0] * (p[1] * x as f64).sin() + p[2] * (p[3] * y as f64).cos());
        let mut mask = vec![true; 108];
        mask[40] = false;
        let e = sobel_edge_image(&img, &mask, tau).edges;
        prop_assert!(e.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        let (lo, hi) = img.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let b = gaussian_blur5(&img, &mask);
        for (i, v) in b.data.iter().enumerate() {
            if mask[i] {
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn field_is_continuous(seed in 0u64..500, u in -1.0f64..1.0, v in -1.0f64..1.0, z in 0.0f64..1.0) {
        let cfg = FieldConfig { sigma_init: 0.5, ..FieldConfig::mlp_s() };
        let params = field_init(&cfg, seed).unwrap();
        let (o0, s0) = field_eval(&params, &cfg, u, v, z).unwrap();
        let (o1, s1) = field_eval(&params, &cfg, u + 1e-9, v - 1e-9, z + 1e-9).unwrap();
        prop_assert!((o1 - o0).abs() < 1e-5 && (s1 - s0).abs() < 1e-5);
    }

    #[test]
    fn losses_are_nonnegative_and_zero_at_identity(p in prop::array::uniform4(0.05f64..0.8), q in prop::array::uniform4(0.05f64..0.8)) {
        let (w, h) = (10, 8);
        let n = w * h;
        let all = vec![true; n];
        let to_plane = |d: &DepthMap| Plane { width: w, height: h, data: d.values().to_vec() };
        let a = to_plane(&wavy_depth(w, h, p));
        let b = to_plane(&wavy_depth(w, h, q));
        let edges = Plane::from_fn(w, h, |x, y| ((x + y) as f64 * 0.7).sin());
        let pts: Vec<ProjectedPoint> = (0..12)
            .map(|i| ProjectedPoint { u: 1.0 + (i as f64 * 0.7) % 8.0, v: 1.0 + (i as f64 * 0.45) % 6.0, z: 2.0 })
            .collect();
        let img = ColorImage::from_pixels(w, h, (0..n).map(|i| [(i % 7) as f64 / 7.0, 0.5, 0.2]).collect()).unwrap();
        let other = ColorImage::from_pixels(w, h, (0..n).map(|i| [(i % 5) as f64 / 5.0, 0.4, 0.3]).collect()).unwrap();

        prop_assert!(r_smooth(&a, &all).value >= 0.0);
        prop_assert!(r_smooth(&Plane::filled(w, h, 3.0), &all).value.abs() < 1e-12);
        prop_assert!(r_poisson(&a, &all, &b, &all, &edges).value >= 0.0);
        prop_assert_eq!(r_poisson(&a, &all, &a, &all, &edges).value, 0.0);
        prop_assert!(l_geo_map(&a, &all, &pts).unwrap().value >= 0.0);
        prop_assert_eq!(l_geo_map(&Plane::filled(w, h, 2.0), &all, &pts).unwrap().value, 0.0);
        prop_assert!(l_photo(&img, &other, &a, &all, 0.5).unwrap().value >= 0.0);
        prop_assert_eq!(l_photo(&img, &img, &a, &all, 0.5).unwrap().value, 0.0);
        // the attraction part of the edge term is a mean of edge values in [-1, 1]
        let e = r_edge(&a, &all, &edges, &[(3.3, 2.2), (6.1, 5.9)], 0.5);
        prop_assert!(e.silhouette >= 0.0 && e.attraction >= -1.0);
    }

    #[test]
    fn metrics_scale_and_threshold_order(vals in prop::collection::vec((0.5f64..6.5, -0.3f64..0.3), 16), c in 0.1f64..10.0) {
        let gt = DepthMap::from_values(4, 4, vals.iter().map(|v| v.0).collect()).unwrap();
        let pred = DepthMap::from_values(4, 4, vals.iter().map(|v| v.0 + v.1).collect()).unwrap();
        let m = compute_metrics(&pred, &gt, 7.0).unwrap();
        let s = compute_metrics(&pred.map_valid(|z| c * z), &gt.map_valid(|z| c * z), 7.0 * c).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(1e-9);
        prop_assert!(close(s.rmse, c * m.rmse) && close(s.mae, c * m.mae) && close(s.l1_inv, m.l1_inv / c));
        prop_assert!(close(s.l1_rel, m.l1_rel));
        prop_assert!(m.acc_001 <= m.acc_005 && m.acc_005 <= m.acc_010);
    }
}

fn small_scene() -> depthrefine::Scene {
    generate_scene(&SceneSpec {
        preset: Preset::BoxRoom,
        width: 48,
        height: 36,
        views: 3,
        points: 500,
        ..SceneSpec::default()
    })
    .unwrap()
    .scene
}

#[test]
fn stages_gate_photometric_and_keep_parameters_feasible() {
    let scene = small_scene();
    let config = PipelineConfig {
        coarse_iters: 8,
        local_iters: 12,
        batch: 2,
        lr_local: 0.05,
        ..PipelineConfig::default()
    };
    let depths: Vec<f64> = scene.projected_points().iter().map(|p| p.z).collect();
    let aligned = global_align(&scene.mono, &depths).unwrap().depth;
    let mut st = RefinementState::new(&scene, &aligned, &config).unwrap();
    st.coarse_stage(&config).unwrap();
    st.bake_and_decimate(&config).unwrap();
    st.local_stage(&scene, &config).unwrap();
    for e in &st.history {
        if e.stage == Stage::Coarse {
            assert_eq!(e.loss.weights.photo, 0.0);
            assert_eq!(e.loss.terms.photo * e.loss.weights.photo, 0.0);
        }
    }
    assert!(st
        .history
        .iter()
        .any(|e| e.stage == Stage::Local && e.loss.terms.photo > 0.0));
    let m = &st.mesh;
    let moved = m.du.iter().filter(|v| **v != 0.0).count();
    assert!(moved > 0, "large learning rate should move vertices");
    for i in 0..m.len() {
        assert!(m.du[i].abs() <= m.du_limit() && m.dv[i].abs() <= m.dv_limit());
        assert!((FZ_MIN..=FZ_MAX).contains(&m.fz[i]));
    }
}

#[test]
fn zero_field_output_is_identity_remap() {
    let cam = camera(16, 12);
    let depth = wavy_depth(16, 12, [0.3, 0.5, 0.2, 0.4]);
    let mesh = build_depth_mesh(&depth, &ColorImage::new(16, 12), &cam.intrinsics, 2, &cam.proj).unwrap();
    let pos = apply_vertex_params(&mesh, &FieldOutputs::zeros(mesh.len()), &cam.proj).unwrap();
    for i in 0..mesh.len() {
        let clip = cam.proj.clip(&pos.points[i]);
        assert!((clip.z / clip.w - mesh.z_ndc[i]).abs() < 1e-12);
    }
}

#[test]
fn poor_cloud_presets() {
    let d = SceneSpec::default();
    let fair = d.with_fair_cloud();
    let poor = d.with_poor_cloud();
    assert_eq!((fair.points, fair.noise, fair.outliers), (3500, 0.05, 0.05));
    assert_eq!((poor.points, poor.noise, poor.outliers), (1000, 0.10, 0.10));
}
