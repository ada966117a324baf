//! Geometry operations checked against the synthetic pinhole oracle.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use satvol::geodesy::{geodetic_to_ecef, EnuFrame, EnuPoint, GeodeticPoint};
use satvol::geometry::{
    convergence_angle_from_centers, init_tiepoint, regress_camera_center, select_pairs,
    triangulate_pair, triangulate_pair_with_centers, Acquisition, GeometryError, PairCriteria,
};
use satvol::matching::FeatureTrack;
use satvol::rpc::PixelPoint;
use satvol::synth::{generate_acquisition, generate_world, AcqParams};

fn two_scene_acq(convergence_deg: f64, seed: u64) -> (satvol::synth::SyntheticAcquisition, satvol::synth::SyntheticWorld) {
    let world = generate_world(seed, 2, 700.0);
    let params = AcqParams {
        n_scenes: 2,
        scene_len_n: 320.0,
        scene_len_e: 800.0,
        overlap_fraction: 0.7,
        convergence_deg,
        attitude_bound: 0.0,
        seed,
        ..AcqParams::default()
    };
    let acq = generate_acquisition(&world, &params, "2020-01-01").unwrap();
    (acq, world)
}

#[test]
fn regressed_center_close_to_pinhole() {
    let (acq, _) = two_scene_acq(12.0, 21);
    for s in &acq.scenes {
        let center = regress_camera_center(&s.scene.rpc).unwrap();
        let d = ((center.0.x - s.pinhole.center.x).powi(2)
            + (center.0.y - s.pinhole.center.y).powi(2)
            + (center.0.z - s.pinhole.center.z).powi(2))
        .sqrt();
        assert!(d < 100.0, "center error {d} m");
        let alt = center.altitude();
        assert!((200_000.0..2_000_000.0).contains(&alt), "altitude {alt}");
    }
}

#[test]
fn regressed_center_is_deterministic() {
    let (acq, _) = two_scene_acq(12.0, 22);
    let a = regress_camera_center(&acq.scenes[0].scene.rpc).unwrap();
    let b = regress_camera_center(&acq.scenes[0].scene.rpc).unwrap();
    assert_eq!(a.0, b.0);
}

#[test]
fn triangulation_recovers_forward_projected_point() {
    let (acq, world) = two_scene_acq(10.0, 23);
    let frame = world.frame();
    let overlap_lo = acq.scenes[0].strip_n.0.max(acq.scenes[1].strip_n.0);
    let overlap_hi = acq.scenes[0].strip_n.1.min(acq.scenes[1].strip_n.1);
    let n = 0.5 * (overlap_lo + overlap_hi);

    for &(e, dn, dh) in &[(0.0, 0.0, 0.0), (150.0, 20.0, 12.0), (-200.0, -30.0, 4.0)] {
        let truth_enu = EnuPoint::new(e, n + dn, world.base_height + dh);
        let truth = frame.enu_to_geodetic(&truth_enu).unwrap();
        // Forward-project through the delivered (exact, unperturbed) RPCs.
        let pa = acq.scenes[0].scene.rpc.project(&truth).unwrap();
        let pb = acq.scenes[1].scene.rpc.project(&truth).unwrap();
        let t = triangulate_pair(&acq.scenes[0].scene.rpc, &acq.scenes[1].scene.rpc, &pa, &pb).unwrap();
        let got = frame.geodetic_to_enu(&t.point);
        let err = ((got.east - truth_enu.east).powi(2)
            + (got.north - truth_enu.north).powi(2)
            + (got.up - truth_enu.up).powi(2))
        .sqrt();
        assert!(err < 1e-3, "ENU error {err} m");
        assert!(t.residual_px < 1e-4, "residual {} px", t.residual_px);
    }
}

#[test]
fn triangulation_same_camera_is_degenerate() {
    let (acq, world) = two_scene_acq(10.0, 24);
    let frame = world.frame();
    let n = 0.5 * (acq.scenes[0].strip_n.0 + acq.scenes[0].strip_n.1);
    let truth = frame.enu_to_geodetic(&EnuPoint::new(0.0, n, world.base_height)).unwrap();
    let px = acq.scenes[0].scene.rpc.project(&truth).unwrap();
    let err = triangulate_pair(&acq.scenes[0].scene.rpc, &acq.scenes[0].scene.rpc, &px, &px);
    assert!(matches!(err, Err(GeometryError::DegenerateGeometry(_))), "got {err:?}");
}

#[test]
fn triangulation_noise_band_monte_carlo() {
    // sigma = 0.3 px at 15 degrees convergence, 500 km altitude: the height
    // error standard deviation stays within [0.5, 5] m.
    let (acq, world) = two_scene_acq(15.0, 25);
    let frame = world.frame();
    let ca = regress_camera_center(&acq.scenes[0].scene.rpc).unwrap();
    let cb = regress_camera_center(&acq.scenes[1].scene.rpc).unwrap();
    let overlap_lo = acq.scenes[0].strip_n.0.max(acq.scenes[1].strip_n.0);
    let overlap_hi = acq.scenes[0].strip_n.1.min(acq.scenes[1].strip_n.1);
    let n = 0.5 * (overlap_lo + overlap_hi);
    let truth = frame.enu_to_geodetic(&EnuPoint::new(0.0, n, world.base_height)).unwrap();
    let pa = acq.scenes[0].scene.rpc.project(&truth).unwrap();
    let pb = acq.scenes[1].scene.rpc.project(&truth).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut heights = Vec::with_capacity(500);
    for _ in 0..500 {
        let na = PixelPoint::new(pa.row + noise.sample(&mut rng), pa.col + noise.sample(&mut rng));
        let nb = PixelPoint::new(pb.row + noise.sample(&mut rng), pb.col + noise.sample(&mut rng));
        let t = triangulate_pair_with_centers(
            &acq.scenes[0].scene.rpc,
            &acq.scenes[1].scene.rpc,
            &na,
            &nb,
            &ca,
            &cb,
        )
        .unwrap();
        heights.push(frame.geodetic_to_enu(&t.point).up - world.base_height);
    }
    let mean = heights.iter().sum::<f64>() / heights.len() as f64;
    let var = heights.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / heights.len() as f64;
    let std = var.sqrt();
    assert!((0.5..=5.0).contains(&std), "height error stddev {std} m");
}

#[test]
fn convergence_angle_constructed_geometries() {
    // Same camera twice: zero angle.
    let (acq, world) = two_scene_acq(20.0, 26);
    let frame = world.frame();
    let at = frame.enu_to_geodetic(&EnuPoint::new(0.0, 0.0, world.base_height)).unwrap();
    let c0 = regress_camera_center(&acq.scenes[0].scene.rpc).unwrap();
    assert!(convergence_angle_from_centers(&c0, &c0, &at) < 1e-6);

    // Pinholes at +/-10 degrees off-nadir in a common plane: 20 degrees.
    let enu = EnuFrame::new(GeodeticPoint::new(30.0, -25.0, 0.0));
    let alt = 500_000.0;
    let mk = |off_deg: f64| {
        let off = (off_deg as f64).to_radians();
        satvol::geometry::CameraCenter(enu.enu_to_ecef(&EnuPoint::new(0.0, -alt * off.tan(), alt)))
    };
    let target = enu.enu_to_geodetic(&EnuPoint::new(0.0, 0.0, 0.0)).unwrap();
    let a = convergence_angle_from_centers(&mk(10.0), &mk(-10.0), &target);
    assert!((a - 20.0).abs() < 0.1, "angle {a}");
    // Nadir plus 30 degrees off-nadir.
    let b = convergence_angle_from_centers(&mk(0.0), &mk(30.0), &target);
    assert!((b - 30.0).abs() < 0.2, "angle {b}");
}

#[test]
fn convergence_angle_is_symmetric() {
    let (acq, world) = two_scene_acq(14.0, 27);
    let frame = world.frame();
    let at = frame.enu_to_geodetic(&EnuPoint::new(50.0, 0.0, world.base_height)).unwrap();
    let ca = regress_camera_center(&acq.scenes[0].scene.rpc).unwrap();
    let cb = regress_camera_center(&acq.scenes[1].scene.rpc).unwrap();
    assert_eq!(
        convergence_angle_from_centers(&ca, &cb, &at),
        convergence_angle_from_centers(&cb, &ca, &at)
    );
}

#[test]
fn init_tiepoint_matches_two_view_and_is_order_invariant() {
    let (acq, world) = two_scene_acq(10.0, 28);
    let frame = world.frame();
    let cameras = common::camera_list(&acq);
    let overlap_lo = acq.scenes[0].strip_n.0.max(acq.scenes[1].strip_n.0);
    let overlap_hi = acq.scenes[0].strip_n.1.min(acq.scenes[1].strip_n.1);
    let n = 0.5 * (overlap_lo + overlap_hi);
    let truth = frame.enu_to_geodetic(&EnuPoint::new(40.0, n, world.base_height + 6.0)).unwrap();
    let pa = acq.scenes[0].scene.rpc.project(&truth).unwrap();
    let pb = acq.scenes[1].scene.rpc.project(&truth).unwrap();

    let track = FeatureTrack {
        observations: vec![
            (acq.scenes[0].scene.image_id.clone(), pa),
            (acq.scenes[1].scene.image_id.clone(), pb),
        ],
        tiepoint: None,
    };
    let init = init_tiepoint(&track, &cameras).unwrap();
    let pair = triangulate_pair_with_centers(
        &acq.scenes[0].scene.rpc,
        &acq.scenes[1].scene.rpc,
        &pa,
        &pb,
        &cameras[0].1,
        &cameras[1].1,
    )
    .unwrap();
    let d = geodetic_to_ecef(&init);
    let e = geodetic_to_ecef(&pair.point);
    let err = ((d.x - e.x).powi(2) + (d.y - e.y).powi(2) + (d.z - e.z).powi(2)).sqrt();
    assert!(err < 1e-6, "two-view track must equal the pair triangulation, got {err} m");

    let reversed = FeatureTrack {
        observations: track.observations.iter().rev().cloned().collect(),
        tiepoint: None,
    };
    let init_rev = init_tiepoint(&reversed, &cameras).unwrap();
    assert_eq!(init.lon, init_rev.lon);
    assert_eq!(init.lat, init_rev.lat);
}

#[test]
fn init_tiepoint_three_views_within_noise_band() {
    let world = generate_world(31, 2, 700.0);
    let params = AcqParams {
        n_scenes: 3,
        scene_len_n: 320.0,
        scene_len_e: 800.0,
        overlap_fraction: 0.7,
        convergence_deg: 12.0,
        attitude_bound: 0.0,
        seed: 31,
        ..AcqParams::default()
    };
    let acq = generate_acquisition(&world, &params, "2020-01-01").unwrap();
    let frame = world.frame();
    let cameras = common::camera_list(&acq);

    // Overlap of all three strips.
    let lo = acq.scenes.iter().map(|s| s.strip_n.0).fold(f64::NEG_INFINITY, f64::max);
    let hi = acq.scenes.iter().map(|s| s.strip_n.1).fold(f64::INFINITY, f64::min);
    assert!(hi > lo, "three-scene overlap required for this test");
    let truth_enu = EnuPoint::new(0.0, 0.5 * (lo + hi), world.base_height);
    let truth = frame.enu_to_geodetic(&truth_enu).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut err3 = Vec::new();
    let mut err2_best = Vec::new();
    for _ in 0..60 {
        let mut obs = Vec::new();
        for s in &acq.scenes {
            let px = s.scene.rpc.project(&truth).unwrap();
            obs.push((
                s.scene.image_id.clone(),
                PixelPoint::new(px.row + noise.sample(&mut rng), px.col + noise.sample(&mut rng)),
            ));
        }
        let track = FeatureTrack { observations: obs.clone(), tiepoint: None };
        let p3 = init_tiepoint(&track, &cameras).unwrap();
        let g3 = frame.geodetic_to_enu(&p3);
        err3.push(
            ((g3.east - truth_enu.east).powi(2)
                + (g3.north - truth_enu.north).powi(2)
                + (g3.up - truth_enu.up).powi(2))
            .sqrt(),
        );

        // Best adjacent pair (largest convergence): scenes 0-1.
        let p2 = triangulate_pair_with_centers(
            &acq.scenes[0].scene.rpc,
            &acq.scenes[1].scene.rpc,
            &obs[0].1,
            &obs[1].1,
            &cameras[0].1,
            &cameras[1].1,
        )
        .unwrap();
        let g2 = frame.geodetic_to_enu(&p2.point);
        err2_best.push(
            ((g2.east - truth_enu.east).powi(2)
                + (g2.north - truth_enu.north).powi(2)
                + (g2.up - truth_enu.up).powi(2))
            .sqrt(),
        );
    }
    let rms = |v: &[f64]| (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt();
    let (r3, r2) = (rms(&err3), rms(&err2_best));
    assert!(r3 < 3.0 * r2, "3-view RMS {r3} vs best-pair RMS {r2}");
}

#[test]
fn select_pairs_convergence_window() {
    // Convergence ~3 degrees: rejected even with full overlap.
    let world = generate_world(41, 0, 700.0);
    let mk_acq = |conv: f64| {
        let params = AcqParams {
            n_scenes: 2,
            scene_len_n: 400.0,
            scene_len_e: 800.0,
            overlap_fraction: 0.8,
            convergence_deg: conv,
            attitude_bound: 0.0,
            seed: 41,
            ..AcqParams::default()
        };
        generate_acquisition(&world, &params, "2020-01-01").unwrap().acquisition()
    };
    let frame = world.frame();
    let aoi: Vec<(f64, f64)> = [(-300.0, -300.0), (300.0, -300.0), (300.0, 300.0), (-300.0, 300.0)]
        .iter()
        .map(|&(e, n)| {
            let g = frame.enu_to_geodetic(&EnuPoint::new(e, n, world.base_height)).unwrap();
            (g.lon, g.lat)
        })
        .collect();

    let criteria = PairCriteria::default();
    assert!(select_pairs(&mk_acq(3.0), &aoi, &criteria).unwrap().is_empty());
    assert_eq!(select_pairs(&mk_acq(20.0), &aoi, &criteria).unwrap(), vec![(0, 1)]);
    assert!(select_pairs(&mk_acq(40.0), &aoi, &criteria).unwrap().is_empty());
}

#[test]
fn select_pairs_intersection_rule() {
    // Control the footprints directly: same cameras (20 degrees apart), but
    // footprint rectangles sized to straddle the 200 m rule.
    let world = generate_world(43, 0, 1200.0);
    let params = AcqParams {
        n_scenes: 2,
        scene_len_n: 400.0,
        scene_len_e: 900.0,
        overlap_fraction: 0.8,
        convergence_deg: 20.0,
        attitude_bound: 0.0,
        seed: 43,
        ..AcqParams::default()
    };
    let acq = generate_acquisition(&world, &params, "2020-01-01").unwrap();
    let frame = world.frame();
    let rect = |e0: f64, e1: f64, n0: f64, n1: f64| -> Vec<(f64, f64)> {
        [(e0, n0), (e1, n0), (e1, n1), (e0, n1)]
            .iter()
            .map(|&(e, n)| {
                let g = frame.enu_to_geodetic(&EnuPoint::new(e, n, world.base_height)).unwrap();
                (g.lon, g.lat)
            })
            .collect()
    };
    let aoi = rect(-500.0, 500.0, -500.0, 500.0);
    let criteria = PairCriteria::default();

    // Accepted: intersection bbox 500 m x 800 m.
    let mut a = acq.acquisition();
    a.scenes[0].footprint = rect(-250.0, 250.0, -400.0, 450.0);
    a.scenes[1].footprint = rect(-250.0, 250.0, -450.0, 400.0);
    assert_eq!(select_pairs(&a, &aoi, &criteria).unwrap(), vec![(0, 1)]);

    // Rejected: intersection bbox 150 m x 800 m.
    let mut b = acq.acquisition();
    b.scenes[0].footprint = rect(-75.0, 75.0, -400.0, 450.0);
    b.scenes[1].footprint = rect(-75.0, 75.0, -450.0, 400.0);
    assert!(select_pairs(&b, &aoi, &criteria).unwrap().is_empty());
}

#[test]
fn select_pairs_deterministic_and_unordered() {
    let (acq, world) = two_scene_acq(18.0, 44);
    let frame = world.frame();
    let aoi: Vec<(f64, f64)> = [(-300.0, -300.0), (300.0, -300.0), (300.0, 300.0), (-300.0, 300.0)]
        .iter()
        .map(|&(e, n)| {
            let g = frame.enu_to_geodetic(&EnuPoint::new(e, n, world.base_height)).unwrap();
            (g.lon, g.lat)
        })
        .collect();
    let a = acq.acquisition();
    let criteria = PairCriteria::default();
    let p1 = select_pairs(&a, &aoi, &criteria).unwrap();
    let p2 = select_pairs(&a, &aoi, &criteria).unwrap();
    assert_eq!(p1, p2);

    // Scene order flipped: the same unordered pair comes back.
    let flipped = Acquisition { date: a.date.clone(), scenes: vec![a.scenes[1].clone(), a.scenes[0].clone()] };
    let p3 = select_pairs(&flipped, &aoi, &criteria).unwrap();
    assert_eq!(p1.len(), p3.len());
}

#[test]
fn triangulation_monotone_residual() {
    // The residual at the optimum never exceeds the residual at the
    // initialization point.
    let (acq, world) = two_scene_acq(12.0, 45);
    let frame = world.frame();
    let overlap_lo = acq.scenes[0].strip_n.0.max(acq.scenes[1].strip_n.0);
    let n = overlap_lo + 30.0;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise = Normal::new(0.0, 1.5).unwrap();
    for _ in 0..25 {
        let truth = frame
            .enu_to_geodetic(&EnuPoint::new(rng.gen_range(-200.0..200.0), n, world.base_height))
            .unwrap();
        let pa = acq.scenes[0].scene.rpc.project(&truth).unwrap();
        let pb = acq.scenes[1].scene.rpc.project(&truth).unwrap();
        let na = PixelPoint::new(pa.row + noise.sample(&mut rng), pa.col + noise.sample(&mut rng));
        let nb = PixelPoint::new(pb.row + noise.sample(&mut rng), pb.col + noise.sample(&mut rng));
        let t = triangulate_pair(&acq.scenes[0].scene.rpc, &acq.scenes[1].scene.rpc, &na, &nb).unwrap();
        // Residual at the initialization: localize both at h0, midpoint.
        let h0 = 0.5 * (acq.scenes[0].scene.rpc.height_offset + acq.scenes[1].scene.rpc.height_offset);
        let ga = acq.scenes[0].scene.rpc.localize(&na, h0).unwrap();
        let gb = acq.scenes[1].scene.rpc.localize(&nb, h0).unwrap();
        let mid = GeodeticPoint::new(0.5 * (ga.lon + gb.lon), 0.5 * (ga.lat + gb.lat), h0);
        let ra = acq.scenes[0].scene.rpc.project(&mid).unwrap();
        let rb = acq.scenes[1].scene.rpc.project(&mid).unwrap();
        let init_cost = (ra.row - na.row).powi(2)
            + (ra.col - na.col).powi(2)
            + (rb.row - nb.row).powi(2)
            + (rb.col - nb.col).powi(2);
        let init_rms = (init_cost / 2.0).sqrt();
        assert!(t.residual_px <= init_rms + 1e-12, "{} vs {}", t.residual_px, init_rms);
    }
}
