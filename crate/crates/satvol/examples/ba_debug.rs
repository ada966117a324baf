//! Scratch diagnostics for the bundle solver (not part of the deliverable API).

use nalgebra::Vector3;
use satvol::bundle::{rotation_angle_between, solve_date, BundleConfig, BundleProblem};
use satvol::geometry::{init_tiepoint, regress_camera_center};
use satvol::matching::FeatureTrack;
use satvol::synth::{generate_acquisition, generate_observations, generate_world, AcqParams, ObservationParams};

fn main() {
    let mut world = generate_world(57, 6, 14000.0);
    world.terrain_amplitude = 40.0;
    world.terrain_wavelength = 3000.0;
    let params = AcqParams {
        n_scenes: 8,
        scene_len_n: 8000.0,
        scene_len_e: 20000.0,
        overlap_fraction: 0.88,
        attitude_bound: 100e-6,
        
        seed: 57,
        ..AcqParams::default()
    };
    let acq = generate_acquisition(&world, &params, "2020-02-01").unwrap();
    let obs = generate_observations(
        &acq,
        &world,
        &ObservationParams { n_points: 2000, pixel_noise_sigma: 0.3, seed: 57, ..ObservationParams::default() },
    );

    let cameras: Vec<_> = acq
        .scenes
        .iter()
        .map(|s| (s.scene.clone(), regress_camera_center(&s.scene.rpc).unwrap()))
        .collect();
    let mut tracks = Vec::new();
    let mut track_len_hist = [0usize; 9];
    for vis in &obs.visibility {
        let mut observations = Vec::new();
        for (scene_idx, slot) in vis.iter().enumerate() {
            if let Some(kp_idx) = slot {
                let set = &obs.keypoints[scene_idx];
                observations.push((set.image_id.clone(), set.keypoints[*kp_idx].position));
            }
        }
        if observations.len() < 2 {
            continue;
        }
        track_len_hist[observations.len().min(8)] += 1;
        observations.sort_by(|a, b| a.0.cmp(&b.0));
        let mut track = FeatureTrack { observations, tiepoint: None };
        if let Ok(tp) = init_tiepoint(&track, &cameras) {
            track.tiepoint = Some(tp);
            tracks.push(track);
        }
    }
    println!("tracks: {} hist(len2..8): {:?}", tracks.len(), &track_len_hist[2..]);

    let problem = BundleProblem { cameras, tracks, reference_index: 0 };
    let t0 = std::time::Instant::now();
    let solution = solve_date(&problem, &BundleConfig { cost_rel_tol: 0.0, max_iterations: 400, ..BundleConfig::default() }).unwrap();
    println!(
        "iterations {} stalled {} initial_rms {:.3} final_rms {:.4} ({:?})",
        solution.iterations,
        solution.stalled,
        solution.initial_rms_px,
        solution.final_rms_px,
        t0.elapsed()
    );

    // Directional derivatives of the cost at the returned solution: a real
    // optimum should have tiny slopes along every camera angle.
    let angles: Vec<[f64; 3]> = solution.rotations.iter().map(|r| r.angles()).collect();
    let eval = |angles: &[[f64; 3]], tiepoints: &Vec<_>| {
        let rots: Vec<_> = angles
            .iter()
            .zip(&solution.rotations)
            .map(|(a, r)| satvol::bundle::CorrectionRotation { phi: a[0], theta: a[1], alpha: a[2], center: r.center })
            .collect();
        satvol::bundle::reprojection_cost(&problem, &rots, tiepoints).unwrap()
    };
    let eps = 1e-7;
    for m in 1..3 {
        for c in 0..3 {
            let mut ap = angles.clone();
            let mut am = angles.clone();
            ap[m][c] += eps;
            am[m][c] -= eps;
            let d = (eval(&ap, &solution.tiepoints) - eval(&am, &solution.tiepoints)) / (2.0 * eps);
            println!("dcost/dangle cam{m} axis{c}: {d:+.4e}");
        }
    }

    let sigmas = satvol::bundle::angle_sigmas(&problem, &solution, 0.3, &BundleConfig::default()).unwrap();
    for (m, s) in sigmas.iter().enumerate() {
        println!("cam {m}: angle sigmas [{:.2e} {:.2e} {:.2e}]", s[0], s[1], s[2]);
    }

    let g_ref = acq.scenes[0].injected_matrix();
    for (m, scene) in acq.scenes.iter().enumerate() {
        let target = scene.injected_matrix().transpose() * g_ref;
        let recovered = solution.rotations[m].matrix();
        let err = rotation_angle_between(&recovered, &target);
        // Decompose the error in the camera frame: which axis is weak?
        let e = recovered * target.transpose();
        let axis_angle = Vector3::new(e[(2, 1)] - e[(1, 2)], e[(0, 2)] - e[(2, 0)], e[(1, 0)] - e[(0, 1)]) * 0.5;
        let cam_axes = scene.pinhole.axes;
        let in_cam = cam_axes * axis_angle;
        println!(
            "cam {m}: err {:.3e} rad  (cam-frame axis: col={:+.2e} row={:+.2e} boresight={:+.2e})",
            err, in_cam.x, in_cam.y, in_cam.z
        );
    }
}
