//! Scratch diagnostics for the file-driven refinement stage.

use satvol::bundle::corrected_project;
use satvol::config::PipelineConfig;
use satvol::geodesy::geodetic_to_ecef;
use satvol::pipeline::{refine_acquisition, DateInputs};
use satvol::synth::*;

fn main() {
    let outliers: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let noise: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.3);

    let extent = 500.0;
    let n_scenes = 3;
    let (scene_len_n, overlap_fraction) = strip_plan(extent, n_scenes);
    println!("strip plan: len {scene_len_n} overlap {overlap_fraction}");
    let world = generate_world(5, 3, extent);
    let params = AcqParams {
        n_scenes,
        scene_len_n,
        scene_len_e: extent + 250.0,
        overlap_fraction,
        seed: 1005,
        ..AcqParams::default()
    };
    let acq = generate_acquisition(&world, &params, "2020-01-04").unwrap();
    for s in &acq.scenes {
        println!("{}: injected {:?}", s.scene.image_id, s.injected);
    }
    let obs = generate_observations(
        &acq,
        &world,
        &ObservationParams {
            n_points: 160,
            pixel_noise_sigma: noise,
            outlier_fraction: outliers,
            seed: 2005,
            ..ObservationParams::default()
        },
    );

    let inputs = DateInputs {
        date: acq.date.clone(),
        scenes: acq.scenes.iter().map(|s| s.scene.clone()).collect(),
        keypoints: obs.keypoints.clone(),
        matches: obs.matches.clone(),
    };
    let config = PipelineConfig { aoi: dataset_aoi(&world), seed: 5, ..Default::default() };

    match refine_acquisition(&inputs, &config) {
        Ok(r) => {
            println!(
                "tracks {} reference {} rms {:.3} -> {:.4} iter {} stalled {}",
                r.record.tracks,
                r.record.reference,
                r.record.initial_rms_px,
                r.record.final_rms_px,
                r.record.iterations,
                r.record.stalled
            );
            for (i, rot) in r.rotations.iter().enumerate() {
                println!("  {}: angles {:?}", r.cameras[i].0.image_id, rot.angles());
            }
            // Sanity: project a few true surface points through corrected cameras.
            let frame = world.frame();
            let g = frame
                .enu_to_geodetic(&satvol::geodesy::EnuPoint::new(0.0, 0.0, world.surface_height(0.0, 0.0)))
                .unwrap();
            let x = geodetic_to_ecef(&g);
            for (i, s) in acq.scenes.iter().enumerate() {
                if let (Some(true_px), Ok(corr_px)) = (
                    s.pinhole.project(&x),
                    corrected_project(&s.scene.rpc, &r.rotations[i], &x),
                ) {
                    println!(
                        "  {} corrected vs true pixel offset: {:.2} px",
                        s.scene.image_id,
                        corr_px.distance(&true_px)
                    );
                }
            }

            // Dense triangulation with the corrected cameras against truth.
            for pair in [(0usize, 1usize), (1, 2)] {
                let dense = generate_dense_pair(&acq, &world, pair, 40.0, 0.0, 9);
                println!("  pair {pair:?}: {} dense samples", dense.len());
                let (i, j) = pair;
                let mut max_err = (0.0_f64, 0.0_f64, 0.0_f64);
                for (pa, pb) in dense.iter().take(60) {
                    match satvol::bundle::triangulate_corrected(
                        &acq.scenes[i].scene.rpc,
                        &r.rotations[i],
                        &acq.scenes[j].scene.rpc,
                        &r.rotations[j],
                        pa,
                        pb,
                    ) {
                        Ok(t) => {
                            let p = frame.geodetic_to_enu(&t.point);
                            let h_true = world.surface_height(p.east, p.north);
                            max_err = (
                                max_err.0.max((p.up - h_true).abs()),
                                max_err.1.max(t.residual_px),
                                max_err.2.max(p.east.abs().max(p.north.abs())),
                            );
                        }
                        Err(e) => {
                            println!("    triangulation error: {e}");
                            break;
                        }
                    }
                }
                println!(
                    "    max |height-true| {:.2} m, max residual {:.4} px, max |en| {:.1} m",
                    max_err.0, max_err.1, max_err.2
                );
            }
        }
        Err(e) => println!("refine failed: {e}"),
    }
}
