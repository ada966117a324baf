//! Shared glue for the oracle-driven integration tests.

use satvol::bundle::BundleProblem;
use satvol::geometry::{init_tiepoint, regress_camera_center, CameraCenter, Scene};
use satvol::matching::FeatureTrack;
use satvol::synth::{Observations, SyntheticAcquisition};

/// Regress a center for every scene of an acquisition.
pub fn camera_list(acq: &SyntheticAcquisition) -> Vec<(Scene, CameraCenter)> {
    acq.scenes
        .iter()
        .map(|s| {
            let c = regress_camera_center(&s.scene.rpc).expect("center regression");
            (s.scene.clone(), c)
        })
        .collect()
}

/// Build ground-truth feature tracks from the oracle's visibility table and
/// initialize their tie-points by triangulation with the delivered cameras.
pub fn tracks_from_truth(
    obs: &Observations,
    cameras: &[(Scene, CameraCenter)],
) -> Vec<FeatureTrack> {
    let mut tracks = Vec::new();
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
        observations.sort_by(|a, b| a.0.cmp(&b.0));
        let mut track = FeatureTrack { observations, tiepoint: None };
        match init_tiepoint(&track, cameras) {
            Ok(tp) => {
                track.tiepoint = Some(tp);
                tracks.push(track);
            }
            Err(_) => continue,
        }
    }
    tracks
}

/// Assemble a bundle problem with a fixed reference camera.
pub fn problem_from_truth(
    acq: &SyntheticAcquisition,
    obs: &Observations,
    reference_index: usize,
) -> BundleProblem {
    let cameras = camera_list(acq);
    let tracks = tracks_from_truth(obs, &cameras);
    BundleProblem { cameras, tracks, reference_index }
}
