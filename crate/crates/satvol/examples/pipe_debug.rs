//! Scratch diagnostics for the pipeline stages.

use satvol::config::parse_config;
use satvol::geometry::{select_pairs, Acquisition};
use satvol::pipeline::load_date_inputs;
use std::path::Path;

fn main() {
    let root = Path::new("/tmp/ds1");
    let config = parse_config(&std::fs::read_to_string(root.join("config.cfg")).unwrap()).unwrap();
    let inputs = load_date_inputs(&root.join("2020-01-04")).unwrap();
    println!("scenes: {:?}", inputs.scenes.iter().map(|s| s.image_id.clone()).collect::<Vec<_>>());
    println!("keypoint sets: {:?}", inputs.keypoints.iter().map(|k| (k.image_id.clone(), k.keypoints.len())).collect::<Vec<_>>());
    println!("matches: {}", inputs.matches.len());

    let acq = Acquisition { date: inputs.date.clone(), scenes: inputs.scenes.clone() };
    let criteria = satvol::geometry::PairCriteria {
        min_convergence_deg: config.convergence_min_deg,
        max_convergence_deg: config.convergence_max_deg,
        min_intersection_m: config.min_intersection_m,
    };
    let pairs = select_pairs(&acq, &config.aoi, &criteria).unwrap();
    println!("admissible pairs: {pairs:?}");

    for s in &inputs.scenes {
        println!("{}: footprint {:?}", s.image_id, s.footprint);
    }
}
