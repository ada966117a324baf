//! Scratch diagnostics for the volume stage: where does excess volume come
//! from relative to the analytic world?

use satvol::config::parse_config;
use satvol::pipeline::align_and_measure;
use satvol::raster::read_grid;
use satvol::volume::{compute_dynamic_mask, compute_ndsm, estimate_dtm};
use std::path::Path;

fn main() {
    let root = Path::new("/tmp/ds1");
    let config = parse_config(&std::fs::read_to_string(root.join("config.cfg")).unwrap()).unwrap();
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("ground_truth.json")).unwrap()).unwrap();

    let mut dsms = Vec::new();
    for d in truth["dates"].as_array().unwrap() {
        let date = d["date"].as_str().unwrap().to_string();
        let p = root.join("out").join(&date).join("dsm.grd");
        let data = std::fs::read(&p).unwrap();
        dsms.push((date, read_grid(&data, "dsm").unwrap()));
    }

    let (alignment, aligned, volumes) = align_and_measure(&dsms, &config).unwrap();
    for ((a, v), d) in alignment.iter().zip(&volumes).zip(truth["dates"].as_array().unwrap()) {
        let tv = d["truncated_volume_m3"].as_f64().unwrap();
        println!(
            "{}: t=({:.2},{:.2},{:.2}) border={} volume {:.0} vs truth {:.0} ({:+.1}%)",
            a.date,
            a.de,
            a.dn,
            a.dh,
            a.peak_on_border,
            v.volume_m3,
            tv,
            100.0 * (v.volume_m3 / tv - 1.0)
        );
    }

    let mask = compute_dynamic_mask(&aligned, config.mask_tau).unwrap();
    println!("mask cells: {}", mask.dynamic_count());

    for idx in 0..aligned.len() {
        let d = &truth["dates"][idx];
        let grid = &aligned[idx];
        let dtm = estimate_dtm(grid).unwrap();
        let ndsm = compute_ndsm(grid, &dtm, &mask, config.ndsm_hmin, config.ndsm_hmax).unwrap();
        let frame = ndsm.grid.frame;

        // True pile height field for the date.
        let piles = d["piles"].as_array().unwrap();
        let pile_height = |e: f64, n: f64| -> f64 {
            piles
                .iter()
                .map(|p| {
                    let (ce, cn, a, s) = (
                        p["center_e"].as_f64().unwrap(),
                        p["center_n"].as_f64().unwrap(),
                        p["amplitude"].as_f64().unwrap(),
                        p["sigma"].as_f64().unwrap(),
                    );
                    a * (-((e - ce).powi(2) + (n - cn).powi(2)) / (2.0 * s * s)).exp()
                })
                .sum()
        };

        let (mut v_meas, mut v_true, mut v_excess_outside, mut v_missing) = (0.0, 0.0, 0.0, 0.0);
        for row in 0..frame.height {
            for col in 0..frame.width {
                let (e, n) = frame.cell_center(row, col);
                let h_true = pile_height(e, n);
                let in_band = (config.ndsm_hmin..=config.ndsm_hmax).contains(&h_true);
                let v = ndsm.grid.get(row, col);
                v_meas += v;
                if in_band {
                    v_true += h_true;
                    if v == 0.0 {
                        v_missing += h_true;
                    }
                } else if v > 0.0 {
                    v_excess_outside += v;
                }
            }
        }
        println!(
            "{}: measured {:.0} truth-band {:.0}; counted-outside-band {:.0}; missing-from-band {:.0}; dtm {:.3}",
            alignment[idx].date,
            v_meas,
            v_true,
            v_excess_outside,
            v_missing,
            dtm.get(0, 0),
        );
    }
}
