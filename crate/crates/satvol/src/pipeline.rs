//! Orchestration over a directory-structured time series: date-wise RPC
//! refinement, per-date reconstruction, cross-date alignment, volume
//! reporting, and the run manifest.
//!
//! Layout: `root/<YYYY-MM-DD>/` holds `rpc/*.json`, `keypoints/*.csv`,
//! `matches/*.csv` and `dense/<a>__<b>.csv`; everything written goes under
//! `root/out/` (configurable). Per-date failures are isolated: a bad date
//! is skipped with a reason and the series continues.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{
    choose_reference, solve_date, triangulate_corrected, BundleConfig, BundleError, BundleProblem,
    CorrectionRotation,
};
use crate::config::PipelineConfig;
use crate::geodesy::{EnuFrame, GeodeticPoint};
use crate::geometry::{
    init_tiepoint, polygon_centroid, regress_camera_center, select_pairs, Acquisition, CameraCenter,
    GeometryError, PairCriteria, Scene,
};
use crate::matching::{
    build_tracks, ransac_fundamental_filter, read_dense_csv, read_keypoints_csv, read_matches_csv,
    FeatureTrack, KeypointSet, MatchingError, PairwiseMatch, RansacParams,
};
use crate::raster::{
    align_translation, apply_translation, coarse_align_shift, fill_holes, merge_average, rasterize,
    read_grid, shift_cells, stddev_map, write_ascii_grid, write_binary_grid, DsmGrid, GridFrame,
    RasterError, Translation,
};
use crate::rpc::{scene_from_json, scene_to_json, PixelPoint, RpcError, SceneRecord};
use crate::volume::{
    compute_dynamic_mask, compute_ndsm, estimate_dtm, fit_weight_regression, integrate_volume,
    VolumeEntry, VolumeError,
};

/// Input subdirectory names inside a date directory.
pub const RPC_DIR: &str = "rpc";
pub const KEYPOINTS_DIR: &str = "keypoints";
pub const MATCHES_DIR: &str = "matches";
pub const DENSE_DIR: &str = "dense";
/// Optional weight measurements at the series root.
pub const WEIGHTS_FILE: &str = "weights.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no area of interest configured (set `aoi` in the config)")]
    MissingAoi,
    #[error("{0}")]
    Skip(String),
    #[error("rpc: {0}")]
    Rpc(#[from] RpcError),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("matching: {0}")]
    Matching(#[from] MatchingError),
    #[error("bundle: {0}")]
    Bundle(#[from] BundleError),
    #[error("raster: {0}")]
    Raster(#[from] RasterError),
    #[error("volume: {0}")]
    Volume(#[from] VolumeError),
    #[error("config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Write a file atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Date inputs
// ---------------------------------------------------------------------------

/// In-memory inputs of one date directory.
pub struct DateInputs {
    pub date: String,
    pub scenes: Vec<Scene>,
    pub keypoints: Vec<KeypointSet>,
    pub matches: Vec<PairwiseMatch>,
}

fn sorted_files(dir: &Path, extension: &str) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files = Vec::new();
    if !dir.exists() {
        return Ok(files);
    }
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some(extension) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Load the scenes, keypoints and candidate matches of a date directory.
pub fn load_date_inputs(date_dir: &Path) -> Result<DateInputs, PipelineError> {
    let date = date_dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| PipelineError::Invalid(format!("bad date directory {date_dir:?}")))?
        .to_string();
    crate::volume::parse_date(&date)?;

    let mut scenes = Vec::new();
    for path in sorted_files(&date_dir.join(RPC_DIR), "json")? {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let record = scene_from_json(&text)?;
        scenes.push(Scene::from_rpc(record.image_id, record.rpc, record.width, record.height)?);
    }
    if scenes.len() < 2 {
        return Err(PipelineError::Skip(format!("{} scenes with RPCs, need at least 2", scenes.len())));
    }
    scenes.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    for w in scenes.windows(2) {
        if w[0].image_id == w[1].image_id {
            return Err(PipelineError::Invalid(format!("duplicate image id {}", w[0].image_id)));
        }
    }

    let mut keypoints = Vec::new();
    for path in sorted_files(&date_dir.join(KEYPOINTS_DIR), "csv")? {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let data = fs::read(&path).map_err(io_err(&path))?;
        let kps = read_keypoints_csv(data.as_slice(), &path.to_string_lossy())?;
        keypoints.push(KeypointSet { image_id: id, keypoints: kps });
    }

    let mut matches = Vec::new();
    for path in sorted_files(&date_dir.join(MATCHES_DIR), "csv")? {
        let data = fs::read(&path).map_err(io_err(&path))?;
        matches.extend(read_matches_csv(data.as_slice(), &path.to_string_lossy())?);
    }

    Ok(DateInputs { date, scenes, keypoints, matches })
}

fn dense_file(date_dir: &Path, a: &str, b: &str) -> PathBuf {
    date_dir.join(DENSE_DIR).join(format!("{a}__{b}.csv"))
}

// ---------------------------------------------------------------------------
// Refinement stage
// ---------------------------------------------------------------------------

/// Sidecar record of one refined camera.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RotationRecord {
    pub image_id: String,
    pub phi: f64,
    pub theta: f64,
    pub alpha: f64,
    pub center_xyz: [f64; 3],
}

/// Manifest record of one date's refinement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineRecord {
    pub date: String,
    pub scenes: Vec<String>,
    pub reference: String,
    pub tracks: usize,
    pub initial_rms_px: f64,
    pub final_rms_px: f64,
    pub iterations: usize,
    pub stalled: bool,
}

/// Result of the in-memory refinement of one acquisition.
pub struct Refinement {
    pub cameras: Vec<(Scene, CameraCenter)>,
    pub rotations: Vec<CorrectionRotation>,
    pub record: RefineRecord,
}

fn pair_criteria(config: &PipelineConfig) -> PairCriteria {
    PairCriteria {
        min_convergence_deg: config.convergence_min_deg,
        max_convergence_deg: config.convergence_max_deg,
        min_intersection_m: config.min_intersection_m,
    }
}

/// Matching, track building, tie-point initialization and the date-wise
/// bundle adjustment, all in memory.
pub fn refine_acquisition(inputs: &DateInputs, config: &PipelineConfig) -> Result<Refinement, PipelineError> {
    if config.aoi.is_empty() {
        return Err(PipelineError::MissingAoi);
    }
    let acq = Acquisition { date: inputs.date.clone(), scenes: inputs.scenes.clone() };
    let pairs = select_pairs(&acq, &config.aoi, &pair_criteria(config))?;
    if pairs.is_empty() {
        return Err(PipelineError::Skip("no admissible stereo pairs".to_string()));
    }

    let kp_index: BTreeMap<&str, usize> =
        inputs.keypoints.iter().enumerate().map(|(i, k)| (k.image_id.as_str(), i)).collect();

    // Geometric filtering per admissible pair.
    let ransac = RansacParams {
        threshold_px: config.ransac_threshold_px,
        iterations: config.ransac_iterations,
        seed: config.seed,
    };
    let mut inlier_matches: Vec<PairwiseMatch> = Vec::new();
    for &(i, j) in &pairs {
        let id_a = inputs.scenes[i].image_id.as_str();
        let id_b = inputs.scenes[j].image_id.as_str();
        let candidates: Vec<&PairwiseMatch> = inputs
            .matches
            .iter()
            .filter(|m| {
                (m.image_a == id_a && m.image_b == id_b) || (m.image_a == id_b && m.image_b == id_a)
            })
            .collect();
        if candidates.len() < 8 {
            continue;
        }
        let (Some(&ka), Some(&kb)) = (kp_index.get(id_a), kp_index.get(id_b)) else {
            continue;
        };
        let mut corr = Vec::with_capacity(candidates.len());
        let mut valid = Vec::with_capacity(candidates.len());
        for m in candidates {
            let (ia, ib) = if m.image_a == id_a { (m.idx_a, m.idx_b) } else { (m.idx_b, m.idx_a) };
            if ia >= inputs.keypoints[ka].keypoints.len() || ib >= inputs.keypoints[kb].keypoints.len() {
                return Err(PipelineError::Invalid(format!(
                    "match references keypoint out of range in pair {id_a}/{id_b}"
                )));
            }
            corr.push((
                inputs.keypoints[ka].keypoints[ia].position,
                inputs.keypoints[kb].keypoints[ib].position,
            ));
            valid.push((ia, ib));
        }
        match ransac_fundamental_filter(&corr, &ransac) {
            Ok(result) => {
                for idx in result.inlier_indices {
                    let (ia, ib) = valid[idx];
                    inlier_matches.push(PairwiseMatch {
                        image_a: id_a.to_string(),
                        image_b: id_b.to_string(),
                        idx_a: ia,
                        idx_b: ib,
                        distance: 0.0,
                    });
                }
            }
            Err(MatchingError::NoGeometry(_)) | Err(MatchingError::InsufficientData(_)) => continue,
            Err(e) => return Err(e.into()),
        }
    }

    let tracks_raw = build_tracks(&inputs.keypoints, &inlier_matches)?;

    // Cameras and tie-point initialization.
    let mut cameras = Vec::with_capacity(inputs.scenes.len());
    for s in &inputs.scenes {
        let center = regress_camera_center(&s.rpc)?;
        cameras.push((s.clone(), center));
    }
    let mut tracks: Vec<FeatureTrack> = Vec::with_capacity(tracks_raw.len());
    for mut t in tracks_raw {
        match init_tiepoint(&t, &cameras) {
            Ok(tp) => {
                t.tiepoint = Some(tp);
                tracks.push(t);
            }
            Err(GeometryError::DegenerateTrack) | Err(GeometryError::DegenerateGeometry(_)) => continue,
            Err(GeometryError::Convergence(_)) => continue,
            Err(e) => return Err(e.into()),
        }
    }

    let reference_index = choose_reference(&cameras, &tracks);
    let mut problem = BundleProblem { cameras, tracks, reference_index };
    let bundle_config = BundleConfig {
        max_iterations: config.lm_max_iterations,
        lambda_init: config.lm_lambda_init,
        ..BundleConfig::default()
    };
    let solve = |problem: &BundleProblem| match solve_date(problem, &bundle_config) {
        Ok(s) => Ok(s),
        Err(e @ BundleError::Disconnected { .. })
        | Err(e @ BundleError::InsufficientTracks { .. })
        | Err(e @ BundleError::UnobservedCamera(_)) => Err(PipelineError::Skip(e.to_string())),
        Err(e) => Err(e.into()),
    };
    let mut solution = solve(&problem)?;

    // Chimera guard: per-pair RANSAC cannot catch outlier matches that
    // union-find welds across pairs, and those tracks wreck the plain
    // squared loss. Drop tracks whose post-fit residual sits far outside
    // the consensus and solve once more.
    let cutoff = (5.0 * solution.final_rms_px).max(3.0);
    let mut kept_tracks = Vec::with_capacity(problem.tracks.len());
    for (k, track) in problem.tracks.iter().enumerate() {
        let x = crate::geodesy::geodetic_to_ecef(&solution.tiepoints[k]);
        let mut sq = 0.0;
        let mut ok = true;
        for (id, px) in &track.observations {
            let m = problem
                .cameras
                .iter()
                .position(|(s, _)| &s.image_id == id)
                .expect("validated by the solver");
            match crate::bundle::corrected_project(&problem.cameras[m].0.rpc, &solution.rotations[m], &x) {
                Ok(proj) => sq += (proj.row - px.row).powi(2) + (proj.col - px.col).powi(2),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        let rms = (sq / track.observations.len() as f64).sqrt();
        if ok && rms <= cutoff {
            let mut t = track.clone();
            t.tiepoint = Some(solution.tiepoints[k]);
            kept_tracks.push(t);
        }
    }
    if kept_tracks.len() < problem.tracks.len() && kept_tracks.len() >= 10 {
        problem.tracks = kept_tracks;
        solution = solve(&problem)?;
    }

    let record = RefineRecord {
        date: inputs.date.clone(),
        scenes: problem.cameras.iter().map(|(s, _)| s.image_id.clone()).collect(),
        reference: problem.cameras[reference_index].0.image_id.clone(),
        tracks: problem.tracks.len(),
        initial_rms_px: solution.initial_rms_px,
        final_rms_px: solution.final_rms_px,
        iterations: solution.iterations,
        stalled: solution.stalled,
    };
    Ok(Refinement { cameras: problem.cameras, rotations: solution.rotations, record })
}

fn out_dir(root: &Path, config: &PipelineConfig) -> PathBuf {
    let out = Path::new(&config.output_dir);
    if out.is_absolute() {
        out.to_path_buf()
    } else {
        root.join(out)
    }
}

/// Run refinement for one date directory and write the rotation sidecar
/// under the output directory.
pub fn run_refine(date_dir: &Path, config: &PipelineConfig) -> Result<RefineRecord, PipelineError> {
    let inputs = load_date_inputs(date_dir)?;
    let refinement = refine_acquisition(&inputs, config)?;

    let root = date_dir.parent().unwrap_or(Path::new("."));
    let dir = out_dir(root, config).join(&inputs.date);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let records: Vec<RotationRecord> = refinement
        .cameras
        .iter()
        .zip(&refinement.rotations)
        .map(|((s, c), r)| RotationRecord {
            image_id: s.image_id.clone(),
            phi: r.phi,
            theta: r.theta,
            alpha: r.alpha,
            center_xyz: [c.0.x, c.0.y, c.0.z],
        })
        .collect();
    let json = serde_json::to_string_pretty(&records)
        .map_err(|e| PipelineError::Invalid(format!("rotation sidecar: {e}")))?;
    atomic_write(&dir.join("rotations.json"), json.as_bytes())?;

    // Corrected cameras travel as the original RPC plus the sidecar; keep a
    // copy of the RPCs next to it for consumers that read only the output
    // tree.
    for (s, _) in &refinement.cameras {
        let record = SceneRecord {
            image_id: s.image_id.clone(),
            width: s.width,
            height: s.height,
            rpc: s.rpc.clone(),
        };
        let rpc_dir = dir.join(RPC_DIR);
        fs::create_dir_all(&rpc_dir).map_err(io_err(&rpc_dir))?;
        atomic_write(&rpc_dir.join(format!("{}.json", s.image_id)), scene_to_json(&record).as_bytes())?;
    }

    Ok(refinement.record)
}

// ---------------------------------------------------------------------------
// Reconstruction stage
// ---------------------------------------------------------------------------

/// Manifest record of one date's reconstruction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructRecord {
    pub date: String,
    pub pairs: usize,
    /// Fraction of AOI cells with data in the merged DSM.
    pub coverage: f64,
    /// Median per-cell standard deviation across overlapping pair DSMs.
    pub median_pair_stddev_m: f64,
}

/// Result of reconstructing one date.
pub struct Reconstruction {
    pub dsm: DsmGrid,
    pub pair_stddev: DsmGrid,
    pub record: ReconstructRecord,
}

/// Margin around the AOI in the shared grid frame, meters. Date-wise
/// refinement is relative: each date keeps the absolute drift of its
/// reference camera, so reconstructed surfaces can land displaced by the
/// geolocation error. The margin keeps them on the grid until the
/// cross-date alignment pulls them back.
pub const FRAME_MARGIN_M: f64 = 320.0;

/// Shared grid frame over the AOI plus the drift margin: anchored at the
/// AOI centroid, snapped so merges never resample.
pub fn aoi_frame(aoi: &[(f64, f64)], gsd: f64) -> Result<(EnuFrame, GridFrame), PipelineError> {
    if aoi.is_empty() {
        return Err(PipelineError::MissingAoi);
    }
    let (clon, clat) = polygon_centroid(aoi);
    let enu = EnuFrame::new(GeodeticPoint::new(clon, clat, 0.0));
    let mut min_e = f64::INFINITY;
    let mut max_e = f64::NEG_INFINITY;
    let mut min_n = f64::INFINITY;
    let mut max_n = f64::NEG_INFINITY;
    for &(lon, lat) in aoi {
        let p = enu.geodetic_to_enu(&GeodeticPoint::new(lon, lat, 0.0));
        min_e = min_e.min(p.east);
        max_e = max_e.max(p.east);
        min_n = min_n.min(p.north);
        max_n = max_n.max(p.north);
    }
    let snap = |v: f64| (v / gsd).floor() * gsd;
    let origin_e = snap(min_e - FRAME_MARGIN_M);
    let origin_n = snap(min_n - FRAME_MARGIN_M);
    let width = ((max_e + FRAME_MARGIN_M - origin_e) / gsd).ceil() as usize;
    let height = ((max_n + FRAME_MARGIN_M - origin_n) / gsd).ceil() as usize;
    if width == 0 || height == 0 {
        return Err(PipelineError::Invalid("degenerate AOI".to_string()));
    }
    Ok((enu, GridFrame { origin_e, origin_n, gsd, width, height }))
}

/// Reconstruct one date from dense pair correspondences and corrected
/// cameras, in memory: triangulate each admissible pair, rasterize, merge
/// by averaging, fill holes, and keep the per-pair consistency map.
pub fn reconstruct_acquisition(
    inputs: &DateInputs,
    rotations: &[CorrectionRotation],
    dense: &BTreeMap<(String, String), Vec<(PixelPoint, PixelPoint)>>,
    config: &PipelineConfig,
) -> Result<Reconstruction, PipelineError> {
    use rayon::prelude::*;

    let acq = Acquisition { date: inputs.date.clone(), scenes: inputs.scenes.clone() };
    let pairs = select_pairs(&acq, &config.aoi, &pair_criteria(config))?;
    if pairs.is_empty() {
        return Err(PipelineError::Skip("no admissible stereo pairs".to_string()));
    }
    let (enu, frame) = aoi_frame(&config.aoi, config.gsd)?;

    let mut pair_dsms: Vec<DsmGrid> = Vec::new();
    for &(i, j) in &pairs {
        let id_a = inputs.scenes[i].image_id.clone();
        let id_b = inputs.scenes[j].image_id.clone();
        let Some(corr) = dense.get(&(id_a.clone(), id_b.clone())) else {
            continue;
        };
        if corr.is_empty() {
            continue;
        }
        let rpc_a = &inputs.scenes[i].rpc;
        let rpc_b = &inputs.scenes[j].rpc;
        let rot_a = &rotations[i];
        let rot_b = &rotations[j];

        let points: Vec<Option<(f64, f64, f64)>> = corr
            .par_iter()
            .map(|(px_a, px_b)| {
                let t = triangulate_corrected(rpc_a, rot_a, rpc_b, rot_b, px_a, px_b).ok()?;
                let p = enu.geodetic_to_enu(&t.point);
                Some((p.east, p.north, p.up))
            })
            .collect();
        let points: Vec<(f64, f64, f64)> = points.into_iter().flatten().collect();
        if points.is_empty() {
            continue;
        }
        pair_dsms.push(rasterize(&points, &frame));
    }
    if pair_dsms.is_empty() {
        return Err(PipelineError::Skip("no dense correspondences for any admissible pair".to_string()));
    }

    let merged = merge_average(&pair_dsms)?;
    let filled = fill_holes(&merged).grid;
    let pair_stddev = if pair_dsms.len() >= 2 {
        stddev_map(&pair_dsms)?
    } else {
        DsmGrid::nodata(frame)
    };

    let mut stds: Vec<f64> = pair_stddev.values().iter().copied().filter(|v| !v.is_nan()).collect();
    stds.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
    let median_std = if stds.is_empty() { f64::NAN } else { stds[stds.len() / 2] };

    let record = ReconstructRecord {
        date: inputs.date.clone(),
        pairs: pair_dsms.len(),
        coverage: filled.coverage(),
        median_pair_stddev_m: median_std,
    };
    Ok(Reconstruction { dsm: filled, pair_stddev, record })
}

fn load_dense_for_pairs(
    date_dir: &Path,
    scenes: &[Scene],
    pairs: &[(usize, usize)],
) -> Result<BTreeMap<(String, String), Vec<(PixelPoint, PixelPoint)>>, PipelineError> {
    let mut dense = BTreeMap::new();
    for &(i, j) in pairs {
        let a = scenes[i].image_id.clone();
        let b = scenes[j].image_id.clone();
        let path = dense_file(date_dir, &a, &b);
        if !path.exists() {
            continue;
        }
        let data = fs::read(&path).map_err(io_err(&path))?;
        dense.insert((a, b), read_dense_csv(data.as_slice(), &path.to_string_lossy())?);
    }
    Ok(dense)
}

fn load_rotations(
    dir: &Path,
    scenes: &[Scene],
) -> Result<Vec<CorrectionRotation>, PipelineError> {
    let path = dir.join("rotations.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let records: Vec<RotationRecord> = serde_json::from_str(&text)
        .map_err(|e| PipelineError::Invalid(format!("{}: {e}", path.display())))?;
    let by_id: BTreeMap<&str, &RotationRecord> =
        records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut rotations = Vec::with_capacity(scenes.len());
    for s in scenes {
        let r = by_id.get(s.image_id.as_str()).ok_or_else(|| {
            PipelineError::Invalid(format!("no rotation record for {}", s.image_id))
        })?;
        rotations.push(CorrectionRotation {
            phi: r.phi,
            theta: r.theta,
            alpha: r.alpha,
            center: CameraCenter(crate::geodesy::EcefPoint::new(
                r.center_xyz[0],
                r.center_xyz[1],
                r.center_xyz[2],
            )),
        });
    }
    Ok(rotations)
}

/// Run reconstruction for one date directory; requires the refine outputs.
pub fn run_reconstruct(date_dir: &Path, config: &PipelineConfig) -> Result<ReconstructRecord, PipelineError> {
    let inputs = load_date_inputs(date_dir)?;
    let root = date_dir.parent().unwrap_or(Path::new("."));
    let dir = out_dir(root, config).join(&inputs.date);
    let rotations = load_rotations(&dir, &inputs.scenes)?;

    let acq = Acquisition { date: inputs.date.clone(), scenes: inputs.scenes.clone() };
    let pairs = select_pairs(&acq, &config.aoi, &pair_criteria(config))?;
    let dense = load_dense_for_pairs(date_dir, &inputs.scenes, &pairs)?;
    let recon = reconstruct_acquisition(&inputs, &rotations, &dense, config)?;

    write_grid_outputs(&dir, "dsm", &recon.dsm)?;
    write_grid_outputs(&dir, "pair_stddev", &recon.pair_stddev)?;
    Ok(recon.record)
}

fn write_grid_outputs(dir: &Path, stem: &str, grid: &DsmGrid) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut ascii = Vec::new();
    write_ascii_grid(&mut ascii, grid)?;
    atomic_write(&dir.join(format!("{stem}.asc")), &ascii)?;
    let mut binary = Vec::new();
    write_binary_grid(&mut binary, grid)?;
    atomic_write(&dir.join(format!("{stem}.grd")), &binary)?;
    Ok(())
}

fn read_grid_output(dir: &Path, stem: &str) -> Result<DsmGrid, PipelineError> {
    for ext in ["grd", "asc"] {
        let path = dir.join(format!("{stem}.{ext}"));
        if path.exists() {
            let data = fs::read(&path).map_err(io_err(&path))?;
            return Ok(read_grid(&data, &path.to_string_lossy())?);
        }
    }
    Err(PipelineError::Invalid(format!("no {stem} grid found under {}", dir.display())))
}

// ---------------------------------------------------------------------------
// Series: alignment, volumes, manifest
// ---------------------------------------------------------------------------

/// Manifest record of the cross-date alignment for one date.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub date: String,
    pub de: f64,
    pub dn: f64,
    pub dh: f64,
    pub peak_on_border: bool,
}

/// Volume report entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub date: String,
    pub volume_m3: f64,
    pub nodata_fraction: f64,
}

/// Regression summary mirroring the weight-from-volume fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub a: f64,
    pub b: f64,
    pub rms_train: f64,
    pub rms_test: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

/// One date's outcome in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DateRecord {
    pub date: String,
    pub refine: Option<RefineRecord>,
    pub reconstruct: Option<ReconstructRecord>,
    pub skipped: Option<String>,
}

/// The full run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub dates: Vec<DateRecord>,
    pub alignment: Vec<AlignmentRecord>,
    pub volumes: Vec<VolumeRecord>,
    pub regression: Option<RegressionSummary>,
}

/// Outcome of a full series run.
pub struct SeriesOutcome {
    pub manifest: RunManifest,
    /// Dates skipped with their reasons.
    pub skipped: Vec<(String, String)>,
}

/// List the date directories of a series root (names parse as YYYY-MM-DD).
pub fn list_date_dirs(root: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if crate::volume::parse_date(name).is_ok() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Read the optional weights CSV at the series root: header `date,weight_mt`.
pub fn read_weights_csv(path: &Path) -> Result<Vec<(String, f64)>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut lines = text.lines();
    match lines.next() {
        Some("date,weight_mt") => {}
        other => {
            return Err(PipelineError::Invalid(format!(
                "{}: header must be date,weight_mt, got {other:?}",
                path.display()
            )));
        }
    }
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (date, w) = line.split_once(',').ok_or_else(|| {
            PipelineError::Invalid(format!("{}: line {}: expected date,weight", path.display(), i + 2))
        })?;
        crate::volume::parse_date(date)?;
        let w: f64 = w.trim().parse().map_err(|_| {
            PipelineError::Invalid(format!("{}: line {}: bad weight {w:?}", path.display(), i + 2))
        })?;
        out.push((date.to_string(), w));
    }
    Ok(out)
}

/// Align a time series of DSMs to the first date and compute the volume
/// series; shared by `run_series` and the standalone align/volume commands.
pub fn align_and_measure(
    dsms: &[(String, DsmGrid)],
    config: &PipelineConfig,
) -> Result<(Vec<AlignmentRecord>, Vec<DsmGrid>, Vec<VolumeRecord>), PipelineError> {
    if dsms.len() < 3 {
        return Err(PipelineError::Invalid(format!(
            "need at least 3 reconstructed dates, got {}",
            dsms.len()
        )));
    }

    let mut alignment = Vec::with_capacity(dsms.len());
    let mut aligned: Vec<DsmGrid> = Vec::with_capacity(dsms.len());
    for (i, (date, dsm)) in dsms.iter().enumerate() {
        if i == 0 {
            alignment.push(AlignmentRecord {
                date: date.clone(),
                de: 0.0,
                dn: 0.0,
                dh: 0.0,
                peak_on_border: false,
            });
            aligned.push(dsm.clone());
            continue;
        }
        // Relative refinement leaves each date with its reference camera's
        // absolute drift; a coarse integer pre-shift on decimated grids
        // brings the offset within the fine search radius.
        let gsd = dsm.frame.gsd;
        let (pre_cols, pre_rows) =
            coarse_align_shift(&dsms[0].1, dsm, FRAME_MARGIN_M, 8)?;
        let pre_shifted = shift_cells(dsm, pre_cols, pre_rows);
        let fine = align_translation(&dsms[0].1, &pre_shifted, config.align_search_radius)?;
        let t = Translation {
            de: fine.de + pre_cols as f64 * gsd,
            dn: fine.dn + pre_rows as f64 * gsd,
            dh: fine.dh,
            peak_on_border: fine.peak_on_border,
        };
        alignment.push(AlignmentRecord {
            date: date.clone(),
            de: t.de,
            dn: t.dn,
            dh: t.dh,
            peak_on_border: t.peak_on_border,
        });
        aligned.push(apply_translation(dsm, &t));
    }

    let mask = compute_dynamic_mask(&aligned, config.mask_tau)?;
    let mut volumes = Vec::with_capacity(aligned.len());
    for ((date, _), grid) in dsms.iter().zip(&aligned) {
        let dtm = estimate_dtm(grid)?;
        let ndsm = compute_ndsm(grid, &dtm, &mask, config.ndsm_hmin, config.ndsm_hmax)?;
        volumes.push(VolumeRecord {
            date: date.clone(),
            volume_m3: integrate_volume(&ndsm.grid),
            nodata_fraction: ndsm.nodata_fraction,
        });
    }
    Ok((alignment, aligned, volumes))
}

fn volume_report_csv(volumes: &[VolumeRecord]) -> String {
    let mut out = String::from("date,volume_m3,ndata_fraction\n");
    for v in volumes {
        out.push_str(&format!("{},{:.3},{:.6}\n", v.date, v.volume_m3, v.nodata_fraction));
    }
    out
}

fn regression_outputs(
    volumes: &[VolumeRecord],
    weights: &[(String, f64)],
    config: &PipelineConfig,
) -> Result<(RegressionSummary, String), PipelineError> {
    let vol_series: Vec<(String, f64)> =
        volumes.iter().map(|v| (v.date.clone(), v.volume_m3)).collect();
    let reg = fit_weight_regression(&vol_series, weights, config.train_fraction, config.seed)?;
    let mut pairs_csv = String::from("date,volume_mm3,weight_mt,train\n");
    for (date, v, s, train) in &reg.samples {
        pairs_csv.push_str(&format!("{date},{v:.6},{s:.6},{}\n", if *train { 1 } else { 0 }));
    }
    let summary = RegressionSummary {
        a: reg.a,
        b: reg.b,
        rms_train: reg.rms_train,
        rms_test: reg.rms_test,
        train_fraction: reg.train_fraction,
        seed: reg.seed,
    };
    Ok((summary, pairs_csv))
}

/// Full series run: refine and reconstruct every date, align everything to
/// the first date, compute the volume series, optionally fit the weight
/// regression, and write the manifest.
pub fn run_series(root: &Path, config: &PipelineConfig) -> Result<SeriesOutcome, PipelineError> {
    use rayon::prelude::*;

    if config.aoi.is_empty() {
        return Err(PipelineError::MissingAoi);
    }
    let date_dirs = list_date_dirs(root)?;
    if date_dirs.len() < 3 {
        return Err(PipelineError::Invalid(format!(
            "need at least 3 date directories, got {}",
            date_dirs.len()
        )));
    }

    struct DateOutput {
        date: String,
        record: DateRecord,
        dsm: Option<DsmGrid>,
    }

    let process_date = |date_dir: &PathBuf| -> DateOutput {
        let date = date_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let run = || -> Result<(RefineRecord, ReconstructRecord, DsmGrid), PipelineError> {
            let inputs = load_date_inputs(date_dir)?;
            let refinement = refine_acquisition(&inputs, config)?;

            let acq = Acquisition { date: inputs.date.clone(), scenes: inputs.scenes.clone() };
            let pairs = select_pairs(&acq, &config.aoi, &pair_criteria(config))?;
            let dense = load_dense_for_pairs(date_dir, &inputs.scenes, &pairs)?;
            let recon = reconstruct_acquisition(&inputs, &refinement.rotations, &dense, config)?;

            // Persist per-date outputs.
            let dir = out_dir(root, config).join(&inputs.date);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let records: Vec<RotationRecord> = refinement
                .cameras
                .iter()
                .zip(&refinement.rotations)
                .map(|((s, c), r)| RotationRecord {
                    image_id: s.image_id.clone(),
                    phi: r.phi,
                    theta: r.theta,
                    alpha: r.alpha,
                    center_xyz: [c.0.x, c.0.y, c.0.z],
                })
                .collect();
            let json = serde_json::to_string_pretty(&records)
                .map_err(|e| PipelineError::Invalid(format!("rotation sidecar: {e}")))?;
            atomic_write(&dir.join("rotations.json"), json.as_bytes())?;
            write_grid_outputs(&dir, "dsm", &recon.dsm)?;
            write_grid_outputs(&dir, "pair_stddev", &recon.pair_stddev)?;

            Ok((refinement.record, recon.record, recon.dsm))
        };
        match run() {
            Ok((refine, reconstruct, dsm)) => DateOutput {
                date: date.clone(),
                record: DateRecord {
                    date,
                    refine: Some(refine),
                    reconstruct: Some(reconstruct),
                    skipped: None,
                },
                dsm: Some(dsm),
            },
            Err(e) => DateOutput {
                date: date.clone(),
                record: DateRecord { date, refine: None, reconstruct: None, skipped: Some(e.to_string()) },
                dsm: None,
            },
        }
    };

    let outputs: Vec<DateOutput> = date_dirs.par_iter().map(process_date).collect();

    let mut skipped = Vec::new();
    let mut dsms: Vec<(String, DsmGrid)> = Vec::new();
    let mut dates = Vec::with_capacity(outputs.len());
    for o in outputs {
        if let Some(reason) = &o.record.skipped {
            skipped.push((o.date.clone(), reason.clone()));
        } else if let Some(dsm) = o.dsm {
            dsms.push((o.date.clone(), dsm));
        }
        dates.push(o.record);
    }

    let (alignment, _aligned, volumes) = align_and_measure(&dsms, config)?;

    let out = out_dir(root, config);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    atomic_write(&out.join("volumes.csv"), volume_report_csv(&volumes).as_bytes())?;

    let weights_path = root.join(WEIGHTS_FILE);
    let regression = if weights_path.exists() {
        let weights = read_weights_csv(&weights_path)?;
        let (summary, pairs_csv) = regression_outputs(&volumes, &weights, config)?;
        atomic_write(&out.join("regression_pairs.csv"), pairs_csv.as_bytes())?;
        let json = serde_json::to_string_pretty(&summary)
            .map_err(|e| PipelineError::Invalid(format!("regression summary: {e}")))?;
        atomic_write(&out.join("regression.json"), json.as_bytes())?;
        Some(summary)
    } else {
        None
    };

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.hash(),
        dates,
        alignment,
        volumes,
        regression,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| PipelineError::Invalid(format!("manifest: {e}")))?;
    atomic_write(&out.join("manifest.json"), json.as_bytes())?;

    Ok(SeriesOutcome { manifest, skipped })
}

/// Standalone alignment over previously reconstructed dates: writes the
/// alignment records and the aligned grids.
pub fn run_align(root: &Path, config: &PipelineConfig) -> Result<Vec<AlignmentRecord>, PipelineError> {
    let out = out_dir(root, config);
    let mut dsms = Vec::new();
    for dir in list_date_dirs(root)? {
        let date = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let date_out = out.join(&date);
        if date_out.join("dsm.grd").exists() || date_out.join("dsm.asc").exists() {
            dsms.push((date, read_grid_output(&date_out, "dsm")?));
        }
    }
    let (alignment, aligned, _) = align_and_measure(&dsms, config)?;
    let align_dir = out.join("align");
    fs::create_dir_all(&align_dir).map_err(io_err(&align_dir))?;
    for ((date, _), grid) in dsms.iter().zip(&aligned) {
        write_grid_outputs(&align_dir, date, grid)?;
    }
    let json = serde_json::to_string_pretty(&alignment)
        .map_err(|e| PipelineError::Invalid(format!("alignment records: {e}")))?;
    atomic_write(&align_dir.join("translations.json"), json.as_bytes())?;
    Ok(alignment)
}

/// Standalone volume report over previously reconstructed dates.
pub fn run_volume(root: &Path, config: &PipelineConfig) -> Result<Vec<VolumeRecord>, PipelineError> {
    let out = out_dir(root, config);
    let mut dsms = Vec::new();
    for dir in list_date_dirs(root)? {
        let date = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let date_out = out.join(&date);
        if date_out.join("dsm.grd").exists() || date_out.join("dsm.asc").exists() {
            dsms.push((date, read_grid_output(&date_out, "dsm")?));
        }
    }
    let (_, _, volumes) = align_and_measure(&dsms, config)?;
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    atomic_write(&out.join("volumes.csv"), volume_report_csv(&volumes).as_bytes())?;

    let weights_path = root.join(WEIGHTS_FILE);
    if weights_path.exists() {
        let weights = read_weights_csv(&weights_path)?;
        let (summary, pairs_csv) = regression_outputs(&volumes, &weights, config)?;
        atomic_write(&out.join("regression_pairs.csv"), pairs_csv.as_bytes())?;
        let json = serde_json::to_string_pretty(&summary)
            .map_err(|e| PipelineError::Invalid(format!("regression summary: {e}")))?;
        atomic_write(&out.join("regression.json"), json.as_bytes())?;
    }
    Ok(volumes)
}

/// Conversion helper for the volume module's series type.
pub fn volume_entries(records: &[VolumeRecord]) -> Vec<VolumeEntry> {
    records
        .iter()
        .map(|r| VolumeEntry {
            date: r.date.clone(),
            volume_m3: r.volume_m3,
            nodata_fraction: r.nodata_fraction,
        })
        .collect()
}
