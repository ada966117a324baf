//! Synthetic-scene generator with exact ground truth: analytic terrains with
//! Gaussian piles, pushframe-like strips of overlapping pinhole scenes fitted
//! to RPCs, injected attitude errors with known rotations, and noisy
//! correspondences emitted in the pipeline's ingestion formats.
//!
//! Every generator is a pure function of its seed and parameters.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::bundle::euler_to_matrix;
use crate::geodesy::{geodetic_to_ecef, EcefPoint, EnuFrame, EnuPoint, GeodeticPoint};
use crate::geometry::{GeometryError, Scene};
use crate::matching::{Keypoint, KeypointSet, PairwiseMatch};
use crate::rpc::{fit_rpc, PixelPoint, RpcError, RpcNormalization};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("scene {image_id}: fitted RPC deviates {deviation_px:.4} px from the pinhole (limit {limit_px})")]
    FitQuality { image_id: String, deviation_px: f64, limit_px: f64 },
    #[error("rpc: {0}")]
    Rpc(#[from] RpcError),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
}

/// One Gaussian pile of the synthetic terrain.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPile {
    pub center_e: f64,
    pub center_n: f64,
    /// Peak height above the base plane, meters.
    pub amplitude: f64,
    /// Standard deviation of the Gaussian footprint, meters.
    pub sigma: f64,
}

impl GaussianPile {
    /// Exact volume of the untruncated pile: 2 pi A sigma^2.
    pub fn analytic_volume(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.amplitude * self.sigma * self.sigma
    }
}

/// Analytic world: a base plane plus Gaussian piles over a square extent of
/// local ENU coordinates centered at the origin.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub seed: u64,
    /// Geodetic anchor of the local ENU frame.
    pub origin: GeodeticPoint,
    /// Ellipsoidal height of the flat base plane, meters.
    pub base_height: f64,
    /// Side of the square study area, meters.
    pub extent: f64,
    pub piles: Vec<GaussianPile>,
    /// Amplitude of an optional sinusoidal base undulation, meters. Zero
    /// keeps the terrain flat (the assumption behind the percentile DTM);
    /// nonzero values give tie-points height relief, which strengthens
    /// rotation observability in bundle-adjustment tests.
    pub terrain_amplitude: f64,
    /// Wavelength of the base undulation, meters.
    pub terrain_wavelength: f64,
}

/// Default geodetic anchor of synthetic worlds.
pub const DEFAULT_ORIGIN: GeodeticPoint = GeodeticPoint { lon: 30.0, lat: -25.0, height: 0.0 };

impl SyntheticWorld {
    pub fn frame(&self) -> EnuFrame {
        EnuFrame::new(self.origin)
    }

    /// Pile height above the base plane at an ENU position.
    pub fn pile_height(&self, e: f64, n: f64) -> f64 {
        let mut h = 0.0;
        for p in &self.piles {
            let d2 = (e - p.center_e).powi(2) + (n - p.center_n).powi(2);
            h += p.amplitude * (-d2 / (2.0 * p.sigma * p.sigma)).exp();
        }
        h
    }

    /// Base terrain height (ENU up, without piles) at an ENU position.
    pub fn terrain_height(&self, e: f64, n: f64) -> f64 {
        if self.terrain_amplitude == 0.0 {
            return self.base_height;
        }
        let w = std::f64::consts::TAU / self.terrain_wavelength;
        self.base_height + self.terrain_amplitude * (w * e).sin() * (w * n).sin()
    }

    /// Absolute surface height (ENU up) at an ENU position.
    pub fn surface_height(&self, e: f64, n: f64) -> f64 {
        self.terrain_height(e, n) + self.pile_height(e, n)
    }

    /// Surface point in geodetic coordinates.
    pub fn surface_point(&self, e: f64, n: f64) -> GeodeticPoint {
        let up = self.surface_height(e, n);
        self.frame()
            .enu_to_geodetic(&EnuPoint::new(e, n, up))
            .expect("surface stays far from Earth center")
    }

    /// Exact untruncated pile volume, sum of 2 pi A sigma^2 over piles.
    pub fn analytic_pile_volume(&self) -> f64 {
        self.piles.iter().map(GaussianPile::analytic_volume).sum()
    }

    /// Numerically integrated pile volume over the extent, counting only
    /// cells whose pile height lies in [hmin, hmax]. Midpoint rule at the
    /// given step.
    pub fn truncated_pile_volume(&self, hmin: f64, hmax: f64, step: f64) -> f64 {
        let half = self.extent / 2.0;
        let cells = (self.extent / step).ceil() as usize;
        let mut volume = 0.0;
        for i in 0..cells {
            let e = -half + (i as f64 + 0.5) * step;
            for j in 0..cells {
                let n = -half + (j as f64 + 0.5) * step;
                let h = self.pile_height(e, n);
                if h >= hmin && h <= hmax {
                    volume += h * step * step;
                }
            }
        }
        volume
    }
}

/// Deterministic world with `n_piles` random Gaussian piles over a square
/// `extent`.
pub fn generate_world(seed: u64, n_piles: usize, extent: f64) -> SyntheticWorld {
    assert!(extent > 0.0, "extent must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = extent * 0.3;
    let piles = (0..n_piles)
        .map(|_| GaussianPile {
            center_e: rng.gen_range(-half..half),
            center_n: rng.gen_range(-half..half),
            amplitude: rng.gen_range(8.0..22.0),
            sigma: rng.gen_range(22.0..42.0),
        })
        .collect();
    SyntheticWorld {
        seed,
        origin: DEFAULT_ORIGIN,
        base_height: 50.0,
        extent,
        piles,
        terrain_amplitude: 0.0,
        terrain_wavelength: 1500.0,
    }
}

// ---------------------------------------------------------------------------
// Pinhole cameras and synthetic acquisitions
// ---------------------------------------------------------------------------

/// Ground-truth pinhole camera in ECEF.
#[derive(Debug, Clone)]
pub struct PinholeCamera {
    pub center: EcefPoint,
    /// Rows: camera x (along image columns), y (along rows), z (boresight).
    pub axes: Matrix3<f64>,
    pub focal_px: f64,
    pub pp_row: f64,
    pub pp_col: f64,
    pub width: u32,
    pub height: u32,
}

impl PinholeCamera {
    /// Project an ECEF point; `None` when it lies behind the camera.
    pub fn project(&self, x: &EcefPoint) -> Option<PixelPoint> {
        self.project_rotated(&Matrix3::identity(), x)
    }

    /// Project after rotating the point about the camera center:
    /// the camera as delivered with an attitude error `g`.
    pub fn project_rotated(&self, g: &Matrix3<f64>, x: &EcefPoint) -> Option<PixelPoint> {
        let d = Vector3::new(x.x - self.center.x, x.y - self.center.y, x.z - self.center.z);
        let c = self.axes * (g * d);
        if c.z <= 0.0 {
            return None;
        }
        Some(PixelPoint::new(
            self.pp_row + self.focal_px * c.y / c.z,
            self.pp_col + self.focal_px * c.x / c.z,
        ))
    }

    pub fn contains(&self, px: &PixelPoint, margin: f64) -> bool {
        px.row >= margin
            && px.col >= margin
            && px.row <= self.height as f64 - margin
            && px.col <= self.width as f64 - margin
    }
}

/// One synthetic scene: the delivered (perturbed) RPC plus its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// Scene as delivered to the pipeline: RPC fitted to the perturbed
    /// pinhole, footprint from the RPC.
    pub scene: Scene,
    /// True camera.
    pub pinhole: PinholeCamera,
    /// Injected attitude error, Euler angles (radians). The delivered RPC
    /// equals the pinhole composed with this rotation about the true center;
    /// the bundle adjustment target is its inverse.
    pub injected: [f64; 3],
    /// Worst fitted-RPC deviation from the perturbed pinhole, pixels.
    pub fit_deviation_px: f64,
    /// Designed north range of the scene strip, meters in the world frame.
    pub strip_n: (f64, f64),
}

impl SyntheticScene {
    pub fn injected_matrix(&self) -> Matrix3<f64> {
        euler_to_matrix(self.injected[0], self.injected[1], self.injected[2])
    }
}

/// One date's synthetic acquisition with ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticAcquisition {
    pub date: String,
    pub scenes: Vec<SyntheticScene>,
}

impl SyntheticAcquisition {
    pub fn acquisition(&self) -> crate::geometry::Acquisition {
        crate::geometry::Acquisition {
            date: self.date.clone(),
            scenes: self.scenes.iter().map(|s| s.scene.clone()).collect(),
        }
    }
}

/// Geometry and error parameters for [`generate_acquisition`].
#[derive(Debug, Clone, Copy)]
pub struct AcqParams {
    pub n_scenes: usize,
    /// North length of one scene strip, meters.
    pub scene_len_n: f64,
    /// East width of one scene, meters.
    pub scene_len_e: f64,
    /// Footprint overlap fraction between consecutive strips.
    pub overlap_fraction: f64,
    /// Nadir ground sample distance of the images, meters per pixel.
    pub gsd: f64,
    /// Camera altitude above the base plane, meters.
    pub altitude: f64,
    /// Convergence angle between consecutive scenes, degrees. Pitches cycle
    /// through four classes (-1.5, -0.5, +0.5, +1.5 times this value) so
    /// that tie-points see more than two viewing directions; two distinct
    /// directions would leave a bas-relief-like near-degeneracy that lets
    /// camera pitch trade against tie-point heights.
    pub convergence_deg: f64,
    /// Bound on each injected Euler angle, radians.
    pub attitude_bound: f64,
    /// When true the designated reference scene gets a zero injected
    /// rotation, making the relative corrections recoverable exactly.
    pub reference_zero: bool,
    /// Index of the scene treated as the gauge reference by tests.
    pub reference_scene: usize,
    /// Common rotation composed on the right of every injected rotation
    /// (Euler angles, radians); used by gauge-invariance checks.
    pub attitude_pre_rotation: [f64; 3],
    pub seed: u64,
}

impl Default for AcqParams {
    fn default() -> Self {
        Self {
            n_scenes: 8,
            scene_len_n: 400.0,
            scene_len_e: 1400.0,
            overlap_fraction: 0.55,
            gsd: 0.72,
            altitude: 500_000.0,
            // Consecutive pairs sit at this angle; the class wrap (every
            // fourth pair) sits at three times it. 8 keeps both inside the
            // (5, 35) selection window.
            convergence_deg: 8.0,
            attitude_bound: 100e-6,
            reference_zero: true,
            reference_scene: 0,
            attitude_pre_rotation: [0.0, 0.0, 0.0],
            seed: 0,
        }
    }
}

/// Acceptable fitted-RPC deviation from the pinhole, pixels.
pub const FIT_LIMIT_PX: f64 = 0.01;

/// Strip length and overlap fraction so that consecutive footprints overlap
/// well past the 200 m pair rule, triples of consecutive strips share at
/// least ~120 m (without three-view tracks the per-pair ambiguity families
/// drift independently and the pair DSMs fall apart), and the union of
/// consecutive-pair overlaps covers the study area.
pub fn strip_plan(extent: f64, n_scenes: usize) -> (f64, f64) {
    const TRIPLE_OVERLAP_M: f64 = 120.0;
    let target = extent.max(100.0) + 40.0;
    if n_scenes <= 2 {
        // A single pair: its overlap is the whole reconstructable area.
        let len = (target / 0.65).max(400.0);
        return (len, (target / len).clamp(0.2, 0.9));
    }
    // step = (len - TRIPLE) / 2 and the union of pair overlaps spans
    // len + (n - 3) * step.
    let n = n_scenes as f64;
    let len = (2.0 * (target + TRIPLE_OVERLAP_M / 2.0 * (n - 3.0)) / (n - 1.0)).max(380.0);
    let step = (len - TRIPLE_OVERLAP_M) / 2.0;
    let overlap = 1.0 - step / len;
    (len, overlap.clamp(0.2, 0.9))
}

/// Generate a strip of overlapping scenes over the world, with injected
/// attitude errors recorded as ground truth.
pub fn generate_acquisition(
    world: &SyntheticWorld,
    params: &AcqParams,
    date: &str,
) -> Result<SyntheticAcquisition, SynthError> {
    if params.n_scenes < 2 {
        return Err(SynthError::InvalidParams("need at least 2 scenes".into()));
    }
    if !(0.0..0.9).contains(&params.overlap_fraction) {
        return Err(SynthError::InvalidParams("overlap_fraction must be in (0, 0.9)".into()));
    }

    let frame = world.frame();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let step = (1.0 - params.overlap_fraction) * params.scene_len_n;
    let total = params.scene_len_n + step * (params.n_scenes - 1) as f64;
    let n0 = -total / 2.0;

    let width = (params.scene_len_e / params.gsd).ceil() as u32;
    let height = (params.scene_len_n / params.gsd * 1.1).ceil() as u32;
    let focal = params.altitude / params.gsd;

    let mut scenes = Vec::with_capacity(params.n_scenes);
    for k in 0..params.n_scenes {
        let strip_lo = n0 + k as f64 * step;
        let strip_hi = strip_lo + params.scene_len_n;
        let n_center = 0.5 * (strip_lo + strip_hi);
        let class = [-1.5, -0.5, 0.5, 1.5][k % 4];
        let pitch = class * params.convergence_deg.to_radians();

        let target = frame.enu_to_ecef(&EnuPoint::new(0.0, n_center, world.base_height));
        let cam = frame.enu_to_ecef(&EnuPoint::new(
            0.0,
            n_center - params.altitude * pitch.tan(),
            world.base_height + params.altitude,
        ));
        let (east, _, _) = frame.axes();
        let east = Vector3::new(east[0], east[1], east[2]);
        let z = Vector3::new(target.x - cam.x, target.y - cam.y, target.z - cam.z).normalize();
        let x = (east - z * east.dot(&z)).normalize();
        let y = z.cross(&x);
        let axes = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);

        let pinhole = PinholeCamera {
            center: cam,
            axes,
            focal_px: focal,
            pp_row: height as f64 / 2.0,
            pp_col: width as f64 / 2.0,
            width,
            height,
        };

        let drawn = [
            rng.gen_range(-1.0..1.0) * params.attitude_bound,
            rng.gen_range(-1.0..1.0) * params.attitude_bound,
            rng.gen_range(-1.0..1.0) * params.attitude_bound,
        ];
        let base = if params.reference_zero && k == params.reference_scene {
            [0.0, 0.0, 0.0]
        } else {
            drawn
        };
        let pre = params.attitude_pre_rotation;
        let g_matrix = euler_to_matrix(base[0], base[1], base[2])
            * euler_to_matrix(pre[0], pre[1], pre[2]);
        let injected = crate::bundle::matrix_to_euler(&g_matrix);
        let injected = [injected.0, injected.1, injected.2];
        let g = g_matrix;

        // Fit box: the strip plus margins, heights covering base and piles.
        let margin = 60.0;
        let e_half = params.scene_len_e / 2.0 + margin;
        let (n_lo, n_hi) = (strip_lo - margin, strip_hi + margin);
        let (h_lo, h_hi) = (world.base_height - 60.0, world.base_height + 90.0);

        let mut lon_lo = f64::INFINITY;
        let mut lon_hi = f64::NEG_INFINITY;
        let mut lat_lo = f64::INFINITY;
        let mut lat_hi = f64::NEG_INFINITY;
        for &e in &[-e_half, e_half] {
            for &n in &[n_lo, n_hi] {
                for &h in &[h_lo, h_hi] {
                    let gpt = frame
                        .enu_to_geodetic(&EnuPoint::new(e, n, h))
                        .expect("fit box is near the surface");
                    lon_lo = lon_lo.min(gpt.lon);
                    lon_hi = lon_hi.max(gpt.lon);
                    lat_lo = lat_lo.min(gpt.lat);
                    lat_hi = lat_hi.max(gpt.lat);
                }
            }
        }
        let norm = RpcNormalization {
            lat_offset: 0.5 * (lat_lo + lat_hi),
            lat_scale: 0.5 * (lat_hi - lat_lo),
            lon_offset: 0.5 * (lon_lo + lon_hi),
            lon_scale: 0.5 * (lon_hi - lon_lo),
            height_offset: 0.5 * (h_lo + h_hi),
            height_scale: 0.5 * (h_hi - h_lo),
            row_offset: height as f64 / 2.0,
            row_scale: height as f64 * 0.6,
            col_offset: width as f64 / 2.0,
            col_scale: width as f64 * 0.6,
        };

        let perturbed_project = |gpt: &GeodeticPoint| -> Option<PixelPoint> {
            pinhole.project_rotated(&g, &geodetic_to_ecef(gpt))
        };

        let grid_samples = |nx: usize, ny: usize, nz: usize, offset: f64| {
            let mut out = Vec::with_capacity(nx * ny * nz);
            for i in 0..nx {
                for j in 0..ny {
                    for l in 0..nz {
                        let t = |idx: usize, n: usize| -1.0 + 2.0 * (idx as f64 + offset) / (n as f64 - 1.0 + 2.0 * offset);
                        let gpt = GeodeticPoint::new(
                            norm.lon_offset + t(i, nx) * norm.lon_scale,
                            norm.lat_offset + t(j, ny) * norm.lat_scale,
                            norm.height_offset + t(l, nz) * norm.height_scale,
                        );
                        if let Some(px) = perturbed_project(&gpt) {
                            out.push((gpt, px));
                        }
                    }
                }
            }
            out
        };

        let samples = grid_samples(9, 9, 7, 0.0);
        let fit = fit_rpc(&samples, &norm)?;

        // Validate against the pinhole on a denser, offset grid.
        let mut deviation = fit.max_deviation_px;
        for (gpt, px) in grid_samples(10, 10, 8, 0.37) {
            let proj = fit.model.project(&gpt)?;
            deviation = deviation.max(proj.distance(&px));
        }
        let image_id = format!("s{k:02}");
        if deviation > FIT_LIMIT_PX {
            return Err(SynthError::FitQuality { image_id, deviation_px: deviation, limit_px: FIT_LIMIT_PX });
        }

        let scene = Scene::from_rpc(image_id, fit.model, width, height)?;
        scenes.push(SyntheticScene {
            scene,
            pinhole,
            injected,
            fit_deviation_px: deviation,
            strip_n: (strip_lo, strip_hi),
        });
    }

    Ok(SyntheticAcquisition { date: date.to_string(), scenes })
}

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

/// Parameters for [`generate_observations`].
#[derive(Debug, Clone, Copy)]
pub struct ObservationParams {
    pub n_points: usize,
    pub pixel_noise_sigma: f64,
    pub outlier_fraction: f64,
    pub descriptor_dim: usize,
    pub seed: u64,
    /// Project through the delivered RPCs instead of the true pinholes,
    /// giving observations exactly consistent with the delivered cameras
    /// (used to probe the zero-error optimum).
    pub use_delivered_rpc: bool,
}

impl Default for ObservationParams {
    fn default() -> Self {
        Self {
            n_points: 300,
            pixel_noise_sigma: 0.3,
            outlier_fraction: 0.0,
            descriptor_dim: 128,
            seed: 0,
            use_delivered_rpc: false,
        }
    }
}

/// Ground-truth observations: per-scene keypoints, candidate matches with
/// injected outliers, and the true 3D points.
#[derive(Debug, Clone)]
pub struct Observations {
    /// One keypoint set per scene, ordered like the acquisition.
    pub keypoints: Vec<KeypointSet>,
    pub matches: Vec<PairwiseMatch>,
    /// Per match: true for a ground-truth correspondence, false for an
    /// injected outlier.
    pub inlier_flags: Vec<bool>,
    /// True surface points, geodetic.
    pub truth_points: Vec<GeodeticPoint>,
    /// Per point, per scene: the keypoint index when visible.
    pub visibility: Vec<Vec<Option<usize>>>,
}

/// Sample surface points visible in at least two scenes, project them with
/// the true cameras, add pixel noise and outlier matches.
pub fn generate_observations(
    acq: &SyntheticAcquisition,
    world: &SyntheticWorld,
    params: &ObservationParams,
) -> Observations {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.pixel_noise_sigma.max(1e-300)).expect("valid sigma");
    let jitter = Normal::new(0.0, 0.005).expect("valid sigma");
    let frame = world.frame();
    let n_scenes = acq.scenes.len();

    let mut keypoints: Vec<Vec<Keypoint>> = vec![Vec::new(); n_scenes];
    let mut truth_points = Vec::with_capacity(params.n_points);
    let mut visibility: Vec<Vec<Option<usize>>> = Vec::with_capacity(params.n_points);

    let half = world.extent / 2.0 - 10.0;
    let mut attempts = 0usize;
    while truth_points.len() < params.n_points && attempts < params.n_points * 200 {
        attempts += 1;
        let e = rng.gen_range(-half..half);
        let n = rng.gen_range(-half..half);
        let up = world.surface_height(e, n);
        let x = frame.enu_to_ecef(&EnuPoint::new(e, n, up));
        let gpt = frame.enu_to_geodetic(&EnuPoint::new(e, n, up)).expect("surface point");

        let mut projections = Vec::with_capacity(n_scenes);
        let mut visible = 0usize;
        for s in &acq.scenes {
            let projected = if params.use_delivered_rpc {
                s.scene.rpc.project(&gpt).ok()
            } else {
                s.pinhole.project(&x)
            };
            match projected {
                Some(px) if s.pinhole.contains(&px, 3.0) => {
                    visible += 1;
                    projections.push(Some(px));
                }
                _ => projections.push(None),
            }
        }
        if visible < 2 {
            continue;
        }

        let base_desc: Vec<f64> = (0..params.descriptor_dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut vis_row = Vec::with_capacity(n_scenes);
        for (scene_idx, proj) in projections.iter().enumerate() {
            match proj {
                Some(px) => {
                    let noisy = PixelPoint::new(
                        px.row + noise.sample(&mut rng),
                        px.col + noise.sample(&mut rng),
                    );
                    let descriptor: Vec<f64> =
                        base_desc.iter().map(|d| d + jitter.sample(&mut rng)).collect();
                    keypoints[scene_idx].push(Keypoint { position: noisy, descriptor });
                    vis_row.push(Some(keypoints[scene_idx].len() - 1));
                }
                None => vis_row.push(None),
            }
        }
        truth_points.push(gpt);
        visibility.push(vis_row);
    }

    let sets: Vec<KeypointSet> = acq
        .scenes
        .iter()
        .zip(keypoints)
        .map(|(s, kps)| KeypointSet { image_id: s.scene.image_id.clone(), keypoints: kps })
        .collect();

    let mut matches = Vec::new();
    let mut inlier_flags = Vec::new();
    for a in 0..n_scenes {
        for b in (a + 1)..n_scenes {
            for vis in &visibility {
                let (Some(ia), Some(ib)) = (vis[a], vis[b]) else {
                    continue;
                };
                let nb = sets[b].keypoints.len();
                let (idx_b, is_inlier) = if nb > 1 && rng.gen_range(0.0..1.0) < params.outlier_fraction {
                    // Wrong b-side keypoint.
                    let mut wrong = rng.gen_range(0..nb);
                    if wrong == ib {
                        wrong = (wrong + 1) % nb;
                    }
                    (wrong, false)
                } else {
                    (ib, true)
                };
                let da = &sets[a].keypoints[ia].descriptor;
                let db = &sets[b].keypoints[idx_b].descriptor;
                let distance = da
                    .iter()
                    .zip(db)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                matches.push(PairwiseMatch {
                    image_a: sets[a].image_id.clone(),
                    image_b: sets[b].image_id.clone(),
                    idx_a: ia,
                    idx_b,
                    distance,
                });
                inlier_flags.push(is_inlier);
            }
        }
    }

    Observations { keypoints: sets, matches, inlier_flags, truth_points, visibility }
}

/// Dense correspondences for one scene pair on a regular ENU grid over the
/// strip overlap: the stand-in for a dense stereo matcher.
pub fn generate_dense_pair(
    acq: &SyntheticAcquisition,
    world: &SyntheticWorld,
    pair: (usize, usize),
    step_m: f64,
    noise_sigma: f64,
    seed: u64,
) -> Vec<(PixelPoint, PixelPoint)> {
    let (ia, ib) = pair;
    let sa = &acq.scenes[ia];
    let sb = &acq.scenes[ib];
    let frame = world.frame();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.max(1e-300)).expect("valid sigma");

    let n_lo = sa.strip_n.0.max(sb.strip_n.0);
    let n_hi = sa.strip_n.1.min(sb.strip_n.1);
    if n_lo >= n_hi {
        return Vec::new();
    }
    let e_half = world.extent / 2.0;

    let cols = ((2.0 * e_half) / step_m).floor() as usize;
    let rows = ((n_hi - n_lo) / step_m).floor() as usize;
    let mut out = Vec::with_capacity(cols * rows);
    for i in 0..rows {
        let n = n_lo + (i as f64 + 0.5) * step_m;
        for j in 0..cols {
            let e = -e_half + (j as f64 + 0.5) * step_m;
            let x = frame.enu_to_ecef(&EnuPoint::new(e, n, world.surface_height(e, n)));
            let (Some(pa), Some(pb)) = (sa.pinhole.project(&x), sb.pinhole.project(&x)) else {
                continue;
            };
            if !sa.pinhole.contains(&pa, 1.0) || !sb.pinhole.contains(&pb, 1.0) {
                continue;
            }
            let (pa, pb) = if noise_sigma > 0.0 {
                (
                    PixelPoint::new(pa.row + noise.sample(&mut rng), pa.col + noise.sample(&mut rng)),
                    PixelPoint::new(pb.row + noise.sample(&mut rng), pb.col + noise.sample(&mut rng)),
                )
            } else {
                (pa, pb)
            };
            out.push((pa, pb));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Time series
// ---------------------------------------------------------------------------

/// Per-date pile amplitudes for a synthetic series.
#[derive(Debug, Clone)]
pub struct DateSpec {
    pub date: String,
    /// One amplitude per pile of the template world.
    pub amplitudes: Vec<f64>,
}

/// Instantiate per-date worlds from a template: pile centers and footprints
/// stay fixed, amplitudes follow the schedule, surroundings are static.
pub fn generate_timeseries(template: &SyntheticWorld, specs: &[DateSpec]) -> Vec<SyntheticWorld> {
    specs
        .iter()
        .map(|spec| {
            assert_eq!(spec.amplitudes.len(), template.piles.len(), "one amplitude per pile");
            let mut w = template.clone();
            for (p, &a) in w.piles.iter_mut().zip(&spec.amplitudes) {
                p.amplitude = a;
            }
            w
        })
        .collect()
}

/// Synthetic on-site weight measurements S = a * V + b + noise, with V in
/// millions of cubic meters and S in megatonnes.
pub fn weights_from_volumes(
    volumes: &[(String, f64)],
    a: f64,
    b: f64,
    noise_sigma_mt: f64,
    seed: u64,
) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma_mt.max(1e-300)).expect("valid sigma");
    volumes
        .iter()
        .map(|(date, v_m3)| {
            let s = a * (v_m3 / 1e6) + b + if noise_sigma_mt > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (date.clone(), s)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset emission
// ---------------------------------------------------------------------------

/// Everything needed to manufacture a full on-disk time series.
#[derive(Debug, Clone)]
pub struct DatasetParams {
    pub seed: u64,
    pub n_dates: usize,
    pub n_scenes: usize,
    pub n_piles: usize,
    /// Side of the square study area, meters.
    pub extent: f64,
    pub acq: AcqParams,
    pub n_tiepoints: usize,
    pub pixel_noise_sigma: f64,
    pub outlier_fraction: f64,
    /// Grid step of the dense correspondences, meters.
    pub dense_step: f64,
    pub dense_noise_sigma: f64,
    /// Weight series coefficients (megatonnes per million cubic meters and
    /// megatonnes) and measurement noise.
    pub weight_a: f64,
    pub weight_b: f64,
    pub weight_noise_sigma: f64,
    /// Step of the numeric truncated-volume oracle, meters.
    pub oracle_step: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        let extent = 700.0;
        let n_scenes = 4;
        let (scene_len_n, overlap_fraction) = strip_plan(extent, n_scenes);
        Self {
            seed: 0,
            n_dates: 6,
            n_scenes,
            n_piles: 3,
            extent,
            acq: AcqParams {
                n_scenes,
                scene_len_n,
                scene_len_e: extent + 250.0,
                overlap_fraction,
                ..AcqParams::default()
            },
            n_tiepoints: 160,
            pixel_noise_sigma: 0.3,
            outlier_fraction: 0.1,
            dense_step: 1.0,
            dense_noise_sigma: 0.0,
            weight_a: 1.02,
            weight_b: 0.3,
            weight_noise_sigma: 0.05,
            oracle_step: 0.25,
        }
    }
}

/// Ground truth of one emitted date.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DateTruth {
    pub date: String,
    /// Injected Euler angles per scene, in scene order.
    pub rotations: Vec<InjectedRotation>,
    /// Numerically integrated pile volume within the 3-30 m band.
    pub truncated_volume_m3: f64,
    /// Closed-form untruncated pile volume.
    pub analytic_volume_m3: f64,
    /// The date's pile field.
    pub piles: Vec<PileTruth>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PileTruth {
    pub center_e: f64,
    pub center_n: f64,
    pub amplitude: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct InjectedRotation {
    pub image_id: String,
    pub phi: f64,
    pub theta: f64,
    pub alpha: f64,
}

/// Ground truth of a whole emitted dataset, consumed only by tests.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetTruth {
    pub seed: u64,
    pub dates: Vec<DateTruth>,
    pub weight_a: f64,
    pub weight_b: f64,
    pub weight_noise_sigma: f64,
}

/// The AOI used when emitting a dataset: the study-area square, inset a
/// little so its bounding box stays inside every scene's east extent.
pub fn dataset_aoi(world: &SyntheticWorld) -> Vec<(f64, f64)> {
    let frame = world.frame();
    let half = world.extent / 2.0;
    [(-half, -half), (half, -half), (half, half), (-half, half)]
        .iter()
        .map(|&(e, n)| {
            let g = frame
                .enu_to_geodetic(&EnuPoint::new(e, n, world.base_height))
                .expect("aoi corner");
            (g.lon, g.lat)
        })
        .collect()
}

fn date_strings(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut day = chrono::NaiveDate::from_ymd_opt(2020, 1, 4).expect("valid date");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            day += chrono::Duration::days(rng.gen_range(2..=12));
        }
        out.push(day.format("%Y-%m-%d").to_string());
    }
    out
}

/// Per-date amplitude schedule: every pile alternates between a low and a
/// high phase in seeded blocks, so each pile's cells vary strongly over the
/// series and the dynamic mask covers the thresholded support.
fn amplitude_schedule(piles: &[GaussianPile], n_dates: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed_2701);
    let mut per_pile: Vec<Vec<f64>> = Vec::with_capacity(piles.len());
    for p in piles {
        let mut factors = Vec::with_capacity(n_dates);
        let mut high = rng.gen_range(0.0..1.0) < 0.5;
        let mut remaining = rng.gen_range(1..=2);
        for _ in 0..n_dates {
            if remaining == 0 {
                high = !high;
                remaining = rng.gen_range(1..=2);
            }
            let f = if high { rng.gen_range(0.8..1.0) } else { rng.gen_range(0.1..0.3) };
            factors.push(f * p.amplitude);
            remaining -= 1;
        }
        per_pile.push(factors);
    }
    (0..n_dates).map(|t| per_pile.iter().map(|f| f[t]).collect()).collect()
}

/// Generate a complete on-disk dataset in the pipeline's ingestion formats:
/// per-date RPC JSON, keypoint/match CSVs, dense pair correspondences, a
/// weights CSV, a ready-to-use config file, and the ground-truth JSON.
pub fn generate_dataset(root: &std::path::Path, params: &DatasetParams) -> Result<DatasetTruth, SynthError> {
    use crate::matching::{write_dense_csv, write_keypoints_csv, write_matches_csv};
    use crate::pipeline::{DENSE_DIR, KEYPOINTS_DIR, MATCHES_DIR, RPC_DIR, WEIGHTS_FILE};
    use crate::rpc::{scene_to_json, SceneRecord};
    use std::fs;

    let io = |e: std::io::Error| SynthError::InvalidParams(format!("io: {e}"));

    if params.n_dates < 3 {
        return Err(SynthError::InvalidParams("need at least 3 dates".into()));
    }
    let template = generate_world(params.seed, params.n_piles, params.extent);
    let dates = date_strings(params.n_dates, params.seed);
    let schedule = amplitude_schedule(&template.piles, params.n_dates, params.seed);
    let specs: Vec<DateSpec> = dates
        .iter()
        .zip(&schedule)
        .map(|(date, amplitudes)| DateSpec { date: date.clone(), amplitudes: amplitudes.clone() })
        .collect();
    let worlds = generate_timeseries(&template, &specs);

    let aoi = dataset_aoi(&template);
    let mut config = crate::config::PipelineConfig { aoi, seed: params.seed, ..Default::default() };
    config.align_search_radius = 20;

    let mut truth_dates = Vec::with_capacity(params.n_dates);
    let mut volume_series = Vec::with_capacity(params.n_dates);
    for (t, (date, world)) in dates.iter().zip(&worlds).enumerate() {
        let acq_params = AcqParams {
            n_scenes: params.n_scenes,
            seed: params.seed.wrapping_add(1000 + t as u64),
            ..params.acq
        };
        let acq = generate_acquisition(world, &acq_params, date)?;
        let obs = generate_observations(
            &acq,
            world,
            &ObservationParams {
                n_points: params.n_tiepoints,
                pixel_noise_sigma: params.pixel_noise_sigma,
                outlier_fraction: params.outlier_fraction,
                seed: params.seed.wrapping_add(2000 + t as u64),
                ..ObservationParams::default()
            },
        );

        let date_dir = root.join(date);
        for sub in [RPC_DIR, KEYPOINTS_DIR, MATCHES_DIR, DENSE_DIR] {
            fs::create_dir_all(date_dir.join(sub)).map_err(io)?;
        }

        for s in &acq.scenes {
            let record = SceneRecord {
                image_id: s.scene.image_id.clone(),
                width: s.scene.width,
                height: s.scene.height,
                rpc: s.scene.rpc.clone(),
            };
            fs::write(
                date_dir.join(RPC_DIR).join(format!("{}.json", s.scene.image_id)),
                scene_to_json(&record),
            )
            .map_err(io)?;
        }
        for set in &obs.keypoints {
            let mut buf = Vec::new();
            write_keypoints_csv(&mut buf, &set.keypoints)
                .map_err(|e| SynthError::InvalidParams(format!("keypoints: {e}")))?;
            fs::write(date_dir.join(KEYPOINTS_DIR).join(format!("{}.csv", set.image_id)), buf)
                .map_err(io)?;
        }
        {
            let mut buf = Vec::new();
            write_matches_csv(&mut buf, &obs.matches)
                .map_err(|e| SynthError::InvalidParams(format!("matches: {e}")))?;
            fs::write(date_dir.join(MATCHES_DIR).join("matches.csv"), buf).map_err(io)?;
        }

        // Dense correspondences for every consecutive strip pair.
        for i in 0..acq.scenes.len().saturating_sub(1) {
            let j = i + 1;
            let pairs = generate_dense_pair(
                &acq,
                world,
                (i, j),
                params.dense_step,
                params.dense_noise_sigma,
                params.seed.wrapping_add(3000 + (t * 100 + i) as u64),
            );
            let mut buf = Vec::new();
            write_dense_csv(&mut buf, &pairs)
                .map_err(|e| SynthError::InvalidParams(format!("dense: {e}")))?;
            let name = format!(
                "{}__{}.csv",
                acq.scenes[i].scene.image_id, acq.scenes[j].scene.image_id
            );
            fs::write(date_dir.join(DENSE_DIR).join(name), buf).map_err(io)?;
        }

        let truncated = world.truncated_pile_volume(
            config.ndsm_hmin,
            config.ndsm_hmax,
            params.oracle_step,
        );
        volume_series.push((date.clone(), truncated));
        truth_dates.push(DateTruth {
            date: date.clone(),
            rotations: acq
                .scenes
                .iter()
                .map(|s| InjectedRotation {
                    image_id: s.scene.image_id.clone(),
                    phi: s.injected[0],
                    theta: s.injected[1],
                    alpha: s.injected[2],
                })
                .collect(),
            truncated_volume_m3: truncated,
            analytic_volume_m3: world.analytic_pile_volume(),
            piles: world
                .piles
                .iter()
                .map(|p| PileTruth {
                    center_e: p.center_e,
                    center_n: p.center_n,
                    amplitude: p.amplitude,
                    sigma: p.sigma,
                })
                .collect(),
        });
    }

    // On-site weight measurements and the config.
    let weights = weights_from_volumes(
        &volume_series,
        params.weight_a,
        params.weight_b,
        params.weight_noise_sigma,
        params.seed ^ 0x77,
    );
    let mut weights_csv = String::from("date,weight_mt\n");
    for (date, w) in &weights {
        weights_csv.push_str(&format!("{date},{w}\n"));
    }
    fs::write(root.join(WEIGHTS_FILE), weights_csv).map_err(io)?;
    fs::write(root.join("config.cfg"), config.to_text()).map_err(io)?;

    let truth = DatasetTruth {
        seed: params.seed,
        dates: truth_dates,
        weight_a: params.weight_a,
        weight_b: params.weight_b,
        weight_noise_sigma: params.weight_noise_sigma,
    };
    let json = serde_json::to_string_pretty(&truth)
        .map_err(|e| SynthError::InvalidParams(format!("truth json: {e}")))?;
    fs::write(root.join("ground_truth.json"), json).map_err(io)?;
    Ok(truth)
}
