//! Date-wise refinement of RPC models by a rotation around each camera
//! center, minimizing the total reprojection error of the tie-points over
//! per-camera Euler angles and tie-point positions.
//!
//! One camera per date is the fixed gauge reference and is never refined.
//! The solver is Levenberg-Marquardt with finite-difference Jacobians and a
//! Schur complement over the tie-point blocks.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geodesy::{ecef_to_geodetic, EcefPoint, EnuFrame, EnuPoint, GeodeticPoint};
use crate::geometry::{CameraCenter, Scene};
use crate::matching::FeatureTrack;
use crate::rpc::{PixelPoint, RpcError, RpcModel};

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("camera graph is disconnected ({connected} of {total} cameras reachable)")]
    Disconnected { connected: usize, total: usize },
    #[error("need at least {required} tracks, got {got}")]
    InsufficientTracks { required: usize, got: usize },
    #[error("reference index {0} out of range")]
    InvalidReference(usize),
    #[error("need at least one non-reference camera")]
    NoFreeCamera,
    #[error("track {0} has no initialized tie-point")]
    MissingTiepoint(usize),
    #[error("track references unknown image id {0}")]
    UnknownImage(String),
    #[error("camera {0} has no observations")]
    UnobservedCamera(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("rpc: {0}")]
    Rpc(#[from] RpcError),
    #[error("geodesy: {0}")]
    Geodesy(#[from] crate::geodesy::GeodesyError),
}

/// Rotation matrix from the three Euler angles, composed as
/// Rx(phi) * Ry(theta) * Rz(alpha).
pub fn euler_to_matrix(phi: f64, theta: f64, alpha: f64) -> Matrix3<f64> {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = alpha.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    let ry = Matrix3::new(ct, 0.0, st, 0.0, 1.0, 0.0, -st, 0.0, ct);
    let rz = Matrix3::new(ca, -sa, 0.0, sa, ca, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

/// Inverse of [`euler_to_matrix`] away from the theta = +/- pi/2 gimbal
/// lock.
pub fn matrix_to_euler(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let theta = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let phi = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let alpha = (-r[(0, 1)]).atan2(r[(0, 0)]);
    (phi, theta, alpha)
}

/// Geodesic distance between two rotations, radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let tr = (a.transpose() * b).trace();
    (((tr - 1.0) / 2.0).clamp(-1.0, 1.0)).acos()
}

/// Per-camera correction: Euler angles plus the center the rotation acts
/// about.
#[derive(Debug, Clone, Copy)]
pub struct CorrectionRotation {
    pub phi: f64,
    pub theta: f64,
    pub alpha: f64,
    pub center: CameraCenter,
}

impl CorrectionRotation {
    pub fn identity(center: CameraCenter) -> Self {
        Self { phi: 0.0, theta: 0.0, alpha: 0.0, center }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        euler_to_matrix(self.phi, self.theta, self.alpha)
    }

    pub fn angles(&self) -> [f64; 3] {
        [self.phi, self.theta, self.alpha]
    }
}

/// Project an ECEF point through an RPC after rotating it about the camera
/// center: P(R (X - C) + C).
pub fn corrected_project(
    rpc: &RpcModel,
    rot: &CorrectionRotation,
    x: &EcefPoint,
) -> Result<PixelPoint, BundleError> {
    let g = ecef_to_geodetic(&rotate_about_center(&rot.matrix(), &rot.center.0, x))?;
    Ok(rpc.project(&g)?)
}

fn rotate_about_center(r: &Matrix3<f64>, c: &EcefPoint, x: &EcefPoint) -> EcefPoint {
    let d = Vector3::new(x.x - c.x, x.y - c.y, x.z - c.z);
    let rd = r * d;
    EcefPoint::new(rd.x + c.x, rd.y + c.y, rd.z + c.z)
}

/// One date's bundle adjustment problem.
#[derive(Debug, Clone)]
pub struct BundleProblem {
    pub cameras: Vec<(Scene, CameraCenter)>,
    /// Tracks with initialized tie-points.
    pub tracks: Vec<FeatureTrack>,
    /// Camera excluded from refinement (the gauge).
    pub reference_index: usize,
}

/// Levenberg-Marquardt settings.
#[derive(Debug, Clone, Copy)]
pub struct BundleConfig {
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub lambda_max: f64,
    /// Stop when the relative cost decrease of an accepted step falls below
    /// this value.
    pub cost_rel_tol: f64,
    /// Central-difference step for the Euler angles, radians.
    pub angle_step: f64,
    /// Central-difference step for tie-point coordinates, meters.
    pub point_step: f64,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            lambda_init: 1e-3,
            lambda_max: 1e8,
            cost_rel_tol: 1e-10,
            angle_step: 1e-8,
            point_step: 1e-3,
        }
    }
}

/// Solution of one date's problem.
#[derive(Debug, Clone)]
pub struct BundleSolution {
    /// One correction per camera; the reference camera's angles are zero.
    pub rotations: Vec<CorrectionRotation>,
    /// Refined tie-points, one per track.
    pub tiepoints: Vec<GeodeticPoint>,
    pub initial_rms_px: f64,
    pub final_rms_px: f64,
    /// Total cost (sum of squared pixel residuals) at the solution.
    pub final_cost: f64,
    pub n_observations: usize,
    /// Accepted Levenberg-Marquardt steps.
    pub iterations: usize,
    /// True when damping hit its cap without finding a descent step; the
    /// returned iterate is the best one seen.
    pub stalled: bool,
}

/// Triangulate one correspondence through rotation-corrected cameras,
/// initialized from the uncorrected localization midpoint.
pub fn triangulate_corrected(
    rpc_a: &RpcModel,
    rot_a: &CorrectionRotation,
    rpc_b: &RpcModel,
    rot_b: &CorrectionRotation,
    px_a: &PixelPoint,
    px_b: &PixelPoint,
) -> Result<crate::geometry::Triangulation, crate::geometry::GeometryError> {
    use crate::geometry::{convergence_angle_from_centers, GeometryError};

    let h0 = 0.5 * (rpc_a.height_offset + rpc_b.height_offset);
    let ga = rpc_a.localize(px_a, h0)?;
    let gb = rpc_b.localize(px_b, h0)?;
    let init = GeodeticPoint::new(0.5 * (ga.lon + gb.lon), 0.5 * (ga.lat + gb.lat), h0);

    let angle = convergence_angle_from_centers(&rot_a.center, &rot_b.center, &init);
    if angle < 0.5 {
        return Err(GeometryError::DegenerateGeometry(angle));
    }

    let project = |rpc: &RpcModel, rot: &CorrectionRotation, g: &GeodeticPoint| -> Result<PixelPoint, RpcError> {
        let x = crate::geodesy::geodetic_to_ecef(g);
        let rotated = rotate_about_center(&rot.matrix(), &rot.center.0, &x);
        let gr = ecef_to_geodetic(&rotated)
            .map_err(|e| RpcError::InvalidModel(format!("rotated point left the geodetic domain: {e}")))?;
        rpc.project(&gr)
    };
    crate::geometry::triangulate_with_projectors(
        |g| project(rpc_a, rot_a, g),
        |g| project(rpc_b, rot_b, g),
        px_a,
        px_b,
        &init,
    )
}

/// Per-camera standard deviations of the Euler angles implied by the
/// linearized problem at a solution, for an assumed per-component pixel
/// noise. Computed from the point-marginalized (Schur-reduced) normal
/// matrix; the reference camera reports zeros.
pub fn angle_sigmas(
    problem: &BundleProblem,
    solution: &BundleSolution,
    sigma_px: f64,
    config: &BundleConfig,
) -> Result<Vec<[f64; 3]>, BundleError> {
    let solver = Solver::new(problem, config)?;
    let angles: Vec<Vector3<f64>> = solution
        .rotations
        .iter()
        .map(|r| Vector3::new(r.phi, r.theta, r.alpha))
        .collect();
    // Offsets of the solution tie-points in the solver's anchor frames.
    let mut offsets = Vec::with_capacity(problem.tracks.len());
    for (k, tp) in solution.tiepoints.iter().enumerate() {
        let e = solver.anchors[k].geodetic_to_enu(tp);
        offsets.push(Vector3::new(e.east, e.north, e.up));
    }
    let eval = solver.evaluate(&angles, &offsets)?;
    let jac = solver.jacobian(&angles, &offsets)?;
    let s = solver.reduced_camera_matrix(&jac, &eval);
    let cov = s
        .clone()
        .try_inverse()
        .ok_or_else(|| BundleError::Numerical("singular reduced camera matrix".into()))?;
    let mut out = vec![[0.0; 3]; problem.cameras.len()];
    for (cam, slot) in solver.cam_slot.iter().enumerate() {
        if let Some(slot) = slot {
            for a in 0..3 {
                out[cam][a] = sigma_px * cov[(3 * slot + a, 3 * slot + a)].max(0.0).sqrt();
            }
        }
    }
    Ok(out)
}

/// Total reprojection cost (sum of squared pixel residuals) of a
/// configuration: the double sum over tracks and their observations.
pub fn reprojection_cost(
    problem: &BundleProblem,
    rotations: &[CorrectionRotation],
    tiepoints: &[GeodeticPoint],
) -> Result<f64, BundleError> {
    let index: BTreeMap<&str, usize> =
        problem.cameras.iter().enumerate().map(|(i, (s, _))| (s.image_id.as_str(), i)).collect();
    let mut cost = 0.0;
    for (k, track) in problem.tracks.iter().enumerate() {
        let x = crate::geodesy::geodetic_to_ecef(&tiepoints[k]);
        for (id, px) in &track.observations {
            let m = *index.get(id.as_str()).ok_or_else(|| BundleError::UnknownImage(id.clone()))?;
            let proj = corrected_project(&problem.cameras[m].0.rpc, &rotations[m], &x)?;
            cost += (proj.row - px.row).powi(2) + (proj.col - px.col).powi(2);
        }
    }
    Ok(cost)
}

/// Pick the reference camera: most track observations, ties broken by the
/// smallest image id.
pub fn choose_reference(cameras: &[(Scene, CameraCenter)], tracks: &[FeatureTrack]) -> usize {
    let mut counts: BTreeMap<&str, usize> = cameras.iter().map(|(s, _)| (s.image_id.as_str(), 0)).collect();
    for t in tracks {
        for (id, _) in &t.observations {
            if let Some(c) = counts.get_mut(id.as_str()) {
                *c += 1;
            }
        }
    }
    let mut best = 0usize;
    for (i, (s, _)) in cameras.iter().enumerate() {
        let (bi, bs) = (&cameras[best].0.image_id, counts[cameras[best].0.image_id.as_str()]);
        let c = counts[s.image_id.as_str()];
        if c > bs || (c == bs && s.image_id < *bi) {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy)]
struct Observation {
    track: usize,
    cam: usize,
    px: PixelPoint,
}

struct Solver<'a> {
    problem: &'a BundleProblem,
    config: &'a BundleConfig,
    obs: Vec<Observation>,
    /// ENU anchor frame per track, at the initial tie-point.
    anchors: Vec<EnuFrame>,
    /// Solver parameter slot per camera (None for the reference).
    cam_slot: Vec<Option<usize>>,
    n_free: usize,
}

struct Evaluation {
    residuals: Vec<Vector2<f64>>,
    cost: f64,
}

struct JacobianBlocks {
    /// Per observation: d residual / d camera angles (None for the reference
    /// camera) and d residual / d point offset.
    cam: Vec<Option<Matrix2x3<f64>>>,
    point: Vec<Matrix2x3<f64>>,
}

impl<'a> Solver<'a> {
    fn new(problem: &'a BundleProblem, config: &'a BundleConfig) -> Result<Self, BundleError> {
        const MIN_TRACKS: usize = 10;
        let n_cams = problem.cameras.len();
        if problem.reference_index >= n_cams {
            return Err(BundleError::InvalidReference(problem.reference_index));
        }
        if n_cams < 2 {
            return Err(BundleError::NoFreeCamera);
        }
        if problem.tracks.len() < MIN_TRACKS {
            return Err(BundleError::InsufficientTracks { required: MIN_TRACKS, got: problem.tracks.len() });
        }

        let index: BTreeMap<&str, usize> =
            problem.cameras.iter().enumerate().map(|(i, (s, _))| (s.image_id.as_str(), i)).collect();

        let mut obs = Vec::new();
        let mut anchors = Vec::with_capacity(problem.tracks.len());
        for (k, t) in problem.tracks.iter().enumerate() {
            let tp = t.tiepoint.ok_or(BundleError::MissingTiepoint(k))?;
            anchors.push(EnuFrame::new(tp));
            for (id, px) in &t.observations {
                let cam = *index.get(id.as_str()).ok_or_else(|| BundleError::UnknownImage(id.clone()))?;
                obs.push(Observation { track: k, cam, px: *px });
            }
        }
        obs.sort_by_key(|o| (o.track, o.cam));

        // Every camera must observe something, and the camera graph induced
        // by shared tracks must be connected.
        let mut seen = vec![false; n_cams];
        let mut dsu: Vec<usize> = (0..n_cams).collect();
        fn find(dsu: &mut Vec<usize>, mut i: usize) -> usize {
            while dsu[i] != i {
                dsu[i] = dsu[dsu[i]];
                i = dsu[i];
            }
            i
        }
        for t in &problem.tracks {
            let cams: Vec<usize> = t.observations.iter().map(|(id, _)| index[id.as_str()]).collect();
            for &c in &cams {
                seen[c] = true;
            }
            for w in cams.windows(2) {
                let (a, b) = (find(&mut dsu, w[0]), find(&mut dsu, w[1]));
                if a != b {
                    dsu[a.max(b)] = a.min(b);
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(BundleError::UnobservedCamera(problem.cameras[i].0.image_id.clone()));
        }
        let root = find(&mut dsu, 0);
        let connected = (0..n_cams).filter(|&i| find(&mut dsu, i) == root).count();
        if connected != n_cams {
            return Err(BundleError::Disconnected { connected, total: n_cams });
        }

        let mut cam_slot = vec![None; n_cams];
        let mut n_free = 0;
        for (i, slot) in cam_slot.iter_mut().enumerate() {
            if i != problem.reference_index {
                *slot = Some(n_free);
                n_free += 1;
            }
        }

        Ok(Self { problem, config, obs, anchors, cam_slot, n_free })
    }

    fn point_ecef(&self, track: usize, offset: &Vector3<f64>) -> EcefPoint {
        self.anchors[track].enu_to_ecef(&EnuPoint::new(offset.x, offset.y, offset.z))
    }

    fn residual_one(
        &self,
        o: &Observation,
        rot: &Matrix3<f64>,
        offset: &Vector3<f64>,
    ) -> Result<Vector2<f64>, BundleError> {
        let (scene, center) = &self.problem.cameras[o.cam];
        let x = self.point_ecef(o.track, offset);
        let g = ecef_to_geodetic(&rotate_about_center(rot, &center.0, &x))?;
        let px = scene.rpc.project(&g)?;
        Ok(Vector2::new(px.row - o.px.row, px.col - o.px.col))
    }

    fn evaluate(&self, angles: &[Vector3<f64>], offsets: &[Vector3<f64>]) -> Result<Evaluation, BundleError> {
        let rotations: Vec<Matrix3<f64>> =
            angles.iter().map(|a| euler_to_matrix(a.x, a.y, a.z)).collect();
        let residuals: Vec<Result<Vector2<f64>, BundleError>> = self
            .obs
            .par_iter()
            .map(|o| self.residual_one(o, &rotations[o.cam], &offsets[o.track]))
            .collect();
        let mut rs = Vec::with_capacity(residuals.len());
        for r in residuals {
            rs.push(r?);
        }
        let cost = rs.iter().map(|r| r.norm_squared()).sum();
        Ok(Evaluation { residuals: rs, cost })
    }

    /// Central-difference Jacobian blocks for every observation.
    fn jacobian(&self, angles: &[Vector3<f64>], offsets: &[Vector3<f64>]) -> Result<JacobianBlocks, BundleError> {
        let a_step = self.config.angle_step;
        let p_step = self.config.point_step;
        let blocks: Vec<Result<(Option<Matrix2x3<f64>>, Matrix2x3<f64>), BundleError>> = self
            .obs
            .par_iter()
            .map(|o| {
                let base_angles = angles[o.cam];
                let offset = offsets[o.track];

                let cam_block = if self.cam_slot[o.cam].is_some() {
                    let mut j = Matrix2x3::zeros();
                    for c in 0..3 {
                        let mut ap = base_angles;
                        let mut am = base_angles;
                        ap[c] += a_step;
                        am[c] -= a_step;
                        let rp = self.residual_one(o, &euler_to_matrix(ap.x, ap.y, ap.z), &offset)?;
                        let rm = self.residual_one(o, &euler_to_matrix(am.x, am.y, am.z), &offset)?;
                        let d = (rp - rm) / (2.0 * a_step);
                        j[(0, c)] = d.x;
                        j[(1, c)] = d.y;
                    }
                    Some(j)
                } else {
                    None
                };

                let rot = euler_to_matrix(base_angles.x, base_angles.y, base_angles.z);
                let mut jp = Matrix2x3::zeros();
                for c in 0..3 {
                    let mut op = offset;
                    let mut om = offset;
                    op[c] += p_step;
                    om[c] -= p_step;
                    let rp = self.residual_one(o, &rot, &op)?;
                    let rm = self.residual_one(o, &rot, &om)?;
                    let d = (rp - rm) / (2.0 * p_step);
                    jp[(0, c)] = d.x;
                    jp[(1, c)] = d.y;
                }
                Ok((cam_block, jp))
            })
            .collect();

        let mut cam = Vec::with_capacity(blocks.len());
        let mut point = Vec::with_capacity(blocks.len());
        for b in blocks {
            let (c, p) = b?;
            cam.push(c);
            point.push(p);
        }
        Ok(JacobianBlocks { cam, point })
    }

    /// J^T J and J^T r blocks of the bundle normal equations.
    fn normal_blocks(
        &self,
        jac: &JacobianBlocks,
        eval: &Evaluation,
    ) -> (
        Vec<Matrix3<f64>>,
        Vec<Matrix3<f64>>,
        Vec<Vector3<f64>>,
        Vec<Vector3<f64>>,
        Vec<(usize, usize, Matrix3<f64>)>,
    ) {
        let n_tracks = self.problem.tracks.len();
        let nf = self.n_free;
        let mut u = vec![Matrix3::<f64>::zeros(); nf];
        let mut v = vec![Matrix3::<f64>::zeros(); n_tracks];
        let mut g_c = vec![Vector3::<f64>::zeros(); nf];
        let mut g_p = vec![Vector3::<f64>::zeros(); n_tracks];
        // W blocks keyed by (free-camera slot, track), at most one per obs.
        let mut w: Vec<(usize, usize, Matrix3<f64>)> = Vec::new();

        for (i, o) in self.obs.iter().enumerate() {
            let r = eval.residuals[i];
            let bp = jac.point[i];
            v[o.track] += bp.transpose() * bp;
            g_p[o.track] += bp.transpose() * r;
            if let Some(slot) = self.cam_slot[o.cam] {
                let bc = jac.cam[i].expect("free camera has a block");
                u[slot] += bc.transpose() * bc;
                g_c[slot] += bc.transpose() * r;
                w.push((slot, o.track, bc.transpose() * bp));
            }
        }
        (u, v, g_c, g_p, w)
    }

    /// Point-marginalized camera normal matrix S = U - W V^-1 W^T, without
    /// damping.
    fn reduced_camera_matrix(&self, jac: &JacobianBlocks, eval: &Evaluation) -> DMatrix<f64> {
        let n_tracks = self.problem.tracks.len();
        let nf = self.n_free;
        let (u, v, _, _, w) = self.normal_blocks(jac, eval);
        let mut s = DMatrix::<f64>::zeros(3 * nf, 3 * nf);
        for (slot, m) in u.iter().enumerate() {
            for r in 0..3 {
                for c in 0..3 {
                    s[(3 * slot + r, 3 * slot + c)] = m[(r, c)];
                }
            }
        }
        let mut by_track: Vec<Vec<(usize, Matrix3<f64>)>> = vec![Vec::new(); n_tracks];
        for (slot, track, blk) in &w {
            by_track[*track].push((*slot, *blk));
        }
        for (track, blocks) in by_track.iter().enumerate() {
            if blocks.is_empty() {
                continue;
            }
            let Some(vi) = v[track].try_inverse() else { continue };
            for (slot_a, wa) in blocks {
                let wa_vi = wa * vi;
                for (slot_b, wb) in blocks {
                    let block = wa_vi * wb.transpose();
                    for r in 0..3 {
                        for c in 0..3 {
                            s[(3 * slot_a + r, 3 * slot_b + c)] -= block[(r, c)];
                        }
                    }
                }
            }
        }
        s
    }

    /// Embedded point iterations: refine every tie-point against its own
    /// residuals with the cameras held fixed. Each per-track Gauss-Newton
    /// step is only accepted when it lowers that track's cost, so the total
    /// cost never increases. This is what keeps Levenberg-Marquardt moving
    /// along the long camera/structure valleys of narrow-field problems.
    fn refine_points(
        &self,
        angles: &[Vector3<f64>],
        offsets: &mut [Vector3<f64>],
    ) -> Result<(), BundleError> {
        let rotations: Vec<Matrix3<f64>> =
            angles.iter().map(|a| euler_to_matrix(a.x, a.y, a.z)).collect();
        let step = self.config.point_step;

        // Group observation indices per track (obs are sorted by track).
        let mut spans: Vec<(usize, usize)> = Vec::with_capacity(self.problem.tracks.len());
        let mut start = 0usize;
        for k in 0..self.problem.tracks.len() {
            let mut end = start;
            while end < self.obs.len() && self.obs[end].track == k {
                end += 1;
            }
            spans.push((start, end));
            start = end;
        }

        let refined: Vec<Result<Vector3<f64>, BundleError>> = spans
            .par_iter()
            .enumerate()
            .map(|(k, &(lo, hi))| {
                let mut x = offsets[k];
                let track_cost = |x: &Vector3<f64>| -> Result<f64, BundleError> {
                    let mut c = 0.0;
                    for o in &self.obs[lo..hi] {
                        let r = self.residual_one(o, &rotations[o.cam], x)?;
                        c += r.norm_squared();
                    }
                    Ok(c)
                };
                let mut cost = track_cost(&x)?;
                for _ in 0..2 {
                    let mut jtj = Matrix3::<f64>::zeros();
                    let mut jtr = Vector3::<f64>::zeros();
                    for o in &self.obs[lo..hi] {
                        let r = self.residual_one(o, &rotations[o.cam], &x)?;
                        let mut j = Matrix2x3::zeros();
                        for c in 0..3 {
                            let mut xp = x;
                            let mut xm = x;
                            xp[c] += step;
                            xm[c] -= step;
                            let rp = self.residual_one(o, &rotations[o.cam], &xp)?;
                            let rm = self.residual_one(o, &rotations[o.cam], &xm)?;
                            let d = (rp - rm) / (2.0 * step);
                            j[(0, c)] = d.x;
                            j[(1, c)] = d.y;
                        }
                        jtj += j.transpose() * j;
                        jtr += j.transpose() * r;
                    }
                    let Some(delta) = jtj.lu().solve(&(-jtr)) else { break };
                    let mut scale = 1.0;
                    let mut accepted = false;
                    for _ in 0..6 {
                        let candidate = x + delta * scale;
                        if let Ok(c) = track_cost(&candidate) {
                            if c < cost {
                                x = candidate;
                                cost = c;
                                accepted = true;
                                break;
                            }
                        }
                        scale *= 0.5;
                    }
                    if !accepted {
                        break;
                    }
                }
                Ok(x)
            })
            .collect();

        for (k, r) in refined.into_iter().enumerate() {
            offsets[k] = r?;
        }
        Ok(())
    }

    /// One damped normal-equation solve via the Schur complement on the
    /// point blocks. Returns the camera-angle and point-offset updates.
    fn solve_step(
        &self,
        jac: &JacobianBlocks,
        eval: &Evaluation,
        lambda: f64,
    ) -> Option<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
        let n_tracks = self.problem.tracks.len();
        let nf = self.n_free;
        let (mut u, mut v, g_c, g_p, w) = self.normal_blocks(jac, eval);

        // Marquardt damping: scale the diagonals.
        for m in u.iter_mut() {
            for d in 0..3 {
                m[(d, d)] *= 1.0 + lambda;
            }
        }
        let mut v_inv = Vec::with_capacity(n_tracks);
        for m in v.iter_mut() {
            for d in 0..3 {
                m[(d, d)] *= 1.0 + lambda;
            }
            v_inv.push(m.try_inverse()?);
        }

        // Schur complement S = U - W V^-1 W^T, assembled dense over the free
        // cameras; rhs = -g_c + W V^-1 g_p.
        let mut s = DMatrix::<f64>::zeros(3 * nf, 3 * nf);
        let mut rhs = DVector::<f64>::zeros(3 * nf);
        for (slot, m) in u.iter().enumerate() {
            for r in 0..3 {
                for c in 0..3 {
                    s[(3 * slot + r, 3 * slot + c)] = m[(r, c)];
                }
            }
        }
        for (slot, g) in g_c.iter().enumerate() {
            for r in 0..3 {
                rhs[3 * slot + r] = -g[r];
            }
        }
        // Group W blocks by track for the cross terms.
        let mut by_track: Vec<Vec<(usize, Matrix3<f64>)>> = vec![Vec::new(); n_tracks];
        for (slot, track, blk) in &w {
            by_track[*track].push((*slot, *blk));
        }
        for (track, blocks) in by_track.iter().enumerate() {
            if blocks.is_empty() {
                continue;
            }
            let vi = &v_inv[track];
            for (slot_a, wa) in blocks {
                let wa_vi = wa * vi;
                let contrib = wa_vi * g_p[track];
                for r in 0..3 {
                    rhs[3 * slot_a + r] += contrib[r];
                }
                for (slot_b, wb) in blocks {
                    let block = wa_vi * wb.transpose();
                    for r in 0..3 {
                        for c in 0..3 {
                            s[(3 * slot_a + r, 3 * slot_b + c)] -= block[(r, c)];
                        }
                    }
                }
            }
        }

        let delta_c = match s.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => s.lu().solve(&rhs)?,
        };

        // Back-substitute the point updates.
        let mut delta_p = vec![Vector3::<f64>::zeros(); n_tracks];
        for (track, blocks) in by_track.iter().enumerate() {
            let mut acc = -g_p[track];
            for (slot, wb) in blocks {
                let dc = Vector3::new(delta_c[3 * slot], delta_c[3 * slot + 1], delta_c[3 * slot + 2]);
                acc -= wb.transpose() * dc;
            }
            delta_p[track] = v_inv[track] * acc;
        }
        // Tracks observed only by the reference camera still get their solve
        // from the same formula (no W terms).

        let mut d_angles = vec![Vector3::<f64>::zeros(); self.problem.cameras.len()];
        for (cam, slot) in self.cam_slot.iter().enumerate() {
            if let Some(s) = slot {
                d_angles[cam] = Vector3::new(delta_c[3 * s], delta_c[3 * s + 1], delta_c[3 * s + 2]);
            }
        }
        Some((d_angles, delta_p))
    }
}

/// Solve one date's rotation-only bundle adjustment.
pub fn solve_date(problem: &BundleProblem, config: &BundleConfig) -> Result<BundleSolution, BundleError> {
    let solver = Solver::new(problem, config)?;
    let n_cams = problem.cameras.len();
    let n_tracks = problem.tracks.len();
    let n_obs = solver.obs.len();

    let mut angles = vec![Vector3::<f64>::zeros(); n_cams];
    let mut offsets = vec![Vector3::<f64>::zeros(); n_tracks];

    // Cost of the input configuration: identity rotations, tie-points as
    // initialized.
    let identity_rotations: Vec<CorrectionRotation> = problem
        .cameras
        .iter()
        .map(|(_, c)| CorrectionRotation::identity(*c))
        .collect();
    let input_tiepoints: Vec<GeodeticPoint> =
        problem.tracks.iter().map(|t| t.tiepoint.expect("validated")).collect();
    let initial_cost = reprojection_cost(problem, &identity_rotations, &input_tiepoints)?;
    // Point-only refinement at the start settles triangulation leftovers so
    // the first camera steps are not spent on them.
    solver.refine_points(&angles, &mut offsets)?;
    let mut eval = solver.evaluate(&angles, &offsets)?;
    let mut lambda = config.lambda_init;
    let mut iterations = 0usize;
    let mut stalled = false;

    'outer: while iterations < config.max_iterations {
        let jac = solver.jacobian(&angles, &offsets)?;
        // Best rejected trial cost of this damping cascade; when every trial
        // ties the current cost to within float noise the iterate is a
        // numerical optimum, not a stall.
        let mut best_trial = f64::INFINITY;
        loop {
            let Some((d_angles, d_points)) = solver.solve_step(&jac, &eval, lambda) else {
                lambda *= 10.0;
                if lambda > config.lambda_max {
                    stalled = best_trial > eval.cost * (1.0 + 1e-9);
                    break 'outer;
                }
                continue;
            };
            let trial_angles: Vec<Vector3<f64>> =
                angles.iter().zip(&d_angles).map(|(a, d)| a + d).collect();
            let trial_offsets: Vec<Vector3<f64>> =
                offsets.iter().zip(&d_points).map(|(o, d)| o + d).collect();
            if std::env::var_os("SATVOL_BA_TRACE").is_some() {
                let trial_cost = solver
                    .evaluate(&trial_angles, &trial_offsets)
                    .map(|e| e.cost)
                    .unwrap_or(f64::NAN);
                let step_angle = d_angles.iter().map(|d| d.norm()).fold(0.0, f64::max);
                let step_point = d_points.iter().map(|d| d.norm()).fold(0.0, f64::max);
                eprintln!(
                    "iter {iterations} lambda {lambda:.1e} cost {:.6e} trial {trial_cost:.6e} max_dangle {step_angle:.2e} max_dpoint {step_point:.2e}",
                    eval.cost
                );
            }
            match solver.evaluate(&trial_angles, &trial_offsets) {
                Ok(trial) if trial.cost < eval.cost => {
                    angles = trial_angles;
                    let mut refined = trial_offsets.clone();
                    solver.refine_points(&angles, &mut refined)?;
                    let after = solver.evaluate(&angles, &refined)?;
                    // Point refinement only ever lowers track costs.
                    let (new_offsets, new_eval) =
                        if after.cost <= trial.cost { (refined, after) } else { (trial_offsets, trial) };
                    let rel = (eval.cost - new_eval.cost) / eval.cost.max(1e-300);
                    offsets = new_offsets;
                    eval = new_eval;
                    lambda = (lambda / 10.0).max(1e-12);
                    iterations += 1;
                    if rel < config.cost_rel_tol {
                        break 'outer;
                    }
                    break;
                }
                Ok(trial) => {
                    best_trial = best_trial.min(trial.cost);
                    lambda *= 10.0;
                    if lambda > config.lambda_max {
                        stalled = best_trial > eval.cost * (1.0 + 1e-9);
                        break 'outer;
                    }
                }
                Err(_) => {
                    lambda *= 10.0;
                    if lambda > config.lambda_max {
                        stalled = best_trial > eval.cost * (1.0 + 1e-9);
                        break 'outer;
                    }
                }
            }
        }
    }

    let mut rotations = Vec::with_capacity(n_cams);
    for (i, (_, center)) in problem.cameras.iter().enumerate() {
        rotations.push(CorrectionRotation {
            phi: angles[i].x,
            theta: angles[i].y,
            alpha: angles[i].z,
            center: *center,
        });
    }
    let mut tiepoints = Vec::with_capacity(n_tracks);
    for (k, off) in offsets.iter().enumerate() {
        tiepoints.push(solver.anchors[k].enu_to_geodetic(&EnuPoint::new(off.x, off.y, off.z))?);
    }

    // Report the cost of the solution exactly as returned (the geodetic
    // round-trip of the tie-points perturbs the internal cost at the 1e-9
    // relative level).
    let final_cost = reprojection_cost(problem, &rotations, &tiepoints)?;

    Ok(BundleSolution {
        rotations,
        tiepoints,
        initial_rms_px: (initial_cost / n_obs as f64).sqrt(),
        final_rms_px: (final_cost / n_obs as f64).sqrt(),
        final_cost,
        n_observations: n_obs,
        iterations,
        stalled,
    })
}
