//! View geometry on top of the RPC model: camera-center regression,
//! two-view triangulation, tie-point initialization, convergence angles and
//! stereo-pair selection.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};
use thiserror::Error;

use crate::geodesy::{ecef_to_geodetic, geodetic_to_ecef, EcefPoint, EnuFrame, EnuPoint, GeodeticPoint};
use crate::matching::FeatureTrack;
use crate::rpc::{PixelPoint, RpcError, RpcModel};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate projective regression (condition number {0:.3e})")]
    DegenerateRegression(f64),
    #[error("triangulation did not converge after {0} iterations")]
    Convergence(usize),
    #[error("degenerate pair geometry: convergence angle {0:.4} deg below 0.5 deg")]
    DegenerateGeometry(f64),
    #[error("track has no admissible observation pair")]
    DegenerateTrack,
    #[error("track references unknown image id {0}")]
    UnknownImage(String),
    #[error("scene {0}: {1}")]
    Scene(String, String),
    #[error("rpc: {0}")]
    Rpc(#[from] RpcError),
    #[error("geodesy: {0}")]
    Geodesy(#[from] crate::geodesy::GeodesyError),
}

/// One mosaic scene: image identity, its RPC and the ground footprint.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image_id: String,
    pub rpc: RpcModel,
    /// Ground footprint as a (lon, lat) polygon, corners of the image
    /// localized at the RPC height offset.
    pub footprint: Vec<(f64, f64)>,
    pub width: u32,
    pub height: u32,
}

impl Scene {
    /// Build a scene from its RPC, deriving the footprint by localizing the
    /// four image corners at the normalization height.
    pub fn from_rpc(image_id: String, rpc: RpcModel, width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::Scene(image_id, "width and height must be positive".into()));
        }
        let h = rpc.height_offset;
        let corners = [
            PixelPoint::new(0.0, 0.0),
            PixelPoint::new(0.0, width as f64),
            PixelPoint::new(height as f64, width as f64),
            PixelPoint::new(height as f64, 0.0),
        ];
        let mut footprint = Vec::with_capacity(4);
        for c in &corners {
            let g = rpc.localize(c, h)?;
            footprint.push((g.lon, g.lat));
        }
        Ok(Self { image_id, rpc, footprint, width, height })
    }
}

/// The scenes of one acquisition date.
#[derive(Debug, Clone)]
pub struct Acquisition {
    /// Calendar date, YYYY-MM-DD.
    pub date: String,
    pub scenes: Vec<Scene>,
}

/// Optical center of a camera, regressed from its RPC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraCenter(pub EcefPoint);

impl CameraCenter {
    /// Height above the WGS84 surface, meters. Sanity band for satellite
    /// inputs is roughly [200 km, 2000 km].
    pub fn altitude(&self) -> f64 {
        ecef_to_geodetic(&self.0).map(|g| g.height).unwrap_or(f64::NAN)
    }
}

/// Fit a 3x4 projective matrix to (ECEF point, pixel) pairs by DLT with
/// Hartley-style normalization of both sides.
pub fn fit_projective_dlt(samples: &[(EcefPoint, PixelPoint)]) -> Result<SMatrix<f64, 3, 4>, GeometryError> {
    assert!(samples.len() >= 6, "DLT needs at least 6 points");

    // Normalize object points: centroid to origin, RMS radius sqrt(3).
    let n = samples.len() as f64;
    let mut c3 = Vector3::zeros();
    for (p, _) in samples {
        c3 += Vector3::new(p.x, p.y, p.z);
    }
    c3 /= n;
    let mut rms3 = 0.0;
    for (p, _) in samples {
        rms3 += (Vector3::new(p.x, p.y, p.z) - c3).norm_squared();
    }
    rms3 = (rms3 / n).sqrt();
    let s3 = if rms3 > 0.0 { 3.0_f64.sqrt() / rms3 } else { 1.0 };

    let mut c2 = (0.0, 0.0);
    for (_, px) in samples {
        c2.0 += px.col;
        c2.1 += px.row;
    }
    c2.0 /= n;
    c2.1 /= n;
    let mut rms2 = 0.0;
    for (_, px) in samples {
        rms2 += (px.col - c2.0).powi(2) + (px.row - c2.1).powi(2);
    }
    rms2 = (rms2 / n).sqrt();
    let s2 = if rms2 > 0.0 { 2.0_f64.sqrt() / rms2 } else { 1.0 };

    let mut a = DMatrix::<f64>::zeros(2 * samples.len(), 12);
    for (i, (p, px)) in samples.iter().enumerate() {
        let x = [
            s3 * (p.x - c3.x),
            s3 * (p.y - c3.y),
            s3 * (p.z - c3.z),
            1.0,
        ];
        let u = s2 * (px.col - c2.0);
        let v = s2 * (px.row - c2.1);
        for j in 0..4 {
            a[(2 * i, j)] = x[j];
            a[(2 * i, 8 + j)] = -u * x[j];
            a[(2 * i + 1, 4 + j)] = x[j];
            a[(2 * i + 1, 8 + j)] = -v * x[j];
        }
    }

    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].partial_cmp(&sv[j]).expect("finite singular values"));
    let smallest = order[0];
    let second = order[1];
    let cond = if sv[second] > 0.0 { sv.max() / sv[second] } else { f64::INFINITY };
    if cond > 1e12 {
        return Err(GeometryError::DegenerateRegression(cond));
    }
    let vt = svd.v_t.expect("svd v_t");
    let p_vec = vt.row(smallest);

    let p_norm = SMatrix::<f64, 3, 4>::from_fn(|r, c| p_vec[4 * r + c]);

    // Denormalize: P = T2^-1 * P_norm * T3 with
    // T3 = [s3*I, -s3*c3; 0, 1], T2 = [s2, 0, -s2*cx; 0, s2, -s2*cy; 0, 0, 1].
    let t3 = SMatrix::<f64, 4, 4>::from_fn(|r, c| match (r, c) {
        (0, 0) | (1, 1) | (2, 2) => s3,
        (0, 3) => -s3 * c3.x,
        (1, 3) => -s3 * c3.y,
        (2, 3) => -s3 * c3.z,
        (3, 3) => 1.0,
        _ => 0.0,
    });
    let t2_inv = Matrix3::new(
        1.0 / s2,
        0.0,
        c2.0,
        0.0,
        1.0 / s2,
        c2.1,
        0.0,
        0.0,
        1.0,
    );
    Ok(t2_inv * p_norm * t3)
}

/// Optical center of a projective camera: the dehomogenized right null
/// space of its 3x4 matrix.
///
/// The raw matrix mixes meter-scale and unit-scale columns, so it is row-
/// and column-equilibrated first; row scaling leaves the null space alone
/// and the column scaling is undone on the result.
pub fn projective_center(p: &SMatrix<f64, 3, 4>) -> Result<EcefPoint, GeometryError> {
    let mut q = *p;
    for r in 0..3 {
        let n = q.row(r).norm();
        if n > 0.0 {
            let scaled = q.row(r) / n;
            q.set_row(r, &scaled);
        }
    }
    let mut col_norm = [0.0_f64; 4];
    for c in 0..4 {
        col_norm[c] = q.column(c).norm().max(1e-300);
        let scaled = q.column(c) / col_norm[c];
        q.set_column(c, &scaled);
    }

    let gram = q.transpose() * q;
    let eig = gram.symmetric_eigen();
    let min_idx = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite eigenvalues"))
        .map(|(i, _)| i)
        .expect("non-empty spectrum");
    let v = eig.eigenvectors.column(min_idx);
    // q = P' * diag(1/col_norm), so null(P') = v / col_norm componentwise.
    let c = [v[0] / col_norm[0], v[1] / col_norm[1], v[2] / col_norm[2], v[3] / col_norm[3]];
    if c[3].abs() < 1e-300 {
        return Err(GeometryError::DegenerateRegression(f64::INFINITY));
    }
    Ok(EcefPoint::new(c[0] / c[3], c[1] / c[3], c[2] / c[3]))
}

/// Regress the optical center of an RPC by sampling a 5x5x5 grid over its
/// normalization box, fitting a projective camera by DLT and taking its
/// null-space point.
pub fn regress_camera_center(rpc: &RpcModel) -> Result<CameraCenter, GeometryError> {
    const GRID: usize = 5;
    let mut samples = Vec::with_capacity(GRID * GRID * GRID);
    for i in 0..GRID {
        for j in 0..GRID {
            for k in 0..GRID {
                let t = |idx: usize| 2.0 * idx as f64 / (GRID - 1) as f64 - 1.0;
                let g = GeodeticPoint::new(
                    rpc.lon_offset + t(j) * rpc.lon_scale,
                    rpc.lat_offset + t(i) * rpc.lat_scale,
                    rpc.height_offset + t(k) * rpc.height_scale,
                );
                let px = rpc.project(&g)?;
                samples.push((geodetic_to_ecef(&g), px));
            }
        }
    }
    let p = fit_projective_dlt(&samples)?;
    Ok(CameraCenter(projective_center(&p)?))
}

/// Angle in degrees between the viewing rays of two cameras at a ground
/// point, rays taken from each camera center toward the point in ECEF.
pub fn convergence_angle_from_centers(a: &CameraCenter, b: &CameraCenter, at: &GeodeticPoint) -> f64 {
    let x = geodetic_to_ecef(at);
    let ra = Vector3::new(x.x - a.0.x, x.y - a.0.y, x.z - a.0.z).normalize();
    let rb = Vector3::new(x.x - b.0.x, x.y - b.0.y, x.z - b.0.z).normalize();
    ra.dot(&rb).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Convergence angle of two RPCs at a point, regressing both centers.
pub fn convergence_angle(rpc_a: &RpcModel, rpc_b: &RpcModel, at: &GeodeticPoint) -> Result<f64, GeometryError> {
    let ca = regress_camera_center(rpc_a)?;
    let cb = regress_camera_center(rpc_b)?;
    Ok(convergence_angle_from_centers(&ca, &cb, at))
}

/// Result of a two-view triangulation: the optimum and the RMS reprojection
/// residual in pixels over the two observations.
#[derive(Debug, Clone, Copy)]
pub struct Triangulation {
    pub point: GeodeticPoint,
    pub residual_px: f64,
}

const MIN_CONVERGENCE_DEG: f64 = 0.5;

/// Triangulate one correspondence by Gauss-Newton minimization of the summed
/// squared reprojection error, parameterized as local ENU offsets about the
/// initialization (the midpoint of the two localizations at the RPC height
/// offset).
pub fn triangulate_pair(
    rpc_a: &RpcModel,
    rpc_b: &RpcModel,
    px_a: &PixelPoint,
    px_b: &PixelPoint,
) -> Result<Triangulation, GeometryError> {
    let ca = regress_camera_center(rpc_a)?;
    let cb = regress_camera_center(rpc_b)?;
    triangulate_pair_with_centers(rpc_a, rpc_b, px_a, px_b, &ca, &cb)
}

/// [`triangulate_pair`] with precomputed camera centers (the hot path for
/// dense reconstruction).
pub fn triangulate_pair_with_centers(
    rpc_a: &RpcModel,
    rpc_b: &RpcModel,
    px_a: &PixelPoint,
    px_b: &PixelPoint,
    center_a: &CameraCenter,
    center_b: &CameraCenter,
) -> Result<Triangulation, GeometryError> {
    let h0 = 0.5 * (rpc_a.height_offset + rpc_b.height_offset);
    let ga = rpc_a.localize(px_a, h0)?;
    let gb = rpc_b.localize(px_b, h0)?;
    let init = GeodeticPoint::new(0.5 * (ga.lon + gb.lon), 0.5 * (ga.lat + gb.lat), h0);

    let angle = convergence_angle_from_centers(center_a, center_b, &init);
    if angle < MIN_CONVERGENCE_DEG {
        return Err(GeometryError::DegenerateGeometry(angle));
    }

    triangulate_with_projectors(
        |g| rpc_a.project(g),
        |g| rpc_b.project(g),
        px_a,
        px_b,
        &init,
    )
}

/// Gauss-Newton triangulation core over arbitrary projection functions
/// (plain RPCs or rotation-corrected ones), starting from `init`.
pub fn triangulate_with_projectors<FA, FB>(
    project_a: FA,
    project_b: FB,
    px_a: &PixelPoint,
    px_b: &PixelPoint,
    init: &GeodeticPoint,
) -> Result<Triangulation, GeometryError>
where
    FA: Fn(&GeodeticPoint) -> Result<PixelPoint, RpcError>,
    FB: Fn(&GeodeticPoint) -> Result<PixelPoint, RpcError>,
{
    const MAX_ITER: usize = 30;
    const STEP_M: f64 = 1e-3;

    let frame = EnuFrame::new(*init);
    let residual = |offset: &Vector3<f64>| -> Result<[f64; 4], GeometryError> {
        let g = frame.enu_to_geodetic(&EnuPoint::new(offset.x, offset.y, offset.z))?;
        let pa = project_a(&g)?;
        let pb = project_b(&g)?;
        Ok([pa.row - px_a.row, pa.col - px_a.col, pb.row - px_b.row, pb.col - px_b.col])
    };
    let cost_of = |r: &[f64; 4]| r.iter().map(|v| v * v).sum::<f64>();

    let mut x = Vector3::zeros();
    let mut r = residual(&x)?;
    let mut cost = cost_of(&r);

    for iter in 0..MAX_ITER {
        // Central-difference Jacobian, 4 residuals x 3 ENU coordinates.
        let mut j = SMatrix::<f64, 4, 3>::zeros();
        for c in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += STEP_M;
            xm[c] -= STEP_M;
            let rp = residual(&xp)?;
            let rm = residual(&xm)?;
            for rr in 0..4 {
                j[(rr, c)] = (rp[rr] - rm[rr]) / (2.0 * STEP_M);
            }
        }
        let jt = j.transpose();
        let jtj = jt * j;
        let rhs = -jt * SMatrix::<f64, 4, 1>::from_row_slice(&r);
        let Some(step) = jtj.lu().solve(&rhs) else {
            return Err(GeometryError::Convergence(iter));
        };

        // Backtracking keeps the accepted cost non-increasing.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let candidate = x + step * scale;
            if let Ok(rc) = residual(&candidate) {
                let c = cost_of(&rc);
                if c <= cost {
                    x = candidate;
                    r = rc;
                    let improvement = (cost - c) / cost.max(1e-300);
                    cost = c;
                    accepted = true;
                    if step.norm() * scale < 1e-7 || improvement < 1e-14 {
                        let g = frame.enu_to_geodetic(&EnuPoint::new(x.x, x.y, x.z))?;
                        return Ok(Triangulation { point: g, residual_px: (cost / 2.0).sqrt() });
                    }
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted {
            // No descent direction left; current iterate is the optimum.
            let g = frame.enu_to_geodetic(&EnuPoint::new(x.x, x.y, x.z))?;
            return Ok(Triangulation { point: g, residual_px: (cost / 2.0).sqrt() });
        }
    }
    Err(GeometryError::Convergence(MAX_ITER))
}

/// Initialize a track's tie-point: triangulate every observation pair with
/// at least 0.5 degrees of convergence and average the results in ECEF.
pub fn init_tiepoint(
    track: &FeatureTrack,
    cameras: &[(Scene, CameraCenter)],
) -> Result<GeodeticPoint, GeometryError> {
    let index: BTreeMap<&str, usize> =
        cameras.iter().enumerate().map(|(i, (s, _))| (s.image_id.as_str(), i)).collect();

    let mut sum = Vector3::zeros();
    let mut count = 0usize;
    for i in 0..track.observations.len() {
        for j in (i + 1)..track.observations.len() {
            let (id_a, px_a) = &track.observations[i];
            let (id_b, px_b) = &track.observations[j];
            let a = *index.get(id_a.as_str()).ok_or_else(|| GeometryError::UnknownImage(id_a.clone()))?;
            let b = *index.get(id_b.as_str()).ok_or_else(|| GeometryError::UnknownImage(id_b.clone()))?;
            match triangulate_pair_with_centers(
                &cameras[a].0.rpc,
                &cameras[b].0.rpc,
                px_a,
                px_b,
                &cameras[a].1,
                &cameras[b].1,
            ) {
                Ok(t) => {
                    let e = geodetic_to_ecef(&t.point);
                    sum += Vector3::new(e.x, e.y, e.z);
                    count += 1;
                }
                Err(GeometryError::DegenerateGeometry(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    if count == 0 {
        return Err(GeometryError::DegenerateTrack);
    }
    let mean = sum / count as f64;
    Ok(ecef_to_geodetic(&EcefPoint::new(mean.x, mean.y, mean.z))?)
}

// ---------------------------------------------------------------------------
// Stereo-pair selection
// ---------------------------------------------------------------------------

/// Admissibility thresholds for stereo pairs.
#[derive(Debug, Clone, Copy)]
pub struct PairCriteria {
    /// Convergence angle window, degrees, both bounds exclusive.
    pub min_convergence_deg: f64,
    pub max_convergence_deg: f64,
    /// Minimum side of the triple-intersection bounding box, meters, strict.
    pub min_intersection_m: f64,
}

impl Default for PairCriteria {
    fn default() -> Self {
        Self { min_convergence_deg: 5.0, max_convergence_deg: 35.0, min_intersection_m: 200.0 }
    }
}

/// Signed area of a (lon, lat) polygon (positive when counterclockwise).
fn signed_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut a = 0.0;
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % n];
        a += x1 * y2 - x2 * y1;
    }
    a / 2.0
}

/// Area centroid of a polygon; falls back to the vertex mean when the
/// polygon is degenerate.
pub fn polygon_centroid(poly: &[(f64, f64)]) -> (f64, f64) {
    let a = signed_area(poly);
    if a.abs() < 1e-30 {
        let n = poly.len() as f64;
        let (sx, sy) = poly.iter().fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x, sy + y));
        return (sx / n, sy / n);
    }
    let n = poly.len();
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % n];
        let cross = x1 * y2 - x2 * y1;
        cx += (x1 + x2) * cross;
        cy += (y1 + y2) * cross;
    }
    (cx / (6.0 * a), cy / (6.0 * a))
}

/// Sutherland-Hodgman clip of `subject` against a convex `clip` polygon.
pub fn clip_polygon(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    // Orient the clip polygon counterclockwise.
    let mut clip: Vec<(f64, f64)> = clip.to_vec();
    if signed_area(&clip) < 0.0 {
        clip.reverse();
    }

    let mut output = subject.to_vec();
    let nc = clip.len();
    for i in 0..nc {
        if output.is_empty() {
            return output;
        }
        let (ax, ay) = clip[i];
        let (bx, by) = clip[(i + 1) % nc];
        let inside = |p: (f64, f64)| (bx - ax) * (p.1 - ay) - (by - ay) * (p.0 - ax) >= 0.0;
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let cur_in = inside(cur);
            let prev_in = inside(prev);
            if cur_in != prev_in {
                // Edge crossing: intersection of prev->cur with the clip edge.
                let dx = cur.0 - prev.0;
                let dy = cur.1 - prev.1;
                let den = (bx - ax) * dy - (by - ay) * dx;
                if den.abs() > 1e-300 {
                    let t = -((bx - ax) * (prev.1 - ay) - (by - ay) * (prev.0 - ax)) / den;
                    output.push((prev.0 + t * dx, prev.1 + t * dy));
                }
            }
            if cur_in {
                output.push(cur);
            }
        }
    }
    output
}

/// Select stereo pairs of an acquisition: convergence angle at the AOI
/// centroid strictly inside the window, and the footprint-footprint-AOI
/// triple intersection with both bounding-box sides above the minimum,
/// measured in the ENU frame at the AOI centroid.
///
/// Returns index pairs (i, j) with i < j into `acq.scenes`.
pub fn select_pairs(
    acq: &Acquisition,
    aoi: &[(f64, f64)],
    criteria: &PairCriteria,
) -> Result<Vec<(usize, usize)>, GeometryError> {
    let (clon, clat) = polygon_centroid(aoi);
    let mut centers = Vec::with_capacity(acq.scenes.len());
    for s in &acq.scenes {
        centers.push(regress_camera_center(&s.rpc)?);
    }

    let mut pairs = Vec::new();
    for i in 0..acq.scenes.len() {
        for j in (i + 1)..acq.scenes.len() {
            let si = &acq.scenes[i];
            let sj = &acq.scenes[j];
            let eval_height = 0.5 * (si.rpc.height_offset + sj.rpc.height_offset);
            let at = GeodeticPoint::new(clon, clat, eval_height);
            let angle = convergence_angle_from_centers(&centers[i], &centers[j], &at);
            if !(angle > criteria.min_convergence_deg && angle < criteria.max_convergence_deg) {
                continue;
            }

            let inter = clip_polygon(&clip_polygon(&si.footprint, &sj.footprint), aoi);
            if inter.len() < 3 {
                continue;
            }
            let frame = EnuFrame::new(GeodeticPoint::new(clon, clat, eval_height));
            let (mut min_e, mut max_e) = (f64::INFINITY, f64::NEG_INFINITY);
            let (mut min_n, mut max_n) = (f64::INFINITY, f64::NEG_INFINITY);
            for &(lon, lat) in &inter {
                let p = frame.geodetic_to_enu(&GeodeticPoint::new(lon, lat, eval_height));
                min_e = min_e.min(p.east);
                max_e = max_e.max(p.east);
                min_n = min_n.min(p.north);
                max_n = max_n.max(p.north);
            }
            if max_e - min_e > criteria.min_intersection_m && max_n - min_n > criteria.min_intersection_m {
                pairs.push((i, j));
            }
        }
    }
    Ok(pairs)
}
