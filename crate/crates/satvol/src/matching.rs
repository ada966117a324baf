//! Tie-point machinery: descriptor matching with a ratio test, RANSAC
//! fundamental-matrix filtering, and union-find merging of pairwise matches
//! into unordered feature tracks.
//!
//! Keypoint detection itself is out of scope; keypoints, descriptors and
//! candidate matches are ingested from CSV files (or produced by the
//! synthetic oracle).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geodesy::GeodeticPoint;
use crate::rpc::PixelPoint;

#[derive(Debug, Error)]
pub enum MatchingError {
    #[error("keypoint set {0} is empty")]
    EmptyKeypoints(String),
    #[error("need at least 2 candidate descriptors, got {0}")]
    InsufficientCandidates(usize),
    #[error("descriptor length mismatch: expected {expected}, got {got}")]
    DescriptorLength { expected: usize, got: usize },
    #[error("need at least 8 correspondences, got {0}")]
    InsufficientData(usize),
    #[error("no epipolar geometry found (best consensus {0} < 8 inliers)")]
    NoGeometry(usize),
    #[error("degenerate correspondence configuration")]
    Degenerate,
    #[error("{file}: {message}")]
    Format { file: String, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A keypoint: sub-pixel image position plus its descriptor vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub position: PixelPoint,
    pub descriptor: Vec<f64>,
}

/// All keypoints of one image.
#[derive(Debug, Clone)]
pub struct KeypointSet {
    pub image_id: String,
    pub keypoints: Vec<Keypoint>,
}

/// A candidate correspondence between keypoints of two images.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMatch {
    pub image_a: String,
    pub image_b: String,
    pub idx_a: usize,
    pub idx_b: usize,
    pub distance: f64,
}

/// One tie-point's observations across images, at most one per image.
#[derive(Debug, Clone)]
pub struct FeatureTrack {
    /// (image_id, pixel) pairs, sorted by image_id.
    pub observations: Vec<(String, PixelPoint)>,
    /// 3D estimate, filled in by triangulation.
    pub tiepoint: Option<GeodeticPoint>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest-neighbor descriptor matching with Lowe's ratio test.
///
/// For each descriptor of `a`, its two nearest neighbors in `b` are found by
/// Euclidean distance; the best is kept when `d1/d2 < ratio`. B-side indices
/// are then made unique, keeping the smallest distance on conflict.
pub fn ratio_test_match(
    a: &KeypointSet,
    b: &KeypointSet,
    ratio: f64,
) -> Result<Vec<PairwiseMatch>, MatchingError> {
    if a.keypoints.is_empty() {
        return Err(MatchingError::EmptyKeypoints(a.image_id.clone()));
    }
    if b.keypoints.len() < 2 {
        return Err(MatchingError::InsufficientCandidates(b.keypoints.len()));
    }
    let dim = a.keypoints[0].descriptor.len();
    for kp in a.keypoints.iter().chain(b.keypoints.iter()) {
        if kp.descriptor.len() != dim {
            return Err(MatchingError::DescriptorLength { expected: dim, got: kp.descriptor.len() });
        }
    }

    let mut candidates: Vec<PairwiseMatch> = Vec::new();
    for (ia, kp) in a.keypoints.iter().enumerate() {
        let mut best = (f64::INFINITY, usize::MAX);
        let mut second = f64::INFINITY;
        for (ib, other) in b.keypoints.iter().enumerate() {
            let d2 = squared_distance(&kp.descriptor, &other.descriptor);
            if d2 < best.0 {
                second = best.0;
                best = (d2, ib);
            } else if d2 < second {
                second = d2;
            }
        }
        let d1 = best.0.sqrt();
        let d2 = second.sqrt();
        if d2 > 0.0 && d1 / d2 < ratio {
            candidates.push(PairwiseMatch {
                image_a: a.image_id.clone(),
                image_b: b.image_id.clone(),
                idx_a: ia,
                idx_b: best.1,
                distance: d1,
            });
        }
    }

    // Enforce b-side uniqueness: smallest distance wins, smallest a index on
    // exact ties.
    candidates.sort_by(|x, y| {
        (x.idx_b, x.distance, x.idx_a)
            .partial_cmp(&(y.idx_b, y.distance, y.idx_a))
            .expect("finite distances")
    });
    let mut kept: Vec<PairwiseMatch> = Vec::new();
    for m in candidates {
        if kept.last().map(|k| k.idx_b) != Some(m.idx_b) {
            kept.push(m);
        }
    }
    kept.sort_by_key(|m| (m.idx_a, m.idx_b));
    Ok(kept)
}

/// Result of [`ransac_fundamental_filter`].
#[derive(Debug, Clone)]
pub struct FundamentalFilterResult {
    /// Fundamental matrix re-estimated on all inliers, for x_b' F x_a = 0
    /// with homogeneous pixels (col, row, 1).
    pub fundamental: Matrix3<f64>,
    /// Indices into the input correspondence list.
    pub inlier_indices: Vec<usize>,
}

/// RANSAC settings for the fundamental-matrix filter.
#[derive(Debug, Clone, Copy)]
pub struct RansacParams {
    pub threshold_px: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { threshold_px: 1.0, iterations: 2000, seed: 0 }
    }
}

fn hartley_normalization(points: &[(f64, f64)]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for (x, y) in points {
        cx += x;
        cy += y;
    }
    cx /= n;
    cy /= n;
    let mut mean_dist = 0.0;
    for (x, y) in points {
        mean_dist += ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
    }
    mean_dist /= n;
    let s = if mean_dist > 0.0 { 2.0_f64.sqrt() / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Normalized 8-point estimate of F from ≥ 8 correspondences.
fn fundamental_8point(corr: &[(PixelPoint, PixelPoint)], idx: &[usize]) -> Option<Matrix3<f64>> {
    let pa: Vec<(f64, f64)> = idx.iter().map(|&i| (corr[i].0.col, corr[i].0.row)).collect();
    let pb: Vec<(f64, f64)> = idx.iter().map(|&i| (corr[i].1.col, corr[i].1.row)).collect();
    let ta = hartley_normalization(&pa);
    let tb = hartley_normalization(&pb);

    let mut a = DMatrix::<f64>::zeros(idx.len(), 9);
    for (r, (&(xa, ya), &(xb, yb))) in pa.iter().zip(&pb).enumerate() {
        let na = ta * Vector3::new(xa, ya, 1.0);
        let nb = tb * Vector3::new(xb, yb, 1.0);
        let (x, y) = (na.x / na.z, na.y / na.z);
        let (xp, yp) = (nb.x / nb.z, nb.y / nb.z);
        a[(r, 0)] = xp * x;
        a[(r, 1)] = xp * y;
        a[(r, 2)] = xp;
        a[(r, 3)] = yp * x;
        a[(r, 4)] = yp * y;
        a[(r, 5)] = yp;
        a[(r, 6)] = x;
        a[(r, 7)] = y;
        a[(r, 8)] = 1.0;
    }

    // Null vector from the smallest eigenvector of A^T A; the Hartley
    // normalization keeps the Gram matrix well conditioned.
    let gram = a.transpose() * &a;
    let eig = gram.symmetric_eigen();
    let min_idx = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite eigenvalues"))
        .map(|(i, _)| i)?;
    let f_vec = eig.eigenvectors.column(min_idx);
    let f = Matrix3::new(
        f_vec[0], f_vec[1], f_vec[2], f_vec[3], f_vec[4], f_vec[5], f_vec[6], f_vec[7], f_vec[8],
    );

    // Rank-2 constraint.
    let svd_f = f.svd(true, true);
    let mut s = svd_f.singular_values;
    s[2] = 0.0;
    let f = svd_f.u? * Matrix3::from_diagonal(&s) * svd_f.v_t?;

    Some(tb.transpose() * f * ta)
}

/// First-order (Sampson) epipolar distance in pixels.
pub fn sampson_distance(f: &Matrix3<f64>, a: &PixelPoint, b: &PixelPoint) -> f64 {
    let xa = Vector3::new(a.col, a.row, 1.0);
    let xb = Vector3::new(b.col, b.row, 1.0);
    let fx = f * xa;
    let ftx = f.transpose() * xb;
    let num = xb.dot(&fx);
    let den = (fx.x * fx.x + fx.y * fx.y + ftx.x * ftx.x + ftx.y * ftx.y).sqrt();
    if den < 1e-300 {
        return f64::INFINITY;
    }
    num.abs() / den
}

/// Robust epipolar filtering: normalized 8-point inside RANSAC, Sampson
/// distance as the inlier residual, final F re-estimated on all inliers.
/// Deterministic for a fixed seed.
pub fn ransac_fundamental_filter(
    corr: &[(PixelPoint, PixelPoint)],
    params: &RansacParams,
) -> Result<FundamentalFilterResult, MatchingError> {
    if corr.len() < 8 {
        return Err(MatchingError::InsufficientData(corr.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut indices: Vec<usize> = (0..corr.len()).collect();
    let mut best_inliers: Vec<usize> = Vec::new();

    for _ in 0..params.iterations {
        indices.shuffle(&mut rng);
        let sample = &indices[..8];
        let Some(f) = fundamental_8point(corr, sample) else {
            continue;
        };
        let inliers: Vec<usize> = (0..corr.len())
            .filter(|&i| sampson_distance(&f, &corr[i].0, &corr[i].1) < params.threshold_px)
            .collect();
        if inliers.len() > best_inliers.len() {
            best_inliers = inliers;
        }
    }

    if best_inliers.len() < 8 {
        return Err(MatchingError::NoGeometry(best_inliers.len()));
    }

    let f = fundamental_8point(corr, &best_inliers).ok_or(MatchingError::Degenerate)?;
    Ok(FundamentalFilterResult { fundamental: f, inlier_indices: best_inliers })
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, i: usize) -> usize {
        let mut root = i;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = i;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins, making the partition independent of union order.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Merge pairwise inlier matches into feature tracks via union-find.
///
/// Components containing two distinct keypoints of the same image are
/// discarded entirely; surviving components seen in at least two images
/// become tracks. The result is independent of match order.
pub fn build_tracks(
    sets: &[KeypointSet],
    matches: &[PairwiseMatch],
) -> Result<Vec<FeatureTrack>, MatchingError> {
    let mut image_index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut offsets = Vec::with_capacity(sets.len());
    let mut total = 0usize;
    for (i, s) in sets.iter().enumerate() {
        image_index.insert(s.image_id.as_str(), i);
        offsets.push(total);
        total += s.keypoints.len();
    }

    let node = |img: usize, kp: usize| offsets[img] + kp;
    let mut dsu = DisjointSet::new(total);
    for m in matches {
        let ia = *image_index.get(m.image_a.as_str()).ok_or_else(|| MatchingError::Format {
            file: "matches".into(),
            message: format!("unknown image id {}", m.image_a),
        })?;
        let ib = *image_index.get(m.image_b.as_str()).ok_or_else(|| MatchingError::Format {
            file: "matches".into(),
            message: format!("unknown image id {}", m.image_b),
        })?;
        if ia == ib {
            return Err(MatchingError::Format {
                file: "matches".into(),
                message: format!("self-match within image {}", m.image_a),
            });
        }
        if m.idx_a >= sets[ia].keypoints.len() || m.idx_b >= sets[ib].keypoints.len() {
            return Err(MatchingError::Format {
                file: "matches".into(),
                message: format!("keypoint index out of range in pair {} / {}", m.image_a, m.image_b),
            });
        }
        dsu.union(node(ia, m.idx_a), node(ib, m.idx_b));
    }

    let mut components: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (img, s) in sets.iter().enumerate() {
        for kp in 0..s.keypoints.len() {
            let id = node(img, kp);
            let root = dsu.find(id);
            components.entry(root).or_default().push((img, kp));
        }
    }

    let mut tracks = Vec::new();
    'component: for members in components.values() {
        if members.len() < 2 {
            continue;
        }
        let mut seen_images = Vec::with_capacity(members.len());
        for &(img, _) in members {
            if seen_images.contains(&img) {
                continue 'component; // image-duplicate conflict: drop whole component
            }
            seen_images.push(img);
        }
        if seen_images.len() < 2 {
            continue;
        }
        let mut observations: Vec<(String, PixelPoint)> = members
            .iter()
            .map(|&(img, kp)| (sets[img].image_id.clone(), sets[img].keypoints[kp].position))
            .collect();
        observations.sort_by(|a, b| a.0.cmp(&b.0));
        tracks.push(FeatureTrack { observations, tiepoint: None });
    }
    tracks.sort_by(|a, b| a.observations.cmp_obs(&b.observations));
    Ok(tracks)
}

trait ObsOrd {
    fn cmp_obs(&self, other: &Self) -> std::cmp::Ordering;
}

impl ObsOrd for Vec<(String, PixelPoint)> {
    fn cmp_obs(&self, other: &Self) -> std::cmp::Ordering {
        let key = |v: &Self| {
            v.iter()
                .map(|(id, p)| (id.clone(), p.row.to_bits(), p.col.to_bits()))
                .collect::<Vec<_>>()
        };
        key(self).cmp(&key(other))
    }
}

// ---------------------------------------------------------------------------
// CSV formats
// ---------------------------------------------------------------------------

/// Read a per-image keypoint file: header `row,col,d0,...,dN-1`.
pub fn read_keypoints_csv<R: Read>(reader: R, label: &str) -> Result<Vec<Keypoint>, MatchingError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| MatchingError::Format {
        file: label.into(),
        message: e.to_string(),
    })?;
    if headers.len() < 3 || &headers[0] != "row" || &headers[1] != "col" {
        return Err(MatchingError::Format {
            file: label.into(),
            message: "header must be row,col,d0,...".into(),
        });
    }
    let dim = headers.len() - 2;
    for (i, h) in headers.iter().skip(2).enumerate() {
        if h != format!("d{i}") {
            return Err(MatchingError::Format {
                file: label.into(),
                message: format!("descriptor column {i} must be named d{i}, got {h}"),
            });
        }
    }

    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| MatchingError::Format { file: label.into(), message: e.to_string() })?;
        if rec.len() != dim + 2 {
            return Err(MatchingError::Format {
                file: label.into(),
                message: format!("record {line} has {} fields, expected {}", rec.len(), dim + 2),
            });
        }
        let parse = |s: &str| -> Result<f64, MatchingError> {
            let v: f64 = s.trim().parse().map_err(|_| MatchingError::Format {
                file: label.into(),
                message: format!("record {line}: bad number {s:?}"),
            })?;
            if !v.is_finite() {
                return Err(MatchingError::Format {
                    file: label.into(),
                    message: format!("record {line}: non-finite value"),
                });
            }
            Ok(v)
        };
        let row = parse(&rec[0])?;
        let col = parse(&rec[1])?;
        let mut descriptor = Vec::with_capacity(dim);
        for f in rec.iter().skip(2) {
            descriptor.push(parse(f)?);
        }
        out.push(Keypoint { position: PixelPoint::new(row, col), descriptor });
    }
    Ok(out)
}

pub fn write_keypoints_csv<W: Write>(mut w: W, keypoints: &[Keypoint]) -> Result<(), MatchingError> {
    let dim = keypoints.first().map_or(0, |k| k.descriptor.len());
    let mut header = String::from("row,col");
    for i in 0..dim {
        header.push_str(&format!(",d{i}"));
    }
    writeln!(w, "{header}")?;
    for kp in keypoints {
        let mut line = format!("{},{}", kp.position.row, kp.position.col);
        for d in &kp.descriptor {
            line.push_str(&format!(",{d}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Read a match file: header `image_a,image_b,idx_a,idx_b,distance`.
pub fn read_matches_csv<R: Read>(reader: R, label: &str) -> Result<Vec<PairwiseMatch>, MatchingError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| MatchingError::Format {
        file: label.into(),
        message: e.to_string(),
    })?;
    let expected = ["image_a", "image_b", "idx_a", "idx_b", "distance"];
    if headers.len() != 5 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(MatchingError::Format {
            file: label.into(),
            message: "header must be image_a,image_b,idx_a,idx_b,distance".into(),
        });
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| MatchingError::Format { file: label.into(), message: e.to_string() })?;
        if rec.len() != 5 {
            return Err(MatchingError::Format {
                file: label.into(),
                message: format!("record {line} has {} fields, expected 5", rec.len()),
            });
        }
        let idx_a: usize = rec[2].trim().parse().map_err(|_| MatchingError::Format {
            file: label.into(),
            message: format!("record {line}: bad idx_a {:?}", &rec[2]),
        })?;
        let idx_b: usize = rec[3].trim().parse().map_err(|_| MatchingError::Format {
            file: label.into(),
            message: format!("record {line}: bad idx_b {:?}", &rec[3]),
        })?;
        let distance: f64 = rec[4].trim().parse().map_err(|_| MatchingError::Format {
            file: label.into(),
            message: format!("record {line}: bad distance {:?}", &rec[4]),
        })?;
        if rec[0] == rec[1] {
            return Err(MatchingError::Format {
                file: label.into(),
                message: format!("record {line}: image_a equals image_b"),
            });
        }
        if !distance.is_finite() || distance < 0.0 {
            return Err(MatchingError::Format {
                file: label.into(),
                message: format!("record {line}: distance must be finite and non-negative"),
            });
        }
        out.push(PairwiseMatch {
            image_a: rec[0].to_string(),
            image_b: rec[1].to_string(),
            idx_a,
            idx_b,
            distance,
        });
    }
    Ok(out)
}

pub fn write_matches_csv<W: Write>(mut w: W, matches: &[PairwiseMatch]) -> Result<(), MatchingError> {
    writeln!(w, "image_a,image_b,idx_a,idx_b,distance")?;
    for m in matches {
        writeln!(w, "{},{},{},{},{}", m.image_a, m.image_b, m.idx_a, m.idx_b, m.distance)?;
    }
    Ok(())
}

/// Read a dense correspondence file for one stereo pair: header
/// `row_a,col_a,row_b,col_b`.
pub fn read_dense_csv<R: Read>(reader: R, label: &str) -> Result<Vec<(PixelPoint, PixelPoint)>, MatchingError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| MatchingError::Format {
        file: label.into(),
        message: e.to_string(),
    })?;
    let expected = ["row_a", "col_a", "row_b", "col_b"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(MatchingError::Format {
            file: label.into(),
            message: "header must be row_a,col_a,row_b,col_b".into(),
        });
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| MatchingError::Format { file: label.into(), message: e.to_string() })?;
        if rec.len() != 4 {
            return Err(MatchingError::Format {
                file: label.into(),
                message: format!("record {line} has {} fields, expected 4", rec.len()),
            });
        }
        let mut vals = [0.0f64; 4];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = rec[i].trim().parse().map_err(|_| MatchingError::Format {
                file: label.into(),
                message: format!("record {line}: bad number {:?}", &rec[i]),
            })?;
            if !v.is_finite() {
                return Err(MatchingError::Format {
                    file: label.into(),
                    message: format!("record {line}: non-finite value"),
                });
            }
        }
        out.push((PixelPoint::new(vals[0], vals[1]), PixelPoint::new(vals[2], vals[3])));
    }
    Ok(out)
}

pub fn write_dense_csv<W: Write>(mut w: W, pairs: &[(PixelPoint, PixelPoint)]) -> Result<(), MatchingError> {
    writeln!(w, "row_a,col_a,row_b,col_b")?;
    for (a, b) in pairs {
        writeln!(w, "{},{},{},{}", a.row, a.col, b.row, b.col)?;
    }
    Ok(())
}
