//! DSM rasters: gridding of triangulated points, merging, inter-DSM
//! consistency maps, hole filling, and translation alignment by normalized
//! cross correlation.
//!
//! All grids live in one shared local ENU frame; frames must match exactly
//! for merging, so no resampling ever happens behind the caller's back.
//! Nodata is NaN in memory and -9999 in files.

use std::io::Write;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("grid frames differ: {0}")]
    FrameMismatch(String),
    #[error("need at least {required} grids, got {got}")]
    TooFewGrids { required: usize, got: usize },
    #[error("insufficient overlap: {got} valid common cells, need {required}")]
    InsufficientOverlap { got: usize, required: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("{file}: {message}")]
    Format { file: String, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Nodata sentinel used in grid files.
pub const NODATA_VALUE: f64 = -9999.0;

/// Geometry of a grid in the shared ENU frame: `origin_e`/`origin_n` are the
/// lower-left corner, rows run north to south.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridFrame {
    pub origin_e: f64,
    pub origin_n: f64,
    /// Cell size, meters.
    pub gsd: f64,
    /// Columns.
    pub width: usize,
    /// Rows.
    pub height: usize,
}

impl GridFrame {
    pub fn new(origin_e: f64, origin_n: f64, gsd: f64, width: usize, height: usize) -> Self {
        assert!(gsd > 0.0 && width > 0 && height > 0, "invalid grid frame");
        Self { origin_e, origin_n, gsd, width, height }
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_e + (col as f64 + 0.5) * self.gsd,
            self.origin_n + (self.height as f64 - row as f64 - 0.5) * self.gsd,
        )
    }

    /// Cell containing an ENU position, if inside the grid.
    pub fn cell_of(&self, e: f64, n: f64) -> Option<(usize, usize)> {
        let col = ((e - self.origin_e) / self.gsd).floor();
        let row_from_bottom = ((n - self.origin_n) / self.gsd).floor();
        if col < 0.0 || row_from_bottom < 0.0 {
            return None;
        }
        let (col, rfb) = (col as usize, row_from_bottom as usize);
        if col >= self.width || rfb >= self.height {
            return None;
        }
        Some((self.height - 1 - rfb, col))
    }
}

/// Georeferenced height raster with nodata cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmGrid {
    pub frame: GridFrame,
    /// Row-major from the north-most row; NaN marks nodata.
    values: Vec<f64>,
}

impl DsmGrid {
    pub fn filled(frame: GridFrame, value: f64) -> Self {
        Self { values: vec![value; frame.width * frame.height], frame }
    }

    pub fn nodata(frame: GridFrame) -> Self {
        Self::filled(frame, f64::NAN)
    }

    pub fn from_values(frame: GridFrame, values: Vec<f64>) -> Result<Self, RasterError> {
        if values.len() != frame.width * frame.height {
            return Err(RasterError::InvalidGrid(format!(
                "value count {} does not match {}x{}",
                values.len(),
                frame.width,
                frame.height
            )));
        }
        Ok(Self { frame, values })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.frame.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.frame.width + col] = value;
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        !self.get(row, col).is_nan()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| !v.is_nan()).count()
    }

    /// Fraction of cells that are valid.
    pub fn coverage(&self) -> f64 {
        self.valid_count() as f64 / self.values.len() as f64
    }

    fn same_frame(&self, other: &DsmGrid) -> Result<(), RasterError> {
        if self.frame != other.frame {
            return Err(RasterError::FrameMismatch(format!(
                "{:?} vs {:?}",
                self.frame, other.frame
            )));
        }
        Ok(())
    }

    /// Bilinear sample at an ENU position; NaN outside or without valid
    /// support. Cells with negligible weight do not need to be valid.
    pub fn sample_bilinear(&self, e: f64, n: f64) -> f64 {
        let fx = (e - self.frame.origin_e) / self.frame.gsd - 0.5;
        let fy = (n - self.frame.origin_n) / self.frame.gsd - 0.5;
        let (x0, y0) = (fx.floor(), fy.floor());
        let (wx, wy) = (fx - x0, fy - y0);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for (dy, wy) in [(0.0, 1.0 - wy), (1.0, wy)] {
            for (dx, wx) in [(0.0, 1.0 - wx), (1.0, wx)] {
                let w = wx * wy;
                if w < 1e-12 {
                    continue;
                }
                let col = x0 + dx;
                let rfb = y0 + dy;
                if col < 0.0 || rfb < 0.0 || col >= self.frame.width as f64 || rfb >= self.frame.height as f64 {
                    return f64::NAN;
                }
                let v = self.get(self.frame.height - 1 - rfb as usize, col as usize);
                if v.is_nan() {
                    return f64::NAN;
                }
                acc += w * v;
                wsum += w;
            }
        }
        if wsum <= 0.0 {
            f64::NAN
        } else {
            acc / wsum
        }
    }
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Grid a point cloud: each cell takes the median height of the points that
/// fall in it, empty cells stay nodata.
pub fn rasterize(points: &[(f64, f64, f64)], frame: &GridFrame) -> DsmGrid {
    let mut indexed: Vec<(usize, f64)> = Vec::with_capacity(points.len());
    for &(e, n, h) in points {
        if let Some((row, col)) = frame.cell_of(e, n) {
            indexed.push((row * frame.width + col, h));
        }
    }
    indexed.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite heights"));

    let mut grid = DsmGrid::nodata(*frame);
    let mut i = 0;
    while i < indexed.len() {
        let cell = indexed[i].0;
        let mut j = i;
        while j < indexed.len() && indexed[j].0 == cell {
            j += 1;
        }
        let heights: Vec<f64> = indexed[i..j].iter().map(|p| p.1).collect();
        grid.values[cell] = median_of_sorted(&heights);
        i = j;
    }
    grid
}

/// Per-cell mean of the valid values across grids on a common frame.
pub fn merge_average(dsms: &[DsmGrid]) -> Result<DsmGrid, RasterError> {
    if dsms.is_empty() {
        return Err(RasterError::TooFewGrids { required: 1, got: 0 });
    }
    for d in &dsms[1..] {
        dsms[0].same_frame(d)?;
    }
    let mut out = DsmGrid::nodata(dsms[0].frame);
    for i in 0..out.values.len() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for d in dsms {
            let v = d.values[i];
            if !v.is_nan() {
                sum += v;
                count += 1;
            }
        }
        if count > 0 {
            out.values[i] = sum / count as f64;
        }
    }
    Ok(out)
}

/// Per-cell population standard deviation across grids; cells with fewer
/// than two valid values are nodata.
pub fn stddev_map(dsms: &[DsmGrid]) -> Result<DsmGrid, RasterError> {
    if dsms.len() < 2 {
        return Err(RasterError::TooFewGrids { required: 2, got: dsms.len() });
    }
    for d in &dsms[1..] {
        dsms[0].same_frame(d)?;
    }
    let mut out = DsmGrid::nodata(dsms[0].frame);
    for i in 0..out.values.len() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for d in dsms {
            let v = d.values[i];
            if !v.is_nan() {
                sum += v;
                count += 1;
            }
        }
        if count < 2 {
            continue;
        }
        let mean = sum / count as f64;
        let var = dsms
            .iter()
            .filter_map(|d| {
                let v = d.values[i];
                (!v.is_nan()).then(|| (v - mean) * (v - mean))
            })
            .sum::<f64>()
            / count as f64;
        out.values[i] = var.sqrt();
    }
    Ok(out)
}

/// Result of [`fill_holes`].
#[derive(Debug, Clone)]
pub struct FillResult {
    pub grid: DsmGrid,
    /// Set when the input had no valid cells at all.
    pub all_nodata: bool,
}

/// Fill small holes: first a 5x5 median for nodata cells with at least 13
/// valid neighbors, then row/column cubic interpolation for the remaining
/// holes inside the convex hull of the valid cells. Exterior nodata stays
/// untouched, and so does every originally valid cell.
pub fn fill_holes(dsm: &DsmGrid) -> FillResult {
    let (w, h) = (dsm.frame.width, dsm.frame.height);
    if dsm.valid_count() == 0 {
        return FillResult { grid: dsm.clone(), all_nodata: true };
    }

    let mut out = dsm.clone();

    // Pass 1: 5x5 median on the original validity.
    for row in 0..h {
        for col in 0..w {
            if dsm.is_valid(row, col) {
                continue;
            }
            let mut neighborhood = Vec::with_capacity(24);
            for dr in -2i64..=2 {
                for dc in -2i64..=2 {
                    let (r, c) = (row as i64 + dr, col as i64 + dc);
                    if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                        continue;
                    }
                    let v = dsm.get(r as usize, c as usize);
                    if !v.is_nan() {
                        neighborhood.push(v);
                    }
                }
            }
            if neighborhood.len() >= 13 {
                neighborhood.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
                out.set(row, col, median_of_sorted(&neighborhood));
            }
        }
    }

    // Convex hull of the original valid cell centers, in (col, row) space.
    let hull = {
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for row in 0..h {
            for col in 0..w {
                if dsm.is_valid(row, col) {
                    pts.push((col as f64, row as f64));
                }
            }
        }
        convex_hull(&mut pts)
    };

    // Pass 2: cubic along rows and columns from the original valid cells.
    let interp_1d = |cells: &[(f64, f64)], at: f64| -> Option<f64> {
        // cells: (coordinate, value) sorted, the two nearest on each side.
        match cells.len() {
            4 => {
                // Lagrange cubic through the four support points.
                let mut acc = 0.0;
                for i in 0..4 {
                    let (xi, yi) = cells[i];
                    let mut l = yi;
                    for (j, &(xj, _)) in cells.iter().enumerate() {
                        if i != j {
                            l *= (at - xj) / (xi - xj);
                        }
                    }
                    acc += l;
                }
                Some(acc)
            }
            2 => {
                let ((x0, y0), (x1, y1)) = (cells[0], cells[1]);
                Some(y0 + (y1 - y0) * (at - x0) / (x1 - x0))
            }
            _ => None,
        }
    };

    for row in 0..h {
        for col in 0..w {
            if dsm.is_valid(row, col) || out.is_valid(row, col) {
                continue;
            }
            if !point_in_convex_hull(&hull, (col as f64, row as f64)) {
                continue;
            }

            // Two nearest original-valid cells on each side along the row.
            let row_support = {
                let mut left = Vec::new();
                for c in (0..col).rev() {
                    if dsm.is_valid(row, c) {
                        left.push((c as f64, dsm.get(row, c)));
                        if left.len() == 2 {
                            break;
                        }
                    }
                }
                let mut right = Vec::new();
                for c in col + 1..w {
                    if dsm.is_valid(row, c) {
                        right.push((c as f64, dsm.get(row, c)));
                        if right.len() == 2 {
                            break;
                        }
                    }
                }
                let mut support: Vec<(f64, f64)> = left.into_iter().rev().collect();
                support.extend(right);
                support
            };
            let col_support = {
                let mut up = Vec::new();
                for r in (0..row).rev() {
                    if dsm.is_valid(r, col) {
                        up.push((r as f64, dsm.get(r, col)));
                        if up.len() == 2 {
                            break;
                        }
                    }
                }
                let mut down = Vec::new();
                for r in row + 1..h {
                    if dsm.is_valid(r, col) {
                        down.push((r as f64, dsm.get(r, col)));
                        if down.len() == 2 {
                            break;
                        }
                    }
                }
                let mut support: Vec<(f64, f64)> = up.into_iter().rev().collect();
                support.extend(down);
                support
            };

            let balanced = |s: &[(f64, f64)], at: f64| {
                let below = s.iter().filter(|(x, _)| *x < at).count();
                below > 0 && below < s.len()
            };
            let mut estimates = Vec::with_capacity(2);
            if balanced(&row_support, col as f64) {
                if let Some(v) = interp_1d(&row_support, col as f64) {
                    estimates.push(v);
                }
            }
            if balanced(&col_support, row as f64) {
                if let Some(v) = interp_1d(&col_support, row as f64) {
                    estimates.push(v);
                }
            }
            if !estimates.is_empty() {
                out.set(row, col, estimates.iter().sum::<f64>() / estimates.len() as f64);
            }
        }
    }

    FillResult { grid: out, all_nodata: false }
}

/// Andrew monotone chain; returns the hull counterclockwise.
fn convex_hull(points: &mut Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    points.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    points.dedup();
    if points.len() < 3 {
        return points.clone();
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(points.len() * 2);
    for &p in points.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in points.iter().rev() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn point_in_convex_hull(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    if hull.len() < 3 {
        return false;
    }
    let n = hull.len();
    for i in 0..n {
        let a = hull[i];
        let b = hull[(i + 1) % n];
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if cross < -1e-9 {
            return false;
        }
    }
    true
}

/// Translation that registers a moving grid onto a reference:
/// aligned(e, n) = moving(e - de, n - dn) + dh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Translation {
    pub de: f64,
    pub dn: f64,
    pub dh: f64,
    /// The integer NCC peak sat on the search border; the estimate is
    /// unreliable and was not refined.
    pub peak_on_border: bool,
}

/// Mean-removed normalized cross correlation over the mutually valid cells
/// under an integer cell shift. `shift_cols` moves the moving grid east,
/// `shift_rows_north` moves it north.
fn ncc_at_shift(reference: &DsmGrid, moving: &DsmGrid, shift_cols: i64, shift_rows_north: i64) -> Option<(f64, usize)> {
    let (w, h) = (reference.frame.width as i64, reference.frame.height as i64);
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    // aligned[r][c] = moving value at column c - shift_cols, row r + shift_rows_north
    // (rows count from the north, so a northward shift samples further south).
    for r in 0..h {
        let mr = r + shift_rows_north;
        if mr < 0 || mr >= h {
            continue;
        }
        for c in 0..w {
            let mc = c - shift_cols;
            if mc < 0 || mc >= w {
                continue;
            }
            let a = reference.get(r as usize, c as usize);
            let b = moving.get(mr as usize, mc as usize);
            if a.is_nan() || b.is_nan() {
                continue;
            }
            pairs.push((a, b));
        }
    }
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let (ma, mb) = pairs.iter().fold((0.0, 0.0), |(x, y), (a, b)| (x + a, y + b));
    let (ma, mb) = (ma / n, mb / n);
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        let (da, db) = (a - ma, b - mb);
        num += da * db;
        va += da * da;
        vb += db * db;
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some((num / (va * vb).sqrt(), pairs.len()))
}

/// Find the 3D translation aligning `moving` onto `reference`: exhaustive
/// NCC over integer cell shifts within the search radius, quadratic sub-cell
/// refinement, and a median height offset over the aligned overlap.
pub fn align_translation(
    reference: &DsmGrid,
    moving: &DsmGrid,
    search_radius: usize,
) -> Result<Translation, RasterError> {
    const MIN_OVERLAP: usize = 1000;
    reference.same_frame(moving)?;

    let zero_overlap = ncc_at_shift(reference, moving, 0, 0).map(|(_, n)| n).unwrap_or(0);
    if zero_overlap < MIN_OVERLAP {
        return Err(RasterError::InsufficientOverlap { got: zero_overlap, required: MIN_OVERLAP });
    }

    let r = search_radius as i64;
    let mut scores = vec![f64::NEG_INFINITY; ((2 * r + 1) * (2 * r + 1)) as usize];
    let idx = |sc: i64, sn: i64| ((sn + r) * (2 * r + 1) + (sc + r)) as usize;
    let mut best = (0i64, 0i64, f64::NEG_INFINITY);
    for sn in -r..=r {
        for sc in -r..=r {
            if let Some((score, n)) = ncc_at_shift(reference, moving, sc, sn) {
                if n >= MIN_OVERLAP / 4 {
                    scores[idx(sc, sn)] = score;
                    if score > best.2 {
                        best = (sc, sn, score);
                    }
                }
            }
        }
    }
    if best.2 == f64::NEG_INFINITY {
        return Err(RasterError::InsufficientOverlap { got: 0, required: MIN_OVERLAP / 4 });
    }

    let (bc, bn, _) = best;
    let on_border = bc.abs() == r || bn.abs() == r;

    // Quadratic sub-cell refinement per axis on the 3x3 around the peak.
    let refine = |m1: f64, c0: f64, p1: f64| -> f64 {
        let den = m1 - 2.0 * c0 + p1;
        if den >= -1e-12 {
            return 0.0;
        }
        (0.5 * (m1 - p1) / den).clamp(-0.5, 0.5)
    };
    let (mut frac_c, mut frac_n) = (0.0, 0.0);
    if !on_border {
        let s = |dc: i64, dn: i64| scores[idx(bc + dc, bn + dn)];
        if s(-1, 0).is_finite() && s(1, 0).is_finite() {
            frac_c = refine(s(-1, 0), s(0, 0), s(1, 0));
        }
        if s(0, -1).is_finite() && s(0, 1).is_finite() {
            frac_n = refine(s(0, -1), s(0, 0), s(0, 1));
        }
    }

    let gsd = reference.frame.gsd;
    let de = (bc as f64 + frac_c) * gsd;
    let dn = (bn as f64 + frac_n) * gsd;

    // Vertical offset: median of reference minus the shifted moving grid.
    let mut diffs: Vec<f64> = Vec::new();
    for row in 0..reference.frame.height {
        for col in 0..reference.frame.width {
            let a = reference.get(row, col);
            if a.is_nan() {
                continue;
            }
            let (e, n) = reference.frame.cell_center(row, col);
            let b = moving.sample_bilinear(e - de, n - dn);
            if b.is_nan() {
                continue;
            }
            diffs.push(a - b);
        }
    }
    if diffs.len() < MIN_OVERLAP / 4 {
        return Err(RasterError::InsufficientOverlap { got: diffs.len(), required: MIN_OVERLAP / 4 });
    }
    diffs.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
    let dh = median_of_sorted(&diffs);

    Ok(Translation { de, dn, dh, peak_on_border: on_border })
}

/// Exact integer-cell shift: out(e, n) = grid(e - dcols_east * gsd,
/// n - drows_north * gsd). No resampling, values move verbatim.
pub fn shift_cells(grid: &DsmGrid, dcols_east: i64, drows_north: i64) -> DsmGrid {
    let (w, h) = (grid.frame.width as i64, grid.frame.height as i64);
    let mut out = DsmGrid::nodata(grid.frame);
    for r in 0..h {
        // Row indices count from the north: shifting the content north by
        // k rows means row r samples row r + k of the source.
        let sr = r + drows_north;
        if sr < 0 || sr >= h {
            continue;
        }
        for c in 0..w {
            let sc = c - dcols_east;
            if sc < 0 || sc >= w {
                continue;
            }
            let v = grid.get(sr as usize, sc as usize);
            if !v.is_nan() {
                out.set(r as usize, c as usize, v);
            }
        }
    }
    out
}

/// Coarse integer alignment on decimated grids: NCC over cell shifts within
/// `search_m` meters at a reduced resolution. Returns the (east, north)
/// shift in full-resolution cells to feed [`shift_cells`]. Used as a
/// pre-alignment when inter-date offsets can exceed the fine search radius.
pub fn coarse_align_shift(
    reference: &DsmGrid,
    moving: &DsmGrid,
    search_m: f64,
    decimate: usize,
) -> Result<(i64, i64), RasterError> {
    reference.same_frame(moving)?;
    let d = decimate.max(1);
    let frame = reference.frame;
    let cw = frame.width.div_ceil(d);
    let ch = frame.height.div_ceil(d);
    let coarse_frame = GridFrame {
        origin_e: frame.origin_e,
        origin_n: frame.origin_n,
        gsd: frame.gsd * d as f64,
        width: cw,
        height: ch,
    };
    let decimate_grid = |g: &DsmGrid| -> DsmGrid {
        let mut out = DsmGrid::nodata(coarse_frame);
        for r in 0..ch {
            for c in 0..cw {
                // Mean of the valid cells in the block.
                let mut sum = 0.0;
                let mut count = 0usize;
                for rr in r * d..((r + 1) * d).min(frame.height) {
                    for cc in c * d..((c + 1) * d).min(frame.width) {
                        let v = g.get(rr, cc);
                        if !v.is_nan() {
                            sum += v;
                            count += 1;
                        }
                    }
                }
                if count > 0 {
                    out.set(r, c, sum / count as f64);
                }
            }
        }
        out
    };
    let ref_c = decimate_grid(reference);
    let mov_c = decimate_grid(moving);

    let radius = (search_m / coarse_frame.gsd).ceil() as i64;
    let mut best = (0i64, 0i64, f64::NEG_INFINITY);
    for sn in -radius..=radius {
        for sc in -radius..=radius {
            if let Some((score, n)) = ncc_at_shift(&ref_c, &mov_c, sc, sn) {
                if n >= 64 && score > best.2 {
                    best = (sc, sn, score);
                }
            }
        }
    }
    if best.2 == f64::NEG_INFINITY {
        return Err(RasterError::InsufficientOverlap { got: 0, required: 64 });
    }
    Ok((best.0 * d as i64, best.1 * d as i64))
}

/// Resample a grid under a translation: out(e, n) = grid(e - de, n - dn) + dh.
pub fn apply_translation(grid: &DsmGrid, t: &Translation) -> DsmGrid {
    let mut out = DsmGrid::nodata(grid.frame);
    for row in 0..grid.frame.height {
        for col in 0..grid.frame.width {
            let (e, n) = grid.frame.cell_center(row, col);
            let v = grid.sample_bilinear(e - t.de, n - t.dn);
            if !v.is_nan() {
                out.set(row, col, v + t.dh);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Grid files: ESRI ASCII plus a binary twin (same header, f32 LE payload)
// ---------------------------------------------------------------------------

/// Largest accepted grid side and cell count when reading files.
pub const MAX_GRID_SIDE: usize = 50_000;
pub const MAX_GRID_CELLS: usize = 25_000_000;

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        // Matches the header's NODATA_value.
        "-9999".to_string()
    } else {
        format!("{v}")
    }
}

fn header_string(frame: &GridFrame) -> String {
    format!(
        "ncols {}\nnrows {}\nxllcorner {}\nyllcorner {}\ncellsize {}\nNODATA_value -9999\n",
        frame.width, frame.height, frame.origin_e, frame.origin_n, frame.gsd
    )
}

/// Write the ESRI ASCII form.
pub fn write_ascii_grid<W: Write>(mut w: W, grid: &DsmGrid) -> Result<(), RasterError> {
    w.write_all(header_string(&grid.frame).as_bytes())?;
    let width = grid.frame.width;
    for row in 0..grid.frame.height {
        let mut line = String::with_capacity(width * 8);
        for col in 0..width {
            if col > 0 {
                line.push(' ');
            }
            line.push_str(&fmt_value(grid.get(row, col)));
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Write the binary twin: the same text header followed by row-major
/// little-endian f32 values (nodata as -9999).
pub fn write_binary_grid<W: Write>(mut w: W, grid: &DsmGrid) -> Result<(), RasterError> {
    w.write_all(header_string(&grid.frame).as_bytes())?;
    let mut buf = Vec::with_capacity(grid.values().len() * 4);
    for v in grid.values() {
        let x = if v.is_nan() { NODATA_VALUE as f32 } else { *v as f32 };
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

struct ParsedHeader {
    frame: GridFrame,
    nodata: f64,
    body_offset: usize,
}

fn parse_header(data: &[u8], label: &str) -> Result<ParsedHeader, RasterError> {
    let err = |message: String| RasterError::Format { file: label.to_string(), message };

    let mut offset = 0usize;
    let mut fields: Vec<(String, String)> = Vec::new();
    for _ in 0..6 {
        let rest = &data[offset.min(data.len())..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err("truncated header".into()))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| err("header is not UTF-8".into()))?;
        let mut parts = line.split_whitespace();
        let key = parts.next().ok_or_else(|| err("empty header line".into()))?;
        let value = parts.next().ok_or_else(|| err(format!("header field {key} has no value")))?;
        if parts.next().is_some() {
            return Err(err(format!("header field {key} has trailing tokens")));
        }
        fields.push((key.to_ascii_lowercase(), value.to_string()));
        offset += nl + 1;
    }

    let expected = ["ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"];
    for (i, (key, _)) in fields.iter().enumerate() {
        if key != expected[i] {
            return Err(err(format!("header field {} must be {}, got {key}", i + 1, expected[i])));
        }
    }

    let parse_usize = |s: &str, name: &str| -> Result<usize, RasterError> {
        s.parse::<usize>().map_err(|_| err(format!("bad {name}: {s:?}")))
    };
    let parse_f64 = |s: &str, name: &str| -> Result<f64, RasterError> {
        let v: f64 = s.parse().map_err(|_| err(format!("bad {name}: {s:?}")))?;
        if !v.is_finite() {
            return Err(err(format!("{name} must be finite")));
        }
        Ok(v)
    };

    let width = parse_usize(&fields[0].1, "ncols")?;
    let height = parse_usize(&fields[1].1, "nrows")?;
    if width == 0 || height == 0 || width > MAX_GRID_SIDE || height > MAX_GRID_SIDE {
        return Err(err(format!("grid size {width}x{height} out of range")));
    }
    if width.saturating_mul(height) > MAX_GRID_CELLS {
        return Err(err(format!("grid size {width}x{height} exceeds the cell limit")));
    }
    let origin_e = parse_f64(&fields[2].1, "xllcorner")?;
    let origin_n = parse_f64(&fields[3].1, "yllcorner")?;
    let gsd = parse_f64(&fields[4].1, "cellsize")?;
    if gsd <= 0.0 {
        return Err(err("cellsize must be positive".into()));
    }
    let nodata = parse_f64(&fields[5].1, "NODATA_value")?;

    Ok(ParsedHeader {
        frame: GridFrame { origin_e, origin_n, gsd, width, height },
        nodata,
        body_offset: offset,
    })
}

/// Read a grid in either the ASCII or the binary form; binary is recognized
/// by its payload being exactly 4 bytes per cell.
pub fn read_grid(data: &[u8], label: &str) -> Result<DsmGrid, RasterError> {
    let header = parse_header(data, label)?;
    let body = &data[header.body_offset..];
    let cells = header.frame.width * header.frame.height;
    if body.len() == 4 * cells {
        read_binary_body(header, body, label)
    } else {
        read_ascii_body(header, body, label)
    }
}

pub fn read_ascii_grid(data: &[u8], label: &str) -> Result<DsmGrid, RasterError> {
    let header = parse_header(data, label)?;
    let body = &data[header.body_offset..];
    read_ascii_body(header, body, label)
}

pub fn read_binary_grid(data: &[u8], label: &str) -> Result<DsmGrid, RasterError> {
    let header = parse_header(data, label)?;
    let body = &data[header.body_offset..];
    read_binary_body(header, body, label)
}

fn read_ascii_body(header: ParsedHeader, body: &[u8], label: &str) -> Result<DsmGrid, RasterError> {
    let err = |message: String| RasterError::Format { file: label.to_string(), message };
    let text = std::str::from_utf8(body).map_err(|_| err("body is not UTF-8".into()))?;
    let cells = header.frame.width * header.frame.height;
    let mut values = Vec::with_capacity(cells);
    for token in text.split_ascii_whitespace() {
        if values.len() == cells {
            return Err(err("more values than cells".into()));
        }
        let v: f64 = token.parse().map_err(|_| err(format!("bad value {token:?}")))?;
        if v == header.nodata {
            values.push(f64::NAN);
        } else if v.is_finite() {
            values.push(v);
        } else {
            return Err(err(format!("non-finite value {token:?}")));
        }
    }
    if values.len() != cells {
        return Err(err(format!("expected {cells} values, got {}", values.len())));
    }
    DsmGrid::from_values(header.frame, values)
}

fn read_binary_body(header: ParsedHeader, body: &[u8], label: &str) -> Result<DsmGrid, RasterError> {
    let err = |message: String| RasterError::Format { file: label.to_string(), message };
    let cells = header.frame.width * header.frame.height;
    if body.len() != 4 * cells {
        return Err(err(format!("binary payload must be {} bytes, got {}", 4 * cells, body.len())));
    }
    let nodata32 = header.nodata as f32;
    let mut values = Vec::with_capacity(cells);
    for chunk in body.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if v == nodata32 {
            values.push(f64::NAN);
        } else if v.is_finite() {
            values.push(v as f64);
        } else {
            return Err(err("non-finite value in binary payload".into()));
        }
    }
    DsmGrid::from_values(header.frame, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn small_frame(w: usize, h: usize) -> GridFrame {
        GridFrame::new(0.0, 0.0, 1.0, w, h)
    }

    #[test]
    fn rasterize_one_point_per_cell() {
        let frame = small_frame(4, 3);
        let points = vec![(0.5, 0.5, 7.0), (2.5, 1.5, 9.0)];
        let grid = rasterize(&points, &frame);
        // (0.5, 0.5) is the bottom-left cell: row 2, col 0.
        assert_eq!(grid.get(2, 0), 7.0);
        assert_eq!(grid.get(1, 2), 9.0);
        assert!(!grid.is_valid(0, 0));
    }

    #[test]
    fn rasterize_median_rejects_outlier() {
        let frame = small_frame(1, 1);
        let grid = rasterize(&[(0.5, 0.5, 1.0), (0.4, 0.6, 2.0), (0.6, 0.4, 100.0)], &frame);
        assert_eq!(grid.get(0, 0), 2.0);
    }

    #[test]
    fn rasterize_analytic_surface() {
        // Regular 2x2 sampling per cell of a smooth surface: per-cell error
        // below 0.05 m RMS against the surface at the cell center.
        let frame = GridFrame::new(-50.0, -50.0, 1.0, 100, 100);
        let surface = |e: f64, n: f64| 20.0 * (-(e * e + n * n) / (2.0 * 35.0 * 35.0)).exp();
        let mut points = Vec::new();
        for i in 0..200 {
            for j in 0..200 {
                let e = -50.0 + (i as f64 + 0.5) * 0.5;
                let n = -50.0 + (j as f64 + 0.5) * 0.5;
                points.push((e, n, surface(e, n)));
            }
        }
        let grid = rasterize(&points, &frame);
        let mut sq = 0.0;
        let mut count = 0usize;
        for row in 0..100 {
            for col in 0..100 {
                let (e, n) = frame.cell_center(row, col);
                let err = grid.get(row, col) - surface(e, n);
                sq += err * err;
                count += 1;
            }
        }
        let rms = (sq / count as f64).sqrt();
        assert!(rms < 0.05, "per-cell RMS {rms}");
    }

    #[test]
    fn merge_average_rules() {
        let frame = small_frame(2, 1);
        let mut a = DsmGrid::nodata(frame);
        let mut b = DsmGrid::nodata(frame);
        a.set(0, 0, 10.0);
        b.set(0, 0, 12.0);
        a.set(0, 1, 10.0);
        let merged = merge_average(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(merged.get(0, 0), 11.0);
        assert_eq!(merged.get(0, 1), 10.0);

        let same = merge_average(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(same, a);

        let other = DsmGrid::nodata(small_frame(3, 1));
        assert!(matches!(merge_average(&[a, other]), Err(RasterError::FrameMismatch(_))));
    }

    #[test]
    fn stddev_map_rules() {
        let frame = small_frame(2, 1);
        let mut a = DsmGrid::nodata(frame);
        let mut b = DsmGrid::nodata(frame);
        a.set(0, 0, 0.0);
        b.set(0, 0, 2.0);
        a.set(0, 1, 5.0);
        let sd = stddev_map(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(sd.get(0, 0), 1.0); // population std of {0, 2}
        assert!(!sd.is_valid(0, 1)); // single valid input

        let equal = stddev_map(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(equal.get(0, 0), 0.0);
    }

    #[test]
    fn merge_and_stddev_permutation_invariant() {
        let frame = small_frame(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut grids = Vec::new();
        for _ in 0..4 {
            let mut g = DsmGrid::nodata(frame);
            for row in 0..8 {
                for col in 0..8 {
                    if rng.gen_range(0.0..1.0) < 0.7 {
                        g.set(row, col, rng.gen_range(-5.0..5.0));
                    }
                }
            }
            grids.push(g);
        }
        let m1 = merge_average(&grids).unwrap();
        let s1 = stddev_map(&grids).unwrap();
        grids.reverse();
        let m2 = merge_average(&grids).unwrap();
        let s2 = stddev_map(&grids).unwrap();
        for i in 0..m1.values().len() {
            let (a, b) = (m1.values()[i], m2.values()[i]);
            assert!(a.is_nan() == b.is_nan() && (a.is_nan() || (a - b).abs() < 1e-12));
            let (a, b) = (s1.values()[i], s2.values()[i]);
            assert!(a.is_nan() == b.is_nan() && (a.is_nan() || (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn fill_single_hole_in_constant_grid() {
        let frame = small_frame(9, 9);
        let mut g = DsmGrid::filled(frame, 5.0);
        g.set(4, 4, f64::NAN);
        let filled = fill_holes(&g);
        assert!(!filled.all_nodata);
        assert_eq!(filled.grid.get(4, 4), 5.0);
    }

    #[test]
    fn fill_never_touches_valid_cells() {
        let frame = small_frame(12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = DsmGrid::nodata(frame);
        for row in 0..12 {
            for col in 0..12 {
                if rng.gen_range(0.0..1.0) < 0.8 {
                    g.set(row, col, rng.gen_range(0.0..10.0));
                }
            }
        }
        let filled = fill_holes(&g).grid;
        for row in 0..12 {
            for col in 0..12 {
                if g.is_valid(row, col) {
                    assert_eq!(g.get(row, col), filled.get(row, col));
                }
            }
        }
    }

    #[test]
    fn fill_ramp_hole_median_and_cubic() {
        // Planar ramp with a 3x3 hole: the hole center sits on a symmetric
        // 5x5 support, so the median reproduces the plane exactly; the
        // asymmetric corner cells pick up at most one cell-slope of bias.
        let frame = small_frame(21, 21);
        let plane = |row: usize, col: usize| 2.0 + 0.3 * col as f64 - 0.2 * row as f64;
        let mut g = DsmGrid::nodata(frame);
        for row in 0..21 {
            for col in 0..21 {
                g.set(row, col, plane(row, col));
            }
        }
        for row in 9..12 {
            for col in 9..12 {
                g.set(row, col, f64::NAN);
            }
        }
        let filled = fill_holes(&g).grid;
        assert!((filled.grid_value(10, 10) - plane(10, 10)).abs() < 1e-6);
        let slope_bound = 0.3 + 0.2;
        for row in 9..12 {
            for col in 9..12 {
                let err = (filled.grid_value(row, col) - plane(row, col)).abs();
                assert!(err <= slope_bound + 1e-9, "cell ({row},{col}) error {err}");
            }
        }
    }

    #[test]
    fn fill_large_hole_cubic_matches_plane() {
        // A 7x7 hole leaves its inner cells with fewer than 13 valid
        // neighbors, so the cubic pass handles them; cubic interpolation
        // reproduces a plane exactly.
        let frame = small_frame(25, 25);
        let plane = |row: usize, col: usize| 1.0 + 0.25 * col as f64 + 0.15 * row as f64;
        let mut g = DsmGrid::nodata(frame);
        for row in 0..25 {
            for col in 0..25 {
                g.set(row, col, plane(row, col));
            }
        }
        for row in 9..16 {
            for col in 9..16 {
                g.set(row, col, f64::NAN);
            }
        }
        let filled = fill_holes(&g).grid;
        for (row, col) in [(12, 12), (11, 12), (12, 11), (12, 13), (13, 12), (11, 11)] {
            let err = (filled.grid_value(row, col) - plane(row, col)).abs();
            assert!(err < 1e-6, "cell ({row},{col}) error {err}");
        }
    }

    #[test]
    fn fill_leaves_exterior_untouched() {
        let frame = small_frame(12, 12);
        let mut g = DsmGrid::nodata(frame);
        // Valid block in the middle; the border stays outside the hull.
        for row in 3..9 {
            for col in 3..9 {
                g.set(row, col, 1.0);
            }
        }
        let filled = fill_holes(&g).grid;
        assert!(!filled.is_valid(0, 0));
        assert!(!filled.is_valid(11, 11));
        assert!(!filled.is_valid(0, 6));
    }

    #[test]
    fn fill_all_nodata_is_flagged() {
        let g = DsmGrid::nodata(small_frame(5, 5));
        let r = fill_holes(&g);
        assert!(r.all_nodata);
        assert_eq!(r.grid.frame, g.frame);
        assert_eq!(r.grid.valid_count(), 0);
    }

    impl DsmGrid {
        fn grid_value(&self, row: usize, col: usize) -> f64 {
            let v = self.get(row, col);
            assert!(!v.is_nan(), "cell ({row},{col}) should be filled");
            v
        }
    }

    fn wavy_grid(frame: GridFrame) -> DsmGrid {
        let mut g = DsmGrid::nodata(frame);
        for row in 0..frame.height {
            for col in 0..frame.width {
                let (e, n) = frame.cell_center(row, col);
                g.set(row, col, 3.0 * (e / 7.0).sin() + 2.0 * (n / 5.0).cos() + 0.01 * e);
            }
        }
        g
    }

    #[test]
    fn align_self_is_zero() {
        let g = wavy_grid(small_frame(60, 60));
        let t = align_translation(&g, &g, 10).unwrap();
        assert_eq!(t.de, 0.0);
        assert_eq!(t.dn, 0.0);
        assert!(t.dh.abs() < 1e-12);
        assert!(!t.peak_on_border);
    }

    /// moving(e, n) = reference(e - 3, n + 2) + 1.5, i.e. the reference
    /// shifted 3 cells east, 2 cells south and raised 1.5 m.
    fn shifted_copy(reference: &DsmGrid, noise_sigma: f64, seed: u64) -> DsmGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, noise_sigma.max(1e-300)).unwrap();
        let mut moving = DsmGrid::nodata(reference.frame);
        for row in 0..reference.frame.height {
            for col in 0..reference.frame.width {
                let (e, n) = reference.frame.cell_center(row, col);
                let v = reference.sample_bilinear(e - 3.0, n + 2.0);
                if !v.is_nan() {
                    let noise = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    moving.set(row, col, v + 1.5 + noise);
                }
            }
        }
        moving
    }

    #[test]
    fn align_constructed_shift() {
        let reference = wavy_grid(small_frame(80, 80));
        let moving = shifted_copy(&reference, 0.0, 0);
        let t = align_translation(&reference, &moving, 8).unwrap();
        assert!((t.de - (-3.0)).abs() < 0.1, "de {}", t.de);
        assert!((t.dn - 2.0).abs() < 0.1, "dn {}", t.dn);
        assert!((t.dh - (-1.5)).abs() < 0.01, "dh {}", t.dh);
        assert!(!t.peak_on_border);

        // Applying the translation recovers the reference on the overlap.
        let aligned = apply_translation(&moving, &t);
        for row in 8..72 {
            for col in 8..72 {
                let (a, b) = (reference.get(row, col), aligned.get(row, col));
                if a.is_nan() || b.is_nan() {
                    continue;
                }
                assert!((a - b).abs() < 0.05, "cell ({row},{col}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn align_constructed_shift_with_noise() {
        let reference = wavy_grid(small_frame(80, 80));
        let moving = shifted_copy(&reference, 0.2, 11);
        let t = align_translation(&reference, &moving, 8).unwrap();
        assert!((t.de - (-3.0)).abs() < 0.3, "de {}", t.de);
        assert!((t.dn - 2.0).abs() < 0.3, "dn {}", t.dn);
        assert!((t.dh - (-1.5)).abs() < 0.05, "dh {}", t.dh);
    }

    #[test]
    fn align_requires_overlap() {
        let g = wavy_grid(small_frame(20, 20));
        assert!(matches!(
            align_translation(&g, &g, 4),
            Err(RasterError::InsufficientOverlap { .. })
        ));
    }

    #[test]
    fn align_flags_border_peak() {
        let reference = wavy_grid(small_frame(80, 80));
        let moving = shifted_copy(&reference, 0.0, 0);
        // True shift is 3 cells but the search radius is 3: the peak lands
        // on the border (or the true peak is outside entirely).
        let t = align_translation(&reference, &moving, 3).unwrap();
        assert!(t.peak_on_border);
    }

    #[test]
    fn ascii_roundtrip() {
        let mut g = wavy_grid(small_frame(7, 5));
        g.set(2, 3, f64::NAN);
        let mut buf = Vec::new();
        write_ascii_grid(&mut buf, &g).unwrap();
        let parsed = read_grid(&buf, "test").unwrap();
        assert_eq!(parsed.frame, g.frame);
        for i in 0..g.values().len() {
            let (a, b) = (g.values()[i], parsed.values()[i]);
            assert!(a.is_nan() == b.is_nan());
            if !a.is_nan() {
                assert_eq!(a, b);
            }
        }
        // Writing the parsed grid reproduces the bytes.
        let mut buf2 = Vec::new();
        write_ascii_grid(&mut buf2, &parsed).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn binary_roundtrip() {
        let mut g = wavy_grid(small_frame(6, 9));
        g.set(0, 0, f64::NAN);
        let mut buf = Vec::new();
        write_binary_grid(&mut buf, &g).unwrap();
        let parsed = read_grid(&buf, "test").unwrap();
        assert_eq!(parsed.frame, g.frame);
        for i in 0..g.values().len() {
            let (a, b) = (g.values()[i], parsed.values()[i]);
            assert!(a.is_nan() == b.is_nan());
            if !a.is_nan() {
                assert_eq!(a as f32 as f64, b);
            }
        }
    }

    #[test]
    fn reader_rejects_malformed_input() {
        assert!(read_grid(b"", "t").is_err());
        assert!(read_grid(b"ncols 2\nnrows 1\n", "t").is_err());
        let huge = b"ncols 999999999\nnrows 999999999\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n";
        assert!(read_grid(huge, "t").is_err());
        let bad_order = b"nrows 1\nncols 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1\n";
        assert!(read_grid(bad_order, "t").is_err());
        let wrong_count = b"ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2 3\n";
        assert!(read_grid(wrong_count, "t").is_err());
        let bad_cellsize = b"ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 0\nNODATA_value -9999\n1\n";
        assert!(read_grid(bad_cellsize, "t").is_err());
    }
}
