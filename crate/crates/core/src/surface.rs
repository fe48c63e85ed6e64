//! Surface inspection: laser line-scan point clouds are cropped and
//! outlier-filtered, rasterized into an upper-surface height map, compared to
//! the nominal layer height, and over/under-built regions are extracted with
//! fill toolpaths for the under-built ones.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::components::{components_2d, Connectivity};
use crate::error::{Error, Result};
use crate::exec;
use crate::io::{create_writer, fmt_val, write_err};
use crate::quality::{Segment, SegmentMode, Toolpath};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One surface scan taken after depositing `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub t: f64,
    pub layer: usize,
    pub cloud: PointCloud,
}

/// Axis-aligned build volume from the session manifest, mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BuildBox {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceConfig {
    /// Height-map cell size, mm.
    pub cell_size: f64,
    /// Deviation tolerance as a fraction of the nominal layer height.
    pub tau_layer_fraction: f64,
    /// Regions smaller than this many cells are dropped as noise.
    pub min_cells: usize,
    /// Neighbor count for statistical outlier removal.
    pub sor_k: usize,
    /// Outlier threshold in standard deviations above the mean kNN distance.
    pub sor_sigma: f64,
    /// Fill-pass spacing, mm.
    pub hatch_mm: f64,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        Self {
            cell_size: 1.0,
            tau_layer_fraction: 0.25,
            min_cells: 4,
            sor_k: 8,
            sor_sigma: 2.0,
            hatch_mm: 1.0,
        }
    }
}

/// Crops to the build box (dropping substrate returns below the box floor)
/// and removes statistical outliers: points whose mean distance to their k
/// nearest neighbors exceeds the global mean by `sigma_mult` standard
/// deviations. Point order is preserved; the result may be empty.
pub fn filter_point_cloud(
    cloud: &PointCloud,
    build_box: &BuildBox,
    k: usize,
    sigma_mult: f64,
) -> Result<PointCloud> {
    if k == 0 {
        return Err(Error::InvalidArgument("outlier filter needs k >= 1".into()));
    }
    let cropped: Vec<[f64; 3]> =
        cloud.points.iter().copied().filter(|&p| build_box.contains(p)).collect();
    if cropped.len() <= k {
        return Ok(PointCloud { points: cropped });
    }
    // Mean distance to the k nearest neighbors, brute force per point.
    let mean_dists: Vec<f64> = exec::map_indices(cropped.len(), |i| {
        let p = cropped[i];
        let mut dists: Vec<f64> = cropped
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, q)| {
                let dx = p[0] - q[0];
                let dy = p[1] - q[1];
                let dz = p[2] - q[2];
                (dx * dx + dy * dy + dz * dz).sqrt()
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        dists[..k].iter().sum::<f64>() / k as f64
    });
    let n = mean_dists.len() as f64;
    let mean = mean_dists.iter().sum::<f64>() / n;
    let var = mean_dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let threshold = mean + sigma_mult * var.sqrt();
    let points = cropped
        .into_iter()
        .zip(&mean_dists)
        .filter(|(_, &d)| d <= threshold)
        .map(|(p, _)| p)
        .collect();
    Ok(PointCloud { points })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightCell {
    /// Max z of the member points (upper surface), mm.
    pub height: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
    cells: Vec<Option<HeightCell>>,
}

impl HeightMap {
    pub fn get(&self, ix: usize, iy: usize) -> Option<HeightCell> {
        self.cells[iy * self.nx + ix]
    }

    pub fn occupied(&self) -> usize {
        self.cells.iter().flatten().count()
    }
}

/// Rasterizes a cloud onto a grid anchored at the cloud's min corner; cell
/// height is the max z of its points.
pub fn rasterize_heightmap(cloud: &PointCloud, cell_size: f64) -> Result<HeightMap> {
    if !(cell_size > 0.0) {
        return Err(Error::InvalidArgument(format!("cell_size {cell_size} must be > 0")));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let min_x = cloud.points.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let min_y = cloud.points.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let idx = |p: &[f64; 3]| {
        (
            ((p[0] - min_x) / cell_size).floor() as usize,
            ((p[1] - min_y) / cell_size).floor() as usize,
        )
    };
    let (mut nx, mut ny) = (0usize, 0usize);
    for p in &cloud.points {
        let (ix, iy) = idx(p);
        nx = nx.max(ix + 1);
        ny = ny.max(iy + 1);
    }
    let mut cells: Vec<Option<HeightCell>> = vec![None; nx * ny];
    for p in &cloud.points {
        let (ix, iy) = idx(p);
        let cell = &mut cells[iy * nx + ix];
        match cell {
            Some(c) => {
                c.height = c.height.max(p[2]);
                c.count += 1;
            }
            None => *cell = Some(HeightCell { height: p[2], count: 1 }),
        }
    }
    Ok(HeightMap { origin: [min_x, min_y], cell_size, nx, ny, cells })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellClass {
    Ok,
    UnderBuilt,
    OverBuilt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationMap {
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
    pub nominal: f64,
    pub tau: f64,
    /// `None` = no data; otherwise (signed deviation mm, class).
    cells: Vec<Option<(f64, CellClass)>>,
}

impl DeviationMap {
    pub fn get(&self, ix: usize, iy: usize) -> Option<(f64, CellClass)> {
        self.cells[iy * self.nx + ix]
    }
}

/// Signed deviation from the nominal height with a symmetric tolerance
/// band: under-built below -tau, over-built above +tau, ok otherwise
/// (boundary values inclusive-ok).
pub fn deviation_map(h: &HeightMap, nominal: f64, tau: f64) -> Result<DeviationMap> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} must be > 0")));
    }
    let cells = h
        .cells
        .iter()
        .map(|cell| {
            cell.map(|c| {
                let dev = c.height - nominal;
                let class = if dev < -tau {
                    CellClass::UnderBuilt
                } else if dev > tau {
                    CellClass::OverBuilt
                } else {
                    CellClass::Ok
                };
                (dev, class)
            })
        })
        .collect();
    Ok(DeviationMap {
        origin: h.origin,
        cell_size: h.cell_size,
        nx: h.nx,
        ny: h.ny,
        nominal,
        tau,
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionKind {
    UnderBuilt,
    OverBuilt,
}

impl RegionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegionKind::UnderBuilt => "under_built",
            RegionKind::OverBuilt => "over_built",
        }
    }
}

/// A 4-connected defective cell set on the deviation grid, with its traced
/// outline and enough geometry to plan a correction over it.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceRegion {
    pub kind: RegionKind,
    /// (ix, iy) cells, ascending scan order.
    pub cells: Vec<(usize, usize)>,
    /// Closed outline loops in mm, region interior on the left.
    pub boundary: Vec<Vec<[f64; 2]>>,
    /// Signed mean deviation over the cells, mm.
    pub mean_deviation: f64,
    pub origin: [f64; 2],
    pub cell_size: f64,
    /// Nominal surface height the deviations refer to, mm.
    pub nominal_z: f64,
}

impl SurfaceRegion {
    pub fn bbox_cells(&self) -> ((usize, usize), (usize, usize)) {
        let min_x = self.cells.iter().map(|c| c.0).min().unwrap();
        let max_x = self.cells.iter().map(|c| c.0).max().unwrap();
        let min_y = self.cells.iter().map(|c| c.1).min().unwrap();
        let max_y = self.cells.iter().map(|c| c.1).max().unwrap();
        ((min_x, min_y), (max_x, max_y))
    }

    /// Bounding box in mm.
    pub fn bbox_mm(&self) -> ([f64; 2], [f64; 2]) {
        let ((x0, y0), (x1, y1)) = self.bbox_cells();
        (
            [self.origin[0] + x0 as f64 * self.cell_size, self.origin[1] + y0 as f64 * self.cell_size],
            [
                self.origin[0] + (x1 + 1) as f64 * self.cell_size,
                self.origin[1] + (y1 + 1) as f64 * self.cell_size,
            ],
        )
    }
}

/// Extracts per-kind 4-connected regions of defective cells, dropping
/// components smaller than `min_cells`; sorted by cell count descending.
pub fn extract_surface_regions(d: &DeviationMap, min_cells: usize) -> Result<Vec<SurfaceRegion>> {
    if min_cells == 0 {
        return Err(Error::InvalidArgument("min_cells must be >= 1".into()));
    }
    let mut regions = Vec::new();
    for (kind, class) in [
        (RegionKind::UnderBuilt, CellClass::UnderBuilt),
        (RegionKind::OverBuilt, CellClass::OverBuilt),
    ] {
        let fg: Vec<bool> =
            d.cells.iter().map(|c| matches!(c, Some((_, cl)) if *cl == class)).collect();
        for comp in components_2d(d.nx, d.ny, &fg, Connectivity::Four) {
            if comp.len() < min_cells {
                continue;
            }
            let cells: Vec<(usize, usize)> =
                comp.iter().map(|&idx| (idx % d.nx, idx / d.nx)).collect();
            let mean_deviation = comp
                .iter()
                .map(|&idx| d.cells[idx].unwrap().0)
                .sum::<f64>()
                / comp.len() as f64;
            let boundary = trace_boundary(&cells, d.origin, d.cell_size);
            regions.push(SurfaceRegion {
                kind,
                cells,
                boundary,
                mean_deviation,
                origin: d.origin,
                cell_size: d.cell_size,
                nominal_z: d.nominal,
            });
        }
    }
    regions.sort_by_key(|r| (std::cmp::Reverse(r.cells.len()), r.cells[0]));
    Ok(regions)
}

/// Chains the exposed cell edges into closed outline loops (region on the
/// left). Vertices are grid corners converted to mm.
fn trace_boundary(
    cells: &[(usize, usize)],
    origin: [f64; 2],
    cell_size: f64,
) -> Vec<Vec<[f64; 2]>> {
    let set: BTreeSet<(i64, i64)> = cells.iter().map(|&(x, y)| (x as i64, y as i64)).collect();
    // Directed edges between lattice corners; key = start corner.
    let mut edges: std::collections::BTreeMap<(i64, i64), Vec<(i64, i64)>> = Default::default();
    for &(x, y) in &set {
        if !set.contains(&(x, y - 1)) {
            edges.entry((x, y)).or_default().push((x + 1, y));
        }
        if !set.contains(&(x + 1, y)) {
            edges.entry((x + 1, y)).or_default().push((x + 1, y + 1));
        }
        if !set.contains(&(x, y + 1)) {
            edges.entry((x + 1, y + 1)).or_default().push((x, y + 1));
        }
        if !set.contains(&(x - 1, y)) {
            edges.entry((x, y + 1)).or_default().push((x, y));
        }
    }
    let mut loops = Vec::new();
    while let Some((&start, _)) = edges.iter().find(|(_, v)| !v.is_empty()) {
        let mut path = vec![start];
        let mut current = start;
        loop {
            let nexts = edges.get_mut(&current).expect("open boundary chain");
            let next = nexts.remove(0);
            if next == start {
                break;
            }
            path.push(next);
            current = next;
        }
        loops.push(
            path.into_iter()
                .map(|(cx, cy)| {
                    [origin[0] + cx as f64 * cell_size, origin[1] + cy as f64 * cell_size]
                })
                .collect(),
        );
    }
    loops
}

/// Zigzag fill toolpath over an under-built region: passes run along x,
/// stepped along y at `hatch` spacing over the region bounding box. The laser
/// is on exactly where a pass crosses region cells; gap and connector
/// segments stay off. Pass z is the nominal surface height.
pub fn fill_toolpath(
    region: &SurfaceRegion,
    hatch: f64,
    feed_mm_s: f64,
    power_w: f64,
) -> Result<Toolpath> {
    if region.kind != RegionKind::UnderBuilt {
        return Err(Error::InvalidArgument(
            "fill toolpaths are for under-built regions; over-built volumes are machined".into(),
        ));
    }
    if !(hatch > 0.0) {
        return Err(Error::InvalidArgument(format!("hatch {hatch} must be > 0")));
    }
    let segments = raster_cells(
        &region.cells,
        region.origin,
        region.cell_size,
        hatch,
        region.nominal_z,
        SegmentMode::Deposit,
        power_w,
        feed_mm_s,
    );
    Ok(Toolpath { segments })
}

/// Shared zigzag raster over a cell footprint. Produces alternating-direction
/// passes along x with "active" sub-segments where the pass overlaps the cell
/// set. For deposit mode the active sub-segments carry the laser and power;
/// machining segments never do.
#[allow(clippy::too_many_arguments)]
pub(crate) fn raster_cells(
    cells: &[(usize, usize)],
    origin: [f64; 2],
    cell_size: f64,
    hatch: f64,
    z: f64,
    mode: SegmentMode,
    power_w: f64,
    feed_mm_s: f64,
) -> Vec<Segment> {
    let set: BTreeSet<(usize, usize)> = cells.iter().copied().collect();
    let min_ix = cells.iter().map(|c| c.0).min().unwrap();
    let max_ix = cells.iter().map(|c| c.0).max().unwrap();
    let min_iy = cells.iter().map(|c| c.1).min().unwrap();
    let max_iy = cells.iter().map(|c| c.1).max().unwrap();
    let x_left = origin[0] + min_ix as f64 * cell_size;
    let x_right = origin[0] + (max_ix + 1) as f64 * cell_size;
    let y_base = origin[1] + min_iy as f64 * cell_size;
    let extent_y = (max_iy - min_iy + 1) as f64 * cell_size;
    let passes = (extent_y / hatch).ceil() as usize;

    let mut segments = Vec::new();
    let mut prev_end: Option<[f64; 3]> = None;
    for p in 0..passes {
        let y = y_base + (p as f64 + 0.5) * hatch;
        let iy = ((y - origin[1]) / cell_size).floor() as i64;
        // Active x-runs of the pass row.
        let mut runs: Vec<(f64, f64)> = Vec::new();
        if iy >= 0 {
            let mut run_start: Option<usize> = None;
            for ix in min_ix..=max_ix + 1 {
                let inside = ix <= max_ix && set.contains(&(ix, iy as usize));
                match (inside, run_start) {
                    (true, None) => run_start = Some(ix),
                    (false, Some(s)) => {
                        runs.push((
                            origin[0] + s as f64 * cell_size,
                            origin[0] + ix as f64 * cell_size,
                        ));
                        run_start = None;
                    }
                    _ => {}
                }
            }
        }
        let leftward = p % 2 == 1;
        if leftward {
            runs.reverse();
            runs = runs.iter().map(|&(a, b)| (b, a)).collect();
        }
        let (pass_start, pass_end) =
            if leftward { (x_right, x_left) } else { (x_left, x_right) };
        // Connector from the previous pass end to this pass start.
        let first = [pass_start, y, z];
        if let Some(prev) = prev_end {
            segments.push(Segment {
                mode,
                start: prev,
                end: first,
                laser_on: false,
                power_w: 0.0,
                feed_mm_s,
            });
        }
        let mut cursor = first;
        for (a, b) in runs {
            if (cursor[0] - a).abs() > 1e-12 {
                segments.push(Segment {
                    mode,
                    start: cursor,
                    end: [a, y, z],
                    laser_on: false,
                    power_w: 0.0,
                    feed_mm_s,
                });
            }
            let on = mode == SegmentMode::Deposit;
            segments.push(Segment {
                mode,
                start: [a, y, z],
                end: [b, y, z],
                laser_on: on,
                power_w: if on { power_w } else { 0.0 },
                feed_mm_s,
            });
            cursor = [b, y, z];
        }
        if (cursor[0] - pass_end).abs() > 1e-12 {
            segments.push(Segment {
                mode,
                start: cursor,
                end: [pass_end, y, z],
                laser_on: false,
                power_w: 0.0,
                feed_mm_s,
            });
        }
        prev_end = Some([pass_end, y, z]);
    }
    segments
}

pub const SURFACE_REGION_CSV_HEADER: &str =
    "region_id,kind,cells,mean_dev_mm,min_x,min_y,max_x,max_y";

pub fn write_surface_regions_csv(regions: &[SurfaceRegion], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut w = create_writer(path)?;
    writeln!(w, "{SURFACE_REGION_CSV_HEADER}").map_err(|e| write_err(path, e))?;
    for (id, r) in regions.iter().enumerate() {
        let (lo, hi) = r.bbox_mm();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            id,
            r.kind.as_str(),
            r.cells.len(),
            fmt_val(r.mean_deviation),
            fmt_val(lo[0]),
            fmt_val(lo[1]),
            fmt_val(hi[0]),
            fmt_val(hi[1])
        )
        .map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| write_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn the_box() -> BuildBox {
        BuildBox { min: [0.0, 0.0, 0.0], max: [50.0, 20.0, 20.0] }
    }

    fn plane_cloud(z: f64) -> PointCloud {
        let mut points = Vec::new();
        for i in 0..20 {
            for j in 0..8 {
                points.push([1.0 + i as f64, 1.0 + j as f64, z]);
            }
        }
        PointCloud { points }
    }

    // ----- filtering -----

    #[test]
    fn substrate_below_box_floor_is_cropped_away() {
        let cloud = PointCloud {
            points: (0..30).map(|i| [i as f64, 2.0, -1.0]).collect(),
        };
        let out = filter_point_cloud(&cloud, &the_box(), 4, 2.0).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn clean_in_box_grid_passes_through() {
        let cloud = plane_cloud(5.0);
        let out = filter_point_cloud(&cloud, &the_box(), 8, 2.0).unwrap();
        assert_eq!(out.points, cloud.points);
    }

    #[test]
    fn isolated_spike_is_removed_at_oracle_threshold() {
        let mut cloud = plane_cloud(5.0);
        cloud.points.push([10.0, 4.0, 15.0]); // 10 mm above the plane
        let k = 8;
        let sigma = 2.0;
        let out = filter_point_cloud(&cloud, &the_box(), k, sigma).unwrap();
        assert_eq!(out.len(), cloud.len() - 1);
        assert!(out.points.iter().all(|p| p[2] == 5.0));

        // Brute-force oracle: recompute every kNN mean distance and the
        // global threshold, then check the spike is the one point above it.
        let dist = |a: [f64; 3], b: [f64; 3]| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        let mut means = Vec::new();
        for (i, &p) in cloud.points.iter().enumerate() {
            let mut ds: Vec<f64> = cloud
                .points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &q)| dist(p, q))
                .collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            means.push(ds[..k].iter().sum::<f64>() / k as f64);
        }
        let n = means.len() as f64;
        let mu = means.iter().sum::<f64>() / n;
        let sd = (means.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n).sqrt();
        let above: Vec<usize> = (0..means.len())
            .filter(|&i| means[i] > mu + sigma * sd)
            .collect();
        assert_eq!(above, vec![cloud.len() - 1]);
    }

    #[test]
    fn filter_output_is_subset_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cloud = PointCloud {
            points: (0..200)
                .map(|_| {
                    [
                        rng.gen_range(-5.0..55.0),
                        rng.gen_range(-5.0..25.0),
                        rng.gen_range(-2.0..22.0),
                    ]
                })
                .collect(),
        };
        let out = filter_point_cloud(&cloud, &the_box(), 6, 1.5).unwrap();
        let mut iter = cloud.points.iter();
        for p in &out.points {
            assert!(iter.any(|q| q == p), "filter invented or reordered a point");
        }
    }

    // ----- height map -----

    #[test]
    fn single_point_occupies_one_cell() {
        let cloud = PointCloud { points: vec![[3.2, 4.7, 9.0]] };
        let h = rasterize_heightmap(&cloud, 1.0).unwrap();
        assert_eq!((h.nx, h.ny), (1, 1));
        let c = h.get(0, 0).unwrap();
        assert_eq!(c.height, 9.0);
        assert_eq!(c.count, 1);
    }

    #[test]
    fn max_z_wins_within_a_cell() {
        let cloud = PointCloud { points: vec![[0.2, 0.2, 3.0], [0.7, 0.4, 5.0]] };
        let h = rasterize_heightmap(&cloud, 1.0).unwrap();
        assert_eq!(h.get(0, 0).unwrap().height, 5.0);
        assert_eq!(h.get(0, 0).unwrap().count, 2);
    }

    #[test]
    fn unit_grid_under_two_mm_cells_counts_four_points_each() {
        let mut points = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                points.push([0.5 + i as f64, 0.5 + j as f64, 10.0]);
            }
        }
        let h = rasterize_heightmap(&PointCloud { points }, 2.0).unwrap();
        assert_eq!((h.nx, h.ny), (4, 4));
        for iy in 0..4 {
            for ix in 0..4 {
                let c = h.get(ix, iy).unwrap();
                assert_eq!(c.height, 10.0);
                assert_eq!(c.count, 4);
            }
        }
    }

    #[test]
    fn empty_cloud_is_an_error() {
        assert!(matches!(
            rasterize_heightmap(&PointCloud::default(), 1.0),
            Err(Error::EmptyCloud)
        ));
    }

    // ----- deviation -----

    fn flat_heightmap(nx: usize, ny: usize, z: f64) -> HeightMap {
        HeightMap {
            origin: [0.0, 0.0],
            cell_size: 1.0,
            nx,
            ny,
            cells: vec![Some(HeightCell { height: z, count: 1 }); nx * ny],
        }
    }

    #[test]
    fn deviation_classes_and_boundary_convention() {
        let mut h = flat_heightmap(4, 1, 10.0);
        h.cells[1] = Some(HeightCell { height: 10.0 - 0.5, count: 1 }); // -2 tau
        h.cells[2] = Some(HeightCell { height: 10.0 + 0.25, count: 1 }); // exactly +tau
        h.cells[3] = None;
        let d = deviation_map(&h, 10.0, 0.25).unwrap();
        assert_eq!(d.get(0, 0).unwrap().1, CellClass::Ok);
        assert_eq!(d.get(1, 0).unwrap().1, CellClass::UnderBuilt);
        assert_eq!(d.get(2, 0).unwrap().1, CellClass::Ok);
        assert!(d.get(3, 0).is_none());
    }

    #[test]
    fn classification_is_exhaustive_and_exclusive() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut h = flat_heightmap(10, 10, 10.0);
        for c in h.cells.iter_mut() {
            if rng.gen_bool(0.1) {
                *c = None;
            } else {
                *c = Some(HeightCell { height: rng.gen_range(8.0..12.0), count: 1 });
            }
        }
        let d = deviation_map(&h, 10.0, 0.25).unwrap();
        for iy in 0..10 {
            for ix in 0..10 {
                match (h.get(ix, iy), d.get(ix, iy)) {
                    (None, None) => {}
                    (Some(c), Some((dev, class))) => {
                        assert_eq!(dev, c.height - 10.0);
                        let expect = if dev < -0.25 {
                            CellClass::UnderBuilt
                        } else if dev > 0.25 {
                            CellClass::OverBuilt
                        } else {
                            CellClass::Ok
                        };
                        assert_eq!(class, expect);
                    }
                    other => panic!("data presence mismatch: {other:?}"),
                }
            }
        }
    }

    // ----- regions -----

    #[test]
    fn flat_surface_has_no_regions() {
        let h = flat_heightmap(6, 6, 10.0);
        let d = deviation_map(&h, 10.0, 0.25).unwrap();
        assert!(extract_surface_regions(&d, 1).unwrap().is_empty());
    }

    #[test]
    fn square_dent_traces_a_square_boundary() {
        let mut h = flat_heightmap(8, 8, 10.0);
        for y in 2..5 {
            for x in 3..6 {
                h.cells[y * 8 + x] = Some(HeightCell { height: 9.0, count: 1 });
            }
        }
        let d = deviation_map(&h, 10.0, 0.25).unwrap();
        let regions = extract_surface_regions(&d, 1).unwrap();
        assert_eq!(regions.len(), 1);
        let r = &regions[0];
        assert_eq!(r.kind, RegionKind::UnderBuilt);
        assert_eq!(r.cells.len(), 9);
        assert_relative_eq!(r.mean_deviation, -1.0, max_relative = 1e-12);
        assert_eq!(r.boundary.len(), 1);
        assert_eq!(r.boundary[0].len(), 12); // 3x3 block outline has 12 corners
    }

    #[test]
    fn region_partition_matches_component_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut h = flat_heightmap(16, 12, 10.0);
        for c in h.cells.iter_mut() {
            let roll: f64 = rng.gen();
            *c = if roll < 0.25 {
                Some(HeightCell { height: 9.0, count: 1 }) // under
            } else if roll < 0.35 {
                Some(HeightCell { height: 11.0, count: 1 }) // over
            } else {
                Some(HeightCell { height: 10.0, count: 1 })
            };
        }
        let d = deviation_map(&h, 10.0, 0.25).unwrap();
        let regions = extract_surface_regions(&d, 1).unwrap();
        // Union of region cells per kind == defective cell sets; disjoint.
        let mut seen = BTreeSet::new();
        for r in &regions {
            for &c in &r.cells {
                assert!(seen.insert((r.kind.as_str(), c)), "overlapping regions");
                let class = d.get(c.0, c.1).unwrap().1;
                let expect = match r.kind {
                    RegionKind::UnderBuilt => CellClass::UnderBuilt,
                    RegionKind::OverBuilt => CellClass::OverBuilt,
                };
                assert_eq!(class, expect);
            }
        }
        let defective = (0..12 * 16)
            .filter(|&i| {
                matches!(d.cells[i], Some((_, CellClass::UnderBuilt | CellClass::OverBuilt)))
            })
            .count();
        let covered: usize = regions.iter().map(|r| r.cells.len()).sum();
        assert_eq!(covered, defective);
        // Sorted by size descending.
        for pair in regions.windows(2) {
            assert!(pair[0].cells.len() >= pair[1].cells.len());
        }
    }

    #[test]
    fn min_cells_suppresses_specks() {
        let mut h = flat_heightmap(8, 8, 10.0);
        h.cells[0] = Some(HeightCell { height: 9.0, count: 1 });
        let d = deviation_map(&h, 10.0, 0.25).unwrap();
        assert!(extract_surface_regions(&d, 4).unwrap().is_empty());
    }

    // ----- fill toolpath -----

    fn region_from_cells(cells: Vec<(usize, usize)>) -> SurfaceRegion {
        SurfaceRegion {
            kind: RegionKind::UnderBuilt,
            cells,
            boundary: Vec::new(),
            mean_deviation: -0.5,
            origin: [0.0, 0.0],
            cell_size: 1.0,
            nominal_z: 10.0,
        }
    }

    #[test]
    fn square_region_pass_count_and_full_coverage() {
        let mut cells = Vec::new();
        for y in 0..10 {
            for x in 0..10 {
                cells.push((x, y));
            }
        }
        let tp = fill_toolpath(&region_from_cells(cells), 1.0, 8.0, 400.0).unwrap();
        let on: Vec<&Segment> = tp.segments.iter().filter(|s| s.laser_on).collect();
        assert_eq!(on.len(), 10, "one full-width run per pass");
        for s in &on {
            assert_relative_eq!((s.end[0] - s.start[0]).abs(), 10.0, max_relative = 1e-12);
            assert_eq!(s.power_w, 400.0);
            assert_eq!(s.start[2], 10.0);
        }
        // Alternating direction.
        assert!(on[0].end[0] > on[0].start[0]);
        assert!(on[1].end[0] < on[1].start[0]);
    }

    #[test]
    fn l_shaped_region_gets_laser_off_gap() {
        // Row 0 full, row 1 only right part -> left gap on pass 1... build an
        // H-gap instead: row with cells 0..3 and 7..10.
        let mut cells = Vec::new();
        for x in 0..10 {
            cells.push((x, 0));
        }
        for x in (0..3).chain(7..10) {
            cells.push((x, 1));
        }
        let tp = fill_toolpath(&region_from_cells(cells), 1.0, 8.0, 400.0).unwrap();
        let pass1: Vec<&Segment> = tp
            .segments
            .iter()
            .filter(|s| (s.start[1] - 1.5).abs() < 1e-9 && s.start[1] == s.end[1])
            .collect();
        let ons = pass1.iter().filter(|s| s.laser_on).count();
        let offs = pass1.iter().filter(|s| !s.laser_on).count();
        assert_eq!(ons, 2, "two runs split by the notch");
        assert!(offs >= 1, "gap segment must stay laser-off");
    }

    #[test]
    fn empty_row_pass_is_fully_off() {
        // Two cell rows separated by an empty band; hatch smaller than the
        // band so one pass lands inside it.
        let cells = vec![(0, 0), (1, 0), (0, 4), (1, 4)];
        let tp = fill_toolpath(&region_from_cells(cells), 1.0, 8.0, 400.0).unwrap();
        let mid_pass: Vec<&Segment> = tp
            .segments
            .iter()
            .filter(|s| (s.start[1] - 2.5).abs() < 1e-9 && s.start[1] == s.end[1])
            .collect();
        assert!(!mid_pass.is_empty());
        assert!(mid_pass.iter().all(|s| !s.laser_on));
    }

    #[test]
    fn laser_on_midpoints_lie_inside_region_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut cells = BTreeSet::new();
        for _ in 0..40 {
            cells.insert((rng.gen_range(0..12usize), rng.gen_range(0..9usize)));
        }
        let cells: Vec<(usize, usize)> = cells.into_iter().collect();
        let region = region_from_cells(cells.clone());
        let set: BTreeSet<(usize, usize)> = cells.into_iter().collect();
        let tp = fill_toolpath(&region, 1.0, 8.0, 400.0).unwrap();
        let mut on_len = 0.0;
        for s in tp.segments.iter().filter(|s| s.laser_on) {
            let mx = (s.start[0] + s.end[0]) / 2.0;
            let my = (s.start[1] + s.end[1]) / 2.0;
            let cell = (mx.floor() as usize, my.floor() as usize);
            assert!(set.contains(&cell), "midpoint ({mx},{my}) outside region");
            on_len += (s.end[0] - s.start[0]).abs();
        }
        let area = region.cells.len() as f64; // cell_size 1, hatch 1
        assert!(on_len >= area / 1.0 - 12.0, "on-length {on_len} vs area {area}");
    }

    #[test]
    fn over_built_region_is_rejected() {
        let mut r = region_from_cells(vec![(0, 0)]);
        r.kind = RegionKind::OverBuilt;
        assert!(fill_toolpath(&r, 1.0, 8.0, 400.0).is_err());
    }
}
