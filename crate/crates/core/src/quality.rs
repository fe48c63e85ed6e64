//! Location-specific quality: rule-based voxel labeling from melt-pool
//! statistics, a nearest-neighbor baseline classifier, 3D defect region
//! extraction, and correction planning with machining / deposition toolpaths.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::components::components_3d_sparse;
use crate::error::{Error, Result};
use crate::exec;
use crate::fusion::{DigitalTwin, VoxelKey, CH_MP_AREA, CH_MP_WIDTH};
use crate::io::{create_writer, fmt_val, write_err};
use crate::surface::{RegionKind, SurfaceRegion};

/// Voxel quality verdicts. The enum order is also the deterministic
/// tie-break order for classifier votes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QualityLabel {
    Ok,
    KeyholePore,
    Crack,
    UnderBuilt,
    OverBuilt,
}

impl QualityLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            QualityLabel::Ok => "ok",
            QualityLabel::KeyholePore => "keyhole_pore",
            QualityLabel::Crack => "crack",
            QualityLabel::UnderBuilt => "under_built",
            QualityLabel::OverBuilt => "over_built",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "ok" => Some(QualityLabel::Ok),
            "keyhole_pore" => Some(QualityLabel::KeyholePore),
            "crack" => Some(QualityLabel::Crack),
            "under_built" => Some(QualityLabel::UnderBuilt),
            "over_built" => Some(QualityLabel::OverBuilt),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Rule-based labeling
// ---------------------------------------------------------------------------

/// Thresholds for the melt-pool rules. Crack: an isolated spike of the voxel
/// mean melt-pool width against its own layer's robust baseline. Keyhole:
/// elevated melt-pool area against the whole-build baseline, in the upper
/// half of the occupied layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleThresholds {
    pub width_spike_z: f64,
    pub area_high_z: f64,
    /// A layer whose flagged fraction reaches this is not treated as a spike
    /// (sustained shifts are not cracks).
    pub crack_isolation_fraction: f64,
    /// Layers with fewer voxels than this keep their baseline but skip
    /// spike detection (the statistics are too thin).
    pub min_layer_voxels: usize,
}

impl Default for RuleThresholds {
    fn default() -> Self {
        Self {
            width_spike_z: 3.0,
            area_high_z: 2.0,
            crack_isolation_fraction: 0.25,
            min_layer_voxels: 8,
        }
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Median and MAD-based robust scale (1.4826 * MAD); `None` when the spread
/// is degenerate and z-scores would be meaningless.
fn robust_baseline(values: &[f64]) -> Option<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = median(&sorted);
    let mut dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let scale = 1.4826 * median(&dev);
    if scale <= 1e-9 * med.abs().max(1.0) {
        None
    } else {
        Some((med, scale))
    }
}

/// Applies the melt-pool rules to every occupied voxel, in place. Voxels
/// without melt-pool data keep their previous label.
pub fn label_rules(twin: &mut DigitalTwin, th: &RuleThresholds) -> Result<()> {
    if twin.voxels.is_empty() {
        return Err(Error::EmptyTwin);
    }
    let entries: Vec<(VoxelKey, f64, f64)> = twin
        .voxels
        .iter()
        .filter(|(_, v)| v.channels[CH_MP_WIDTH].n > 0)
        .map(|(&k, v)| (k, v.channels[CH_MP_WIDTH].mean, v.channels[CH_MP_AREA].mean))
        .collect();
    if entries.is_empty() {
        return Ok(());
    }

    let mut crack: Vec<VoxelKey> = Vec::new();
    let mut by_layer: BTreeMap<usize, Vec<(VoxelKey, f64)>> = BTreeMap::new();
    for &(key, width, _) in &entries {
        by_layer.entry(key.0).or_default().push((key, width));
    }
    for items in by_layer.values() {
        if items.len() < th.min_layer_voxels {
            continue;
        }
        let widths: Vec<f64> = items.iter().map(|i| i.1).collect();
        let Some((med, scale)) = robust_baseline(&widths) else { continue };
        let flagged: Vec<VoxelKey> = items
            .iter()
            .filter(|(_, w)| (w - med) / scale > th.width_spike_z)
            .map(|(k, _)| *k)
            .collect();
        if flagged.is_empty() {
            continue;
        }
        if (flagged.len() as f64) < th.crack_isolation_fraction * items.len() as f64 {
            crack.extend(flagged);
        }
    }

    // Keyhole: whole-build area baseline, upper half of occupied layers only.
    let mut keyhole: Vec<VoxelKey> = Vec::new();
    let layers = twin.occupied_layers();
    let upper_cutoff = layers[layers.len() / 2];
    let areas: Vec<f64> = entries.iter().map(|e| e.2).collect();
    if let Some((med, scale)) = robust_baseline(&areas) {
        for &(key, _, area) in &entries {
            if key.0 >= upper_cutoff && (area - med) / scale > th.area_high_z {
                keyhole.push(key);
            }
        }
    }

    for (_, v) in twin.voxels.iter_mut() {
        v.label = QualityLabel::Ok;
    }
    for key in keyhole {
        twin.voxels.get_mut(&key).unwrap().label = QualityLabel::KeyholePore;
    }
    // Crack takes precedence where both rules fire.
    for key in crack {
        twin.voxels.get_mut(&key).unwrap().label = QualityLabel::Crack;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Nearest-neighbor baseline classifier
// ---------------------------------------------------------------------------

/// k-nearest-neighbor classifier over standardized features. Deterministic:
/// neighbor ties resolve by training index, vote ties by summed distance and
/// then by label order.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnClassifier {
    k: usize,
    means: Vec<f64>,
    stds: Vec<f64>,
    /// Feature indices kept after dropping zero-variance columns.
    kept: Vec<usize>,
    /// Standardized training points, kept columns only.
    train: Vec<Vec<f64>>,
    labels: Vec<QualityLabel>,
    /// Zero-variance columns dropped at fit time (for caller warnings).
    pub dropped_features: Vec<usize>,
}

pub fn fit_knn(features: &[Vec<f64>], labels: &[QualityLabel], k: usize) -> Result<KnnClassifier> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if features.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} training records",
            features.len()
        )));
    }
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().position(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch(format!(
            "feature row {bad} has {} values, expected {dim}",
            features[bad].len()
        )));
    }
    let n = features.len() as f64;
    let mut means = vec![0.0; dim];
    for row in features {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut stds = vec![0.0; dim];
    for row in features {
        for (s, (v, m)) in stds.iter_mut().zip(row.iter().zip(&means)) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut stds {
        *s = s.sqrt();
    }
    let kept: Vec<usize> = (0..dim).filter(|&i| stds[i] > 1e-12).collect();
    let dropped_features: Vec<usize> = (0..dim).filter(|&i| stds[i] <= 1e-12).collect();
    let train = features
        .iter()
        .map(|row| kept.iter().map(|&i| (row[i] - means[i]) / stds[i]).collect())
        .collect();
    Ok(KnnClassifier {
        k,
        means,
        stds,
        kept,
        train,
        labels: labels.to_vec(),
        dropped_features,
    })
}

impl KnnClassifier {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn feature_dim(&self) -> usize {
        self.means.len()
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        self.kept.iter().map(|&i| (raw[i] - self.means[i]) / self.stds[i]).collect()
    }

    /// Majority label among the k nearest training points.
    pub fn predict_point(&self, raw: &[f64]) -> Result<QualityLabel> {
        if raw.len() != self.feature_dim() {
            return Err(Error::SchemaMismatch { expected: self.feature_dim(), got: raw.len() });
        }
        let q = self.standardize(raw);
        let dist = |row: &[f64]| -> f64 {
            row.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        };
        let mut order: Vec<(f64, usize)> =
            self.train.iter().enumerate().map(|(i, row)| (dist(row), i)).collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        };
        if self.k < order.len() {
            order.select_nth_unstable_by(self.k - 1, cmp);
            order.truncate(self.k);
        }
        let mut votes: BTreeMap<QualityLabel, (usize, f64)> = BTreeMap::new();
        for &(d, i) in &order {
            let e = votes.entry(self.labels[i]).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += d;
        }
        // Max count, then min summed distance, then label order.
        let winner = votes
            .iter()
            .min_by(|(la, (ca, sa)), (lb, (cb, sb))| {
                cb.cmp(ca)
                    .then(sa.partial_cmp(sb).unwrap())
                    .then(la.cmp(lb))
            })
            .map(|(l, _)| *l)
            .expect("k >= 1 voters");
        Ok(winner)
    }

    /// Labels every occupied voxel from its 35 per-channel mean values.
    pub fn predict_twin(&self, twin: &mut DigitalTwin) -> Result<()> {
        let rows: Vec<(VoxelKey, Vec<f64>)> = twin
            .voxels
            .iter()
            .map(|(&k, v)| (k, v.channels.iter().map(|c| c.mean).collect()))
            .collect();
        let labels: Vec<Result<QualityLabel>> =
            exec::map_ordered(&rows, |(_, feats)| self.predict_point(feats));
        for ((key, _), label) in rows.iter().zip(labels) {
            twin.voxels.get_mut(key).unwrap().label = label?;
        }
        Ok(())
    }

    /// Persists standardization parameters plus raw training rows.
    pub fn save_csv(&self, path: &Path, raw_features: &[Vec<f64>]) -> Result<()> {
        use std::io::Write;
        debug_assert_eq!(raw_features.len(), self.labels.len());
        let mut w = create_writer(path)?;
        writeln!(w, "k,{}", self.k).map_err(|e| write_err(path, e))?;
        writeln!(w, "features,{}", self.feature_dim()).map_err(|e| write_err(path, e))?;
        let join = |vals: &[f64]| vals.iter().map(|v| fmt_val(*v)).collect::<Vec<_>>().join(",");
        writeln!(w, "means,{}", join(&self.means)).map_err(|e| write_err(path, e))?;
        writeln!(w, "stds,{}", join(&self.stds)).map_err(|e| write_err(path, e))?;
        for (row, label) in raw_features.iter().zip(&self.labels) {
            writeln!(w, "row,{},{}", label.as_str(), join(row)).map_err(|e| write_err(path, e))?;
        }
        w.flush().map_err(|e| write_err(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<KnnClassifier> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut k = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let tag = fields.next().unwrap_or_default();
            match tag {
                "k" => {
                    k = Some(crate::io::parse_usize(path, i + 1, "k", fields.next().unwrap_or(""))?)
                }
                "features" | "means" | "stds" => {} // re-derived from the rows
                "row" => {
                    let label_s = fields.next().unwrap_or_default();
                    let label = QualityLabel::parse(label_s).ok_or_else(|| {
                        Error::parse(path, i + 1, format!("unknown label {label_s:?}"))
                    })?;
                    let mut row = Vec::new();
                    for f in fields {
                        row.push(crate::io::parse_f64(path, i + 1, "feature", f)?);
                    }
                    rows.push(row);
                    labels.push(label);
                }
                other => {
                    return Err(Error::parse(path, i + 1, format!("unknown record {other:?}")))
                }
            }
        }
        let k = k.ok_or_else(|| Error::parse(path, 1, "missing k record"))?;
        fit_knn(&rows, &labels, k)
    }
}

// ---------------------------------------------------------------------------
// 3D defect regions
// ---------------------------------------------------------------------------

/// A face-connected set of same-label non-ok voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectRegion3D {
    pub label: QualityLabel,
    /// Sorted (iz, iy, ix) keys.
    pub voxels: Vec<VoxelKey>,
    /// Region voxels with at least one face neighbor outside the region.
    pub boundary: Vec<VoxelKey>,
    pub min_layer: usize,
    pub max_layer: usize,
    pub centroid_mm: [f64; 3],
}

/// 6-connected components of non-ok voxels, one region per component,
/// sorted by voxel count descending.
pub fn extract_regions_3d(twin: &DigitalTwin) -> Vec<DefectRegion3D> {
    let mut regions = Vec::new();
    for label in [
        QualityLabel::KeyholePore,
        QualityLabel::Crack,
        QualityLabel::UnderBuilt,
        QualityLabel::OverBuilt,
    ] {
        let cells: BTreeMap<VoxelKey, ()> = twin
            .voxels
            .iter()
            .filter(|(_, v)| v.label == label)
            .map(|(&k, _)| (k, ()))
            .collect();
        if cells.is_empty() {
            continue;
        }
        for comp in components_3d_sparse(&cells) {
            let set: std::collections::BTreeSet<VoxelKey> = comp.iter().copied().collect();
            let boundary: Vec<VoxelKey> = comp
                .iter()
                .filter(|&&(z, y, x)| {
                    [
                        (z as i64 + 1, y as i64, x as i64),
                        (z as i64 - 1, y as i64, x as i64),
                        (z as i64, y as i64 + 1, x as i64),
                        (z as i64, y as i64 - 1, x as i64),
                        (z as i64, y as i64, x as i64 + 1),
                        (z as i64, y as i64, x as i64 - 1),
                    ]
                    .iter()
                    .any(|&(nz, ny, nx)| {
                        nz < 0
                            || ny < 0
                            || nx < 0
                            || !set.contains(&(nz as usize, ny as usize, nx as usize))
                    })
                })
                .copied()
                .collect();
            let n = comp.len() as f64;
            let mut centroid = [0.0; 3];
            for &key in &comp {
                let c = twin.voxel_center(key);
                for (acc, v) in centroid.iter_mut().zip(c) {
                    *acc += v / n;
                }
            }
            regions.push(DefectRegion3D {
                label,
                min_layer: comp.iter().map(|k| k.0).min().unwrap(),
                max_layer: comp.iter().map(|k| k.0).max().unwrap(),
                centroid_mm: centroid,
                boundary,
                voxels: comp,
            });
        }
    }
    regions.sort_by_key(|r| (std::cmp::Reverse(r.voxels.len()), r.voxels[0]));
    regions
}

pub const REGION3D_CSV_HEADER: &str = "region_id,label,voxels,cx,cy,cz,min_layer,max_layer";

pub fn write_regions_3d_csv(regions: &[DefectRegion3D], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = create_writer(path)?;
    writeln!(w, "{REGION3D_CSV_HEADER}").map_err(|e| write_err(path, e))?;
    for (id, r) in regions.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            id,
            r.label.as_str(),
            r.voxels.len(),
            fmt_val(r.centroid_mm[0]),
            fmt_val(r.centroid_mm[1]),
            fmt_val(r.centroid_mm[2]),
            r.min_layer,
            r.max_layer
        )
        .map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| write_err(path, e))
}

// ---------------------------------------------------------------------------
// Correction planning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionKind {
    MachineRemove,
    DepositRestore,
}

impl ActionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ActionKind::MachineRemove => "machine_remove",
            ActionKind::DepositRestore => "deposit_restore",
        }
    }
}

/// XY cell footprint an action rasters over.
#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub cells: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionAction {
    pub kind: ActionKind,
    pub label: QualityLabel,
    pub footprint: Footprint,
    /// Bottom of the affected volume, mm.
    pub z_floor: f64,
    /// Removal depth or restoration height, mm.
    pub depth_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrectionPlan {
    pub actions: Vec<CorrectionAction>,
}

/// Geometry the planner needs from the twin and manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionGeometry {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub layer_height_mm: f64,
    /// Top surface of the topmost occupied layer, mm.
    pub top_z: f64,
}

/// Builds the correction plan: internal defects are machined away from the
/// part top down to the region floor and the removed height is re-deposited;
/// over-built surface regions are machined by their mean positive deviation;
/// under-built ones are re-deposited by theirs. Volumes are ordered bottom-up
/// and removal always precedes restoration of the same volume.
pub fn plan_correction(
    regions: &[DefectRegion3D],
    surface_regions: &[SurfaceRegion],
    geom: &CorrectionGeometry,
) -> CorrectionPlan {
    // (z_floor, sequence of actions for that volume)
    let mut groups: Vec<(f64, Vec<CorrectionAction>)> = Vec::new();

    for r in regions {
        let mut xy: Vec<(usize, usize)> =
            r.voxels.iter().map(|&(_, iy, ix)| (ix, iy)).collect();
        xy.sort_unstable();
        xy.dedup();
        let footprint = Footprint {
            origin: [geom.origin[0], geom.origin[1]],
            cell_size: geom.voxel_size,
            cells: xy,
        };
        let z_floor = geom.origin[2] + r.min_layer as f64 * geom.voxel_size;
        let depth = geom.top_z - z_floor;
        groups.push((
            z_floor,
            vec![
                CorrectionAction {
                    kind: ActionKind::MachineRemove,
                    label: r.label,
                    footprint: footprint.clone(),
                    z_floor,
                    depth_mm: depth,
                },
                CorrectionAction {
                    kind: ActionKind::DepositRestore,
                    label: r.label,
                    footprint,
                    z_floor,
                    depth_mm: depth,
                },
            ],
        ));
    }

    for r in surface_regions {
        let footprint = Footprint {
            origin: r.origin,
            cell_size: r.cell_size,
            cells: r.cells.clone(),
        };
        match r.kind {
            RegionKind::OverBuilt => {
                let depth = r.mean_deviation.max(0.0);
                groups.push((
                    r.nominal_z,
                    vec![CorrectionAction {
                        kind: ActionKind::MachineRemove,
                        label: QualityLabel::OverBuilt,
                        footprint,
                        z_floor: r.nominal_z,
                        depth_mm: depth,
                    }],
                ));
            }
            RegionKind::UnderBuilt => {
                let depth = (-r.mean_deviation).max(0.0);
                let z_floor = r.nominal_z - depth;
                groups.push((
                    z_floor,
                    vec![CorrectionAction {
                        kind: ActionKind::DepositRestore,
                        label: QualityLabel::UnderBuilt,
                        footprint,
                        z_floor,
                        depth_mm: depth,
                    }],
                ));
            }
        }
    }

    groups.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    CorrectionPlan { actions: groups.into_iter().flat_map(|(_, acts)| acts).collect() }
}

// ---------------------------------------------------------------------------
// Toolpath generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentMode {
    Deposit,
    Machine,
}

impl SegmentMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SegmentMode::Deposit => "DEPOSIT",
            SegmentMode::Machine => "MACHINE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "DEPOSIT" => Some(SegmentMode::Deposit),
            "MACHINE" => Some(SegmentMode::Machine),
            _ => None,
        }
    }
}

/// One straight toolpath move. `power_w` is zero whenever the laser is off;
/// machining segments never carry laser power.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub mode: SegmentMode,
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub laser_on: bool,
    pub power_w: f64,
    pub feed_mm_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Toolpath {
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToolpathParams {
    pub hatch_mm: f64,
    pub base_power_w: f64,
    pub deposit_feed_mm_s: f64,
    pub machine_feed_mm_s: f64,
    /// Gain of the deviation-proportional deposit power scaling.
    pub power_gain: f64,
    pub layer_height_mm: f64,
}

impl Default for ToolpathParams {
    fn default() -> Self {
        Self {
            hatch_mm: 1.0,
            base_power_w: 2000.0,
            deposit_feed_mm_s: 20.0,
            machine_feed_mm_s: 10.0,
            power_gain: 0.1,
            layer_height_mm: 0.5,
        }
    }
}

fn layer_count(depth: f64, layer_height: f64) -> usize {
    ((depth / layer_height - 1e-9).ceil() as usize).max(1)
}

/// Expands a correction plan into motion segments. Machining rasters top-down
/// per affected layer with the laser off and zero power; restoration rasters
/// bottom-up with deposit power scaled by
/// `clamp(1 + gain * (depth / layer_height - 1), 0.8, 1.2)`.
pub fn generate_toolpath(plan: &CorrectionPlan, params: &ToolpathParams) -> Result<Toolpath> {
    if plan.actions.is_empty() {
        return Err(Error::InvalidArgument("empty correction plan".into()));
    }
    let lh = params.layer_height_mm;
    let mut segments = Vec::new();
    for action in &plan.actions {
        if action.depth_mm <= 0.0 || action.footprint.cells.is_empty() {
            continue;
        }
        let n_layers = layer_count(action.depth_mm, lh);
        match action.kind {
            ActionKind::MachineRemove => {
                for i in 0..n_layers {
                    let z = (action.z_floor + action.depth_mm - (i + 1) as f64 * lh)
                        .max(action.z_floor);
                    segments.extend(crate::surface::raster_cells(
                        &action.footprint.cells,
                        action.footprint.origin,
                        action.footprint.cell_size,
                        params.hatch_mm,
                        z,
                        SegmentMode::Machine,
                        0.0,
                        params.machine_feed_mm_s,
                    ));
                }
            }
            ActionKind::DepositRestore => {
                let multiplier =
                    (1.0 + params.power_gain * (action.depth_mm / lh - 1.0)).clamp(0.8, 1.2);
                let power = params.base_power_w * multiplier;
                for i in 0..n_layers {
                    let z = (action.z_floor + (i + 1) as f64 * lh)
                        .min(action.z_floor + action.depth_mm);
                    segments.extend(crate::surface::raster_cells(
                        &action.footprint.cells,
                        action.footprint.origin,
                        action.footprint.cell_size,
                        params.hatch_mm,
                        z,
                        SegmentMode::Deposit,
                        power,
                        params.deposit_feed_mm_s,
                    ));
                }
            }
        }
    }
    Ok(Toolpath { segments })
}

pub const TOOLPATH_CSV_HEADER: &str = "seq,mode,x0,y0,z0,x1,y1,z1,laser_on,power_w,feed_mm_s";

pub fn write_toolpath_csv(tp: &Toolpath, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = create_writer(path)?;
    writeln!(w, "{TOOLPATH_CSV_HEADER}").map_err(|e| write_err(path, e))?;
    for (seq, s) in tp.segments.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            seq,
            s.mode.as_str(),
            fmt_val(s.start[0]),
            fmt_val(s.start[1]),
            fmt_val(s.start[2]),
            fmt_val(s.end[0]),
            fmt_val(s.end[1]),
            fmt_val(s.end[2]),
            s.laser_on as u8,
            fmt_val(s.power_w),
            fmt_val(s.feed_mm_s)
        )
        .map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| write_err(path, e))
}

pub const PLAN_CSV_HEADER: &str = "seq,action,label,cells,z_floor_mm,depth_mm";

pub fn write_plan_csv(plan: &CorrectionPlan, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = create_writer(path)?;
    writeln!(w, "{PLAN_CSV_HEADER}").map_err(|e| write_err(path, e))?;
    for (seq, a) in plan.actions.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            seq,
            a.kind.as_str(),
            a.label.as_str(),
            a.footprint.cells.len(),
            fmt_val(a.z_floor),
            fmt_val(a.depth_mm)
        )
        .map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| write_err(path, e))
}

// ---------------------------------------------------------------------------
// Detection metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelMetrics {
    pub label: QualityLabel,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl LabelMetrics {
    pub fn precision(&self) -> f64 {
        let denom = self.true_positives + self.false_positives;
        if denom == 0 {
            0.0
        } else {
            self.true_positives as f64 / denom as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let denom = self.true_positives + self.false_negatives;
        if denom == 0 {
            0.0
        } else {
            self.true_positives as f64 / denom as f64
        }
    }
}

/// Voxel-level precision/recall of the twin labels against a ground-truth
/// label map, for every non-ok label present on either side.
pub fn detection_metrics(
    twin: &DigitalTwin,
    truth: &BTreeMap<VoxelKey, QualityLabel>,
) -> Vec<LabelMetrics> {
    let mut labels: Vec<QualityLabel> = truth
        .values()
        .copied()
        .chain(twin.voxels.values().map(|v| v.label))
        .filter(|&l| l != QualityLabel::Ok)
        .collect();
    labels.sort();
    labels.dedup();
    labels
        .into_iter()
        .map(|label| {
            let mut m = LabelMetrics {
                label,
                true_positives: 0,
                false_positives: 0,
                false_negatives: 0,
            };
            for (key, v) in &twin.voxels {
                let predicted = v.label == label;
                let actual = truth.get(key) == Some(&label);
                match (predicted, actual) {
                    (true, true) => m.true_positives += 1,
                    (true, false) => m.false_positives += 1,
                    (false, true) => m.false_negatives += 1,
                    (false, false) => {}
                }
            }
            // Truth voxels the twin never deposited count as misses.
            m.false_negatives += truth
                .iter()
                .filter(|(k, &l)| l == label && !twin.voxels.contains_key(k))
                .count();
            m
        })
        .collect()
}
