//! Coarse temporal × cubic partitioning of a scene for frustum culling that
//! never touches per-record storage.
//!
//! The layout is built offline: every Gaussian's record lives contiguously in
//! its home cell (the cell containing its mean), ordered so that records
//! sharing a spill signature form contiguous runs; neighboring cells overlap
//! a Gaussian's 3σ support hold only (owner, range) pointers into those
//! runs. At query time the visible cell set is decided from cell bounds
//! alone, and the fetch schedule emits every visible home range plus the
//! spill runs whose owners are not visible, deduplicated and merged into
//! maximal contiguous ranges.

use nalgebra::Vector3;
use thiserror::Error;

use crate::gaussian::{extent4, Camera, Gaussian4D};

#[derive(Debug, Error, PartialEq)]
pub enum LayoutError {
    #[error("scene is empty")]
    EmptyScene,
    #[error("grid resolution must be at least 1 (got {0})")]
    BadResolution(usize),
}

/// Axis-aligned box, closed on both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Aabb3 {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb3 {
    pub fn overlaps(&self, other: &Aabb3) -> bool {
        (0..3).all(|i| self.min[i] <= other.max[i] && other.min[i] <= self.max[i])
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    fn grow(&mut self, other: &Aabb3) {
        for i in 0..3 {
            self.min[i] = self.min[i].min(other.min[i]);
            self.max[i] = self.max[i].max(other.max[i]);
        }
    }
}

/// Halfspace with the frustum interior on the non-negative side:
/// inside ⇔ `normal · x + d ≥ 0`.
#[derive(Debug, Clone)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub d: f64,
}

impl Plane {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.d
    }
}

/// Six world-space planes plus the query time.
#[derive(Debug, Clone)]
pub struct Frustum {
    pub planes: [Plane; 6],
    pub t: f64,
}

impl Frustum {
    /// Exact camera frustum at time `t`.
    pub fn from_camera(cam: &Camera, t: f64) -> Self {
        Self::from_camera_margined(cam, t, 0.0, cam.near, cam.far)
    }

    /// Frustum widened by `margin_px` on every image edge, with overridden
    /// near/far. Cell culling uses a widened frustum so that every record
    /// whose truncated splat can reach an on-screen pixel is provably kept.
    pub fn from_camera_margined(
        cam: &Camera,
        t: f64,
        margin_px: f64,
        near: f64,
        far: f64,
    ) -> Self {
        let w = f64::from(cam.width);
        let h = f64::from(cam.height);
        let m = margin_px;
        // Camera-space halfspaces; side planes pass through the origin.
        let cam_planes = [
            (Vector3::new(0.0, 0.0, 1.0), -near),
            (Vector3::new(0.0, 0.0, -1.0), far),
            (Vector3::new(cam.fx, 0.0, cam.cx + m), 0.0),
            (Vector3::new(-cam.fx, 0.0, w + m - cam.cx), 0.0),
            (Vector3::new(0.0, cam.fy, cam.cy + m), 0.0),
            (Vector3::new(0.0, -cam.fy, h + m - cam.cy), 0.0),
        ];
        let planes = cam_planes.map(|(n, d)| {
            // n·(Rx + tr) + d ≥ 0  ⇔  (Rᵀn)·x + (n·tr + d) ≥ 0
            let normal_w = cam.rotation.transpose() * n;
            let d_w = n.dot(&cam.translation) + d;
            let len = normal_w.norm();
            Plane { normal: normal_w / len, d: d_w / len }
        });
        Self { planes, t }
    }

    pub fn contains_point(&self, p: &Vector3<f64>) -> bool {
        self.planes.iter().all(|pl| pl.signed_distance(p) >= 0.0)
    }
}

/// Conservative box-vs-frustum test via the most-positive corner per plane:
/// returns false only when the box lies entirely on the negative side of
/// some plane.
pub fn aabb_frustum_test(aabb: &Aabb3, planes: &[Plane; 6]) -> bool {
    for plane in planes {
        let mut p = Vector3::zeros();
        for i in 0..3 {
            p[i] = if plane.normal[i] >= 0.0 { aabb.max[i] } else { aabb.min[i] };
        }
        if plane.signed_distance(&p) < 0.0 {
            return false;
        }
    }
    true
}

/// Half-open record address range `[start, end)` in the reordered scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct RecordRange {
    pub start: u32,
    pub end: u32,
}

impl RecordRange {
    pub fn len(&self) -> u32 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// Pointer into another cell's home range covering records that overlap this
/// cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpillRun {
    /// Cell index owning the records.
    pub owner: u32,
    pub range: RecordRange,
}

#[derive(Debug, Clone)]
pub struct CubicCell {
    pub aabb: Aabb3,
    pub t_span: (f64, f64),
    pub home: RecordRange,
    pub spills: Vec<SpillRun>,
}

/// Offline layout: cell array in temporal-major (t, z, y, x) scan order plus
/// the record permutation.
#[derive(Debug, Clone)]
pub struct GridLayout {
    /// Cubic resolution per spatial axis.
    pub grid_n: usize,
    /// Temporal slab count (1 for static scenes).
    pub t_cells: usize,
    pub t_edges: Vec<f64>,
    pub scene_aabb: Aabb3,
    pub cells: Vec<CubicCell>,
    /// DRAM record address → Gaussian id.
    pub record_to_id: Vec<u32>,
    /// Gaussian id → DRAM record address.
    pub id_to_record: Vec<u32>,
}

/// Ordered, non-overlapping, maximal record ranges to fetch for one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FetchSchedule {
    pub ranges: Vec<RecordRange>,
}

impl FetchSchedule {
    pub fn whole_scene(n: usize) -> Self {
        if n == 0 {
            return Self::default();
        }
        Self { ranges: vec![RecordRange { start: 0, end: n as u32 }] }
    }

    pub fn record_count(&self) -> u64 {
        self.ranges.iter().map(|r| u64::from(r.len())).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = u32> + '_ {
        self.ranges.iter().flat_map(|r| r.start..r.end)
    }
}

impl GridLayout {
    pub fn cell_index(&self, ti: usize, zi: usize, yi: usize, xi: usize) -> usize {
        ((ti * self.grid_n + zi) * self.grid_n + yi) * self.grid_n + xi
    }

    /// Bytes of culling metadata: one (start, end) pair per cell plus one
    /// (owner, start, end) triple per spill run — O(cells + runs), never per
    /// record.
    pub fn metadata_bytes(&self) -> u64 {
        let runs: u64 = self.cells.iter().map(|c| c.spills.len() as u64).sum();
        self.cells.len() as u64 * 8 + runs * 12
    }

    pub fn spill_run_count(&self) -> u64 {
        self.cells.iter().map(|c| c.spills.len() as u64).sum()
    }
}

/// Builds the layout with equal temporal and cubic resolution.
pub fn build_layout(scene: &[Gaussian4D], grid_n: usize) -> Result<GridLayout, LayoutError> {
    build_layout_with_depth(scene, grid_n, grid_n)
}

/// Builds the layout with an explicit temporal slab count (static scenes
/// collapse it to 1).
pub fn build_layout_with_depth(
    scene: &[Gaussian4D],
    grid_n: usize,
    t_cells: usize,
) -> Result<GridLayout, LayoutError> {
    if scene.is_empty() {
        return Err(LayoutError::EmptyScene);
    }
    if grid_n == 0 || t_cells == 0 {
        return Err(LayoutError::BadResolution(grid_n.min(t_cells)));
    }

    // Support boxes: the grid domain covers every 3σ box so a record's whole
    // rendered support maps to cells that reference it.
    let boxes: Vec<(Aabb3, f64, f64)> = scene
        .iter()
        .map(|g| {
            let (half, t_half) = extent4(g);
            let spatial = Aabb3 { min: g.mean.xyz() - half, max: g.mean.xyz() + half };
            (spatial, g.mean[3] - t_half, g.mean[3] + t_half)
        })
        .collect();
    let mut scene_aabb = boxes[0].0.clone();
    for (b, _, _) in &boxes[1..] {
        scene_aabb.grow(b);
    }
    // Degenerate axes still need positive cell width.
    for i in 0..3 {
        if scene_aabb.max[i] - scene_aabb.min[i] < 1e-9 {
            scene_aabb.min[i] -= 5e-10;
            scene_aabb.max[i] += 5e-10;
        }
    }

    let n = grid_n;
    let cell_w = Vector3::from_fn(|i, _| (scene_aabb.max[i] - scene_aabb.min[i]) / n as f64);
    let t_edges: Vec<f64> = (0..=t_cells).map(|k| k as f64 / t_cells as f64).collect();

    let spatial_cell = |p: &Vector3<f64>| -> [usize; 3] {
        let mut idx = [0usize; 3];
        for i in 0..3 {
            let f = ((p[i] - scene_aabb.min[i]) / cell_w[i]).floor();
            idx[i] = (f.max(0.0) as usize).min(n - 1);
        }
        idx
    };
    let t_slab = |t: f64| -> usize { ((t * t_cells as f64).floor().max(0.0) as usize).min(t_cells - 1) };

    let cell_count = t_cells * n * n * n;
    let cell_of = |ti: usize, zi: usize, yi: usize, xi: usize| ((ti * n + zi) * n + yi) * n + xi;

    // Home cell plus the overlap signature (all other overlapped cells).
    struct Placement {
        id: u32,
        home: usize,
        signature: Vec<u32>,
    }
    let mut placements: Vec<Placement> = Vec::with_capacity(scene.len());
    for (g, (spatial, t_lo, t_hi)) in scene.iter().zip(&boxes) {
        let [hx, hy, hz] = spatial_cell(&g.mean.xyz());
        let home = cell_of(t_slab(g.mean[3]), hz, hy, hx);

        let axis_range = |i: usize, lo: f64, hi: f64| -> (usize, usize) {
            let a = (((lo - scene_aabb.min[i]) / cell_w[i]).floor().max(0.0) as usize).min(n - 1);
            let b = (((hi - scene_aabb.min[i]) / cell_w[i]).floor().max(0.0) as usize).min(n - 1);
            (a, b)
        };
        let (x0, x1) = axis_range(0, spatial.min[0], spatial.max[0]);
        let (y0, y1) = axis_range(1, spatial.min[1], spatial.max[1]);
        let (z0, z1) = axis_range(2, spatial.min[2], spatial.max[2]);
        let t0 = t_slab(t_lo.max(0.0));
        let t1 = t_slab(t_hi.min(1.0).max(0.0));

        let mut signature = Vec::new();
        for ti in t0..=t1 {
            for zi in z0..=z1 {
                for yi in y0..=y1 {
                    for xi in x0..=x1 {
                        let c = cell_of(ti, zi, yi, xi);
                        if c != home {
                            signature.push(c as u32);
                        }
                    }
                }
            }
        }
        signature.sort_unstable();
        placements.push(Placement { id: g.id, home, signature });
    }

    // Within a home cell, records sharing a spill signature stay contiguous.
    let mut per_cell: Vec<Vec<usize>> = vec![Vec::new(); cell_count];
    for (i, p) in placements.iter().enumerate() {
        per_cell[p.home].push(i);
    }
    for members in &mut per_cell {
        members.sort_by(|&a, &b| {
            placements[a]
                .signature
                .cmp(&placements[b].signature)
                .then(placements[a].id.cmp(&placements[b].id))
        });
    }

    let mut record_to_id = Vec::with_capacity(scene.len());
    let mut id_to_record = vec![0u32; scene.len()];
    let mut cells: Vec<CubicCell> = Vec::with_capacity(cell_count);
    // First pass: record order and home ranges.
    let mut homes = Vec::with_capacity(cell_count);
    for members in &per_cell {
        let start = record_to_id.len() as u32;
        for &i in members {
            id_to_record[placements[i].id as usize] = record_to_id.len() as u32;
            record_to_id.push(placements[i].id);
        }
        homes.push(RecordRange { start, end: record_to_id.len() as u32 });
    }
    // Second pass: spill runs, one per (signature group, target cell).
    let mut spills: Vec<Vec<SpillRun>> = vec![Vec::new(); cell_count];
    for (cell, members) in per_cell.iter().enumerate() {
        let base = homes[cell].start;
        let mut i = 0usize;
        while i < members.len() {
            let sig = &placements[members[i]].signature;
            let mut j = i + 1;
            while j < members.len() && placements[members[j]].signature == *sig {
                j += 1;
            }
            let range = RecordRange { start: base + i as u32, end: base + j as u32 };
            for &target in sig {
                spills[target as usize].push(SpillRun { owner: cell as u32, range });
            }
            i = j;
        }
    }

    for ti in 0..t_cells {
        for zi in 0..n {
            for yi in 0..n {
                for xi in 0..n {
                    let c = cell_of(ti, zi, yi, xi);
                    let min = Vector3::new(
                        scene_aabb.min[0] + cell_w[0] * xi as f64,
                        scene_aabb.min[1] + cell_w[1] * yi as f64,
                        scene_aabb.min[2] + cell_w[2] * zi as f64,
                    );
                    let max = Vector3::new(
                        scene_aabb.min[0] + cell_w[0] * (xi + 1) as f64,
                        scene_aabb.min[1] + cell_w[1] * (yi + 1) as f64,
                        scene_aabb.min[2] + cell_w[2] * (zi + 1) as f64,
                    );
                    cells.push(CubicCell {
                        aabb: Aabb3 { min, max },
                        t_span: (t_edges[ti], t_edges[ti + 1]),
                        home: homes[c],
                        spills: std::mem::take(&mut spills[c]),
                    });
                }
            }
        }
    }

    Ok(GridLayout {
        grid_n: n,
        t_cells,
        t_edges,
        scene_aabb,
        cells,
        record_to_id,
        id_to_record,
    })
}

/// Indices of cells in the query-time slab whose box survives the plane
/// test. Conservative: never excludes a cell overlapping the frustum.
pub fn cull_grids(layout: &GridLayout, frustum: &Frustum) -> Vec<u32> {
    let t_cells = layout.t_cells;
    let slab = ((frustum.t * t_cells as f64).floor().max(0.0) as usize).min(t_cells - 1);
    let per_slab = layout.grid_n.pow(3);
    let base = slab * per_slab;
    (base..base + per_slab)
        .filter(|&c| aabb_frustum_test(&layout.cells[c].aabb, &frustum.planes))
        .map(|c| c as u32)
        .collect()
}

/// Fetch schedule for a visible cell set: every visible home range plus each
/// spill run whose owner is not visible. Each record address appears at most
/// once; adjacent ranges are merged into maximal contiguous runs.
pub fn resolve_fetch(layout: &GridLayout, visible: &[u32]) -> FetchSchedule {
    let mut is_visible = vec![false; layout.cells.len()];
    for &v in visible {
        is_visible[v as usize] = true;
    }
    let mut ranges: Vec<RecordRange> = Vec::new();
    for &v in visible {
        let cell = &layout.cells[v as usize];
        if !cell.home.is_empty() {
            ranges.push(cell.home);
        }
        for run in &cell.spills {
            if !is_visible[run.owner as usize] {
                ranges.push(run.range);
            }
        }
    }
    ranges.sort_unstable();
    ranges.dedup();
    // Distinct surviving ranges never overlap: homes are disjoint, spill
    // runs partition their owner's home, and spill owners are not visible.
    let mut merged: Vec<RecordRange> = Vec::with_capacity(ranges.len());
    for r in ranges {
        match merged.last_mut() {
            Some(last) if last.end == r.start => last.end = r.end,
            Some(last) => {
                debug_assert!(r.start >= last.end, "overlapping fetch ranges");
                merged.push(r);
            }
            None => merged.push(r),
        }
    }
    FetchSchedule { ranges: merged }
}
