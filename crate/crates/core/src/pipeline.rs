//! Per-frame orchestration: fetch (full or grid-culled) → temporal slice →
//! projection and shading → tile/block binning → per-block depth sort →
//! group schedule → front-to-back blend, with every memory touch priced.
//!
//! The four optimization flags change traffic and operation counters only.
//! With the exact exponential, the rendered image is bit-identical across
//! every {grid cull, grouping, adaptive sort} combination: the fetch stage
//! delivers a superset of the splats that can touch a pixel, and per-tile
//! blending always walks them in (depth, id) order.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::depth_sort::{
    assign_bucket, average_boundaries, init_uniform, sort_block, BucketState, SortKey,
};
use crate::exp_lut::{exp2_x, EntryMode, LutBank};
use crate::frustum_grid::{
    build_layout_with_depth, cull_grids, resolve_fetch, FetchSchedule, Frustum, GridLayout,
    LayoutError,
};
use crate::gaussian::{
    eval_sh, project, slice_at_time, spatial_q, Camera, MathError, Sliced3D, ALPHA_MAX,
    ALPHA_SKIP, SUPPORT_Q_MAX,
};
use crate::img::Image;
use crate::memcost::{record_bytes, BufferModel, DramModel, EnergyConfig, MemError};
use crate::scene::Scene;
use crate::tile_group::{
    compute_threshold, group_full, group_incremental, schedule, ConnGraph, Grouping,
    ThresholdParams,
};

const SUPPORT_Q_MAX_FOLDED: f64 = SUPPORT_Q_MAX * std::f64::consts::LOG2_E;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("camera grid changed ({got_x}x{got_y} tiles, state holds {have_x}x{have_y}); reset required")]
    StateDims { have_x: u32, have_y: u32, got_x: u32, got_y: u32 },
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Math(#[from] MathError),
}

/// All pipeline knobs. `..Default::default()` is the reference configuration
/// (grid 4, 8 buckets, 16 px tiles, 4-tile block side, udt 0.5); the
/// baseline of every comparison is the same struct with all four flags off.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Grid-culled fetch instead of full scene reads.
    pub dr_fc: bool,
    /// Adaptive tile grouping for the blend order.
    pub atg: bool,
    /// Frame-propagated bucket boundaries for the depth sort.
    pub aii: bool,
    /// LUT-based exponential instead of the exact one.
    pub lut_exp: bool,
    pub grid_n: usize,
    pub n_buckets: usize,
    pub tile_px: u32,
    pub block_side: u32,
    pub udt: f64,
    pub k_extremes: usize,
    /// Group size cap in blocks; `None` derives it from the buffer segment
    /// capacity on the first frame (capped at 16).
    pub max_group: Option<usize>,
    pub term_eps: f64,
    pub quantize_f16: bool,
    pub lut_mode: EntryMode,
    pub buffer_bytes: u64,
    pub burst_bytes: u64,
    /// Extra image margin (px) for the conservative cell-culling frustum.
    pub cull_margin_px: f64,
    pub background: [f64; 3],
    pub energy: EnergyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dr_fc: false,
            atg: false,
            aii: false,
            lut_exp: false,
            grid_n: 4,
            n_buckets: 8,
            tile_px: 16,
            block_side: 4,
            udt: 0.5,
            k_extremes: 4,
            max_group: None,
            term_eps: 1e-4,
            quantize_f16: false,
            lut_mode: EntryMode::Exact,
            buffer_bytes: 262_144,
            burst_bytes: 64,
            cull_margin_px: 8.0,
            background: [0.0; 3],
            energy: EnergyConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !matches!(self.n_buckets, 4 | 8 | 16) {
            return Err(PipelineError::Config(format!(
                "bucket count {} not in {{4, 8, 16}}",
                self.n_buckets
            )));
        }
        if !matches!(self.block_side, 1 | 2 | 4 | 8) {
            return Err(PipelineError::Config(format!(
                "block side {} not in {{1, 2, 4, 8}}",
                self.block_side
            )));
        }
        if self.grid_n == 0 {
            return Err(PipelineError::Config("grid_n must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.udt) {
            return Err(PipelineError::Config(format!("udt {} outside [0, 1]", self.udt)));
        }
        if self.k_extremes == 0 {
            return Err(PipelineError::Config("k_extremes must be >= 1".into()));
        }
        if self.tile_px == 0 {
            return Err(PipelineError::Config("tile_px must be >= 1".into()));
        }
        if self.term_eps < 0.0 {
            return Err(PipelineError::Config("term_eps must be >= 0".into()));
        }
        if self.max_group == Some(0) {
            return Err(PipelineError::Config("max_group must be >= 1".into()));
        }
        Ok(())
    }
}

/// Inclusive tile-index rectangle of a splat's footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileRect {
    pub tx0: u32,
    pub ty0: u32,
    pub tx1: u32,
    pub ty1: u32,
}

impl TileRect {
    pub fn contains(&self, tx: u32, ty: u32) -> bool {
        self.tx0 <= tx && tx <= self.tx1 && self.ty0 <= ty && ty <= self.ty1
    }

    pub fn tile_count(&self) -> u32 {
        (self.tx1 - self.tx0 + 1) * (self.ty1 - self.ty0 + 1)
    }
}

/// Tiles whose rectangle intersects the axis-aligned square of half-width
/// `radius` around `center`; `None` when the square misses the grid.
pub fn intersect_tiles(
    center: &Vector2<f64>,
    radius: f64,
    tile_px: u32,
    tiles_x: u32,
    tiles_y: u32,
) -> Option<TileRect> {
    let tile = f64::from(tile_px);
    let x0 = center.x - radius;
    let x1 = center.x + radius;
    let y0 = center.y - radius;
    let y1 = center.y + radius;
    if x1 < 0.0 || y1 < 0.0 || x0 >= f64::from(tiles_x * tile_px) || y0 >= f64::from(tiles_y * tile_px) {
        return None;
    }
    let clamp_tile = |v: f64, hi: u32| -> u32 { (v.max(0.0) as u32).min(hi - 1) };
    Some(TileRect {
        tx0: clamp_tile((x0 / tile).floor(), tiles_x),
        ty0: clamp_tile((y0 / tile).floor(), tiles_y),
        tx1: clamp_tile((x1 / tile).floor(), tiles_x),
        ty1: clamp_tile((y1 / tile).floor(), tiles_y),
    })
}

/// Everything the frame loop measures, one row per frame.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FrameMetrics {
    pub frame: u64,
    pub time: f64,
    pub fetched_records: u64,
    pub fetch_bursts: u64,
    pub fetch_bytes: u64,
    pub refetch_records: u64,
    pub refetch_bursts: u64,
    pub refetch_bytes: u64,
    pub buffer_lookups: u64,
    pub buffer_hits: u64,
    pub buffer_misses: u64,
    pub buffer_evictions: u64,
    pub temporal_culled: u64,
    pub frustum_culled: u64,
    pub splatted: u64,
    pub sort_keys: u64,
    pub sort_scatter_ops: u64,
    pub sort_compare_exchanges: u64,
    pub sort_stages: u64,
    pub sort_max_bucket: u64,
    pub deform_count: u64,
    pub full_regroups: u64,
    pub groups: u64,
    pub dram_energy_pj: f64,
    pub sram_energy_pj: f64,
    pub psnr_vs_reference: Option<f64>,
}

impl FrameMetrics {
    pub const CSV_HEADER: [&'static str; 26] = [
        "frame",
        "time",
        "fetched_records",
        "fetch_bursts",
        "fetch_bytes",
        "refetch_records",
        "refetch_bursts",
        "refetch_bytes",
        "buffer_lookups",
        "buffer_hits",
        "buffer_misses",
        "buffer_evictions",
        "temporal_culled",
        "frustum_culled",
        "splatted",
        "sort_keys",
        "sort_scatter_ops",
        "sort_compare_exchanges",
        "sort_stages",
        "sort_max_bucket",
        "deform_count",
        "full_regroups",
        "groups",
        "dram_energy_pj",
        "sram_energy_pj",
        "psnr_vs_reference",
    ];

    pub fn csv_row(&self) -> String {
        let psnr = match self.psnr_vs_reference {
            None => String::new(),
            Some(v) => format!("{v:?}"),
        };
        format!(
            "{},{:?},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:?},{:?},{}",
            self.frame,
            self.time,
            self.fetched_records,
            self.fetch_bursts,
            self.fetch_bytes,
            self.refetch_records,
            self.refetch_bursts,
            self.refetch_bytes,
            self.buffer_lookups,
            self.buffer_hits,
            self.buffer_misses,
            self.buffer_evictions,
            self.temporal_culled,
            self.frustum_culled,
            self.splatted,
            self.sort_keys,
            self.sort_scatter_ops,
            self.sort_compare_exchanges,
            self.sort_stages,
            self.sort_max_bucket,
            self.deform_count,
            self.full_regroups,
            self.groups,
            self.dram_energy_pj,
            self.sram_energy_pj,
            psnr,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct GridDims {
    tiles_x: u32,
    tiles_y: u32,
    blocks_x: u32,
    blocks_y: u32,
}

/// State carried frame to frame: per-block bucket boundaries, the frame-wide
/// buffer segment cuts, the connection graph and the previous grouping.
#[derive(Debug)]
pub struct PosterioriState {
    pub frame_index: u64,
    dims: Option<GridDims>,
    bucket_states: Vec<BucketState>,
    buffer_bounds: Vec<f64>,
    buffer_bounds_valid: bool,
    conn: Option<ConnGraph>,
    prev_grouping: Option<Grouping>,
    sticky_max_group: Option<usize>,
}

impl PosterioriState {
    fn new() -> Self {
        Self {
            frame_index: 0,
            dims: None,
            bucket_states: Vec::new(),
            buffer_bounds: Vec::new(),
            buffer_bounds_valid: false,
            conn: None,
            prev_grouping: None,
            sticky_max_group: None,
        }
    }
}

/// One projected, shaded splat ready for binning and blending.
struct SplatRecord {
    id: u32,
    depth: f64,
    center: Vector2<f64>,
    conic: Matrix2<f64>,
    /// conic · log₂e: the base-conversion factor folded offline so the LUT
    /// path issues no runtime multiply.
    conic_folded: Matrix2<f64>,
    temporal_q: f64,
    temporal_q_folded: f64,
    opacity: f64,
    color: [f64; 3],
    radius: f64,
}

enum PrepOutcome {
    TemporalCulled,
    FrustumCulled,
    Splat(Box<SplatRecord>),
}

/// Owns the scene, the optional culling layout, the memory models and the
/// frame-to-frame state. Frames are sequential; the per-record preprocess
/// inside a frame runs data-parallel with order-preserving collection, so
/// identical runs are bit-identical regardless of thread count.
pub struct Simulation {
    pub scene: Scene,
    pub layout: Option<GridLayout>,
    pub config: PipelineConfig,
    pub state: PosterioriState,
    pub dram: DramModel,
    pub buffer: BufferModel,
    luts: LutBank,
}

impl Simulation {
    pub fn new(scene: Scene, config: PipelineConfig) -> Result<Self, PipelineError> {
        Self::with_layout(scene, None, config)
    }

    /// Uses `layout` when it matches the configured grid resolution;
    /// otherwise builds one (only needed when grid culling is on).
    pub fn with_layout(
        mut scene: Scene,
        layout: Option<GridLayout>,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        if config.quantize_f16 {
            scene.quantize_f16();
        }
        let expected_t_cells = if scene.dynamic { config.grid_n } else { 1 };
        let layout = if config.dr_fc && !scene.is_empty() {
            match layout {
                Some(l) if l.grid_n == config.grid_n && l.t_cells == expected_t_cells => Some(l),
                _ => Some(build_layout_with_depth(
                    &scene.gaussians,
                    config.grid_n,
                    expected_t_cells,
                )?),
            }
        } else {
            None
        };
        let rec_bytes = record_bytes(scene.sh_degree);
        let dram = DramModel::new(rec_bytes, config.burst_bytes);
        let buffer = BufferModel::new(config.buffer_bytes, config.n_buckets, rec_bytes)?;
        let luts = LutBank::new(config.lut_mode);
        Ok(Self {
            scene,
            layout,
            config,
            state: PosterioriState::new(),
            dram,
            buffer,
            luts,
        })
    }

    /// Drops all frame-to-frame state (required after a resolution change).
    pub fn reset_state(&mut self) {
        self.state = PosterioriState::new();
    }

    fn grid_dims(&self, cam: &Camera) -> GridDims {
        let tiles_x = cam.width.div_ceil(self.config.tile_px);
        let tiles_y = cam.height.div_ceil(self.config.tile_px);
        GridDims {
            tiles_x,
            tiles_y,
            blocks_x: tiles_x.div_ceil(self.config.block_side),
            blocks_y: tiles_y.div_ceil(self.config.block_side),
        }
    }

    pub fn render_frame(
        &mut self,
        cam: &Camera,
        t: f64,
    ) -> Result<(Image, FrameMetrics), PipelineError> {
        let dims = self.grid_dims(cam);
        match self.state.dims {
            None => {
                self.state.dims = Some(dims);
                self.state.bucket_states =
                    vec![BucketState::invalid(); (dims.blocks_x * dims.blocks_y) as usize];
                self.state.conn = Some(ConnGraph::new(dims.blocks_x as usize, dims.blocks_y as usize));
            }
            Some(have) if have != dims => {
                return Err(PipelineError::StateDims {
                    have_x: have.tiles_x,
                    have_y: have.tiles_y,
                    got_x: dims.tiles_x,
                    got_y: dims.tiles_y,
                });
            }
            Some(_) => {}
        }
        let dram_before = self.dram.counters;
        let buffer_before = self.buffer.counters;

        // (1) Fetch: grid-culled schedule or the whole scene.
        let fetch_ids: Vec<u32> = if let Some(layout) = &self.layout {
            let frustum = Frustum::from_camera_margined(
                cam,
                t,
                self.config.cull_margin_px,
                cam.near * 0.5,
                cam.far * 2.0,
            );
            let visible = cull_grids(layout, &frustum);
            let sched = resolve_fetch(layout, &visible);
            self.dram.price_schedule(&sched)?;
            sched.records().map(|r| layout.record_to_id[r as usize]).collect()
        } else {
            let sched = FetchSchedule::whole_scene(self.scene.len());
            self.dram.price_schedule(&sched)?;
            (0..self.scene.len() as u32).collect()
        };

        // (2) Slice, cull, project and shade, data-parallel per record.
        let cam_pos = cam.position();
        let dynamic = self.scene.dynamic;
        let scene = &self.scene;
        let width = f64::from(cam.width);
        let height = f64::from(cam.height);
        let outcomes: Vec<PrepOutcome> = fetch_ids
            .par_iter()
            .map(|&gid| {
                let g = &scene.gaussians[gid as usize];
                let sliced = if dynamic {
                    let dt = t - g.mean[3];
                    // 3σ temporal support, matching the spill extent.
                    if dt * dt > 9.0 * g.cov[(3, 3)] {
                        return PrepOutcome::TemporalCulled;
                    }
                    slice_at_time(g, t)
                } else {
                    Sliced3D {
                        mean: g.mean.xyz(),
                        cov: g.cov.fixed_view::<3, 3>(0, 0).into_owned(),
                        w_t: 1.0,
                        temporal_q: 0.0,
                    }
                };
                let Some((_ctx, geom)) = project(&sliced, cam) else {
                    return PrepOutcome::FrustumCulled;
                };
                if geom.depth > cam.far {
                    return PrepOutcome::FrustumCulled;
                }
                if geom.center.x + geom.radius < 0.0
                    || geom.center.x - geom.radius > width
                    || geom.center.y + geom.radius < 0.0
                    || geom.center.y - geom.radius > height
                {
                    return PrepOutcome::FrustumCulled;
                }
                let det = geom.cov[(0, 0)] * geom.cov[(1, 1)] - geom.cov[(0, 1)] * geom.cov[(1, 0)];
                if det <= 0.0 {
                    return PrepOutcome::FrustumCulled;
                }
                let conic = Matrix2::new(
                    geom.cov[(1, 1)] / det,
                    -geom.cov[(0, 1)] / det,
                    -geom.cov[(1, 0)] / det,
                    geom.cov[(0, 0)] / det,
                );
                let dir = (sliced.mean - cam_pos).normalize();
                let color = eval_sh(&g.sh, &dir).expect("scene validated SH degree");
                PrepOutcome::Splat(Box::new(SplatRecord {
                    id: g.id,
                    depth: geom.depth,
                    center: geom.center,
                    conic,
                    conic_folded: conic * std::f64::consts::LOG2_E,
                    temporal_q: sliced.temporal_q,
                    temporal_q_folded: sliced.temporal_q * std::f64::consts::LOG2_E,
                    opacity: g.opacity,
                    color,
                    radius: geom.radius,
                }))
            })
            .collect();

        let mut temporal_culled = 0u64;
        let mut frustum_culled = 0u64;
        let mut splats: Vec<SplatRecord> = Vec::new();
        for outcome in outcomes {
            match outcome {
                PrepOutcome::TemporalCulled => temporal_culled += 1,
                PrepOutcome::FrustumCulled => frustum_culled += 1,
                PrepOutcome::Splat(s) => splats.push(*s),
            }
        }

        // (3) Tile/block binning; footprints feed the connection graph.
        let n_blocks = (dims.blocks_x * dims.blocks_y) as usize;
        let mut block_lists: Vec<Vec<u32>> = vec![Vec::new(); n_blocks];
        let mut rects: Vec<TileRect> = Vec::with_capacity(splats.len());
        let mut block_entries = 0u64;
        for (si, splat) in splats.iter().enumerate() {
            let rect = intersect_tiles(
                &splat.center,
                splat.radius,
                self.config.tile_px,
                dims.tiles_x,
                dims.tiles_y,
            )
            .expect("screen test already passed");
            rects.push(rect);
            let bs = self.config.block_side;
            let (bx0, bx1) = (rect.tx0 / bs, rect.tx1 / bs);
            let (by0, by1) = (rect.ty0 / bs, rect.ty1 / bs);
            let mut footprint: Vec<usize> = Vec::with_capacity(((bx1 - bx0 + 1) * (by1 - by0 + 1)) as usize);
            for by in by0..=by1 {
                for bx in bx0..=bx1 {
                    let b = (by * dims.blocks_x + bx) as usize;
                    block_lists[b].push(si as u32);
                    footprint.push(b);
                    block_entries += 1;
                }
            }
            if self.config.atg {
                footprint.sort_unstable();
                if let Some(conn) = &mut self.state.conn {
                    conn.record_footprint(&footprint);
                }
            }
        }

        // (4) Per-block depth sort. Baseline mode re-initializes uniformly
        // every frame by handing the sorter an invalid state.
        let invalid = BucketState::invalid();
        let mut id_to_splat: Vec<u32> = vec![u32::MAX; self.scene.len()];
        for (si, s) in splats.iter().enumerate() {
            id_to_splat[s.id as usize] = si as u32;
        }
        let mut block_sorted: Vec<Vec<u32>> = vec![Vec::new(); n_blocks];
        let mut sort_stats = crate::depth_sort::SortStats::default();
        let mut sort_keys = 0u64;
        let mut realized_bounds: Vec<Vec<f64>> = Vec::new();
        for b in 0..n_blocks {
            if block_lists[b].is_empty() {
                continue;
            }
            let keys: Vec<SortKey> = block_lists[b]
                .iter()
                .map(|&si| SortKey { depth: splats[si as usize].depth, id: splats[si as usize].id })
                .collect();
            sort_keys += keys.len() as u64;
            let state_in = if self.config.aii { &self.state.bucket_states[b] } else { &invalid };
            let out = sort_block(keys, state_in, self.config.n_buckets);
            sort_stats.merge(&out.stats);
            block_sorted[b] = out.keys.iter().map(|k| id_to_splat[k.id as usize]).collect();
            realized_bounds.push(out.state.boundaries.clone());
            if self.config.aii {
                self.state.bucket_states[b] = out.state;
            }
        }

        // Frame-wide segment cuts for the buffer: the average of the realized
        // block boundaries, so one record maps to one segment everywhere.
        let used_buffer_bounds: Vec<f64> = if self.state.buffer_bounds_valid {
            self.state.buffer_bounds.clone()
        } else if !splats.is_empty() {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for s in &splats {
                lo = lo.min(s.depth);
                hi = hi.max(s.depth);
            }
            init_uniform(lo, hi, self.config.n_buckets)
        } else {
            init_uniform(0.0, 1.0, self.config.n_buckets)
        };
        if !realized_bounds.is_empty() {
            self.state.buffer_bounds =
                average_boundaries(realized_bounds.iter().map(Vec::as_slice));
            self.state.buffer_bounds_valid = true;
        }

        // (5) Group schedule: adaptive grouping or plain raster order.
        let mut deform_count = 0u64;
        let mut full_regroups = 0u64;
        let block_schedule: Vec<Vec<u32>>;
        if self.config.atg && n_blocks > 1 {
            let conn = self.state.conn.as_ref().expect("initialized with dims");
            let threshold = compute_threshold(
                conn,
                &ThresholdParams {
                    k_extremes: self.config.k_extremes,
                    user_defined_threshold: self.config.udt,
                },
            );
            let max_group = match (self.config.max_group, self.state.sticky_max_group) {
                (Some(mg), _) => mg,
                (None, Some(mg)) => mg,
                (None, None) => {
                    let segment_records = (self.buffer.sets_per_segment * 2) as u64;
                    let nonempty = block_lists.iter().filter(|l| !l.is_empty()).count() as u64;
                    let mean_workset = if nonempty == 0 {
                        1
                    } else {
                        (block_entries / nonempty).max(1)
                    };
                    let mg = ((segment_records / mean_workset).max(1) as usize).min(16);
                    self.state.sticky_max_group = Some(mg);
                    mg
                }
            };
            let grouping = match &self.state.prev_grouping {
                Some(prev) => {
                    let (g, d) = group_incremental(prev, conn, threshold, max_group);
                    deform_count = d;
                    g
                }
                None => {
                    full_regroups = 1;
                    group_full(conn, threshold, max_group)
                }
            };
            block_schedule = schedule(&grouping).into_iter().map(|(_, blocks)| blocks).collect();
            self.state.prev_grouping = Some(grouping);
        } else {
            block_schedule = (0..n_blocks as u32).map(|b| vec![b]).collect();
        }
        let groups = block_schedule.len() as u64;

        // (6) Blend, walking groups → blocks → tiles → pixels. Each splat
        // touching a tile costs one buffer lookup (the pixel lanes of a tile
        // share the record).
        let mut image = Image::new(cam.width, cam.height);
        let bg = self.config.background;
        let term_eps = self.config.term_eps;
        let use_lut = self.config.lut_exp;
        let tile_px = self.config.tile_px;
        let bs = self.config.block_side;
        let mut tile_splats: Vec<u32> = Vec::new();
        for group in &block_schedule {
            for &b in group {
                let bx = b % dims.blocks_x;
                let by = b / dims.blocks_x;
                let sorted = &block_sorted[b as usize];
                for ty in (by * bs)..((by + 1) * bs).min(dims.tiles_y) {
                    for tx in (bx * bs)..((bx + 1) * bs).min(dims.tiles_x) {
                        tile_splats.clear();
                        tile_splats.extend(
                            sorted
                                .iter()
                                .copied()
                                .filter(|&si| rects[si as usize].contains(tx, ty)),
                        );
                        for &si in &tile_splats {
                            let s = &splats[si as usize];
                            let bucket = assign_bucket(&used_buffer_bounds, s.depth);
                            self.buffer.access(s.id, bucket, &mut self.dram);
                        }
                        let px1 = ((tx + 1) * tile_px).min(cam.width);
                        let py1 = ((ty + 1) * tile_px).min(cam.height);
                        for py in (ty * tile_px)..py1 {
                            for px in (tx * tile_px)..px1 {
                                let pixel =
                                    Vector2::new(f64::from(px) + 0.5, f64::from(py) + 0.5);
                                let mut transmittance = 1.0f64;
                                let mut rgb = [0.0f64; 3];
                                for &si in &tile_splats {
                                    if transmittance < term_eps {
                                        break;
                                    }
                                    let s = &splats[si as usize];
                                    let alpha = if use_lut {
                                        let q = spatial_q(&s.conic_folded, &s.center, &pixel)
                                            + s.temporal_q_folded;
                                        if q > SUPPORT_Q_MAX_FOLDED {
                                            continue;
                                        }
                                        (s.opacity * exp2_x(-0.5 * q, &self.luts)).min(ALPHA_MAX)
                                    } else {
                                        let q = spatial_q(&s.conic, &s.center, &pixel)
                                            + s.temporal_q;
                                        if q > SUPPORT_Q_MAX {
                                            continue;
                                        }
                                        (s.opacity * (-0.5 * q).exp()).min(ALPHA_MAX)
                                    };
                                    if alpha < ALPHA_SKIP {
                                        continue;
                                    }
                                    let w = alpha * transmittance;
                                    rgb[0] += w * s.color[0];
                                    rgb[1] += w * s.color[1];
                                    rgb[2] += w * s.color[2];
                                    transmittance *= 1.0 - alpha;
                                }
                                rgb[0] += transmittance * bg[0];
                                rgb[1] += transmittance * bg[1];
                                rgb[2] += transmittance * bg[2];
                                image.set_pixel(px, py, rgb);
                            }
                        }
                    }
                }
            }
        }

        // (7) Metrics from counter deltas; states were already propagated.
        let dram_after = self.dram.counters;
        let buffer_after = self.buffer.counters;
        let fetch_bytes = dram_after.fetch_bytes - dram_before.fetch_bytes;
        let refetch_bytes = dram_after.refetch_bytes - dram_before.refetch_bytes;
        let lookups = buffer_after.lookups - buffer_before.lookups;
        let metrics = FrameMetrics {
            frame: self.state.frame_index,
            time: t,
            fetched_records: dram_after.records_fetched - dram_before.records_fetched,
            fetch_bursts: dram_after.fetch_bursts - dram_before.fetch_bursts,
            fetch_bytes,
            refetch_records: dram_after.refetch_records - dram_before.refetch_records,
            refetch_bursts: dram_after.refetch_bursts - dram_before.refetch_bursts,
            refetch_bytes,
            buffer_lookups: lookups,
            buffer_hits: buffer_after.hits - buffer_before.hits,
            buffer_misses: buffer_after.misses - buffer_before.misses,
            buffer_evictions: buffer_after.evictions - buffer_before.evictions,
            temporal_culled,
            frustum_culled,
            splatted: splats.len() as u64,
            sort_keys,
            sort_scatter_ops: sort_stats.scatter_ops,
            sort_compare_exchanges: sort_stats.compare_exchanges,
            sort_stages: sort_stats.stages,
            sort_max_bucket: sort_stats.max_bucket,
            deform_count,
            full_regroups,
            groups,
            dram_energy_pj: (fetch_bytes + refetch_bytes) as f64
                * self.config.energy.dram_pj_per_byte,
            sram_energy_pj: (lookups * self.dram.record_bytes) as f64
                * self.config.energy.sram_pj_per_byte,
            psnr_vs_reference: None,
        };
        self.state.frame_index += 1;
        Ok((image, metrics))
    }
}
