//! Tile-based renderer for static/dynamic Gaussian-splat scenes, paired with
//! an access-exact cost model of the memory system an edge accelerator would
//! put behind it.
//!
//! The crate has two halves:
//!
//! * the image path: 4D Gaussians sliced at a query time, projected, shaded
//!   with spherical harmonics and alpha-blended front to back
//!   ([`gaussian`], [`pipeline`]);
//! * the cost path: DRAM burst pricing, a depth-segmented 2-way buffer,
//!   coarse grid culling with spill pointers, bucket-bitonic depth sorting
//!   with frame-propagated boundaries, and connection-strength tile grouping
//!   ([`memcost`], [`frustum_grid`], [`depth_sort`], [`tile_group`]).
//!
//! The four optimizations (grid culling, tile grouping, adaptive sorting,
//! LUT exponentials) are designed to be output-lossless: enabling them
//! changes the traffic counters, never the rendered image (the LUT path is
//! lossless up to its published error bound).

pub mod depth_sort;
pub mod experiment;
pub mod exp_lut;
pub mod frustum_grid;
pub mod gaussian;
pub mod img;
pub mod memcost;
pub mod pipeline;
pub mod scene;
pub mod tile_group;
pub mod trajectory;
