//! Adaptive grouping of tile blocks from observed splat footprints.
//!
//! Every splat footprint bumps the connection strength of block edges it
//! spans and decays the edges it merely borders. Per frame, a threshold
//! derived from the strength extremes decides which edges are kept, and
//! union-find over kept edges (split to a size cap) yields the groups the
//! blend stage walks. Frames after the first only re-solve the regions whose
//! edge decisions actually flipped.
//!
//! Grouping affects memory-traffic counters only; pixel output is invariant
//! to it by construction.

/// Saturation bound for connection strengths.
pub const STRENGTH_CAP: i32 = 255;

/// Connection-strength counters on the interior edges of a `blocks_x` ×
/// `blocks_y` grid of tile blocks.
#[derive(Debug, Clone)]
pub struct ConnGraph {
    pub blocks_x: usize,
    pub blocks_y: usize,
    /// Horizontal edges, between (x, y) and (x+1, y): (bx-1)·by entries.
    h: Vec<i32>,
    /// Vertical edges, between (x, y) and (x, y+1): bx·(by-1) entries.
    v: Vec<i32>,
}

/// Per-edge keep/cut decisions, same indexing as [`ConnGraph`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeDecisions {
    pub h: Vec<bool>,
    pub v: Vec<bool>,
}

/// Group assignment per block plus the edge decisions it was built from.
#[derive(Debug, Clone)]
pub struct Grouping {
    pub group_of: Vec<u32>,
    pub decisions: EdgeDecisions,
    pub max_group: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ThresholdParams {
    /// How many strength extremes per block enter the bound medians.
    pub k_extremes: usize,
    /// Interpolation knob in [0, 1] between the lower and upper bound.
    pub user_defined_threshold: f64,
}

impl ConnGraph {
    pub fn new(blocks_x: usize, blocks_y: usize) -> Self {
        assert!(blocks_x >= 1 && blocks_y >= 1);
        Self {
            blocks_x,
            blocks_y,
            h: vec![0; blocks_x.saturating_sub(1) * blocks_y],
            v: vec![0; blocks_x * blocks_y.saturating_sub(1)],
        }
    }

    pub fn blocks(&self) -> usize {
        self.blocks_x * self.blocks_y
    }

    pub fn edge_count(&self) -> usize {
        self.h.len() + self.v.len()
    }

    fn h_index(&self, x: usize, y: usize) -> usize {
        y * (self.blocks_x - 1) + x
    }

    fn v_index(&self, x: usize, y: usize) -> usize {
        y * self.blocks_x + x
    }

    pub fn h_strength(&self, x: usize, y: usize) -> i32 {
        self.h[self.h_index(x, y)]
    }

    pub fn v_strength(&self, x: usize, y: usize) -> i32 {
        self.v[self.v_index(x, y)]
    }

    /// Applies one footprint (sorted, distinct block indices): edges joining
    /// two footprint blocks gain a point, edges leaving the footprint lose
    /// one, both saturating at ±[`STRENGTH_CAP`].
    pub fn record_footprint(&mut self, footprint: &[usize]) {
        debug_assert!(footprint.windows(2).all(|w| w[0] < w[1]));
        let inside = |idx: usize| footprint.binary_search(&idx).is_ok();
        for &b in footprint {
            let x = b % self.blocks_x;
            let y = b / self.blocks_x;
            debug_assert!(y < self.blocks_y);
            // Right and down edges are owned by this block: they see both the
            // strengthen and the decay case. Left and up edges only decay
            // here; when both endpoints are inside, the other endpoint owns
            // the increment.
            if x + 1 < self.blocks_x {
                let e = self.h_index(x, y);
                self.h[e] = bump(self.h[e], inside(b + 1));
            }
            if y + 1 < self.blocks_y {
                let e = self.v_index(x, y);
                self.v[e] = bump(self.v[e], inside(b + self.blocks_x));
            }
            if x > 0 && !inside(b - 1) {
                let e = self.h_index(x - 1, y);
                self.h[e] = bump(self.h[e], false);
            }
            if y > 0 && !inside(b - self.blocks_x) {
                let e = self.v_index(x, y - 1);
                self.v[e] = bump(self.v[e], false);
            }
        }
    }

    /// Strengths of the 2..4 edges incident to a block.
    fn incident_strengths(&self, block: usize) -> Vec<i32> {
        let x = block % self.blocks_x;
        let y = block / self.blocks_x;
        let mut out = Vec::with_capacity(4);
        if x > 0 {
            out.push(self.h_strength(x - 1, y));
        }
        if x + 1 < self.blocks_x {
            out.push(self.h_strength(x, y));
        }
        if y > 0 {
            out.push(self.v_strength(x, y - 1));
        }
        if y + 1 < self.blocks_y {
            out.push(self.v_strength(x, y));
        }
        out
    }
}

fn bump(strength: i32, strengthen: bool) -> i32 {
    if strengthen {
        (strength + 1).min(STRENGTH_CAP)
    } else {
        (strength - 1).max(-STRENGTH_CAP)
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    assert!(n > 0);
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Threshold between the block-level strength extremes:
/// `(upper - lower) · udt + lower`, where `upper`/`lower` are the medians,
/// across blocks, of each block's K-highest/K-lowest incident medians.
pub fn compute_threshold(g: &ConnGraph, p: &ThresholdParams) -> f64 {
    assert!(g.edge_count() >= 1, "grid has no interior edges");
    assert!(p.k_extremes >= 1);
    let mut uppers = Vec::with_capacity(g.blocks());
    let mut lowers = Vec::with_capacity(g.blocks());
    for block in 0..g.blocks() {
        let mut inc: Vec<f64> = g.incident_strengths(block).iter().map(|&s| f64::from(s)).collect();
        if inc.is_empty() {
            continue;
        }
        inc.sort_by(f64::total_cmp);
        let k = p.k_extremes.min(inc.len());
        lowers.push(median(&inc[..k]));
        uppers.push(median(&inc[inc.len() - k..]));
    }
    uppers.sort_by(f64::total_cmp);
    lowers.sort_by(f64::total_cmp);
    let upper = median(&uppers);
    let lower = median(&lowers);
    (upper - lower) * p.user_defined_threshold + lower
}

/// Keep/cut decision per edge: kept when strength clears the threshold.
pub fn edge_decisions(g: &ConnGraph, threshold: f64) -> EdgeDecisions {
    EdgeDecisions {
        h: g.h.iter().map(|&s| f64::from(s) >= threshold).collect(),
        v: g.v.iter().map(|&s| f64::from(s) >= threshold).collect(),
    }
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

fn kept_neighbors(
    block: usize,
    blocks_x: usize,
    blocks_y: usize,
    dec: &EdgeDecisions,
    mut visit: impl FnMut(usize),
) {
    let x = block % blocks_x;
    let y = block / blocks_x;
    if x > 0 && dec.h[y * (blocks_x - 1) + x - 1] {
        visit(block - 1);
    }
    if x + 1 < blocks_x && dec.h[y * (blocks_x - 1) + x] {
        visit(block + 1);
    }
    if y > 0 && dec.v[(y - 1) * blocks_x + x] {
        visit(block - blocks_x);
    }
    if y + 1 < blocks_y && dec.v[y * blocks_x + x] {
        visit(block + blocks_x);
    }
}

/// Chunks one connected component into groups of at most `max_group` blocks
/// by BFS from the lowest unassigned block index. Deterministic in the
/// component alone, which is what lets the incremental path reuse it.
fn split_component(
    component: &[usize],
    blocks_x: usize,
    blocks_y: usize,
    dec: &EdgeDecisions,
    max_group: usize,
    assign: &mut [u32],
    next_id: &mut u32,
) {
    debug_assert!(component.windows(2).all(|w| w[0] < w[1]));
    let mut assigned: std::collections::HashSet<usize> = std::collections::HashSet::new();
    for &seed in component {
        if assigned.contains(&seed) {
            continue;
        }
        let id = *next_id;
        *next_id += 1;
        let mut queue = std::collections::VecDeque::from([seed]);
        let mut taken = 0usize;
        while let Some(b) = queue.pop_front() {
            if assigned.contains(&b) {
                continue;
            }
            assigned.insert(b);
            assign[b] = id;
            taken += 1;
            if taken >= max_group {
                break;
            }
            kept_neighbors(b, blocks_x, blocks_y, dec, |n| {
                if !assigned.contains(&n) {
                    queue.push_back(n);
                }
            });
        }
    }
}

/// Full regrouping: union-find over kept edges, then the size-cap split.
pub fn group_full(g: &ConnGraph, threshold: f64, max_group: usize) -> Grouping {
    let decisions = edge_decisions(g, threshold);
    group_from_decisions(g.blocks_x, g.blocks_y, decisions, max_group)
}

fn group_from_decisions(
    blocks_x: usize,
    blocks_y: usize,
    decisions: EdgeDecisions,
    max_group: usize,
) -> Grouping {
    assert!(max_group >= 1);
    let n = blocks_x * blocks_y;
    let mut uf = UnionFind::new(n);
    for y in 0..blocks_y {
        for x in 0..blocks_x.saturating_sub(1) {
            if decisions.h[y * (blocks_x - 1) + x] {
                uf.union(y * blocks_x + x, y * blocks_x + x + 1);
            }
        }
    }
    for y in 0..blocks_y.saturating_sub(1) {
        for x in 0..blocks_x {
            if decisions.v[y * blocks_x + x] {
                uf.union(y * blocks_x + x, (y + 1) * blocks_x + x);
            }
        }
    }
    let mut members: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for b in 0..n {
        members.entry(uf.find(b)).or_default().push(b);
    }
    let mut group_of = vec![u32::MAX; n];
    let mut next_id = 0u32;
    for component in members.values() {
        split_component(component, blocks_x, blocks_y, &decisions, max_group, &mut group_of, &mut next_id);
    }
    Grouping { group_of, decisions, max_group }
}

/// Incremental regrouping: edges whose decision flipped raise deformation
/// flags; only the regions reachable from flagged edges through edges kept
/// in either frame are re-solved. Blocks outside keep their previous group
/// ids. Returns the grouping and the deformation-flag count.
///
/// The resulting partition always equals [`group_full`]'s (ids may differ).
pub fn group_incremental(
    prev: &Grouping,
    g: &ConnGraph,
    threshold: f64,
    max_group: usize,
) -> (Grouping, u64) {
    let cur = edge_decisions(g, threshold);
    if max_group != prev.max_group {
        // Size-cap change invalidates every previous chunk; re-solve fully.
        let deform = count_flips(&prev.decisions, &cur);
        return (group_from_decisions(g.blocks_x, g.blocks_y, cur, max_group), deform);
    }
    let deform = count_flips(&prev.decisions, &cur);
    if deform == 0 {
        return (
            Grouping { group_of: prev.group_of.clone(), decisions: cur, max_group },
            0,
        );
    }

    let (bx, by) = (g.blocks_x, g.blocks_y);
    let n = bx * by;
    // Seeds: endpoints of flipped edges.
    let mut in_region = vec![false; n];
    let mut queue: std::collections::VecDeque<usize> = std::collections::VecDeque::new();
    let seed = |b: usize, in_region: &mut Vec<bool>, queue: &mut std::collections::VecDeque<usize>| {
        if !in_region[b] {
            in_region[b] = true;
            queue.push_back(b);
        }
    };
    for y in 0..by {
        for x in 0..bx.saturating_sub(1) {
            let e = y * (bx - 1) + x;
            if prev.decisions.h[e] != cur.h[e] {
                seed(y * bx + x, &mut in_region, &mut queue);
                seed(y * bx + x + 1, &mut in_region, &mut queue);
            }
        }
    }
    for y in 0..by.saturating_sub(1) {
        for x in 0..bx {
            let e = y * bx + x;
            if prev.decisions.v[e] != cur.v[e] {
                seed(e, &mut in_region, &mut queue);
                seed(e + bx, &mut in_region, &mut queue);
            }
        }
    }
    // Close the region over edges kept in either frame: outside it, old and
    // new components provably coincide.
    while let Some(b) = queue.pop_front() {
        let mut push = |nb: usize| {
            if !in_region[nb] {
                in_region[nb] = true;
                queue.push_back(nb);
            }
        };
        kept_neighbors(b, bx, by, &cur, &mut push);
        kept_neighbors(b, bx, by, &prev.decisions, &mut push);
    }

    let mut group_of = prev.group_of.clone();
    let mut next_id = prev.group_of.iter().copied().max().unwrap_or(0) + 1;

    // Re-solve the region: union-find restricted to kept edges inside it.
    let region: Vec<usize> = (0..n).filter(|&b| in_region[b]).collect();
    let index_of: std::collections::HashMap<usize, usize> =
        region.iter().enumerate().map(|(i, &b)| (b, i)).collect();
    let mut uf = UnionFind::new(region.len());
    for &b in &region {
        kept_neighbors(b, bx, by, &cur, |nb| {
            if nb > b {
                debug_assert!(in_region[nb], "region must be closed under kept edges");
                uf.union(index_of[&b], index_of[&nb]);
            }
        });
    }
    let mut members: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for &b in &region {
        members.entry(uf.find(index_of[&b])).or_default().push(b);
    }
    for component in members.values() {
        split_component(component, bx, by, &cur, max_group, &mut group_of, &mut next_id);
    }
    (Grouping { group_of, decisions: cur, max_group }, deform)
}

fn count_flips(a: &EdgeDecisions, b: &EdgeDecisions) -> u64 {
    let h = a.h.iter().zip(&b.h).filter(|(x, y)| x != y).count();
    let v = a.v.iter().zip(&b.v).filter(|(x, y)| x != y).count();
    (h + v) as u64
}

/// Deterministic processing order: groups by smallest contained block index,
/// blocks in scan order within each group.
pub fn schedule(grouping: &Grouping) -> Vec<(u32, Vec<u32>)> {
    let mut first_block: std::collections::BTreeMap<u32, u32> = std::collections::BTreeMap::new();
    for (b, &gid) in grouping.group_of.iter().enumerate() {
        first_block.entry(gid).or_insert(b as u32);
    }
    let mut order: Vec<(u32, u32)> = first_block.into_iter().map(|(gid, fb)| (fb, gid)).collect();
    order.sort_unstable();
    let mut out: Vec<(u32, Vec<u32>)> = order.into_iter().map(|(_, gid)| (gid, Vec::new())).collect();
    let pos: std::collections::HashMap<u32, usize> =
        out.iter().enumerate().map(|(i, (gid, _))| (*gid, i)).collect();
    for (b, &gid) in grouping.group_of.iter().enumerate() {
        out[pos[&gid]].1.push(b as u32);
    }
    out
}

/// Partition signature independent of group-id labeling: blocks relabeled by
/// first appearance of their group in scan order.
pub fn canonical_partition(group_of: &[u32]) -> Vec<u32> {
    let mut relabel: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
    let mut next = 0u32;
    group_of
        .iter()
        .map(|gid| {
            *relabel.entry(*gid).or_insert_with(|| {
                let id = next;
                next += 1;
                id
            })
        })
        .collect()
}
