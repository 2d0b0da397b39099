//! Access-exact memory cost model: DRAM burst pricing over fetch schedules
//! plus the depth-segmented 2-way set-associative on-chip buffer the blend
//! stage reads records through.
//!
//! Records are priced at 16 bits per scalar regardless of the working float
//! width the simulation computes in. Energy weights are illustrative knobs;
//! every published comparison is a count ratio.

use serde::Serialize;
use thiserror::Error;

use crate::frustum_grid::FetchSchedule;

#[derive(Debug, Error, PartialEq)]
pub enum MemError {
    #[error("fetch schedule ranges overlap at record {0}")]
    OverlappingRanges(u32),
    #[error("record of {record_bytes} B cannot fit a 2-way set in {segment_bytes} B segments")]
    RecordTooLarge { record_bytes: u64, segment_bytes: u64 },
}

/// Bytes of one Gaussian record at 16-bit scalars: mean (4) + covariance
/// (10) + opacity (1) + SH (3·(deg+1)²).
pub fn record_bytes(sh_degree: usize) -> u64 {
    2 * (15 + 3 * (sh_degree as u64 + 1).pow(2))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DramCounters {
    /// Records delivered by fetch schedules (preprocessing reads).
    pub records_fetched: u64,
    pub fetch_bursts: u64,
    pub fetch_bytes: u64,
    /// Records re-read during blending because the buffer missed.
    pub refetch_records: u64,
    pub refetch_bursts: u64,
    pub refetch_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct DramModel {
    pub record_bytes: u64,
    pub burst_bytes: u64,
    pub counters: DramCounters,
}

impl DramModel {
    pub fn new(record_bytes: u64, burst_bytes: u64) -> Self {
        assert!(record_bytes > 0 && burst_bytes > 0);
        Self { record_bytes, burst_bytes, counters: DramCounters::default() }
    }

    /// Prices one frame's schedule: whole contiguous ranges stream as
    /// bursts. Rejects overlapping ranges (schedule contract violation).
    pub fn price_schedule(&mut self, sched: &FetchSchedule) -> Result<(), MemError> {
        let mut sorted = sched.ranges.clone();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[1].start < w[0].end {
                return Err(MemError::OverlappingRanges(w[1].start));
            }
        }
        for r in &sorted {
            let records = u64::from(r.len());
            let bytes = records * self.record_bytes;
            self.counters.records_fetched += records;
            self.counters.fetch_bytes += bytes;
            self.counters.fetch_bursts += bytes.div_ceil(self.burst_bytes);
        }
        Ok(())
    }

    /// Prices one record re-read caused by a buffer miss.
    pub fn price_refetch(&mut self) {
        self.counters.refetch_records += 1;
        self.counters.refetch_bytes += self.record_bytes;
        self.counters.refetch_bursts += self.record_bytes.div_ceil(self.burst_bytes);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BufferCounters {
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Line {
    id: u32,
    last_used: u64,
    valid: bool,
}

/// On-chip record buffer partitioned into N equal depth segments (N = the
/// sort's bucket count); lookups touch exactly one segment and resolve
/// through a 2-way set with LRU replacement. One line holds one record.
#[derive(Debug, Clone)]
pub struct BufferModel {
    pub capacity_bytes: u64,
    pub segments: usize,
    pub sets_per_segment: usize,
    pub counters: BufferCounters,
    lines: Vec<Line>,
    tick: u64,
}

impl BufferModel {
    pub fn new(capacity_bytes: u64, segments: usize, record_bytes: u64) -> Result<Self, MemError> {
        assert!(segments >= 1);
        let segment_bytes = capacity_bytes / segments as u64;
        let sets = segment_bytes / (2 * record_bytes);
        if sets == 0 {
            return Err(MemError::RecordTooLarge { record_bytes, segment_bytes });
        }
        Ok(Self {
            capacity_bytes,
            segments,
            sets_per_segment: sets as usize,
            counters: BufferCounters::default(),
            lines: vec![Line::default(); segments * sets as usize * 2],
            tick: 0,
        })
    }

    fn set_base(&self, segment: usize, id: u32) -> usize {
        // Fibonacci hash keeps the set index deterministic across platforms.
        let h = (u64::from(id)).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 32;
        let set = (h as usize) % self.sets_per_segment;
        (segment * self.sets_per_segment + set) * 2
    }

    /// Looks `id` up in the segment selected by its depth bucket. A miss
    /// evicts the set's LRU way and prices one DRAM re-fetch.
    pub fn access(&mut self, id: u32, depth_bucket: usize, dram: &mut DramModel) -> bool {
        assert!(depth_bucket < self.segments, "depth bucket out of range");
        self.tick += 1;
        self.counters.lookups += 1;
        let base = self.set_base(depth_bucket, id);
        for way in 0..2 {
            let line = &mut self.lines[base + way];
            if line.valid && line.id == id {
                line.last_used = self.tick;
                self.counters.hits += 1;
                return true;
            }
        }
        self.counters.misses += 1;
        let victim = if !self.lines[base].valid {
            base
        } else if !self.lines[base + 1].valid {
            base + 1
        } else if self.lines[base].last_used <= self.lines[base + 1].last_used {
            base
        } else {
            base + 1
        };
        if self.lines[victim].valid {
            self.counters.evictions += 1;
        }
        self.lines[victim] = Line { id, last_used: self.tick, valid: true };
        dram.price_refetch();
        false
    }
}

/// Illustrative energy weights (pJ per byte); reported results always carry
/// the raw counts alongside.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnergyConfig {
    pub dram_pj_per_byte: f64,
    pub sram_pj_per_byte: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self { dram_pj_per_byte: 100.0, sram_pj_per_byte: 1.0 }
    }
}

/// Snapshot of every counter plus the energy-weighted totals.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct MetricReport {
    pub dram: DramCounters,
    pub buffer: BufferCounters,
    pub dram_energy_pj: f64,
    pub sram_energy_pj: f64,
    pub total_energy_pj: f64,
}

pub fn report(dram: &DramModel, buffer: &BufferModel, energy: &EnergyConfig) -> MetricReport {
    let dram_bytes = dram.counters.fetch_bytes + dram.counters.refetch_bytes;
    let sram_bytes = buffer.counters.lookups * dram.record_bytes;
    let dram_energy_pj = dram_bytes as f64 * energy.dram_pj_per_byte;
    let sram_energy_pj = sram_bytes as f64 * energy.sram_pj_per_byte;
    MetricReport {
        dram: dram.counters,
        buffer: buffer.counters,
        dram_energy_pj,
        sram_energy_pj,
        total_energy_pj: dram_energy_pj + sram_energy_pj,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frustum_grid::RecordRange;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sched(ranges: &[(u32, u32)]) -> FetchSchedule {
        FetchSchedule {
            ranges: ranges.iter().map(|&(start, end)| RecordRange { start, end }).collect(),
        }
    }

    #[test]
    fn record_bytes_by_degree() {
        assert_eq!(record_bytes(0), 2 * 18);
        assert_eq!(record_bytes(1), 2 * 27);
        assert_eq!(record_bytes(3), 2 * 63);
    }

    #[test]
    fn single_record_single_burst() {
        let mut dram = DramModel::new(64, 64);
        dram.price_schedule(&sched(&[(0, 1)])).unwrap();
        assert_eq!(dram.counters.fetch_bursts, 1);
        assert_eq!(dram.counters.records_fetched, 1);
        assert_eq!(dram.counters.fetch_bytes, 64);
    }

    #[test]
    fn three_records_two_bursts() {
        let mut dram = DramModel::new(64, 128);
        dram.price_schedule(&sched(&[(10, 13)])).unwrap();
        assert_eq!(dram.counters.fetch_bursts, 2); // 192 B over 128 B bursts
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let mut dram = DramModel::new(64, 64);
        assert_eq!(
            dram.price_schedule(&sched(&[(0, 5), (4, 8)])),
            Err(MemError::OverlappingRanges(4))
        );
    }

    /// Byte-walk oracle: counts bursts by walking every byte of each range.
    #[test]
    fn burst_counting_matches_byte_walk() {
        let mut r = ChaCha8Rng::seed_from_u64(401);
        for _ in 0..200 {
            let record_bytes = r.random_range(2..200);
            let burst = r.random_range(8..256);
            let mut dram = DramModel::new(record_bytes, burst);
            let mut ranges = Vec::new();
            let mut cursor = 0u32;
            for _ in 0..r.random_range(1..8) {
                cursor += r.random_range(0..5);
                let len = r.random_range(1..40);
                ranges.push((cursor, cursor + len));
                cursor += len;
            }
            let s = sched(&ranges);
            dram.price_schedule(&s).unwrap();

            let mut bursts = 0u64;
            let mut bytes = 0u64;
            for (start, end) in &ranges {
                let range_bytes = u64::from(end - start) * record_bytes;
                for b in 0..range_bytes {
                    if b % burst == 0 {
                        bursts += 1;
                    }
                }
                bytes += range_bytes;
            }
            assert_eq!(dram.counters.fetch_bursts, bursts);
            assert_eq!(dram.counters.fetch_bytes, bytes);
        }
    }

    fn tiny_buffer() -> (BufferModel, DramModel) {
        // 1 segment, 1 set, 2 ways.
        (BufferModel::new(128, 1, 64).unwrap(), DramModel::new(64, 64))
    }

    #[test]
    fn two_way_set_retains_both() {
        let (mut buf, mut dram) = tiny_buffer();
        assert!(!buf.access(1, 0, &mut dram)); // miss
        assert!(!buf.access(2, 0, &mut dram)); // miss
        assert!(buf.access(1, 0, &mut dram)); // hit
        assert_eq!(buf.counters.hits, 1);
        assert_eq!(buf.counters.misses, 2);
        assert_eq!(dram.counters.refetch_records, 2);
    }

    #[test]
    fn lru_trace_evicts_oldest() {
        let (mut buf, mut dram) = tiny_buffer();
        assert!(!buf.access(1, 0, &mut dram));
        assert!(!buf.access(2, 0, &mut dram));
        assert!(!buf.access(3, 0, &mut dram)); // evicts 1 (LRU)
        assert!(!buf.access(1, 0, &mut dram)); // 1 is gone again
        assert_eq!(buf.counters.misses, 4);
        assert_eq!(buf.counters.evictions, 2);
    }

    #[test]
    fn oversized_record_is_a_config_error() {
        assert!(matches!(
            BufferModel::new(64, 2, 64),
            Err(MemError::RecordTooLarge { .. })
        ));
    }

    /// Trace-replay oracle: explicit per-set MRU lists.
    #[test]
    fn random_traces_match_explicit_cache_simulation() {
        let mut r = ChaCha8Rng::seed_from_u64(409);
        for _ in 0..50 {
            let segments = r.random_range(1..5);
            let record = 64u64;
            let capacity = r.random_range(2..9) * segments as u64 * 2 * record;
            let mut buf = BufferModel::new(capacity, segments, record).unwrap();
            let mut dram = DramModel::new(record, 64);
            // Oracle state: per (segment, set), MRU-first id list of len ≤ 2.
            let mut oracle: Vec<Vec<u32>> =
                vec![Vec::new(); segments * buf.sets_per_segment];
            for _ in 0..2000 {
                let id = r.random_range(0..60u32);
                let seg = r.random_range(0..segments);
                let got_hit = buf.access(id, seg, &mut dram);
                let set = (buf.set_base(seg, id)) / 2;
                let slot = &mut oracle[set];
                let expected_hit = if let Some(pos) = slot.iter().position(|&x| x == id) {
                    let v = slot.remove(pos);
                    slot.insert(0, v);
                    true
                } else {
                    slot.insert(0, id);
                    slot.truncate(2);
                    false
                };
                assert_eq!(got_hit, expected_hit);
            }
            assert_eq!(buf.counters.hits + buf.counters.misses, buf.counters.lookups);
            assert_eq!(dram.counters.refetch_records, buf.counters.misses);
        }
    }

    #[test]
    fn zero_traffic_report_is_all_zero() {
        let dram = DramModel::new(54, 64);
        let buf = BufferModel::new(262144, 8, 54).unwrap();
        let rep = report(&dram, &buf, &EnergyConfig::default());
        assert_eq!(rep.dram, DramCounters::default());
        assert_eq!(rep.buffer, BufferCounters::default());
        assert_eq!(rep.total_energy_pj, 0.0);
    }

    #[test]
    fn energy_weighting_matches_hand_computation() {
        let mut dram = DramModel::new(64, 64);
        let mut buf = BufferModel::new(256, 1, 64).unwrap();
        dram.price_schedule(&sched(&[(0, 2)])).unwrap(); // 128 B fetched
        buf.access(0, 0, &mut dram); // miss: +64 B refetch
        buf.access(0, 0, &mut dram); // hit
        buf.access(1, 0, &mut dram); // miss: +64 B refetch
        let energy = EnergyConfig { dram_pj_per_byte: 2.0, sram_pj_per_byte: 0.5 };
        let rep = report(&dram, &buf, &energy);
        assert_eq!(rep.dram_energy_pj, (128.0 + 128.0) * 2.0);
        assert_eq!(rep.sram_energy_pj, 3.0 * 64.0 * 0.5);
        assert_eq!(rep.total_energy_pj, rep.dram_energy_pj + rep.sram_energy_pj);
    }

    #[test]
    fn counters_are_monotone() {
        let mut dram = DramModel::new(64, 64);
        let mut buf = BufferModel::new(1024, 2, 64).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(419);
        let mut prev_lookups = 0;
        let mut prev_bytes = 0;
        for _ in 0..100 {
            buf.access(r.random_range(0..20), r.random_range(0..2), &mut dram);
            assert!(buf.counters.lookups > prev_lookups);
            assert!(dram.counters.refetch_bytes >= prev_bytes);
            prev_lookups = buf.counters.lookups;
            prev_bytes = dram.counters.refetch_bytes;
        }
    }
}
