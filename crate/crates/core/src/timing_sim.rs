//! In-order, single-issue cycle model.
//!
//! One instruction issues every `exec` cycles. A load issued at cycle `c`
//! delivers its value at `c + hit` or `c + miss`; any instruction reading it
//! stalls until then. Nothing overlaps a stall, so the cycle count of a
//! schedule depends on its hit/miss pattern only through loads whose first
//! consumer sits closer than the miss latency.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::aes::{encrypt_ttable_with, Block, RoundKeySchedule, TTableSet, TableId};
use crate::micro_ir::DepKind;
use crate::scheduler::Schedule;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("hit/miss pattern has {got} entries, schedule has {expected} memory ops")]
    PatternLength { expected: usize, got: usize },
    #[error("latency model must satisfy 1 <= exec <= hit < miss (got {exec},{hit},{miss})")]
    Latency { exec: u32, hit: u32, miss: u32 },
    #[error("line size {0} must be a power of two between 4 and 1024 bytes")]
    LineSize(usize),
    #[error("bad latency model `{0}`, expected exec,hit,miss")]
    ParseLatency(String),
    #[error("bad hit/miss pattern `{0}`, expected a string of h and m")]
    ParsePattern(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct LatencyModel {
    pub exec: u32,
    pub hit: u32,
    pub miss: u32,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel { exec: 1, hit: 2, miss: 6 }
    }
}

impl LatencyModel {
    pub fn new(exec: u32, hit: u32, miss: u32) -> Result<Self, SimError> {
        if !(1 <= exec && exec <= hit && hit < miss) {
            return Err(SimError::Latency { exec, hit, miss });
        }
        Ok(LatencyModel { exec, hit, miss })
    }
}

impl FromStr for LatencyModel {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| SimError::ParseLatency(s.to_string()))?;
        match parts[..] {
            [exec, hit, miss] => LatencyModel::new(exec, hit, miss),
            _ => Err(SimError::ParseLatency(s.to_string())),
        }
    }
}

impl fmt::Display for LatencyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.exec, self.hit, self.miss)
    }
}

/// Cache outcome of each memory op, indexed by the op's rank among the
/// program's memory ops (program order, not issue order).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct HitMissPattern {
    misses: Vec<bool>,
}

impl HitMissPattern {
    pub fn all_hit(n: usize) -> Self {
        HitMissPattern { misses: vec![false; n] }
    }

    pub fn all_miss(n: usize) -> Self {
        HitMissPattern { misses: vec![true; n] }
    }

    pub fn from_misses(misses: Vec<bool>) -> Self {
        HitMissPattern { misses }
    }

    /// Pattern `bits` over `n` ops: bit `i` set means op `i` misses.
    pub fn from_bits(bits: u64, n: usize) -> Self {
        HitMissPattern { misses: (0..n).map(|i| bits >> i & 1 == 1).collect() }
    }

    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        HitMissPattern { misses: (0..n).map(|_| rng.gen()).collect() }
    }

    pub fn len(&self) -> usize {
        self.misses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.misses.is_empty()
    }

    pub fn is_miss(&self, i: usize) -> bool {
        self.misses[i]
    }

    pub fn set(&mut self, i: usize, miss: bool) {
        self.misses[i] = miss;
    }

    pub fn miss_count(&self) -> usize {
        self.misses.iter().filter(|&&m| m).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.misses
    }
}

impl fmt::Display for HitMissPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &m in &self.misses {
            f.write_str(if m { "m" } else { "h" })?;
        }
        Ok(())
    }
}

impl FromStr for HitMissPattern {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim()
            .chars()
            .map(|c| match c {
                'h' | 'H' | '0' => Ok(false),
                'm' | 'M' | '1' => Ok(true),
                _ => Err(SimError::ParsePattern(s.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(HitMissPattern::from_misses)
    }
}

/// A range of table entries that is not cache resident when an encryption starts.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EvictedSpan {
    pub table: TableId,
    pub entries: Range<u16>,
}

/// Cache contents at the start of each encryption.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum CacheStart {
    /// Nothing resident.
    Cold,
    /// Every table line resident except those overlapping the evicted spans,
    /// i.e. lines displaced by other memory traffic before the cipher runs.
    Warm { evicted: Vec<EvictedSpan> },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CacheConfig {
    pub line_size: usize,
    pub start: CacheStart,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { line_size: 64, start: CacheStart::Cold }
    }
}

impl CacheConfig {
    pub fn cold(line_size: usize) -> Result<Self, SimError> {
        let cfg = CacheConfig { line_size, start: CacheStart::Cold };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The server's cache state inside the measurement window: tables warm
    /// from previous requests, with one 64-byte span per round table
    /// displaced by the request buffers.
    pub fn server_window(line_size: usize) -> Result<Self, SimError> {
        let span = |table, first: u16| EvictedSpan { table, entries: first..first + 16 };
        let cfg = CacheConfig {
            line_size,
            start: CacheStart::Warm {
                evicted: vec![
                    span(TableId::Te0, 48),
                    span(TableId::Te1, 112),
                    span(TableId::Te2, 176),
                    span(TableId::Te3, 48),
                ],
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(4..=1024).contains(&self.line_size) || !self.line_size.is_power_of_two() {
            return Err(SimError::LineSize(self.line_size));
        }
        Ok(())
    }

    pub fn entries_per_line(&self) -> usize {
        self.line_size / 4
    }

    fn line_shift(&self) -> u32 {
        self.entries_per_line().trailing_zeros()
    }
}

/// One bit per (table, line).
#[derive(Clone, Copy)]
struct LineSet([[u64; 4]; 5]);

impl LineSet {
    fn test_and_set(&mut self, table: TableId, line: usize) -> bool {
        let word = &mut self.0[table.ordinal()][line >> 6];
        let bit = 1u64 << (line & 63);
        let was = *word & bit != 0;
        *word |= bit;
        was
    }

    fn clear(&mut self, table: TableId, line: usize) {
        self.0[table.ordinal()][line >> 6] &= !(1u64 << (line & 63));
    }
}

/// Precomputed starting residency for a cache configuration.
#[derive(Clone)]
pub struct CacheModel {
    shift: u32,
    initial: LineSet,
}

impl CacheModel {
    pub fn new(cfg: &CacheConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let shift = cfg.line_shift();
        let initial = match &cfg.start {
            CacheStart::Cold => LineSet([[0; 4]; 5]),
            CacheStart::Warm { evicted } => {
                let mut set = LineSet([[u64::MAX; 4]; 5]);
                for span in evicted {
                    for e in span.entries.clone().filter(|&e| e < 256) {
                        set.clear(span.table, (e as usize) >> shift);
                    }
                }
                set
            }
        };
        Ok(CacheModel { shift, initial })
    }

    /// Replays the encryption's lookups: a lookup hits iff its line is resident,
    /// and every lookup leaves its line resident.
    pub fn pattern(&self, pt: &Block, ks: &RoundKeySchedule, tables: &TTableSet) -> HitMissPattern {
        let mut misses = Vec::with_capacity(crate::aes::LOOKUPS_PER_ENCRYPTION);
        self.fill_pattern(pt, ks, tables, &mut misses);
        HitMissPattern { misses }
    }

    pub fn fill_pattern(&self, pt: &Block, ks: &RoundKeySchedule, tables: &TTableSet, misses: &mut Vec<bool>) {
        misses.clear();
        let mut resident = self.initial;
        encrypt_ttable_with(pt, ks, tables, |l| {
            misses.push(!resident.test_and_set(l.table, (l.index as usize) >> self.shift));
        });
    }
}

pub fn pattern_from_data(pt: &Block, ks: &RoundKeySchedule, cfg: &CacheConfig) -> Result<HitMissPattern, SimError> {
    Ok(CacheModel::new(cfg)?.pattern(pt, ks, TTableSet::shared()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize)]
pub struct CycleCount(pub u64);

impl fmt::Display for CycleCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug)]
struct SimSlot {
    /// Rank among memory ops when this slot is a load.
    memory: Option<u32>,
    producers: [u32; 2],
    producer_count: u8,
}

/// A schedule reduced to what the cycle model needs.
#[derive(Clone, Debug)]
pub struct CompiledSchedule {
    slots: Vec<SimSlot>,
    memory_ops: usize,
}

impl CompiledSchedule {
    pub fn new(s: &Schedule) -> Self {
        let mut mem_indices: Vec<usize> = s.ops().filter(|o| o.op.is_memory()).map(|o| o.index).collect();
        mem_indices.sort_unstable();
        let slot_of: std::collections::HashMap<usize, usize> =
            s.slots.iter().enumerate().filter_map(|(i, sl)| sl.op().map(|o| (o.index, i))).collect();

        let slots = s
            .slots
            .iter()
            .map(|sl| {
                let mut slot = SimSlot { memory: None, producers: [0; 2], producer_count: 0 };
                if let Some(op) = sl.op() {
                    if op.op.is_memory() {
                        slot.memory = Some(mem_indices.binary_search(&op.index).unwrap() as u32);
                    }
                    let mut producers: Vec<u32> = op
                        .deps
                        .iter()
                        .filter(|d| matches!(d.kind, DepKind::Data { .. }))
                        .filter_map(|d| slot_of.get(&d.on).map(|&p| p as u32))
                        .collect();
                    producers.dedup();
                    assert!(producers.len() <= 2, "micro ops read at most two registers");
                    slot.producer_count = producers.len() as u8;
                    slot.producers[..producers.len()].copy_from_slice(&producers);
                }
                slot
            })
            .collect();
        CompiledSchedule { slots, memory_ops: mem_indices.len() }
    }

    pub fn memory_op_count(&self) -> usize {
        self.memory_ops
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Cycle count for a pattern given as one miss flag per memory op.
    pub fn simulate_misses(&self, misses: &[bool], lm: &LatencyModel) -> Result<CycleCount, SimError> {
        if misses.len() != self.memory_ops {
            return Err(SimError::PatternLength { expected: self.memory_ops, got: misses.len() });
        }
        let exec = lm.exec as u64;
        let mut ready = vec![0u64; self.slots.len()];
        let mut next_issue = 0u64;
        let mut last_issue = None;
        for (i, slot) in self.slots.iter().enumerate() {
            let mut issue = next_issue;
            for &p in &slot.producers[..slot.producer_count as usize] {
                issue = issue.max(ready[p as usize]);
            }
            let latency = match slot.memory {
                Some(m) if misses[m as usize] => lm.miss as u64,
                Some(_) => lm.hit as u64,
                None => exec,
            };
            ready[i] = issue + latency;
            next_issue = issue + exec;
            last_issue = Some(issue);
        }
        Ok(CycleCount(last_issue.map_or(0, |c| c + exec)))
    }

    pub fn simulate(&self, pattern: &HitMissPattern, lm: &LatencyModel) -> Result<CycleCount, SimError> {
        self.simulate_misses(pattern.as_slice(), lm)
    }
}

/// Cycles taken by `s` when its loads hit or miss per `pattern`.
pub fn simulate(s: &Schedule, pattern: &HitMissPattern, lm: &LatencyModel) -> Result<CycleCount, SimError> {
    CompiledSchedule::new(s).simulate(pattern, lm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimingSpread {
    pub min: u64,
    pub max: u64,
    pub mean: f64,
    pub variance: f64,
    pub patterns: usize,
    pub exhaustive: bool,
}

impl TimingSpread {
    pub fn range(&self) -> u64 {
        self.max - self.min
    }
}

/// Largest memory-op count for which every pattern is enumerated.
pub const EXHAUSTIVE_LIMIT: usize = 12;

/// Cycle-count statistics over the all-hit and all-miss patterns plus
/// `samples` random ones (or every pattern for small programs).
pub fn timing_spread(s: &Schedule, lm: &LatencyModel, samples: usize, seed: u64) -> Result<TimingSpread, SimError> {
    let compiled = CompiledSchedule::new(s);
    let n = compiled.memory_op_count();
    let mut counts = Vec::new();
    let exhaustive = n <= EXHAUSTIVE_LIMIT;
    if exhaustive {
        for bits in 0..(1u64 << n) {
            counts.push(compiled.simulate(&HitMissPattern::from_bits(bits, n), lm)?.0);
        }
    } else {
        counts.push(compiled.simulate(&HitMissPattern::all_hit(n), lm)?.0);
        counts.push(compiled.simulate(&HitMissPattern::all_miss(n), lm)?.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples.max(1) {
            counts.push(compiled.simulate(&HitMissPattern::random(n, &mut rng), lm)?.0);
        }
    }
    let len = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / len;
    let variance = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / len;
    Ok(TimingSpread {
        min: *counts.iter().min().unwrap(),
        max: *counts.iter().max().unwrap(),
        mean,
        variance,
        patterns: counts.len(),
        exhaustive,
    })
}
