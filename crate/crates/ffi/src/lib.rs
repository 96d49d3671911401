//! C ABI over `ctaes`.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `_free` function. Every fallible call returns a
//! [`CtaesStatus`]; on failure [`ctaes_last_error`] gives a message for the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ctaes::aes::{encrypt_reference, encrypt_ttable, expand_key, Block, Key128, TTableSet};
use ctaes::attack::{candidate_sets, correlate, ProfileBuilder};
use ctaes::micro_ir::{decompose_encryption, Interpreter};
use ctaes::scheduler::{schedule_program, verify_gaps, Schedule};
use ctaes::timing_sim::{timing_spread, CompiledSchedule, LatencyModel};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtaesStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ScheduleFailed = 3,
    SimulationFailed = 4,
    EmptyProfile = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtaesPath {
    Reference = 0,
    Ttable = 1,
    Micro = 2,
    Scheduled = 3,
}

/// Cycle latencies; must satisfy 1 <= exec <= hit < miss.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CtaesLatency {
    pub exec: u32,
    pub hit: u32,
    pub miss: u32,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CtaesScheduleStats {
    /// Required load-use gap; 1 for the unscheduled program.
    pub depth: usize,
    pub slots: usize,
    pub nops: usize,
    pub memory_ops: usize,
    /// SIZE_MAX when the schedule has no loads.
    pub min_load_use_gap: usize,
    pub gaps_verified: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CtaesSpread {
    pub min: u64,
    pub max: u64,
    pub patterns: usize,
}

/// A scheduled (or unscheduled) encryption program.
pub struct CtaesSchedule {
    schedule: Schedule,
    compiled: CompiledSchedule,
}

/// Accumulates (nonce, cycles) samples into a timing profile.
pub struct CtaesProfile {
    builder: ProfileBuilder,
}

/// Entries written by [`ctaes_profile_mean_dev`]: 16 positions by 256 values.
pub const CTAES_PROFILE_CELLS: usize = 16 * 256;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: CtaesStatus, message: impl Into<String>) -> CtaesStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn guard(f: impl FnOnce() -> CtaesStatus) -> CtaesStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(CtaesStatus::Panic, "internal panic"),
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(CtaesStatus::NullPointer, concat!("`", stringify!($p), "` is null"));
        })+
    };
}

unsafe fn read16(p: *const u8) -> [u8; 16] {
    ptr::read_unaligned(p as *const [u8; 16])
}

fn latency(lm: CtaesLatency) -> Result<LatencyModel, CtaesStatus> {
    LatencyModel::new(lm.exec, lm.hit, lm.miss).map_err(|e| fail(CtaesStatus::InvalidArgument, e.to_string()))
}

/// Encrypts one block. `depth` is only read for the scheduled path and must
/// be positive there.
///
/// # Safety
/// `key` and `pt` must point to 16 readable bytes, `out` to 16 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ctaes_encrypt(
    path: CtaesPath,
    depth: usize,
    key: *const u8,
    pt: *const u8,
    out: *mut u8,
) -> CtaesStatus {
    guard(|| {
        non_null!(key, pt, out);
        let ks = expand_key(&Key128(read16(key)));
        let pt = Block(read16(pt));
        let tables = TTableSet::shared();
        let ct = match path {
            CtaesPath::Reference => encrypt_reference(&pt, &ks),
            CtaesPath::Ttable => encrypt_ttable(&pt, &ks, tables),
            CtaesPath::Micro => {
                Interpreter::new(&decompose_encryption()).and_then(|i| i.run(&pt, &ks, tables)).unwrap()
            }
            CtaesPath::Scheduled => {
                let s = match schedule_program(&decompose_encryption(), depth) {
                    Ok(s) => s,
                    Err(e) => return fail(CtaesStatus::ScheduleFailed, e.to_string()),
                };
                Interpreter::new(&s.flatten()).and_then(|i| i.run(&pt, &ks, tables)).unwrap()
            }
        };
        ptr::copy_nonoverlapping(ct.0.as_ptr(), out, 16);
        CtaesStatus::Ok
    })
}

/// Schedules the full cipher for `depth`; depth 0 gives the unscheduled
/// program.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a handle to free
/// with [`ctaes_schedule_free`].
#[no_mangle]
pub unsafe extern "C" fn ctaes_schedule_new(depth: usize, out: *mut *mut CtaesSchedule) -> CtaesStatus {
    guard(|| {
        non_null!(out);
        let program = decompose_encryption();
        let schedule = match depth {
            0 => Schedule::linear(&program),
            d => schedule_program(&program, d),
        };
        match schedule {
            Ok(schedule) => {
                let compiled = CompiledSchedule::new(&schedule);
                *out = Box::into_raw(Box::new(CtaesSchedule { schedule, compiled }));
                CtaesStatus::Ok
            }
            Err(e) => fail(CtaesStatus::ScheduleFailed, e.to_string()),
        }
    })
}

/// # Safety
/// `s` must come from [`ctaes_schedule_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ctaes_schedule_free(s: *mut CtaesSchedule) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Gap statistics, verified against the schedule's own depth.
///
/// # Safety
/// `s` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ctaes_schedule_stats(s: *const CtaesSchedule, out: *mut CtaesScheduleStats) -> CtaesStatus {
    guard(|| {
        non_null!(s, out);
        let sched = &(*s).schedule;
        let report = verify_gaps(sched, sched.depth);
        *out = CtaesScheduleStats {
            depth: sched.depth,
            slots: sched.slot_count(),
            nops: sched.nop_count(),
            memory_ops: sched.memory_op_count(),
            min_load_use_gap: report.min_load_use_gap.unwrap_or(usize::MAX),
            gaps_verified: report.passed,
        };
        CtaesStatus::Ok
    })
}

/// Cycle count for one hit/miss pattern: `misses[i]` non-zero marks the
/// i-th memory op as a miss. `len` must equal the memory-op count.
///
/// # Safety
/// `misses` must point to `len` readable bytes; `s` and `cycles` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ctaes_schedule_simulate(
    s: *const CtaesSchedule,
    misses: *const u8,
    len: usize,
    lm: CtaesLatency,
    cycles: *mut u64,
) -> CtaesStatus {
    guard(|| {
        non_null!(s, misses, cycles);
        let lm = match latency(lm) {
            Ok(lm) => lm,
            Err(st) => return st,
        };
        let pattern: Vec<bool> = std::slice::from_raw_parts(misses, len).iter().map(|&b| b != 0).collect();
        match (*s).compiled.simulate_misses(&pattern, &lm) {
            Ok(c) => {
                *cycles = c.0;
                CtaesStatus::Ok
            }
            Err(e) => fail(CtaesStatus::SimulationFailed, e.to_string()),
        }
    })
}

/// Cycle range over the all-hit, all-miss and `samples` random patterns.
///
/// # Safety
/// `s` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ctaes_schedule_spread(
    s: *const CtaesSchedule,
    lm: CtaesLatency,
    samples: usize,
    seed: u64,
    out: *mut CtaesSpread,
) -> CtaesStatus {
    guard(|| {
        non_null!(s, out);
        let lm = match latency(lm) {
            Ok(lm) => lm,
            Err(st) => return st,
        };
        match timing_spread(&(*s).schedule, &lm, samples, seed) {
            Ok(t) => {
                *out = CtaesSpread { min: t.min, max: t.max, patterns: t.patterns };
                CtaesStatus::Ok
            }
            Err(e) => fail(CtaesStatus::SimulationFailed, e.to_string()),
        }
    })
}

/// # Safety
/// `out` must be a valid pointer; free the handle with [`ctaes_profile_free`].
#[no_mangle]
pub unsafe extern "C" fn ctaes_profile_new(out: *mut *mut CtaesProfile) -> CtaesStatus {
    guard(|| {
        non_null!(out);
        *out = Box::into_raw(Box::new(CtaesProfile { builder: ProfileBuilder::default() }));
        CtaesStatus::Ok
    })
}

/// # Safety
/// `p` must come from [`ctaes_profile_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ctaes_profile_free(p: *mut CtaesProfile) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Records one sample.
///
/// # Safety
/// `p` must be a live handle and `nonce` must point to 16 readable bytes.
#[no_mangle]
pub unsafe extern "C" fn ctaes_profile_add(p: *mut CtaesProfile, nonce: *const u8, cycles: u64) -> CtaesStatus {
    guard(|| {
        non_null!(p, nonce);
        (*p).builder.add(&read16(nonce), cycles);
        CtaesStatus::Ok
    })
}

/// Writes the mean deviation of every (position, value) cell, position-major.
///
/// # Safety
/// `p` must be a live handle and `out` must have room for
/// [`CTAES_PROFILE_CELLS`] doubles.
#[no_mangle]
pub unsafe extern "C" fn ctaes_profile_mean_dev(p: *const CtaesProfile, out: *mut f64) -> CtaesStatus {
    guard(|| {
        non_null!(p, out);
        let profile = match (*p).builder.clone().finish() {
            Ok(profile) => profile,
            Err(e) => return fail(CtaesStatus::EmptyProfile, e.to_string()),
        };
        let out = std::slice::from_raw_parts_mut(out, CTAES_PROFILE_CELLS);
        for (dst, row) in out.chunks_exact_mut(256).zip(&profile.mean_dev) {
            dst.copy_from_slice(row);
        }
        CtaesStatus::Ok
    })
}

/// Correlates a study profile (taken under `study_key`) with an attack
/// profile and keeps, per key byte, the guesses within `margin` standard
/// deviations of the best. Writes the 16 candidate-set sizes and the log2 of
/// their product.
///
/// # Safety
/// `study` and `attack` must be live handles, `study_key` must point to 16
/// readable bytes, `sizes` to 16 writable `uint16_t` and `log2_size` to a
/// writable double.
#[no_mangle]
pub unsafe extern "C" fn ctaes_key_space(
    study: *const CtaesProfile,
    study_key: *const u8,
    attack: *const CtaesProfile,
    margin: f64,
    sizes: *mut u16,
    log2_size: *mut f64,
) -> CtaesStatus {
    guard(|| {
        non_null!(study, study_key, attack, sizes, log2_size);
        let (s, a) = match ((*study).builder.clone().finish(), (*attack).builder.clone().finish()) {
            (Ok(s), Ok(a)) => (s, a),
            (Err(e), _) | (_, Err(e)) => return fail(CtaesStatus::EmptyProfile, e.to_string()),
        };
        let estimate = match candidate_sets(&correlate(&s, &Key128(read16(study_key)), &a), margin) {
            Ok(e) => e,
            Err(e) => return fail(CtaesStatus::InvalidArgument, e.to_string()),
        };
        let sizes = std::slice::from_raw_parts_mut(sizes, 16);
        for (dst, n) in sizes.iter_mut().zip(estimate.set_sizes()) {
            *dst = n as u16;
        }
        *log2_size = estimate.size_log2;
        CtaesStatus::Ok
    })
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the buffer size needed for the
/// whole message, including the terminator.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null with `len` 0.
#[no_mangle]
pub unsafe extern "C" fn ctaes_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn ctaes_status_str(status: CtaesStatus) -> *const c_char {
    let s: &'static CStr = match status {
        CtaesStatus::Ok => c"ok",
        CtaesStatus::NullPointer => c"null pointer argument",
        CtaesStatus::InvalidArgument => c"invalid argument",
        CtaesStatus::ScheduleFailed => c"scheduling failed",
        CtaesStatus::SimulationFailed => c"simulation failed",
        CtaesStatus::EmptyProfile => c"profile has no samples",
        CtaesStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}
