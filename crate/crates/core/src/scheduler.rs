//! Load-latency hiding scheduler.
//!
//! Ops are grouped into one queue per output word. Queues are interleaved
//! round-robin so that every table load is followed by at least `depth`
//! issue slots before its first consumer; when no queue has a ready op a NOP
//! fills the slot. With `depth` at or above the cache-miss latency the
//! consumer never stalls, whether the load hits or misses.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::micro_ir::{directive, Dep, DepKind, IrError, MicroOp, MicroProgram, QueueTag, VirtReg};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("nothing to schedule")]
    NoQueues,
    #[error("pipeline depth must be at least 1")]
    ZeroDepth,
    #[error("op {0} has no queue tag")]
    MissingTag(usize),
    #[error("unsatisfiable dependency at slot {slot}: every pending queue head waits on an unissued op")]
    Deadlock { slot: usize },
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A program op together with its position in the original program and the
/// dependencies that constrain where it may be placed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueuedOp {
    pub index: usize,
    pub op: MicroOp,
    pub deps: Vec<Dep>,
}

/// The ops of one output word, in program order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpQueue {
    pub tag: QueueTag,
    pub ops: Vec<QueuedOp>,
}

/// Partitions a program's ops by queue tag, preserving order. NOPs carry no
/// work and are dropped.
pub fn build_queues(p: &MicroProgram) -> Result<Vec<OpQueue>, ScheduleError> {
    let deps = p.dependencies()?;
    let mut queues: BTreeMap<QueueTag, Vec<QueuedOp>> = BTreeMap::new();
    for (index, (op, deps)) in p.ops.iter().zip(deps).enumerate() {
        if op.is_nop() {
            continue;
        }
        let tag = op.tag.ok_or(ScheduleError::MissingTag(index))?;
        queues.entry(tag).or_default().push(QueuedOp { index, op: op.clone(), deps });
    }
    Ok(queues.into_iter().map(|(tag, ops)| OpQueue { tag, ops }).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduledOp {
    /// Index in the original program.
    pub index: usize,
    pub queue: Option<QueueTag>,
    /// Position within its queue.
    pub position: usize,
    pub op: MicroOp,
    pub deps: Vec<Dep>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Slot {
    Nop,
    Op(ScheduledOp),
}

impl Slot {
    pub fn op(&self) -> Option<&ScheduledOp> {
        match self {
            Slot::Op(op) => Some(op),
            Slot::Nop => None,
        }
    }

    pub fn is_memory(&self) -> bool {
        self.op().is_some_and(|o| o.op.is_memory())
    }
}

/// An issue order for a program's ops, NOP padded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub depth: usize,
    pub slots: Vec<Slot>,
    pub inputs: Vec<VirtReg>,
    pub outputs: Vec<VirtReg>,
}

impl Schedule {
    /// The program laid out in its original order, without interleaving.
    pub fn linear(p: &MicroProgram) -> Result<Schedule, ScheduleError> {
        let deps = p.dependencies()?;
        let mut positions: HashMap<Option<QueueTag>, usize> = HashMap::new();
        let slots = p
            .ops
            .iter()
            .zip(deps)
            .enumerate()
            .map(|(index, (op, deps))| {
                if op.is_nop() {
                    return Slot::Nop;
                }
                let pos = positions.entry(op.tag).or_default();
                let position = *pos;
                *pos += 1;
                Slot::Op(ScheduledOp { index, queue: op.tag, position, op: op.clone(), deps })
            })
            .collect();
        Ok(Schedule { depth: 1, slots, inputs: p.inputs.clone(), outputs: p.outputs.clone() })
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn nop_count(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s, Slot::Nop)).count()
    }

    pub fn memory_op_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_memory()).count()
    }

    pub fn ops(&self) -> impl Iterator<Item = &ScheduledOp> {
        self.slots.iter().filter_map(Slot::op)
    }

    /// Drops the NOPs and restores program order.
    pub fn to_program(&self) -> MicroProgram {
        let mut ops: Vec<&ScheduledOp> = self.ops().collect();
        ops.sort_by_key(|o| o.index);
        MicroProgram {
            inputs: self.inputs.clone(),
            ops: ops.into_iter().map(|o| o.op.clone()).collect(),
            outputs: self.outputs.clone(),
        }
    }

    /// The ops in issue order, NOPs included, as a runnable program.
    pub fn flatten(&self) -> MicroProgram {
        MicroProgram {
            inputs: self.inputs.clone(),
            ops: self
                .slots
                .iter()
                .map(|s| match s {
                    Slot::Nop => MicroOp::nop(),
                    Slot::Op(o) => o.op.clone(),
                })
                .collect(),
            outputs: self.outputs.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("depth {}\n", self.depth);
        out.push_str(&self.flatten().to_text());
        out
    }

    /// Parses [`Schedule::to_text`] output. The original program order is
    /// recovered by a stable sort on queue tag when every op is tagged;
    /// otherwise the listed order is taken as program order.
    pub fn parse(text: &str) -> Result<Schedule, ScheduleError> {
        let mut depth = None;
        let mut body = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if let Some(rest) = directive(line, "depth") {
                let d: usize = rest
                    .parse()
                    .map_err(|_| ScheduleError::Parse { line: n + 1, message: format!("bad depth `{rest}`") })?;
                depth = Some(d);
                body.push('\n');
            } else {
                body.push_str(raw);
                body.push('\n');
            }
        }
        let listed = MicroProgram::parse(&body)?;
        let depth = depth.unwrap_or(1);
        if depth == 0 {
            return Err(ScheduleError::ZeroDepth);
        }

        let real: Vec<(usize, &MicroOp)> = listed.ops.iter().enumerate().filter(|(_, o)| !o.is_nop()).collect();
        let mut order: Vec<usize> = real.iter().map(|&(i, _)| i).collect();
        if real.iter().all(|(_, o)| o.tag.is_some()) {
            order.sort_by_key(|&i| listed.ops[i].tag);
        }
        let program = MicroProgram {
            inputs: listed.inputs.clone(),
            ops: order.iter().map(|&i| listed.ops[i].clone()).collect(),
            outputs: listed.outputs.clone(),
        };
        let base = Schedule::linear(&program)?;
        let mut by_listing: HashMap<usize, ScheduledOp> = HashMap::new();
        for (slot, listed_index) in base.slots.into_iter().zip(&order) {
            if let Slot::Op(op) = slot {
                by_listing.insert(*listed_index, op);
            }
        }
        let slots = (0..listed.ops.len()).map(|i| by_listing.remove(&i).map_or(Slot::Nop, Slot::Op)).collect();
        Ok(Schedule { depth, slots, inputs: program.inputs, outputs: program.outputs })
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

struct Placement {
    slots: Vec<Slot>,
    issued: HashMap<usize, usize>,
}

impl Placement {
    // Ops outside the current queues that were never issued are inputs to
    // this scheduling scope and count as available.
    fn ready(&self, op: &QueuedOp, slot: usize, depth: usize, pending: &HashMap<usize, ()>) -> Readiness {
        let mut gap_wait = false;
        for dep in &op.deps {
            match self.issued.get(&dep.on) {
                Some(&at) => {
                    let need = match dep.kind {
                        DepKind::Data { memory: true } => depth,
                        _ => 1,
                    };
                    if slot - at < need {
                        gap_wait = true;
                    }
                }
                None if pending.contains_key(&dep.on) => return Readiness::Blocked,
                None => {}
            }
        }
        if gap_wait {
            Readiness::Waiting
        } else {
            Readiness::Ready
        }
    }

    fn place(&mut self, queues: &[OpQueue], depth: usize) -> Result<(), ScheduleError> {
        let mut pending: HashMap<usize, ()> = queues.iter().flat_map(|q| q.ops.iter().map(|o| (o.index, ()))).collect();
        let mut heads = vec![0usize; queues.len()];
        let mut next = 0usize;
        while !pending.is_empty() {
            let slot = self.slots.len();
            let mut chosen = None;
            let mut any_waiting = false;
            for k in 0..queues.len() {
                let q = (next + k) % queues.len();
                let Some(op) = queues[q].ops.get(heads[q]) else { continue };
                match self.ready(op, slot, depth, &pending) {
                    Readiness::Ready => {
                        chosen = Some(q);
                        break;
                    }
                    Readiness::Waiting => any_waiting = true,
                    Readiness::Blocked => {}
                }
            }
            match chosen {
                Some(q) => {
                    let op = &queues[q].ops[heads[q]];
                    pending.remove(&op.index);
                    self.issued.insert(op.index, slot);
                    self.slots.push(Slot::Op(ScheduledOp {
                        index: op.index,
                        queue: Some(queues[q].tag),
                        position: heads[q],
                        op: op.op.clone(),
                        deps: op.deps.clone(),
                    }));
                    heads[q] += 1;
                    next = (q + 1) % queues.len();
                }
                None if any_waiting => self.slots.push(Slot::Nop),
                None => return Err(ScheduleError::Deadlock { slot }),
            }
        }
        Ok(())
    }
}

enum Readiness {
    Ready,
    Waiting,
    Blocked,
}

/// Interleaves `queues` round-robin: at each slot the next queue (in
/// rotating order) whose head op is ready issues it, otherwise a NOP is
/// emitted. A consumer of a load is ready `depth` slots after the load; a
/// consumer of an arithmetic op one slot after it.
pub fn schedule(queues: &[OpQueue], depth: usize) -> Result<Schedule, ScheduleError> {
    if depth == 0 {
        return Err(ScheduleError::ZeroDepth);
    }
    if queues.iter().all(|q| q.ops.is_empty()) {
        return Err(ScheduleError::NoQueues);
    }
    let mut placement = Placement { slots: Vec::new(), issued: HashMap::new() };
    placement.place(queues, depth)?;
    Ok(Schedule { depth, slots: placement.slots, inputs: Vec::new(), outputs: Vec::new() })
}

/// Schedules a whole program one round at a time: the queues of each round
/// are interleaved together and rounds are laid out in order.
pub fn schedule_program(p: &MicroProgram, depth: usize) -> Result<Schedule, ScheduleError> {
    if depth == 0 {
        return Err(ScheduleError::ZeroDepth);
    }
    let queues = build_queues(p)?;
    if queues.is_empty() {
        return Err(ScheduleError::NoQueues);
    }
    let mut rounds: BTreeMap<u8, Vec<OpQueue>> = BTreeMap::new();
    for q in queues {
        rounds.entry(q.tag.round).or_default().push(q);
    }
    let mut placement = Placement { slots: Vec::new(), issued: HashMap::new() };
    for group in rounds.values() {
        placement.place(group, depth)?;
    }
    Ok(Schedule { depth, slots: placement.slots, inputs: p.inputs.clone(), outputs: p.outputs.clone() })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LoadGap {
    pub slot: usize,
    pub index: usize,
    pub consumer_slot: Option<usize>,
    /// Slots from the load to its first consumer; 0 if a consumer precedes it.
    pub gap: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ScheduleReport {
    pub depth: usize,
    pub min_load_use_gap: Option<usize>,
    pub nop_count: usize,
    pub slot_count: usize,
    pub order_preserved: bool,
    pub dependencies_respected: bool,
    pub gaps: Vec<LoadGap>,
    pub passed: bool,
}

/// Measures every load's distance to its first consumer and checks queue order.
pub fn verify_gaps(s: &Schedule, depth: usize) -> ScheduleReport {
    let slot_of: HashMap<usize, usize> =
        s.slots.iter().enumerate().filter_map(|(i, slot)| slot.op().map(|o| (o.index, i))).collect();

    let mut first_use: HashMap<usize, isize> = HashMap::new();
    let mut dependencies_respected = true;
    for (slot, op) in s.slots.iter().enumerate().filter_map(|(i, sl)| sl.op().map(|o| (i, o))) {
        for dep in &op.deps {
            let Some(&at) = slot_of.get(&dep.on) else { continue };
            if at >= slot {
                dependencies_respected = false;
            }
            if let DepKind::Data { memory: true } = dep.kind {
                let d = slot as isize - at as isize;
                first_use.entry(dep.on).and_modify(|g| *g = (*g).min(d)).or_insert(d);
            }
        }
    }

    let gaps: Vec<LoadGap> = s
        .slots
        .iter()
        .enumerate()
        .filter(|(_, sl)| sl.is_memory())
        .map(|(slot, sl)| {
            let index = sl.op().unwrap().index;
            let d = first_use.get(&index).copied();
            LoadGap {
                slot,
                index,
                consumer_slot: d.map(|d| (slot as isize + d).max(0) as usize),
                gap: d.map(|d| d.max(0) as usize),
            }
        })
        .collect();
    let min_load_use_gap = gaps.iter().filter_map(|g| g.gap).min();

    let mut last_pos: HashMap<Option<QueueTag>, usize> = HashMap::new();
    let mut order_preserved = true;
    for op in s.ops() {
        if let Some(prev) = last_pos.insert(op.queue, op.position) {
            if op.position <= prev {
                order_preserved = false;
            }
        }
    }

    let passed = order_preserved && dependencies_respected && min_load_use_gap.is_none_or(|g| g >= depth);
    ScheduleReport {
        depth,
        min_load_use_gap,
        nop_count: s.nop_count(),
        slot_count: s.slot_count(),
        order_preserved,
        dependencies_respected,
        gaps,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aes::{encrypt_ttable, expand_key, Block, Key128, TTableSet};
    use crate::micro_ir::{decompose_encryption, decompose_word, interpret, OpKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn round_program(round: usize, words: &[usize]) -> MicroProgram {
        let mut p = MicroProgram::default();
        for &w in words {
            let f = decompose_word(round, w).unwrap();
            p.inputs = f.inputs;
            p.ops.extend(f.ops);
            p.outputs.extend(f.outputs);
        }
        p
    }

    #[test]
    fn one_round_gives_four_queues_of_eighteen() {
        let queues = build_queues(&round_program(1, &[0, 1, 2, 3])).unwrap();
        assert_eq!(queues.len(), 4);
        assert!(queues.iter().all(|q| q.ops.len() == 18));
        for (w, q) in queues.iter().enumerate() {
            assert_eq!(q.tag, QueueTag::new(1, w));
            let idx: Vec<usize> = q.ops.iter().map(|o| o.index).collect();
            assert!(idx.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn queues_are_data_independent() {
        let queues = build_queues(&round_program(1, &[0, 1, 2, 3])).unwrap();
        for q in &queues {
            let own: Vec<usize> = q.ops.iter().map(|o| o.index).collect();
            for op in &q.ops {
                assert!(op.deps.iter().all(|d| own.contains(&d.on)));
            }
        }
    }

    #[test]
    fn single_queue_partition_is_the_input() {
        let p = round_program(3, &[2]);
        let queues = build_queues(&p).unwrap();
        assert_eq!(queues.len(), 1);
        let ops: Vec<MicroOp> = queues[0].ops.iter().map(|o| o.op.clone()).collect();
        assert_eq!(ops, p.ops);
    }

    #[test]
    fn untagged_op_rejected() {
        let p = MicroProgram::parse("input a\noutput b\nb = COPY(a)\n").unwrap();
        assert_eq!(build_queues(&p), Err(ScheduleError::MissingTag(0)));
    }

    #[test]
    fn load_then_use_with_depth_four_needs_three_nops() {
        let p = MicroProgram::parse(
            "input s t\noutput t\nu = COPY(s) [queue=1.0]\nv = TLOAD.te0(u) [queue=1.0]\nt = XOR_ACC(t, v) [queue=1.0]\n",
        )
        .unwrap();
        let s = schedule(&build_queues(&p).unwrap(), 4).unwrap();
        assert_eq!(s.nop_count(), 3);
        let kinds: Vec<Option<OpKind>> = s.slots.iter().map(|sl| sl.op().map(|o| o.op.kind)).collect();
        assert_eq!(
            kinds,
            [Some(OpKind::Copy), Some(OpKind::TLoad(crate::aes::TableId::Te0)), None, None, None, Some(OpKind::XorAcc)]
        );
    }

    #[test]
    fn independent_queues_at_depth_one_need_no_nops() {
        let p = MicroProgram::parse(
            "input a b\noutput x y\nx = COPY(a) [queue=1.0]\nx = MASK(x) [queue=1.0]\ny = COPY(b) [queue=1.1]\ny = SHR.8(y) [queue=1.1]\n",
        )
        .unwrap();
        let s = schedule(&build_queues(&p).unwrap(), 1).unwrap();
        assert_eq!(s.nop_count(), 0);
        assert_eq!(s.slot_count(), 4);
        let order: Vec<usize> = s.ops().map(|o| o.index).collect();
        assert_eq!(order, [0, 2, 1, 3]);
    }

    #[test]
    fn two_words_at_depth_six_match_the_published_gap() {
        let p = round_program(1, &[0, 1]);
        let s = schedule(&build_queues(&p).unwrap(), 6).unwrap();
        let slot_of = |text: &str| {
            s.slots.iter().position(|sl| sl.op().is_some_and(|o| o.op.to_string().starts_with(text))).unwrap()
        };
        // Te0[u00] is consumed exactly six slots after it issues, likewise Te0[u10].
        assert_eq!(slot_of("t0 = RK_XOR.4(v00)") - slot_of("v00 = TLOAD.te0(u00)"), 6);
        assert_eq!(slot_of("t1 = RK_XOR.5(v10)") - slot_of("v10 = TLOAD.te0(u10)"), 6);
        // The two words alternate from the first slot.
        let first: Vec<String> = s.slots[..4].iter().map(|sl| sl.op().unwrap().op.to_string()).collect();
        assert_eq!(
            first,
            [
                "u00 = COPY(s0) [queue=1.0]",
                "u10 = COPY(s1) [queue=1.1]",
                "u00 = SHR.24(u00) [queue=1.0]",
                "u10 = SHR.24(u10) [queue=1.1]"
            ]
        );
        assert!(verify_gaps(&s, 6).passed);
    }

    #[test]
    fn deadlock_is_reported() {
        // Each queue head waits on the other queue's second op.
        let p = MicroProgram::parse("input a\noutput x y\nx = COPY(a) [queue=1.0]\ny = COPY(a) [queue=1.1]\n").unwrap();
        let mut queues = build_queues(&p).unwrap();
        let dep = |on| Dep { on, kind: DepKind::Data { memory: false } };
        queues[0].ops.insert(0, QueuedOp { index: 10, op: p.ops[0].clone(), deps: vec![dep(1)] });
        queues[1].ops.insert(0, QueuedOp { index: 11, op: p.ops[1].clone(), deps: vec![dep(0)] });
        assert_eq!(schedule(&queues, 2), Err(ScheduleError::Deadlock { slot: 0 }));
        assert_eq!(schedule(&[], 2), Err(ScheduleError::NoQueues));
        assert_eq!(schedule(&build_queues(&p).unwrap(), 0), Err(ScheduleError::ZeroDepth));
    }

    #[test]
    fn unscheduled_program_has_gap_one() {
        let s = Schedule::linear(&decompose_encryption()).unwrap();
        let r = verify_gaps(&s, 1);
        assert_eq!(r.min_load_use_gap, Some(1));
        assert!(r.passed);
        for depth in 2..8 {
            assert!(!verify_gaps(&s, depth).passed);
        }
        assert_eq!(r.gaps.len(), 160);
    }

    #[test]
    fn gap_soundness_over_depths() {
        let p = decompose_encryption();
        for depth in 1..=16 {
            let s = schedule_program(&p, depth).unwrap();
            let r = verify_gaps(&s, depth);
            assert!(r.passed, "depth {depth}: {:?}", r.min_load_use_gap);
            assert!(r.min_load_use_gap.unwrap() >= depth);
            assert_eq!(s.slot_count(), p.ops.len() + s.nop_count());
        }
    }

    #[test]
    fn nop_count_non_decreasing_in_depth() {
        let p = decompose_encryption();
        let nops: Vec<usize> =
            [6, 8, 10, 12, 14].iter().map(|&d| schedule_program(&p, d).unwrap().nop_count()).collect();
        assert!(nops.windows(2).all(|w| w[0] <= w[1]), "{nops:?}");
    }

    #[test]
    fn schedule_preserves_semantics_and_order() {
        let p = decompose_encryption();
        let tables = TTableSet::shared();
        let s = schedule_program(&p, 6).unwrap();
        assert_eq!(s.to_program(), p);
        let flat = crate::micro_ir::Interpreter::new(&s.flatten()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let ks = expand_key(&Key128(rng.gen()));
            let pt = Block(rng.gen());
            assert_eq!(flat.run(&pt, &ks, tables).unwrap(), encrypt_ttable(&pt, &ks, tables));
        }
        let fips = interpret(
            &s.flatten(),
            &Block::from_hex("00112233445566778899aabbccddeeff").unwrap(),
            &expand_key(&Key128::from_hex("000102030405060708090a0b0c0d0e0f").unwrap()),
            tables,
        )
        .unwrap();
        assert_eq!(fips.to_hex(), "69c4e0d86a7b0430d8cdb78070b4c55a");
    }

    #[test]
    fn schedule_is_deterministic_and_round_trips_as_text() {
        let p = decompose_encryption();
        let a = schedule_program(&p, 10).unwrap();
        let b = schedule_program(&p, 10).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let text = a.to_text();
        assert!(text.starts_with("depth 10\n"));
        assert!(text.contains("\nNOP\n"));
        assert_eq!(Schedule::parse(&text).unwrap(), a);
    }

    #[test]
    fn reordered_queue_fails_verification() {
        let p = MicroProgram::parse("input a\noutput x\nx = COPY(a) [queue=1.0]\nx = MASK(x) [queue=1.0]\n").unwrap();
        let mut s = Schedule::linear(&p).unwrap();
        s.slots.swap(0, 1);
        let r = verify_gaps(&s, 1);
        assert!(!r.order_preserved);
        assert!(!r.dependencies_respected);
        assert!(!r.passed);
    }
}
