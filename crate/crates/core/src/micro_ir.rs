//! Straight-line micro-operation IR for the table-driven AES rounds.
//!
//! Every round expression is split into single-cycle bitwise steps (copy,
//! shift, mask, xor) around the table loads. Each op carries a queue tag
//! naming the output word it helps compute, which is what the scheduler
//! interleaves on.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::aes::{Block, Lookup, RoundKeySchedule, TTableSet, TableId, ROUNDS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("op {op}: register `{reg}` used before definition")]
    UseBeforeDef { op: usize, reg: VirtReg },
    #[error("output register `{0}` is never defined")]
    UnknownRegister(VirtReg),
    #[error("op {op}: {kind} expects {expected} source(s) and {dst} destination")]
    Arity { op: usize, kind: &'static str, expected: usize, dst: &'static str },
    #[error("op {op}: table index {value:#x} out of range")]
    IndexOutOfRange { op: usize, value: u32 },
    #[error("op {op}: round key word {word} out of range")]
    RoundKeyOutOfRange { op: usize, word: u8 },
    #[error("invalid fragment coordinates: round {round}, word {word}")]
    InvalidFragment { round: usize, word: usize },
    #[error("program binds {expected} inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("program has {0} outputs, a block needs 4")]
    OutputCount(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A symbolic register such as `u01`, `v00` or `t0`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VirtReg(String);

impl VirtReg {
    pub fn new(name: impl Into<String>) -> Self {
        VirtReg(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn valid_name(s: &str) -> bool {
        let mut chars = s.chars();
        matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
            && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
    }
}

impl fmt::Display for VirtReg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for VirtReg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for VirtReg {
    fn from(s: &str) -> Self {
        VirtReg::new(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    /// `dst = src`
    Copy,
    /// `dst = src >> n` (logical)
    Shr(u8),
    /// `dst = src & 0xff`
    Mask,
    /// `dst = T[src]` for one of the four round tables.
    TLoad(TableId),
    /// `dst = S[src] << shift`, the final-round S-box read placed in its byte lane.
    SLoad {
        shift: u8,
    },
    /// `dst = rk[word] ^ src`
    RkXor(u8),
    /// `dst = a ^ b`
    XorAcc,
    Nop,
}

impl OpKind {
    pub fn is_memory(self) -> bool {
        matches!(self, OpKind::TLoad(_) | OpKind::SLoad { .. })
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            OpKind::Copy => "COPY",
            OpKind::Shr(_) => "SHR",
            OpKind::Mask => "MASK",
            OpKind::TLoad(_) => "TLOAD",
            OpKind::SLoad { .. } => "SLOAD",
            OpKind::RkXor(_) => "RK_XOR",
            OpKind::XorAcc => "XOR_ACC",
            OpKind::Nop => "NOP",
        }
    }

    fn src_count(self) -> usize {
        match self {
            OpKind::Nop => 0,
            OpKind::XorAcc => 2,
            _ => 1,
        }
    }

    /// The table this op reads, if it is a memory op.
    pub fn table(self) -> Option<TableId> {
        match self {
            OpKind::TLoad(t) => Some(t),
            OpKind::SLoad { .. } => Some(TableId::Sbox),
            _ => None,
        }
    }
}

/// Which output word (and round) an op contributes to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueueTag {
    pub round: u8,
    pub word: u8,
}

impl QueueTag {
    pub fn new(round: usize, word: usize) -> Self {
        QueueTag { round: round as u8, word: word as u8 }
    }
}

impl fmt::Display for QueueTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.round, self.word)
    }
}

impl FromStr for QueueTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (r, w) = s.split_once('.').ok_or_else(|| format!("bad queue tag `{s}`"))?;
        let round = r.parse().map_err(|_| format!("bad queue round `{r}`"))?;
        let word = w.parse().map_err(|_| format!("bad queue word `{w}`"))?;
        Ok(QueueTag { round, word })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MicroOp {
    pub kind: OpKind,
    pub dst: Option<VirtReg>,
    pub srcs: Vec<VirtReg>,
    pub tag: Option<QueueTag>,
}

impl MicroOp {
    pub fn new(kind: OpKind, dst: impl Into<VirtReg>, srcs: &[&str], tag: Option<QueueTag>) -> Self {
        MicroOp { kind, dst: Some(dst.into()), srcs: srcs.iter().map(|&s| VirtReg::new(s)).collect(), tag }
    }

    pub fn nop() -> Self {
        MicroOp { kind: OpKind::Nop, dst: None, srcs: Vec::new(), tag: None }
    }

    pub fn is_memory(&self) -> bool {
        self.kind.is_memory()
    }

    pub fn is_nop(&self) -> bool {
        self.kind == OpKind::Nop
    }
}

impl fmt::Display for MicroOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind == OpKind::Nop {
            return f.write_str("NOP");
        }
        if let Some(dst) = &self.dst {
            write!(f, "{dst} = ")?;
        }
        f.write_str(self.kind.mnemonic())?;
        match self.kind {
            OpKind::Shr(n) => write!(f, ".{n}")?,
            OpKind::TLoad(t) => write!(f, ".{}", t.name())?,
            OpKind::SLoad { shift } => write!(f, ".{shift}")?,
            OpKind::RkXor(w) => write!(f, ".{w}")?,
            _ => {}
        }
        f.write_str("(")?;
        for (i, s) in self.srcs.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{s}")?;
        }
        f.write_str(")")?;
        if let Some(tag) = self.tag {
            write!(f, " [queue={tag}]")?;
        }
        Ok(())
    }
}

impl FromStr for MicroOp {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let line = line.trim();
        if line == "NOP" {
            return Ok(MicroOp::nop());
        }
        let (body, tag) = match line.find('[') {
            Some(pos) => {
                let rest = line[pos..].trim();
                let inner = rest
                    .strip_prefix("[queue=")
                    .and_then(|r| r.strip_suffix(']'))
                    .ok_or_else(|| format!("bad queue annotation `{rest}`"))?;
                (line[..pos].trim(), Some(inner.trim().parse::<QueueTag>()?))
            }
            None => (line, None),
        };
        let (dst, expr) = body.split_once('=').ok_or("expected `dst = KIND(srcs)`")?;
        let dst = dst.trim();
        if !VirtReg::valid_name(dst) {
            return Err(format!("bad register name `{dst}`"));
        }
        let expr = expr.trim();
        let open = expr.find('(').ok_or("missing `(`")?;
        let args = expr[open + 1..].strip_suffix(')').ok_or("missing `)`")?;
        let (mnemonic, param) = match expr[..open].split_once('.') {
            Some((m, p)) => (m, Some(p)),
            None => (&expr[..open], None),
        };
        let num = |p: Option<&str>| -> Result<u8, String> {
            p.ok_or_else(|| format!("{mnemonic} needs a parameter"))?
                .parse::<u8>()
                .map_err(|_| format!("bad {mnemonic} parameter"))
        };
        let kind = match mnemonic {
            "COPY" => OpKind::Copy,
            "SHR" => match num(param)? {
                n @ (0 | 8 | 16 | 24) => OpKind::Shr(n),
                n => return Err(format!("shift amount {n} not in {{0,8,16,24}}")),
            },
            "MASK" => OpKind::Mask,
            "TLOAD" => {
                let t = param.and_then(TableId::from_name).ok_or("TLOAD needs te0..te3")?;
                if t == TableId::Sbox {
                    return Err("TLOAD cannot read the S-box; use SLOAD".into());
                }
                OpKind::TLoad(t)
            }
            "SLOAD" => match num(param)? {
                shift @ (0 | 8 | 16 | 24) => OpKind::SLoad { shift },
                n => return Err(format!("lane shift {n} not in {{0,8,16,24}}")),
            },
            "RK_XOR" => OpKind::RkXor(num(param)?),
            "XOR_ACC" => OpKind::XorAcc,
            other => return Err(format!("unknown op kind `{other}`")),
        };
        let mut srcs = Vec::new();
        for a in args.split(',').map(str::trim).filter(|a| !a.is_empty()) {
            if !VirtReg::valid_name(a) {
                return Err(format!("bad register name `{a}`"));
            }
            srcs.push(VirtReg::new(a));
        }
        Ok(MicroOp { kind, dst: Some(VirtReg::new(dst)), srcs, tag })
    }
}

/// Why op `i` must follow op `on`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DepKind {
    /// `i` reads the value `on` produced; `memory` is set when `on` is a load.
    Data { memory: bool },
    /// Write-after-read or write-after-write ordering on a reused register.
    Order,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dep {
    pub on: usize,
    pub kind: DepKind,
}

/// An ordered micro-op program with named input and output registers.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MicroProgram {
    pub inputs: Vec<VirtReg>,
    pub ops: Vec<MicroOp>,
    pub outputs: Vec<VirtReg>,
}

impl MicroProgram {
    pub fn memory_op_count(&self) -> usize {
        self.ops.iter().filter(|o| o.is_memory()).count()
    }

    pub fn count_kind(&self, pred: impl Fn(OpKind) -> bool) -> usize {
        self.ops.iter().filter(|o| pred(o.kind)).count()
    }

    /// Checks arity and that every source is an input or was defined earlier.
    pub fn validate(&self) -> Result<(), IrError> {
        let mut defined: std::collections::HashSet<&VirtReg> = self.inputs.iter().collect();
        for (i, op) in self.ops.iter().enumerate() {
            let expected = op.kind.src_count();
            let needs_dst = op.kind != OpKind::Nop;
            let ok_srcs = match op.kind {
                OpKind::RkXor(_) => op.srcs.len() <= 1,
                _ => op.srcs.len() == expected,
            };
            if !ok_srcs || op.dst.is_some() != needs_dst {
                return Err(IrError::Arity {
                    op: i,
                    kind: op.kind.mnemonic(),
                    expected,
                    dst: if needs_dst { "one" } else { "no" },
                });
            }
            if let OpKind::RkXor(w) = op.kind {
                if w as usize >= crate::aes::SCHEDULE_WORDS {
                    return Err(IrError::RoundKeyOutOfRange { op: i, word: w });
                }
            }
            for s in &op.srcs {
                if !defined.contains(s) {
                    return Err(IrError::UseBeforeDef { op: i, reg: s.clone() });
                }
            }
            if let Some(d) = &op.dst {
                defined.insert(d);
            }
        }
        for o in &self.outputs {
            if !defined.contains(o) {
                return Err(IrError::UnknownRegister(o.clone()));
            }
        }
        Ok(())
    }

    /// Per-op dependency lists: data (read-after-write) edges to the reaching
    /// definition of each source, plus ordering edges for register reuse.
    pub fn dependencies(&self) -> Result<Vec<Vec<Dep>>, IrError> {
        self.validate()?;
        let mut last_def: HashMap<&VirtReg, usize> = HashMap::new();
        let mut readers: HashMap<&VirtReg, Vec<usize>> = HashMap::new();
        let mut deps = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let mut d: Vec<Dep> = Vec::new();
            let mut push = |dep: Dep| {
                if let Some(existing) = d.iter_mut().find(|x| x.on == dep.on) {
                    if matches!(dep.kind, DepKind::Data { .. }) {
                        existing.kind = dep.kind;
                    }
                } else {
                    d.push(dep);
                }
            };
            for s in &op.srcs {
                if let Some(&p) = last_def.get(s) {
                    push(Dep { on: p, kind: DepKind::Data { memory: self.ops[p].is_memory() } });
                }
                readers.entry(s).or_default().push(i);
            }
            if let Some(dst) = &op.dst {
                for &r in readers.get(dst).map(Vec::as_slice).unwrap_or(&[]) {
                    if r != i {
                        push(Dep { on: r, kind: DepKind::Order });
                    }
                }
                if let Some(&p) = last_def.get(dst) {
                    push(Dep { on: p, kind: DepKind::Order });
                }
                last_def.insert(dst, i);
                readers.insert(dst, Vec::new());
            }
            d.sort_by_key(|x| x.on);
            deps.push(d);
        }
        Ok(deps)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("input {}\n", join_regs(&self.inputs)));
        out.push_str(&format!("output {}\n", join_regs(&self.outputs)));
        for op in &self.ops {
            out.push_str(&op.to_string());
            out.push('\n');
        }
        out
    }

    /// Parses the one-op-per-line text form produced by [`MicroProgram::to_text`].
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, IrError> {
        let mut p = MicroProgram::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| IrError::Parse { line: n + 1, message };
            if let Some(rest) = directive(line, "input") {
                p.inputs = parse_regs(rest).map_err(err)?;
            } else if let Some(rest) = directive(line, "output") {
                p.outputs = parse_regs(rest).map_err(err)?;
            } else {
                p.ops.push(line.parse().map_err(err)?);
            }
        }
        Ok(p)
    }
}

pub(crate) fn directive<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    let rest = line.strip_prefix(name)?;
    (rest.is_empty() || rest.starts_with(char::is_whitespace)).then(|| rest.trim())
}

fn join_regs(regs: &[VirtReg]) -> String {
    regs.iter().map(VirtReg::as_str).collect::<Vec<_>>().join(" ")
}

fn parse_regs(s: &str) -> Result<Vec<VirtReg>, String> {
    s.split_whitespace()
        .map(|r| if VirtReg::valid_name(r) { Ok(VirtReg::new(r)) } else { Err(format!("bad register name `{r}`")) })
        .collect()
}

fn state_prefixes(round: usize) -> (&'static str, &'static str) {
    // Rounds alternate s -> t -> s; the final (even) round writes s.
    if round % 2 == 1 {
        ("s", "t")
    } else {
        ("t", "s")
    }
}

fn round_fragment(round: usize, word: usize) -> MicroProgram {
    let (src, dst) = state_prefixes(round);
    let tag = Some(QueueTag::new(round, word));
    let acc = format!("{dst}{word}");
    let final_round = round == ROUNDS;
    let mut ops = Vec::with_capacity(18);
    for b in 0..4 {
        let u = format!("u{word}{b}");
        let v = format!("v{word}{b}");
        let source = format!("{src}{}", (word + b) % 4);
        ops.push(MicroOp::new(OpKind::Copy, u.as_str(), &[&source], tag));
        let shift = (24 - 8 * b) as u8;
        if shift != 0 {
            ops.push(MicroOp::new(OpKind::Shr(shift), u.as_str(), &[&u], tag));
        }
        if b != 0 {
            ops.push(MicroOp::new(OpKind::Mask, u.as_str(), &[&u], tag));
        }
        let load = if final_round { OpKind::SLoad { shift } } else { OpKind::TLoad(TableId::te(b)) };
        ops.push(MicroOp::new(load, v.as_str(), &[&u], tag));
        if b == 0 {
            ops.push(MicroOp::new(OpKind::RkXor((4 * round + word) as u8), acc.as_str(), &[&v], tag));
        } else {
            ops.push(MicroOp::new(OpKind::XorAcc, acc.as_str(), &[&acc, &v], tag));
        }
    }
    MicroProgram {
        inputs: (0..4).map(|i| VirtReg::new(format!("{src}{i}"))).collect(),
        ops,
        outputs: vec![VirtReg::new(acc)],
    }
}

/// The micro-op fragment computing output word `word` of main round `round`
/// (1..=9): copy, shift, mask and load for each of the four table terms,
/// folded into the accumulator seeded with the round key.
pub fn decompose_word(round: usize, word: usize) -> Result<MicroProgram, IrError> {
    if !(1..ROUNDS).contains(&round) || word > 3 {
        return Err(IrError::InvalidFragment { round, word });
    }
    Ok(round_fragment(round, word))
}

/// Final-round fragment for `word`, reading the S-box instead of the T tables.
pub fn decompose_final_word(word: usize) -> Result<MicroProgram, IrError> {
    if word > 3 {
        return Err(IrError::InvalidFragment { round: ROUNDS, word });
    }
    Ok(round_fragment(ROUNDS, word))
}

/// The full encryption: four whitening xors over inputs `p0..p3`, nine
/// table rounds and the final S-box round, with outputs `s0..s3`.
pub fn decompose_encryption() -> MicroProgram {
    let mut ops = Vec::with_capacity(4 + ROUNDS * 72);
    for w in 0..4 {
        let p = format!("p{w}");
        ops.push(MicroOp::new(OpKind::RkXor(w as u8), format!("s{w}").as_str(), &[&p], Some(QueueTag::new(0, w))));
    }
    for round in 1..=ROUNDS {
        for word in 0..4 {
            ops.extend(round_fragment(round, word).ops);
        }
    }
    MicroProgram {
        inputs: (0..4).map(|i| VirtReg::new(format!("p{i}"))).collect(),
        ops,
        outputs: (0..4).map(|i| VirtReg::new(format!("s{i}"))).collect(),
    }
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Nop,
    Copy { dst: u32, a: u32 },
    Shr { dst: u32, a: u32, n: u8 },
    Mask { dst: u32, a: u32 },
    Load { dst: u32, a: u32, table: TableId, shift: u8 },
    RkXor { dst: u32, a: Option<u32>, word: u8 },
    Xor { dst: u32, a: u32, b: u32 },
}

/// A program with registers resolved to slots, ready to run repeatedly.
#[derive(Clone, Debug)]
pub struct Interpreter {
    steps: Vec<Step>,
    inputs: Vec<u32>,
    outputs: Vec<u32>,
    registers: usize,
}

impl Interpreter {
    pub fn new(program: &MicroProgram) -> Result<Self, IrError> {
        program.validate()?;
        fn id<'a>(r: &'a VirtReg, ids: &mut HashMap<&'a VirtReg, u32>) -> u32 {
            let next = ids.len() as u32;
            *ids.entry(r).or_insert(next)
        }
        let mut ids: HashMap<&VirtReg, u32> = HashMap::new();
        let inputs: Vec<u32> = program.inputs.iter().map(|r| id(r, &mut ids)).collect();
        let mut steps = Vec::with_capacity(program.ops.len());
        for op in &program.ops {
            let srcs: Vec<u32> = op.srcs.iter().map(|r| id(r, &mut ids)).collect();
            let dst = op.dst.as_ref().map(|r| id(r, &mut ids)).unwrap_or(0);
            steps.push(match op.kind {
                OpKind::Nop => Step::Nop,
                OpKind::Copy => Step::Copy { dst, a: srcs[0] },
                OpKind::Shr(n) => Step::Shr { dst, a: srcs[0], n },
                OpKind::Mask => Step::Mask { dst, a: srcs[0] },
                OpKind::TLoad(table) => Step::Load { dst, a: srcs[0], table, shift: 0 },
                OpKind::SLoad { shift } => Step::Load { dst, a: srcs[0], table: TableId::Sbox, shift },
                OpKind::RkXor(word) => Step::RkXor { dst, a: srcs.first().copied(), word },
                OpKind::XorAcc => Step::Xor { dst, a: srcs[0], b: srcs[1] },
            });
        }
        let outputs = program.outputs.iter().map(|r| id(r, &mut ids)).collect();
        Ok(Interpreter { steps, inputs, outputs, registers: ids.len() })
    }

    /// Runs on raw input words, reporting each table read to `observe`.
    pub fn run_words_with<F: FnMut(Lookup)>(
        &self,
        inputs: &[u32],
        ks: &RoundKeySchedule,
        tables: &TTableSet,
        mut observe: F,
    ) -> Result<Vec<u32>, IrError> {
        if inputs.len() != self.inputs.len() {
            return Err(IrError::InputCount { expected: self.inputs.len(), got: inputs.len() });
        }
        let mut regs = vec![0u32; self.registers.max(1)];
        for (&slot, &v) in self.inputs.iter().zip(inputs) {
            regs[slot as usize] = v;
        }
        for (i, step) in self.steps.iter().enumerate() {
            match *step {
                Step::Nop => {}
                Step::Copy { dst, a } => regs[dst as usize] = regs[a as usize],
                Step::Shr { dst, a, n } => regs[dst as usize] = regs[a as usize] >> n,
                Step::Mask { dst, a } => regs[dst as usize] = regs[a as usize] & 0xff,
                Step::Load { dst, a, table, shift } => {
                    let value = regs[a as usize];
                    if value > 0xff {
                        return Err(IrError::IndexOutOfRange { op: i, value });
                    }
                    let index = value as u8;
                    observe(Lookup { table, index });
                    regs[dst as usize] = tables.read(table, index) << shift;
                }
                Step::RkXor { dst, a, word } => {
                    regs[dst as usize] = ks.word(word as usize) ^ a.map_or(0, |a| regs[a as usize]);
                }
                Step::Xor { dst, a, b } => regs[dst as usize] = regs[a as usize] ^ regs[b as usize],
            }
        }
        Ok(self.outputs.iter().map(|&o| regs[o as usize]).collect())
    }

    pub fn run_words(&self, inputs: &[u32], ks: &RoundKeySchedule, tables: &TTableSet) -> Result<Vec<u32>, IrError> {
        self.run_words_with(inputs, ks, tables, |_| {})
    }

    /// Runs a four-input, four-output program on a block.
    pub fn run(&self, pt: &Block, ks: &RoundKeySchedule, tables: &TTableSet) -> Result<Block, IrError> {
        self.run_traced(pt, ks, tables, |_| {})
    }

    pub fn run_traced<F: FnMut(Lookup)>(
        &self,
        pt: &Block,
        ks: &RoundKeySchedule,
        tables: &TTableSet,
        observe: F,
    ) -> Result<Block, IrError> {
        if self.outputs.len() != 4 {
            return Err(IrError::OutputCount(self.outputs.len()));
        }
        let out = self.run_words_with(&pt.words(), ks, tables, observe)?;
        Ok(Block::from_words([out[0], out[1], out[2], out[3]]))
    }
}

/// Executes `program` on a block. Equivalent to table-driven encryption for
/// [`decompose_encryption`] and any schedule of it.
pub fn interpret(
    program: &MicroProgram,
    pt: &Block,
    ks: &RoundKeySchedule,
    tables: &TTableSet,
) -> Result<Block, IrError> {
    Interpreter::new(program)?.run(pt, ks, tables)
}
