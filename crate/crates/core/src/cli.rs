//! Command-line front end.
//!
//! Every option can also come from a `key = value` config file passed with
//! `--config`; keys are the long flag names. Flags given on the command line
//! win over the file, and the file wins over built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::aes::{encrypt_reference, encrypt_ttable, expand_key, Block, HexError, Key128, TTableSet, TableId};
use crate::attack::{
    run_attack, AttackConfig, AttackError, AttackSummary, InProcessOracle, TimingOracle, MAX_PACKET_LEN,
};
use crate::micro_ir::{decompose_encryption, decompose_final_word, decompose_word, Interpreter, IrError, MicroProgram};
use crate::scheduler::{schedule_program, verify_gaps, Schedule, ScheduleError};
use crate::service::{
    collect, resolve, Client, NetworkOracle, Server, ServerConfig, ServerMode, ServiceError, SimulatedTiming,
    TimingMode,
};
use crate::timing_sim::{timing_spread, CacheConfig, CompiledSchedule, HitMissPattern, LatencyModel, SimError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error(transparent)]
    Hex(#[from] HexError),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("depth {depth}: {source}")]
    Depth { depth: usize, source: Box<CliError> },
}

impl CliError {
    pub fn is_usage(&self) -> bool {
        matches!(self, CliError::Usage(_) | CliError::Config { .. } | CliError::Hex(_))
    }
}

#[derive(Debug, Parser)]
#[command(name = "ctaes", version, about = "Constant-time T-table AES: scheduling, simulation and timing attacks")]
pub struct Cli {
    /// key = value file supplying defaults for any long flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the four round tables and the S-box.
    Tables(TablesArgs),
    /// Encrypt one block along a chosen implementation path.
    Encrypt(EncryptArgs),
    /// Print the micro-op program for a word, a round or the whole cipher.
    Decompose(DecomposeArgs),
    /// Interleave a program for a pipeline depth.
    Schedule(ScheduleArgs),
    /// Check the load-use gaps of a schedule.
    Verify(VerifyArgs),
    /// Cycle counts of a schedule over hit/miss patterns.
    Simulate(SimulateArgs),
    /// Study, attack and correlate against a simulated or remote server.
    Attack(AttackArgs),
    /// Write the timing-deviation profile of one server.
    Profile(ProfileArgs),
    /// Run the timing server.
    Serve(ServeArgs),
    /// Send requests to a server and record timings.
    Collect(CollectArgs),
    /// Full experiment over a list of depths.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EncryptPath {
    Reference,
    Ttable,
    Micro,
    Scheduled,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Unprotected,
    Protected,
}

/// Cache state at the start of each simulated encryption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheKind {
    /// Empty cache.
    Cold,
    /// Warm tables with one span per round table evicted.
    Server,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TimingSource {
    Real,
    Sim,
}

macro_rules! from_str_via_value_enum {
    ($($t:ty),*) => {$(
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                <$t as ValueEnum>::from_str(s, true)
            }
        }
    )*};
}
from_str_via_value_enum!(EncryptPath, Mode, CacheKind, TimingSource);

impl CacheKind {
    pub fn config(self, line_size: usize) -> Result<CacheConfig, SimError> {
        match self {
            CacheKind::Cold => CacheConfig::cold(line_size),
            CacheKind::Server => CacheConfig::server_window(line_size),
        }
    }
}

/// Comma-separated list of depths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthList(pub Vec<usize>);

impl FromStr for DepthList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let depths = s
            .split(',')
            .map(|d| d.trim().parse::<usize>().map_err(|e| format!("bad depth `{d}`: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if depths.is_empty() || depths.contains(&0) {
            return Err(format!("depths must be positive, got `{s}`"));
        }
        Ok(DepthList(depths))
    }
}

#[derive(Debug, Args)]
pub struct TablesArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncryptArgs {
    #[arg(long)]
    pub key: Option<Key128>,
    #[arg(long)]
    pub pt: Option<Block>,
    #[arg(long, value_enum)]
    pub path: Option<EncryptPath>,
    /// Required for the scheduled path.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Fail unless the ciphertext equals this value.
    #[arg(long)]
    pub expect: Option<Block>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// 1..=10; omit for the whole cipher.
    #[arg(long)]
    pub round: Option<usize>,
    /// 0..=3; omit for every word of the round.
    #[arg(long)]
    pub word: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub depth: Option<usize>,
    /// Program text to schedule; defaults to the whole cipher.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub depth: Option<usize>,
    /// Schedule text to check; defaults to scheduling the whole cipher.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Include every load's gap in the report.
    #[arg(long)]
    pub verbose: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Omit to simulate the unscheduled program.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Schedule text to simulate instead of the cipher.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub lm: Option<LatencyModel>,
    /// Cache line size for data-derived patterns.
    #[arg(long)]
    pub line_size: Option<usize>,
    #[arg(long)]
    pub cache: Option<CacheKind>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Derive patterns from random plaintexts under this key instead of
    /// drawing them uniformly.
    #[arg(long)]
    pub key: Option<Key128>,
    /// Fail unless every pattern takes the same number of cycles.
    #[arg(long)]
    pub check_constant: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub lm: Option<LatencyModel>,
    #[arg(long)]
    pub line_size: Option<usize>,
    #[arg(long)]
    pub cache: Option<CacheKind>,
    /// Constant cycles added for the work outside the cipher.
    #[arg(long)]
    pub offset: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub oracle: OracleArgs,
    /// Key of the simulated target; defaults to one drawn from the seed.
    #[arg(long)]
    pub key: Option<Key128>,
    #[arg(long)]
    pub study_key: Option<Key128>,
    /// Attack a remote server instead of a simulated one.
    #[arg(long)]
    pub target: Option<String>,
    /// Remote server for the study phase; simulated when omitted.
    #[arg(long)]
    pub study_target: Option<String>,
    /// Key of a remote target, for reporting containment.
    #[arg(long)]
    pub true_key: Option<Key128>,
    #[arg(long)]
    pub packets_per_cell: Option<usize>,
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub retries: Option<usize>,
    /// Write the summary as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write study and attack profile CSVs into this directory.
    #[arg(long)]
    pub profile_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub oracle: OracleArgs,
    #[arg(long)]
    pub key: Option<Key128>,
    #[arg(long)]
    pub packets_per_cell: Option<usize>,
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub oracle: OracleArgs,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub key: Option<Key128>,
    #[arg(long)]
    pub timing: Option<TimingSource>,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub packets: Option<usize>,
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub depths: Option<DepthList>,
    #[arg(long)]
    pub lm: Option<LatencyModel>,
    #[arg(long)]
    pub line_size: Option<usize>,
    #[arg(long)]
    pub cache: Option<CacheKind>,
    #[arg(long)]
    pub packets_per_cell: Option<usize>,
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub key: Option<Key128>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

const KNOWN_KEYS: &[&str] = &[
    "bind",
    "cache",
    "check-constant",
    "depth",
    "depths",
    "expect",
    "input",
    "json",
    "key",
    "len",
    "line-size",
    "lm",
    "margin",
    "mode",
    "offset",
    "out",
    "out-dir",
    "packets",
    "packets-per-cell",
    "path",
    "profile-dir",
    "pt",
    "retries",
    "round",
    "samples",
    "seed",
    "study-key",
    "study-target",
    "target",
    "timeout-ms",
    "timing",
    "true-key",
    "verbose",
    "word",
];

/// Parsed `key = value` config file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| CliError::Config { line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
            let key = k.trim().replace('_', "-");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::Usage(format!("config `{key}`: {e}"))))
            .transpose()
    }

    /// Flag value, else the file's value, else `None`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    fn flag(&self, flag: bool, key: &str) -> Result<bool, CliError> {
        Ok(flag || self.get::<bool>(key)?.unwrap_or(false))
    }

    fn path(&self, flag: &Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.clone().or_else(|| self.values.get(key).map(PathBuf::from))
    }
}

fn require<T>(v: Option<T>, flag: &str, context: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("--{flag} is required {context}")))
}

fn emit(text: &[u8], out_path: Option<PathBuf>, stdout: &mut dyn Write) -> Result<(), CliError> {
    match out_path {
        Some(p) => fs::write(p, text)?,
        None => stdout.write_all(text)?,
    }
    Ok(())
}

/// Key drawn deterministically from a seed, used when no target key is given.
pub fn key_from_seed(seed: u64) -> Key128 {
    Key128(ChaCha8Rng::seed_from_u64(seed ^ 0x6b65_795f_7365_6564).gen())
}

fn server_mode(mode: Mode, depth: Option<usize>) -> Result<ServerMode, CliError> {
    match mode {
        Mode::Unprotected => Ok(ServerMode::Unprotected),
        Mode::Protected => Ok(ServerMode::Protected { depth: require(depth, "depth", "in protected mode")? }),
    }
}

struct OracleSettings {
    mode: ServerMode,
    lm: LatencyModel,
    cache: CacheConfig,
    offset: u64,
}

impl OracleSettings {
    fn resolve(a: &OracleArgs, cfg: &ConfigFile) -> Result<Self, CliError> {
        let mode = cfg.or(a.mode, "mode", Mode::Unprotected)?;
        let depth = cfg.pick(a.depth, "depth")?;
        let line_size = cfg.or(a.line_size, "line-size", 64)?;
        Ok(OracleSettings {
            mode: server_mode(mode, depth)?,
            lm: cfg.or(a.lm, "lm", LatencyModel::default())?,
            cache: cfg.or(a.cache, "cache", CacheKind::Server)?.config(line_size)?,
            offset: cfg.or(a.offset, "offset", 0)?,
        })
    }

    fn timing(&self, key: &Key128) -> Result<SimulatedTiming, CliError> {
        Ok(SimulatedTiming::new(key, self.mode, self.lm, &self.cache, self.offset)?)
    }
}

/// Runs one command. `Ok(false)` means a requested check failed.
pub fn run(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<bool, CliError> {
    let cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Tables(a) => cmd_tables(&a, &cfg, stdout),
        Command::Encrypt(a) => cmd_encrypt(&a, &cfg, stdout),
        Command::Decompose(a) => cmd_decompose(&a, &cfg, stdout),
        Command::Schedule(a) => cmd_schedule(&a, &cfg, stdout, stderr),
        Command::Verify(a) => cmd_verify(&a, &cfg, stdout),
        Command::Simulate(a) => cmd_simulate(&a, &cfg, stdout, stderr),
        Command::Attack(a) => cmd_attack(&a, &cfg, stdout),
        Command::Profile(a) => cmd_profile(&a, &cfg, stdout, stderr),
        Command::Serve(a) => cmd_serve(&a, &cfg, stderr),
        Command::Collect(a) => cmd_collect(&a, &cfg, stdout, stderr),
        Command::Sweep(a) => cmd_sweep(&a, &cfg, stdout),
    }
}

pub fn tables_text(tables: &TTableSet) -> String {
    let mut s = String::new();
    for t in TableId::ALL {
        let per_line = if t == TableId::Sbox { 16 } else { 8 };
        writeln!(s, "{}", t.name()).unwrap();
        for row in 0..256 / per_line {
            let line: Vec<String> = (0..per_line)
                .map(|c| {
                    let v = tables.read(t, (row * per_line + c) as u8);
                    if t == TableId::Sbox {
                        format!("{v:02x}")
                    } else {
                        format!("{v:08x}")
                    }
                })
                .collect();
            writeln!(s, "{}", line.join(" ")).unwrap();
        }
    }
    s
}

fn cmd_tables(a: &TablesArgs, cfg: &ConfigFile, stdout: &mut dyn Write) -> Result<bool, CliError> {
    emit(tables_text(TTableSet::shared()).as_bytes(), cfg.path(&a.out, "out"), stdout)?;
    Ok(true)
}

pub fn encrypt_path(path: EncryptPath, key: &Key128, pt: &Block, depth: Option<usize>) -> Result<Block, CliError> {
    let ks = expand_key(key);
    let tables = TTableSet::shared();
    Ok(match path {
        EncryptPath::Reference => encrypt_reference(pt, &ks),
        EncryptPath::Ttable => encrypt_ttable(pt, &ks, tables),
        EncryptPath::Micro => Interpreter::new(&decompose_encryption())?.run(pt, &ks, tables)?,
        EncryptPath::Scheduled => {
            let depth = require(depth, "depth", "for the scheduled path")?;
            let s = schedule_program(&decompose_encryption(), depth)?;
            Interpreter::new(&s.flatten())?.run(pt, &ks, tables)?
        }
        EncryptPath::All => return Err(CliError::Usage("`all` is not a single path".into())),
    })
}

fn cmd_encrypt(a: &EncryptArgs, cfg: &ConfigFile, stdout: &mut dyn Write) -> Result<bool, CliError> {
    let key = require(cfg.pick(a.key, "key")?, "key", "")?;
    let pt = require(cfg.pick(a.pt, "pt")?, "pt", "")?;
    let path = cfg.or(a.path, "path", EncryptPath::Ttable)?;
    let depth = cfg.pick(a.depth, "depth")?;
    let expect = cfg.pick(a.expect, "expect")?;
    let outputs = if path == EncryptPath::All {
        let depth = require(depth, "depth", "for the scheduled path")?;
        [EncryptPath::Reference, EncryptPath::Ttable, EncryptPath::Micro, EncryptPath::Scheduled]
            .iter()
            .map(|&p| Ok((p, encrypt_path(p, &key, &pt, Some(depth))?)))
            .collect::<Result<Vec<_>, CliError>>()?
    } else {
        vec![(path, encrypt_path(path, &key, &pt, depth)?)]
    };
    let mut ok = outputs.iter().all(|(_, ct)| *ct == outputs[0].1);
    if let Some(e) = expect {
        ok &= outputs[0].1 == e;
    }
    if outputs.len() == 1 {
        writeln!(stdout, "{}", outputs[0].1)?;
    } else {
        for (p, ct) in &outputs {
            let name = p.to_possible_value().unwrap();
            writeln!(stdout, "{:<10} {ct}", name.get_name())?;
        }
    }
    Ok(ok)
}

fn cmd_decompose(a: &DecomposeArgs, cfg: &ConfigFile, stdout: &mut dyn Write) -> Result<bool, CliError> {
    let round = cfg.pick(a.round, "round")?;
    let word = cfg.pick(a.word, "word")?;
    let fragment = |r: usize, w: usize| if r == 10 { decompose_final_word(w) } else { decompose_word(r, w) };
    let program = match (round, word) {
        (None, None) => decompose_encryption(),
        (None, Some(_)) => return Err(CliError::Usage("--word needs --round".into())),
        (Some(r), Some(w)) => fragment(r, w)?,
        (Some(r), None) => {
            let parts = (0..4).map(|w| fragment(r, w)).collect::<Result<Vec<_>, _>>()?;
            MicroProgram {
                inputs: parts.iter().flat_map(|p| p.inputs.clone()).collect(),
                ops: parts.iter().flat_map(|p| p.ops.clone()).collect(),
                outputs: parts.iter().flat_map(|p| p.outputs.clone()).collect(),
            }
        }
    };
    emit(program.to_text().as_bytes(), cfg.path(&a.out, "out"), stdout)?;
    Ok(true)
}

fn load_program(input: Option<PathBuf>) -> Result<MicroProgram, CliError> {
    match input {
        Some(p) => Ok(MicroProgram::parse(&fs::read_to_string(p)?)?),
        None => Ok(decompose_encryption()),
    }
}

fn cmd_schedule(
    a: &ScheduleArgs,
    cfg: &ConfigFile,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<bool, CliError> {
    let depth = require(cfg.pick(a.depth, "depth")?, "depth", "")?;
    let program = load_program(cfg.path(&a.input, "input"))?;
    let s = schedule_program(&program, depth)?;
    writeln!(stderr, "depth {depth}: {} slots, {} NOPs", s.slot_count(), s.nop_count())?;
    emit(s.to_text().as_bytes(), cfg.path(&a.out, "out"), stdout)?;
    Ok(true)
}

fn cmd_verify(a: &VerifyArgs, cfg: &ConfigFile, stdout: &mut dyn Write) -> Result<bool, CliError> {
    let depth = cfg.pick(a.depth, "depth")?;
    let s = match cfg.path(&a.input, "input") {
        Some(p) => Schedule::parse(&fs::read_to_string(p)?)?,
        None => schedule_program(&decompose_encryption(), require(depth, "depth", "")?)?,
    };
    let depth = depth.unwrap_or(s.depth);
    let mut report = verify_gaps(&s, depth);
    if !cfg.flag(a.verbose, "verbose")? {
        report.gaps.clear();
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    emit(text.as_bytes(), cfg.path(&a.out, "out"), stdout)?;
    Ok(report.passed)
}

fn cmd_simulate(
    a: &SimulateArgs,
    cfg: &ConfigFile,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<bool, CliError> {
    let lm = cfg.or(a.lm, "lm", LatencyModel::default())?;
    let samples = cfg.or(a.samples, "samples", 10_000)?;
    let seed = cfg.or(a.seed, "seed", 0)?;
    let s = match (cfg.path(&a.input, "input"), cfg.pick(a.depth, "depth")?) {
        (Some(p), _) => Schedule::parse(&fs::read_to_string(p)?)?,
        (None, Some(d)) => schedule_program(&decompose_encryption(), d)?,
        (None, None) => Schedule::linear(&decompose_encryption())?,
    };
    let compiled = CompiledSchedule::new(&s);
    let n = compiled.memory_op_count();
    let mut csv = String::from("pattern_id,cycles\n");
    let mut counts = Vec::with_capacity(samples + 2);
    match cfg.pick(a.key, "key")? {
        Some(key) => {
            let line_size = cfg.or(a.line_size, "line-size", 64)?;
            let model =
                crate::timing_sim::CacheModel::new(&cfg.or(a.cache, "cache", CacheKind::Cold)?.config(line_size)?)?;
            let ks = expand_key(&key);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..samples.max(1) {
                let pattern = model.pattern(&Block(rng.gen()), &ks, TTableSet::shared());
                counts.push(compiled.simulate(&pattern, &lm)?.0);
            }
        }
        None => {
            counts.push(compiled.simulate(&HitMissPattern::all_hit(n), &lm)?.0);
            counts.push(compiled.simulate(&HitMissPattern::all_miss(n), &lm)?.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..samples {
                counts.push(compiled.simulate(&HitMissPattern::random(n, &mut rng), &lm)?.0);
            }
        }
    }
    for (i, c) in counts.iter().enumerate() {
        writeln!(csv, "{i},{c}").unwrap();
    }
    let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    writeln!(stderr, "{} patterns, cycles {min}..={max}, spread {}", counts.len(), max - min)?;
    emit(csv.as_bytes(), cfg.path(&a.out, "out"), stdout)?;
    Ok(!cfg.flag(a.check_constant, "check-constant")? || min == max)
}

fn network_oracle(target: &str, timeout: Duration, retries: usize) -> Result<NetworkOracle, CliError> {
    Ok(NetworkOracle::new(Client::connect(resolve(target)?, timeout)?, retries))
}

fn cmd_attack(a: &AttackArgs, cfg: &ConfigFile, stdout: &mut dyn Write) -> Result<bool, CliError> {
    let oracle = OracleSettings::resolve(&a.oracle, cfg)?;
    let seed = cfg.or(a.seed, "seed", 0)?;
    let attack_cfg = AttackConfig {
        packets_per_cell: cfg.or(a.packets_per_cell, "packets-per-cell", AttackConfig::default().packets_per_cell)?,
        packet_len: cfg.or(a.len, "len", MAX_PACKET_LEN)?,
        margin: cfg.or(a.margin, "margin", 1.0)?,
        seed,
        study_key: cfg.or(a.study_key, "study-key", Key128::default())?,
        ..AttackConfig::default()
    };
    let timeout = Duration::from_millis(cfg.or(a.timeout_ms, "timeout-ms", 1000)?);
    let retries = cfg.or(a.retries, "retries", 3)?;
    let remote = cfg.pick(a.target.clone(), "target")?;
    let (mut target, true_key): (Box<dyn TimingOracle>, Option<Key128>) = match &remote {
        Some(addr) => (Box::new(network_oracle(addr, timeout, retries)?), cfg.pick(a.true_key, "true-key")?),
        None => {
            let key = cfg.or(a.key, "key", key_from_seed(seed))?;
            (Box::new(InProcessOracle::new(oracle.timing(&key)?)), Some(key))
        }
    };
    let mut study: Box<dyn TimingOracle> = match cfg.pick(a.study_target.clone(), "study-target")? {
        Some(addr) => Box::new(network_oracle(&addr, timeout, retries)?),
        None => Box::new(InProcessOracle::new(oracle.timing(&attack_cfg.study_key)?)),
    };
    let report = run_attack(study.as_mut(), target.as_mut(), &attack_cfg, true_key.as_ref())?;
    stdout.write_all(report.to_text().as_bytes())?;
    if let Some(p) = cfg.path(&a.json, "json") {
        fs::write(p, serde_json::to_string_pretty(&report.summary())? + "\n")?;
    }
    if let Some(dir) = cfg.path(&a.profile_dir, "profile-dir") {
        fs::create_dir_all(&dir)?;
        report.study.write_csv(fs::File::create(dir.join("study.csv"))?)?;
        report.attack.write_csv(fs::File::create(dir.join("attack.csv"))?)?;
    }
    Ok(report.contained.is_none_or(|c| c.iter().all(|&x| x)))
}

fn cmd_profile(
    a: &ProfileArgs,
    cfg: &ConfigFile,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<bool, CliError> {
    let oracle = OracleSettings::resolve(&a.oracle, cfg)?;
    let seed = cfg.or(a.seed, "seed", 0)?;
    let key = cfg.or(a.key, "key", Key128::default())?;
    let ppc = cfg.or(a.packets_per_cell, "packets-per-cell", AttackConfig::default().packets_per_cell)?;
    let len = cfg.or(a.len, "len", MAX_PACKET_LEN)?;
    let mut o = InProcessOracle::new(oracle.timing(&key)?);
    let profile = crate::attack::profile_oracle(&mut o, ppc, len, seed, AttackConfig::default().batch_size)?;
    let max_abs = profile.mean_dev.iter().flat_map(|r| r.iter()).fold(0.0f64, |m, d| m.max(d.abs()));
    writeln!(stderr, "{} samples, grand mean {:.4}, max |mean_dev| {max_abs:.4}", profile.samples, profile.grand_mean)?;
    let mut csv = Vec::new();
    profile.write_csv(&mut csv)?;
    emit(&csv, cfg.path(&a.out, "out"), stdout)?;
    Ok(true)
}

fn cmd_serve(a: &ServeArgs, cfg: &ConfigFile, stderr: &mut dyn Write) -> Result<bool, CliError> {
    let oracle = OracleSettings::resolve(&a.oracle, cfg)?;
    let bind = resolve(&cfg.or(a.bind.clone(), "bind", "127.0.0.1:9000".to_string())?)?;
    let key = require(cfg.pick(a.key, "key")?, "key", "")?;
    let timing = match cfg.or(a.timing, "timing", TimingSource::Real)? {
        TimingSource::Real => TimingMode::Real,
        TimingSource::Sim => TimingMode::Simulated { lm: oracle.lm, cache: oracle.cache, offset: oracle.offset },
    };
    let server = Server::bind(ServerConfig { key, mode: oracle.mode, bind, timing })?;
    writeln!(stderr, "listening on {}", server.local_addr()?)?;
    server.serve()?;
    Ok(true)
}

fn cmd_collect(
    a: &CollectArgs,
    cfg: &ConfigFile,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<bool, CliError> {
    let target = resolve(&require(cfg.pick(a.target.clone(), "target")?, "target", "")?)?;
    let packets = cfg.or(a.packets, "packets", 10_000)?;
    let len = cfg.or(a.len, "len", MAX_PACKET_LEN)?;
    let seed = cfg.or(a.seed, "seed", 0)?;
    let timeout = Duration::from_millis(cfg.or(a.timeout_ms, "timeout-ms", 1000)?);
    let client = Client::connect(target, timeout)?;
    let collection = collect(&client, packets, len, seed)?;
    writeln!(
        stderr,
        "{} responses, {} lost ({:.3}% loss)",
        collection.samples.len(),
        collection.lost,
        100.0 * collection.loss_rate()
    )?;
    let mut csv = Vec::new();
    collection.write_csv(&mut csv)?;
    emit(&csv, cfg.path(&a.out, "out"), stdout)?;
    Ok(true)
}

/// Parameters of a depth sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub depths: Vec<usize>,
    pub lm: LatencyModel,
    pub line_size: usize,
    pub cache: CacheKind,
    pub packets_per_cell: usize,
    pub packet_len: usize,
    pub margin: f64,
    pub seed: u64,
    /// Random hit/miss patterns per depth for the spread check.
    pub spread_samples: usize,
    #[serde(serialize_with = "ser_key")]
    pub key: Key128,
    pub out_dir: Option<PathBuf>,
}

fn ser_key<S: serde::Serializer>(k: &Key128, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&k.to_hex())
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            depths: vec![6, 8, 10, 12, 14],
            lm: LatencyModel::default(),
            line_size: 64,
            cache: CacheKind::Server,
            packets_per_cell: 1 << 13,
            packet_len: MAX_PACKET_LEN,
            margin: 1.0,
            seed: 0,
            spread_samples: 10_000,
            key: key_from_seed(0),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.depths.is_empty() || self.depths.contains(&0) {
            return Err(CliError::Usage("depths must be a non-empty list of positive integers".into()));
        }
        self.cache.config(self.line_size)?;
        if self.packets_per_cell == 0 {
            return Err(AttackError::NoPackets.into());
        }
        if !(crate::attack::MIN_PACKET_LEN..=MAX_PACKET_LEN).contains(&self.packet_len) {
            return Err(AttackError::PacketLen(self.packet_len).into());
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err(AttackError::Margin(self.margin).into());
        }
        Ok(())
    }

    fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            packets_per_cell: self.packets_per_cell,
            packet_len: self.packet_len,
            margin: self.margin,
            seed: self.seed,
            ..AttackConfig::default()
        }
    }

    fn run_attack(&self, mode: ServerMode) -> Result<crate::attack::AttackReport, CliError> {
        let cache = self.cache.config(self.line_size)?;
        let attack_cfg = self.attack_config();
        let timing = |k: &Key128| SimulatedTiming::new(k, mode, self.lm, &cache, 0);
        let mut study = InProcessOracle::new(timing(&attack_cfg.study_key)?);
        let mut target = InProcessOracle::new(timing(&self.key)?);
        Ok(run_attack(&mut study, &mut target, &attack_cfg, Some(&self.key))?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthRow {
    pub depth: usize,
    pub slots: usize,
    pub nops: usize,
    pub min_load_use_gap: Option<usize>,
    pub gaps_verified: bool,
    pub all_hit_cycles: u64,
    pub all_miss_cycles: u64,
    /// Scheduled all-hit cycles over unscheduled all-hit cycles.
    pub overhead: f64,
    pub spread: u64,
    pub spread_patterns: usize,
    pub key_space: AttackSummary,
    /// Whether this depth is expected to hide every miss (depth >= miss latency).
    pub covers_miss: bool,
}

impl DepthRow {
    pub fn passed(&self) -> bool {
        self.gaps_verified
            && (!self.covers_miss || (self.spread == 0 && self.key_space.set_sizes.iter().all(|&n| n == 256)))
    }
}

/// Everything a sweep produces.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportBundle {
    pub config: ExperimentConfig,
    pub unscheduled_all_hit_cycles: u64,
    pub unscheduled_spread: u64,
    pub unprotected: AttackSummary,
    pub rows: Vec<DepthRow>,
    #[serde(skip)]
    pub unprotected_profile: crate::attack::TimingProfile,
    #[serde(skip)]
    pub protected_profiles: Vec<(usize, crate::attack::TimingProfile)>,
}

impl ReportBundle {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(DepthRow::passed)
            && self.unscheduled_spread > 0
            && self.unprotected.all_contained == Some(true)
            && self.unprotected.size_log2 < 128.0
    }

    pub fn sweep_csv(&self) -> String {
        let mut s = String::from(
            "depth,slots,nops,min_load_use_gap,gaps_verified,all_hit_cycles,all_miss_cycles,unscheduled_all_hit_cycles,overhead,spread,spread_patterns,key_space_log2,key_space_decimal\n",
        );
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{:.6},{},{},{:.6},{:.6e}",
                r.depth,
                r.slots,
                r.nops,
                r.min_load_use_gap.map_or(String::new(), |g| g.to_string()),
                r.gaps_verified,
                r.all_hit_cycles,
                r.all_miss_cycles,
                self.unscheduled_all_hit_cycles,
                r.overhead,
                r.spread,
                r.spread_patterns,
                r.key_space.size_log2,
                r.key_space.size_decimal,
            )
            .unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "unscheduled: {} cycles all-hit, spread {}",
            self.unscheduled_all_hit_cycles, self.unscheduled_spread
        )
        .unwrap();
        writeln!(
            s,
            "unprotected attack: key space 2^{:.2}, true key contained: {}",
            self.unprotected.size_log2,
            self.unprotected.all_contained.unwrap_or(false)
        )
        .unwrap();
        writeln!(s, "depth  nops  cycles  overhead  spread  key-space  status").unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:>5}  {:>4}  {:>6}  {:>8.4}  {:>6}  2^{:<7.2}  {}",
                r.depth,
                r.nops,
                r.all_hit_cycles,
                r.overhead,
                r.spread,
                r.key_space.size_log2,
                if r.passed() { "ok" } else { "FAIL" }
            )
            .unwrap();
        }
        s
    }

    /// Writes `sweep.csv`, `summary.json` and one profile CSV per run.
    pub fn write_dir(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sweep.csv"), self.sweep_csv())?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(self)? + "\n")?;
        self.unprotected_profile
            .write_csv(io::BufWriter::new(fs::File::create(dir.join("profile_unprotected.csv"))?))?;
        for (depth, p) in &self.protected_profiles {
            p.write_csv(io::BufWriter::new(fs::File::create(dir.join(format!("profile_protected_d{depth}.csv")))?))?;
        }
        Ok(())
    }
}

fn sweep_depth(
    cfg: &ExperimentConfig,
    depth: usize,
    unscheduled_all_hit: u64,
) -> Result<(DepthRow, crate::attack::TimingProfile), CliError> {
    let program = decompose_encryption();
    let s = schedule_program(&program, depth)?;
    let report = verify_gaps(&s, depth);
    let compiled = CompiledSchedule::new(&s);
    let n = compiled.memory_op_count();
    let all_hit = compiled.simulate(&HitMissPattern::all_hit(n), &cfg.lm)?.0;
    let all_miss = compiled.simulate(&HitMissPattern::all_miss(n), &cfg.lm)?.0;
    let spread = timing_spread(&s, &cfg.lm, cfg.spread_samples, cfg.seed)?;
    let attack = cfg.run_attack(ServerMode::Protected { depth })?;
    let row = DepthRow {
        depth,
        slots: s.slot_count(),
        nops: s.nop_count(),
        min_load_use_gap: report.min_load_use_gap,
        gaps_verified: report.passed,
        all_hit_cycles: all_hit,
        all_miss_cycles: all_miss,
        overhead: all_hit as f64 / unscheduled_all_hit as f64,
        spread: spread.range(),
        spread_patterns: spread.patterns,
        key_space: attack.summary(),
        covers_miss: depth as u64 >= cfg.lm.miss as u64,
    };
    Ok((row, attack.attack))
}

/// Schedules, verifies, simulates and attacks at every configured depth.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<ReportBundle, CliError> {
    cfg.validate()?;
    let linear = Schedule::linear(&decompose_encryption())?;
    let compiled = CompiledSchedule::new(&linear);
    let unscheduled_all_hit = compiled.simulate(&HitMissPattern::all_hit(compiled.memory_op_count()), &cfg.lm)?.0;
    let unscheduled_spread = timing_spread(&linear, &cfg.lm, cfg.spread_samples, cfg.seed)?.range();
    let unprotected = cfg.run_attack(ServerMode::Unprotected)?;
    let results = cfg
        .depths
        .par_iter()
        .map(|&d| {
            sweep_depth(cfg, d, unscheduled_all_hit).map_err(|e| CliError::Depth { depth: d, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (rows, profiles): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(ReportBundle {
        config: cfg.clone(),
        unscheduled_all_hit_cycles: unscheduled_all_hit,
        unscheduled_spread,
        unprotected: unprotected.summary(),
        protected_profiles: cfg.depths.iter().copied().zip(profiles).collect(),
        unprotected_profile: unprotected.attack,
        rows,
    })
}

fn cmd_sweep(a: &SweepArgs, cfg: &ConfigFile, stdout: &mut dyn Write) -> Result<bool, CliError> {
    let d = ExperimentConfig::default();
    let seed = cfg.or(a.seed, "seed", d.seed)?;
    let exp = ExperimentConfig {
        depths: cfg.or(a.depths.clone(), "depths", DepthList(d.depths))?.0,
        lm: cfg.or(a.lm, "lm", d.lm)?,
        line_size: cfg.or(a.line_size, "line-size", d.line_size)?,
        cache: cfg.or(a.cache, "cache", d.cache)?,
        packets_per_cell: cfg.or(a.packets_per_cell, "packets-per-cell", d.packets_per_cell)?,
        packet_len: cfg.or(a.len, "len", d.packet_len)?,
        margin: cfg.or(a.margin, "margin", d.margin)?,
        seed,
        spread_samples: cfg.or(a.samples, "samples", d.spread_samples)?,
        key: cfg.or(a.key, "key", key_from_seed(seed))?,
        out_dir: cfg.path(&a.out_dir, "out-dir"),
    };
    let bundle = run_sweep(&exp)?;
    stdout.write_all(bundle.to_text().as_bytes())?;
    if let Some(dir) = &exp.out_dir {
        bundle.write_dir(dir)?;
    }
    Ok(bundle.passed())
}
