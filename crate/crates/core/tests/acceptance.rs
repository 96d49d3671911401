//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use aes::cipher::{BlockEncrypt, KeyInit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctaes::aes::{encrypt_reference, encrypt_ttable, expand_key, Block, Key128, TTableSet};
use ctaes::attack::{
    build_profile, correlate, run_attack, AttackConfig, InProcessOracle, KeySpaceEstimate, TimingSample,
};
use ctaes::micro_ir::{decompose_encryption, Interpreter, MicroProgram};
use ctaes::scheduler::{schedule_program, verify_gaps, Schedule};
use ctaes::service::{
    Client, NetworkOracle, RequestHandler, ResponsePacket, Server, ServerConfig, ServerMode, SimulatedTiming,
    TimingMode,
};
use ctaes::timing_sim::{pattern_from_data, simulate, timing_spread, CacheConfig, HitMissPattern, LatencyModel};

const FIPS_KEY: &str = "000102030405060708090a0b0c0d0e0f";
const FIPS_PT: &str = "00112233445566778899aabbccddeeff";
const FIPS_CT: &str = "69c4e0d86a7b0430d8cdb78070b4c55a";
const ZERO_KEY_ZERO_BLOCK: &str = "66e94bd4ef8a2c3b884cfa59ca342b2e";

const RANDOM_CASES: usize = 10_000;
const SWEEP_DEPTHS: [usize; 5] = [6, 8, 10, 12, 14];
const SPREAD_SAMPLES: usize = 10_000;
const ATTACK_PACKETS_PER_CELL: usize = 1 << 13;
const LINE_SIZE: usize = 64;
const FULL_KEY_SPACE_LOG2: f64 = 128.0;
const KEY_SPACE_REL_TOL: f64 = 1e-3;
const CENTERING_REL_TOL: f64 = 1e-9;
const NETWORK_PACKETS_PER_CELL: usize = 32;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn external_encrypt(key: &Key128, pt: &Block) -> Block {
    let cipher = aes::Aes128::new_from_slice(&key.0).unwrap();
    let mut b = aes::Block::clone_from_slice(&pt.0);
    cipher.encrypt_block(&mut b);
    Block(b.into())
}

fn aes_correctness() -> Outcome {
    let tables = TTableSet::shared();
    let micro = Interpreter::new(&decompose_encryption()).map_err(|e| e.to_string())?;
    let scheduled = schedule_program(&decompose_encryption(), 6).map_err(|e| e.to_string())?;
    let scheduled = Interpreter::new(&scheduled.flatten()).map_err(|e| e.to_string())?;
    let paths = |key: &Key128, pt: &Block| {
        let ks = expand_key(key);
        [
            encrypt_reference(pt, &ks),
            encrypt_ttable(pt, &ks, tables),
            micro.run(pt, &ks, tables).unwrap(),
            scheduled.run(pt, &ks, tables).unwrap(),
        ]
    };

    let key = Key128::from_hex(FIPS_KEY).unwrap();
    let expected = Block::from_hex(FIPS_CT).unwrap();
    for (i, ct) in paths(&key, &Block::from_hex(FIPS_PT).unwrap()).iter().enumerate() {
        ensure!(*ct == expected, "path {i} gives {ct} on the standard vector");
    }
    let zero = paths(&Key128::default(), &Block::default());
    ensure!(zero.iter().all(|c| c.to_hex() == ZERO_KEY_ZERO_BLOCK), "zero key/block mismatch: {zero:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..RANDOM_CASES {
        let key = Key128(rng.gen());
        let pt = Block(rng.gen());
        let outs = paths(&key, &pt);
        let external = external_encrypt(&key, &pt);
        ensure!(outs.iter().all(|c| *c == external), "case {case}: paths disagree for key {key} pt {pt}: {outs:?}");
    }
    Ok(format!("4 paths give {FIPS_CT}; {RANDOM_CASES} random cases agree with each other and an external AES"))
}

/// Eight single-cycle ops; a load in slot 2 feeds the op in `consumer_slot`.
fn load_use_layout(consumer_slot: usize) -> Schedule {
    let mut lines = vec!["input x".to_string(), "output w".to_string()];
    for slot in 1..=8 {
        lines.push(match slot {
            2 => "v = TLOAD.te0(x)".to_string(),
            s if s == consumer_slot => "w = XOR_ACC(x, v)".to_string(),
            s => format!("a{s} = COPY(x)"),
        });
    }
    Schedule::linear(&MicroProgram::parse(&lines.join("\n")).unwrap()).unwrap()
}

fn load_use_cycles() -> Outcome {
    let lm = LatencyModel::new(1, 2, 6).unwrap();
    let run = |s: &Schedule, p: HitMissPattern| simulate(s, &p, &lm).unwrap().0;
    let near = load_use_layout(6);
    let far = load_use_layout(8);
    let got = [
        run(&near, HitMissPattern::all_hit(1)),
        run(&near, HitMissPattern::all_miss(1)),
        run(&far, HitMissPattern::all_hit(1)),
        run(&far, HitMissPattern::all_miss(1)),
    ];
    ensure!(got == [8, 10, 8, 8], "expected [8, 10, 8, 8] (near hit/miss, far hit/miss), got {got:?}");
    Ok("consumer 4 slots after load: 8 hit / 10 miss; 6 slots after: 8 / 8".into())
}

fn constant_time_sweep() -> Outcome {
    let lm = LatencyModel::default();
    let program = decompose_encryption();
    let mut spreads = Vec::new();
    for depth in SWEEP_DEPTHS {
        let s = schedule_program(&program, depth).map_err(|e| e.to_string())?;
        let report = verify_gaps(&s, depth);
        ensure!(report.passed, "depth {depth}: gap verification failed (min gap {:?})", report.min_load_use_gap);
        let spread = timing_spread(&s, &lm, SPREAD_SAMPLES, depth as u64).unwrap();
        ensure!(spread.patterns == SPREAD_SAMPLES + 2, "depth {depth}: evaluated {} patterns", spread.patterns);
        ensure!(
            spread.range() == 0,
            "depth {depth}: spread {} (min {}, max {})",
            spread.range(),
            spread.min,
            spread.max
        );
        spreads.push(spread.range());
    }
    let linear = Schedule::linear(&program).unwrap();
    let unscheduled = timing_spread(&linear, &lm, SPREAD_SAMPLES, 0).unwrap();
    ensure!(unscheduled.range() > 0, "unscheduled spread is 0");
    Ok(format!("spread {spreads:?} at depths {SWEEP_DEPTHS:?}; unscheduled spread {}", unscheduled.range()))
}

fn simulated_attack(mode: ServerMode, target: &Key128) -> Result<(KeySpaceEstimate, Option<[bool; 16]>), String> {
    let cache = CacheConfig::server_window(LINE_SIZE).unwrap();
    let cfg = AttackConfig { packets_per_cell: ATTACK_PACKETS_PER_CELL, seed: 7, ..AttackConfig::default() };
    let timing = |k: &Key128| SimulatedTiming::new(k, mode, LatencyModel::default(), &cache, 0).unwrap();
    let mut study = InProcessOracle::new(timing(&cfg.study_key));
    let mut attack = InProcessOracle::new(timing(target));
    let r = run_attack(&mut study, &mut attack, &cfg, Some(target)).map_err(|e| e.to_string())?;
    Ok((r.estimate, r.contained))
}

fn key_space_outcomes() -> Outcome {
    let target = Key128::from_hex("2b7e151628aed2a6abf7158809cf4f3c").unwrap();
    let full = 2f64.powi(128);

    let (protected, _) = simulated_attack(ServerMode::Protected { depth: 12 }, &target)?;
    ensure!(protected.set_sizes().iter().all(|&n| n == 256), "protected set sizes {:?}", protected.set_sizes());
    ensure!(protected.size_log2 == FULL_KEY_SPACE_LOG2, "protected log2 {}", protected.size_log2);
    ensure!(
        ((protected.size_decimal - full) / full).abs() <= KEY_SPACE_REL_TOL,
        "protected key space {:e} not within {KEY_SPACE_REL_TOL} of 2^128",
        protected.size_decimal
    );

    let (unprotected, contained) = simulated_attack(ServerMode::Unprotected, &target)?;
    let contained = contained.unwrap();
    ensure!(unprotected.size_log2 < FULL_KEY_SPACE_LOG2, "unprotected key space is full");
    ensure!(
        contained.iter().all(|&c| c),
        "true bytes missing at {:?}",
        contained.iter().enumerate().filter(|(_, &c)| !c).map(|(j, _)| j).collect::<Vec<_>>()
    );
    Ok(format!(
        "protected {:.4e} (2^{}); unprotected 2^{:.2} with sizes {:?}, all true bytes contained",
        protected.size_decimal,
        protected.size_log2,
        unprotected.size_log2,
        unprotected.set_sizes()
    ))
}

fn overhead_trend() -> Outcome {
    let lm = LatencyModel::default();
    let program = decompose_encryption();
    let cycles: Vec<u64> = SWEEP_DEPTHS
        .iter()
        .map(|&d| {
            let s = schedule_program(&program, d).unwrap();
            simulate(&s, &HitMissPattern::all_hit(s.memory_op_count()), &lm).unwrap().0
        })
        .collect();
    ensure!(cycles.windows(2).all(|w| w[0] <= w[1]), "all-hit cycles not non-decreasing: {cycles:?}");
    let base = simulate(&Schedule::linear(&program).unwrap(), &HitMissPattern::all_hit(program.memory_op_count()), &lm)
        .unwrap()
        .0;
    let ratios: Vec<String> = cycles.iter().map(|&c| format!("{:.3}", c as f64 / base as f64)).collect();
    Ok(format!("all-hit cycles {cycles:?} over depths {SWEEP_DEPTHS:?}; unscheduled {base}; ratios {ratios:?}"))
}

fn sim_server(key: Key128, mode: ServerMode) -> ctaes::service::RunningServer {
    let timing = TimingMode::Simulated {
        lm: LatencyModel::default(),
        cache: CacheConfig::server_window(LINE_SIZE).unwrap(),
        offset: 0,
    };
    Server::bind(ServerConfig { key, mode, bind: "127.0.0.1:0".parse().unwrap(), timing }).unwrap().spawn().unwrap()
}

fn wire_protocol() -> Outcome {
    // Golden bytes from the handler with a pinned counter.
    let key = Key128::default();
    let cache = CacheConfig::server_window(LINE_SIZE).unwrap();
    let mut handler = RequestHandler::new(
        &key,
        ServerMode::Unprotected,
        TimingMode::Simulated { lm: LatencyModel::default(), cache: cache.clone(), offset: 0 },
    )
    .unwrap();
    handler.set_counter(0x0403_0201);
    let request: Vec<u8> = (0..64u8).collect();
    let resp = handler.handle(&request).ok_or("valid request dropped")?;
    let pattern = pattern_from_data(&Block(request[..16].try_into().unwrap()), &expand_key(&key), &cache).unwrap();
    let linear = Schedule::linear(&decompose_encryption()).unwrap();
    let cycles = simulate(&linear, &pattern, &LatencyModel::default()).unwrap().0 as u32;
    let mut golden = Vec::new();
    golden.extend_from_slice(&request[..16]);
    golden.extend_from_slice(&hex::decode(ZERO_KEY_ZERO_BLOCK).unwrap());
    golden.extend_from_slice(&[0x01, 0x02, 0x03, 0x04]);
    golden.extend_from_slice(&0x0403_0201u32.wrapping_add(cycles).to_le_bytes());
    ensure!(resp[..] == golden[..], "response {} != golden {}", hex::encode(resp), hex::encode(&golden));
    ensure!(handler.handle(&request[..15]).is_none(), "15-byte request answered");

    // Short packets over the socket get no answer; the server keeps serving.
    let server = sim_server(key, ServerMode::Unprotected);
    let client = Client::connect(server.addr, Duration::from_millis(300)).unwrap();
    ensure!(client.request(&[0xaa; 15]).unwrap().is_none(), "15-byte datagram answered");
    let r: ResponsePacket = client.request(&request).unwrap().ok_or("no response to a 64-byte datagram")?;
    ensure!(r.echo[..] == request[..16] && r.cycles() == cycles, "socket response {r:?}");
    drop(server);

    // Network attack equals the in-process attack for the same seed.
    let target = Key128::from_hex("000102030405060708090a0b0c0d0e0f").unwrap();
    let cfg = AttackConfig { packets_per_cell: NETWORK_PACKETS_PER_CELL, seed: 3, ..AttackConfig::default() };
    let timing =
        |k: &Key128| SimulatedTiming::new(k, ServerMode::Unprotected, LatencyModel::default(), &cache, 0).unwrap();
    let local = run_attack(
        &mut InProcessOracle::new(timing(&cfg.study_key)),
        &mut InProcessOracle::new(timing(&target)),
        &cfg,
        Some(&target),
    )
    .map_err(|e| e.to_string())?;
    let study_server = sim_server(cfg.study_key, ServerMode::Unprotected);
    let target_server = sim_server(target, ServerMode::Unprotected);
    let connect = |addr| NetworkOracle::new(Client::connect(addr, Duration::from_millis(500)).unwrap(), 5);
    let remote = run_attack(&mut connect(study_server.addr), &mut connect(target_server.addr), &cfg, Some(&target))
        .map_err(|e| e.to_string())?;
    ensure!(
        remote.attack == local.attack && remote.study == local.study,
        "network profiles differ from in-process profiles"
    );
    ensure!(
        remote.estimate == local.estimate,
        "network estimate 2^{} != in-process 2^{}",
        remote.estimate.size_log2,
        local.estimate.size_log2
    );
    Ok(format!(
        "golden 40-byte response matches; short packets dropped; loopback estimate 2^{:.2} equals in-process",
        remote.estimate.size_log2
    ))
}

fn profile_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(1..20_000);
        let samples: Vec<TimingSample> =
            (0..n).map(|_| TimingSample { nonce: rng.gen(), cycles: rng.gen_range(500..5000) }).collect();
        let p = build_profile(samples).unwrap();
        let scale = p.samples as f64 * p.grand_mean;
        for j in 0..16 {
            let rel = p.weighted_sum(j).abs() / scale;
            worst = worst.max(rel);
            ensure!(rel <= CENTERING_REL_TOL, "position {j}: weighted deviation sum {rel:e} relative");
        }
    }

    for trial in 0..10 {
        let key = Key128(rng.gen());
        let sparse = trial % 2 == 0;
        // Per-position cost as a function of the first-round table index.
        let cost: Vec<[u64; 256]> = (0..16)
            .map(|_| {
                let mut c = [0u64; 256];
                if sparse {
                    c[rng.gen::<u8>() as usize] = rng.gen_range(1..10);
                } else {
                    c.iter_mut().for_each(|x| *x = rng.gen_range(0..10));
                }
                c
            })
            .collect();
        let mut samples = Vec::with_capacity(256 * 4);
        for round in 0..4 {
            for v in 0..256usize {
                let mut nonce = [0u8; 16];
                for (j, b) in nonce.iter_mut().enumerate() {
                    *b = ((v + 37 * j + 101 * round) % 256) as u8;
                }
                let cycles = 1000 + (0..16).map(|j| cost[j][(nonce[j] ^ key.0[j]) as usize]).sum::<u64>();
                samples.push(TimingSample { nonce, cycles });
            }
        }
        let p = build_profile(samples).unwrap();
        let c = correlate(&p, &key, &p);
        for j in 0..16 {
            if p.is_flat(j) {
                continue;
            }
            ensure!(
                c.argmax(j) == key.0[j],
                "trial {trial}, position {j}: argmax {} != key byte {}",
                c.argmax(j),
                key.0[j]
            );
        }
    }
    Ok(format!(
        "worst relative centering error {worst:.2e}; self-correlation argmax = key byte in 10 synthetic profiles"
    ))
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { name: "1 aes-correctness", budget: Duration::from_secs(10), run: aes_correctness },
        Criterion { name: "2 load-use-cycles", budget: Duration::from_secs(1), run: load_use_cycles },
        Criterion { name: "3 constant-time", budget: Duration::from_secs(120), run: constant_time_sweep },
        Criterion { name: "4 key-space", budget: Duration::from_secs(600), run: key_space_outcomes },
        Criterion { name: "5 overhead-trend", budget: Duration::from_secs(60), run: overhead_trend },
        Criterion { name: "6 wire-protocol", budget: Duration::from_secs(120), run: wire_protocol },
        Criterion { name: "7 profile-identities", budget: Duration::from_secs(10), run: profile_identities },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.iter().any(|f| c.name.contains(f.as_str()))) {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(_) if elapsed > c.budget => {
                Err(format!("took {:.1}s, budget {:.0}s", elapsed.as_secs_f64(), c.budget.as_secs_f64()))
            }
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({:.2}s): {detail}", c.name, elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} ({:.2}s): {why}", c.name, elapsed.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
