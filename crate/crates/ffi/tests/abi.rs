use std::ffi::CStr;
use std::process::Command;
use std::ptr;

use ctaes_ffi::*;

const LM: CtaesLatency = CtaesLatency { exec: 1, hit: 2, miss: 6 };

fn hex16(s: &str) -> [u8; 16] {
    let v: Vec<u8> = (0..16).map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).unwrap()).collect();
    v.try_into().unwrap()
}

fn last_error() -> String {
    let mut buf = [0 as std::ffi::c_char; 256];
    unsafe {
        ctaes_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn encrypt_paths_match_the_standard_vector() {
    let key = hex16("000102030405060708090a0b0c0d0e0f");
    let pt = hex16("00112233445566778899aabbccddeeff");
    for path in [CtaesPath::Reference, CtaesPath::Ttable, CtaesPath::Micro, CtaesPath::Scheduled] {
        let mut out = [0u8; 16];
        let st = unsafe { ctaes_encrypt(path, 6, key.as_ptr(), pt.as_ptr(), out.as_mut_ptr()) };
        assert_eq!(st, CtaesStatus::Ok);
        assert_eq!(out, hex16("69c4e0d86a7b0430d8cdb78070b4c55a"), "{path:?}");
    }
}

#[test]
fn errors_are_reported() {
    let k = [0u8; 16];
    let mut out = [0u8; 16];
    let st = unsafe { ctaes_encrypt(CtaesPath::Scheduled, 0, k.as_ptr(), k.as_ptr(), out.as_mut_ptr()) };
    assert_eq!(st, CtaesStatus::ScheduleFailed);
    assert!(!last_error().is_empty());
    let st = unsafe { ctaes_encrypt(CtaesPath::Ttable, 0, ptr::null(), k.as_ptr(), out.as_mut_ptr()) };
    assert_eq!(st, CtaesStatus::NullPointer);
    assert_eq!(last_error(), "`key` is null");
    let needed = unsafe { ctaes_last_error(ptr::null_mut(), 0) };
    assert_eq!(needed, "`key` is null".len() + 1);
    let s = unsafe { CStr::from_ptr(ctaes_status_str(CtaesStatus::EmptyProfile)) };
    assert_eq!(s.to_str().unwrap(), "profile has no samples");
}

#[test]
fn schedule_handle_lifecycle() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(ctaes_schedule_new(6, &mut s), CtaesStatus::Ok);
        let mut stats = CtaesScheduleStats::default();
        assert_eq!(ctaes_schedule_stats(s, &mut stats), CtaesStatus::Ok);
        assert_eq!(stats.depth, 6);
        assert!(stats.gaps_verified);
        assert!(stats.min_load_use_gap >= 6);
        assert_eq!(stats.memory_ops, 160);
        assert_eq!(stats.slots, 724 + stats.nops);

        let hits = vec![0u8; stats.memory_ops];
        let misses = vec![1u8; stats.memory_ops];
        let (mut a, mut b) = (0u64, 0u64);
        assert_eq!(ctaes_schedule_simulate(s, hits.as_ptr(), hits.len(), LM, &mut a), CtaesStatus::Ok);
        assert_eq!(ctaes_schedule_simulate(s, misses.as_ptr(), misses.len(), LM, &mut b), CtaesStatus::Ok);
        assert_eq!(a, b);
        assert_eq!(ctaes_schedule_simulate(s, hits.as_ptr(), 3, LM, &mut a), CtaesStatus::SimulationFailed);
        let bad = CtaesLatency { exec: 2, hit: 1, miss: 6 };
        assert_eq!(ctaes_schedule_simulate(s, hits.as_ptr(), hits.len(), bad, &mut a), CtaesStatus::InvalidArgument);

        let mut spread = CtaesSpread::default();
        assert_eq!(ctaes_schedule_spread(s, LM, 100, 1, &mut spread), CtaesStatus::Ok);
        assert_eq!(spread.min, spread.max);
        assert_eq!(spread.patterns, 102);
        ctaes_schedule_free(s);

        let mut linear = ptr::null_mut();
        assert_eq!(ctaes_schedule_new(0, &mut linear), CtaesStatus::Ok);
        assert_eq!(ctaes_schedule_spread(linear, LM, 100, 1, &mut spread), CtaesStatus::Ok);
        assert!(spread.max > spread.min);
        ctaes_schedule_free(linear);
        ctaes_schedule_free(ptr::null_mut());
    }
}

#[test]
fn profile_and_key_space() {
    unsafe {
        let (mut study, mut attack) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(ctaes_profile_new(&mut study), CtaesStatus::Ok);
        assert_eq!(ctaes_profile_new(&mut attack), CtaesStatus::Ok);
        let mut dev = vec![0f64; CTAES_PROFILE_CELLS];
        assert_eq!(ctaes_profile_mean_dev(study, dev.as_mut_ptr()), CtaesStatus::EmptyProfile);

        // Cycles bump when byte j XOR key[j] equals 7; study key 0, attack key `k`.
        let k: [u8; 16] = std::array::from_fn(|j| (j * 17 + 3) as u8);
        let mut state = 0x9e37_79b9_7f4a_7c15u64;
        for _ in 0..256 * 64 {
            let nonce: [u8; 16] = std::array::from_fn(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 24) as u8
            });
            let cost = |key: &[u8; 16]| 100 + (0..16).filter(|&j| nonce[j] ^ key[j] == 7).count() as u64 * 5;
            ctaes_profile_add(study, nonce.as_ptr(), cost(&[0; 16]));
            ctaes_profile_add(attack, nonce.as_ptr(), cost(&k));
        }
        assert_eq!(ctaes_profile_mean_dev(study, dev.as_mut_ptr()), CtaesStatus::Ok);
        for j in 0..16 {
            let row = &dev[256 * j..256 * (j + 1)];
            let top = (0..256).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(top, 7);
        }

        let mut sizes = [0u16; 16];
        let mut log2 = 0.0;
        let zero = [0u8; 16];
        assert_eq!(ctaes_key_space(study, zero.as_ptr(), attack, 1.0, sizes.as_mut_ptr(), &mut log2), CtaesStatus::Ok);
        assert_eq!(sizes, [1; 16]);
        assert_eq!(log2, 0.0);
        assert_eq!(
            ctaes_key_space(study, zero.as_ptr(), attack, -1.0, sizes.as_mut_ptr(), &mut log2),
            CtaesStatus::InvalidArgument
        );
        ctaes_profile_free(study);
        ctaes_profile_free(attack);
    }
}

#[test]
fn header_is_valid_c() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let header = std::fs::read_to_string(format!("{dir}/include/ctaes.h")).unwrap();
    for name in [
        "ctaes_encrypt",
        "ctaes_schedule_new",
        "ctaes_schedule_free",
        "ctaes_schedule_stats",
        "ctaes_schedule_simulate",
        "ctaes_schedule_spread",
        "ctaes_profile_new",
        "ctaes_profile_add",
        "ctaes_profile_mean_dev",
        "ctaes_profile_free",
        "ctaes_key_space",
        "ctaes_last_error",
        "ctaes_status_str",
        "typedef struct CtaesSchedule CtaesSchedule",
        "CTAES_STATUS_OK",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(&src, "#include \"ctaes.h\"\nint main(void) { CtaesSchedule *s = 0; return ctaes_schedule_new(6, &s) == CTAES_STATUS_OK ? 0 : 1; }\n").unwrap();
    match Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(format!("{dir}/include"))
        .arg(&src)
        .output()
    {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(e) => eprintln!("no C compiler available, skipping syntax check: {e}"),
    }
}
