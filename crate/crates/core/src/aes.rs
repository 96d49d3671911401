//! AES-128 encryption in two formulations: the four-step reference cipher
//! (SubBytes, ShiftRows, MixColumns, AddRoundKey) and the table-driven form
//! whose secret-indexed lookups are the cache-timing side channel.
//!
//! State and round-key words are packed big-endian, so `s0 >> 24` selects the
//! first byte of the block.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use thiserror::Error;

pub const BLOCK_LEN: usize = 16;
pub const ROUNDS: usize = 10;
pub const SCHEDULE_WORDS: usize = 4 * (ROUNDS + 1);

/// Number of table lookups performed by one encryption: 16 per main round
/// and 16 S-box lookups in the final round.
pub const LOOKUPS_PER_ENCRYPTION: usize = 16 * ROUNDS;

#[derive(Debug, Error, PartialEq)]
pub enum HexError {
    #[error("expected 32 hex characters, got {0}")]
    Length(usize),
    #[error("invalid hex: {0}")]
    Invalid(#[from] hex::FromHexError),
}

fn parse_hex16(s: &str) -> Result<[u8; 16], HexError> {
    let s = s.trim();
    let s = s.strip_prefix("0x").unwrap_or(s);
    if s.len() != 32 {
        return Err(HexError::Length(s.len()));
    }
    let mut out = [0u8; 16];
    hex::decode_to_slice(s, &mut out)?;
    Ok(out)
}

/// A 16-byte AES state, plaintext or ciphertext.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Block(pub [u8; 16]);

/// An AES-128 key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Key128(pub [u8; 16]);

macro_rules! hex_newtype {
    ($ty:ident) => {
        impl $ty {
            pub const fn new(bytes: [u8; 16]) -> Self {
                Self(bytes)
            }

            pub fn from_hex(s: &str) -> Result<Self, HexError> {
                parse_hex16(s).map(Self)
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn as_bytes(&self) -> &[u8; 16] {
                &self.0
            }

            /// The four big-endian state words.
            pub fn words(&self) -> [u32; 4] {
                let b = &self.0;
                std::array::from_fn(|i| u32::from_be_bytes([b[4 * i], b[4 * i + 1], b[4 * i + 2], b[4 * i + 3]]))
            }

            pub fn from_words(words: [u32; 4]) -> Self {
                let mut out = [0u8; 16];
                for (chunk, w) in out.chunks_exact_mut(4).zip(words) {
                    chunk.copy_from_slice(&w.to_be_bytes());
                }
                Self(out)
            }
        }

        impl FromStr for $ty {
            type Err = HexError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::from_hex(s)
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($ty), self.to_hex())
            }
        }

        impl From<[u8; 16]> for $ty {
            fn from(bytes: [u8; 16]) -> Self {
                Self(bytes)
            }
        }
    };
}

hex_newtype!(Block);
hex_newtype!(Key128);

/// Expanded AES-128 key: 44 big-endian round-key words.
#[derive(Clone, PartialEq, Eq)]
pub struct RoundKeySchedule {
    words: [u32; SCHEDULE_WORDS],
}

impl RoundKeySchedule {
    pub fn words(&self) -> &[u32; SCHEDULE_WORDS] {
        &self.words
    }

    pub fn word(&self, i: usize) -> u32 {
        self.words[i]
    }

    /// Round key `round` (0..=10) as four words.
    pub fn round_key(&self, round: usize) -> [u32; 4] {
        std::array::from_fn(|i| self.words[4 * round + i])
    }
}

impl fmt::Debug for RoundKeySchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.words.iter().map(|w| format!("{w:08x}"))).finish()
    }
}

/// Identifies one of the lookup tables an encryption reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TableId {
    Te0,
    Te1,
    Te2,
    Te3,
    Sbox,
}

impl TableId {
    pub const ALL: [TableId; 5] = [TableId::Te0, TableId::Te1, TableId::Te2, TableId::Te3, TableId::Sbox];

    pub fn te(i: usize) -> TableId {
        match i {
            0 => TableId::Te0,
            1 => TableId::Te1,
            2 => TableId::Te2,
            3 => TableId::Te3,
            _ => panic!("no T table {i}"),
        }
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TableId::Te0 => "te0",
            TableId::Te1 => "te1",
            TableId::Te2 => "te2",
            TableId::Te3 => "te3",
            TableId::Sbox => "sbox",
        }
    }

    pub fn from_name(s: &str) -> Option<TableId> {
        TableId::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// One table read performed during an encryption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Lookup {
    pub table: TableId,
    pub index: u8,
}

/// The four 1 KB round tables plus the S-box used by the final round.
#[derive(Clone, PartialEq, Eq)]
pub struct TTableSet {
    pub te: [[u32; 256]; 4],
    pub sbox: [u8; 256],
}

impl TTableSet {
    /// Process-wide copy of the generated tables.
    pub fn shared() -> &'static TTableSet {
        static TABLES: OnceLock<TTableSet> = OnceLock::new();
        TABLES.get_or_init(generate_tables)
    }

    pub fn te0(&self) -> &[u32; 256] {
        &self.te[0]
    }

    /// Combined size of the four round tables in bytes.
    pub fn round_table_bytes(&self) -> usize {
        self.te.iter().map(std::mem::size_of_val).sum()
    }

    #[inline]
    pub fn read(&self, table: TableId, index: u8) -> u32 {
        match table {
            TableId::Sbox => self.sbox[index as usize] as u32,
            t => self.te[t.ordinal()][index as usize],
        }
    }
}

impl fmt::Debug for TTableSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TTableSet").finish_non_exhaustive()
    }
}

/// Multiply by x in GF(2^8) modulo x^8 + x^4 + x^3 + x + 1.
#[inline]
pub(crate) fn xtime(a: u8) -> u8 {
    (a << 1) ^ if a & 0x80 != 0 { 0x1b } else { 0 }
}

fn generate_sbox() -> [u8; 256] {
    // Walk the multiplicative group with generator 3: p runs over 3^i and
    // q over 3^-i, so q is the inverse of p at every step.
    let mut sbox = [0u8; 256];
    let mut p: u8 = 1;
    let mut q: u8 = 1;
    loop {
        p ^= xtime(p);
        q ^= q << 1;
        q ^= q << 2;
        q ^= q << 4;
        if q & 0x80 != 0 {
            q ^= 0x09;
        }
        let affine = q ^ q.rotate_left(1) ^ q.rotate_left(2) ^ q.rotate_left(3) ^ q.rotate_left(4) ^ 0x63;
        sbox[p as usize] = affine;
        if p == 1 {
            break;
        }
    }
    sbox[0] = 0x63;
    sbox
}

pub fn generate_tables() -> TTableSet {
    let sbox = generate_sbox();
    let mut te = [[0u32; 256]; 4];
    for x in 0..256 {
        let s = sbox[x];
        let s2 = xtime(s);
        let s3 = s2 ^ s;
        let w = u32::from_be_bytes([s2, s, s, s3]);
        te[0][x] = w;
        te[1][x] = w.rotate_right(8);
        te[2][x] = w.rotate_right(16);
        te[3][x] = w.rotate_right(24);
    }
    TTableSet { te, sbox }
}

const RCON: [u32; 10] = [
    0x0100_0000,
    0x0200_0000,
    0x0400_0000,
    0x0800_0000,
    0x1000_0000,
    0x2000_0000,
    0x4000_0000,
    0x8000_0000,
    0x1b00_0000,
    0x3600_0000,
];

fn sub_word(w: u32, sbox: &[u8; 256]) -> u32 {
    let b = w.to_be_bytes();
    u32::from_be_bytes(b.map(|x| sbox[x as usize]))
}

pub fn expand_key(key: &Key128) -> RoundKeySchedule {
    let sbox = &TTableSet::shared().sbox;
    let mut words = [0u32; SCHEDULE_WORDS];
    words[..4].copy_from_slice(&key.words());
    for i in 4..SCHEDULE_WORDS {
        let mut temp = words[i - 1];
        if i % 4 == 0 {
            temp = sub_word(temp.rotate_left(8), sbox) ^ RCON[i / 4 - 1];
        }
        words[i] = words[i - 4] ^ temp;
    }
    RoundKeySchedule { words }
}

fn add_round_key(state: &mut [u8; 16], ks: &RoundKeySchedule, round: usize) {
    for (c, w) in ks.round_key(round).into_iter().enumerate() {
        for (r, b) in w.to_be_bytes().into_iter().enumerate() {
            state[4 * c + r] ^= b;
        }
    }
}

fn sub_bytes(state: &mut [u8; 16], sbox: &[u8; 256]) {
    for b in state.iter_mut() {
        *b = sbox[*b as usize];
    }
}

fn shift_rows(state: &mut [u8; 16]) {
    let old = *state;
    for c in 0..4 {
        for r in 0..4 {
            state[4 * c + r] = old[4 * ((c + r) % 4) + r];
        }
    }
}

fn mix_columns(state: &mut [u8; 16]) {
    for col in state.chunks_exact_mut(4) {
        let [a0, a1, a2, a3] = [col[0], col[1], col[2], col[3]];
        let all = a0 ^ a1 ^ a2 ^ a3;
        col[0] ^= all ^ xtime(a0 ^ a1);
        col[1] ^= all ^ xtime(a1 ^ a2);
        col[2] ^= all ^ xtime(a2 ^ a3);
        col[3] ^= all ^ xtime(a3 ^ a0);
    }
}

/// Four-step reference cipher over a column-major byte state.
pub fn encrypt_reference(pt: &Block, ks: &RoundKeySchedule) -> Block {
    let sbox = &TTableSet::shared().sbox;
    let mut state = pt.0;
    add_round_key(&mut state, ks, 0);
    for round in 1..ROUNDS {
        sub_bytes(&mut state, sbox);
        shift_rows(&mut state);
        mix_columns(&mut state);
        add_round_key(&mut state, ks, round);
    }
    sub_bytes(&mut state, sbox);
    shift_rows(&mut state);
    add_round_key(&mut state, ks, ROUNDS);
    Block(state)
}

/// Byte `b` (0 = most significant) of a state word, as the round code extracts it.
#[inline]
pub(crate) fn word_byte(w: u32, b: usize) -> u8 {
    (w >> (24 - 8 * b)) as u8
}

/// Table-driven encryption that reports every lookup to `observe`, in the
/// order: rounds 1..=9, output word 0..3, tables Te0..Te3; then the final
/// round, output word 0..3, byte lanes 0..3.
pub fn encrypt_ttable_with<F: FnMut(Lookup)>(
    pt: &Block,
    ks: &RoundKeySchedule,
    tables: &TTableSet,
    mut observe: F,
) -> Block {
    let rk = ks.words();
    let mut s = pt.words();
    for (w, r) in s.iter_mut().zip(&rk[..4]) {
        *w ^= r;
    }
    for round in 1..ROUNDS {
        let mut t = [0u32; 4];
        for (w, out) in t.iter_mut().enumerate() {
            let mut acc = rk[4 * round + w];
            for b in 0..4 {
                let index = word_byte(s[(w + b) % 4], b);
                let table = TableId::te(b);
                observe(Lookup { table, index });
                acc ^= tables.te[b][index as usize];
            }
            *out = acc;
        }
        s = t;
    }
    let mut out = [0u32; 4];
    for (w, o) in out.iter_mut().enumerate() {
        let mut acc = rk[4 * ROUNDS + w];
        for b in 0..4 {
            let index = word_byte(s[(w + b) % 4], b);
            observe(Lookup { table: TableId::Sbox, index });
            acc ^= (tables.sbox[index as usize] as u32) << (24 - 8 * b);
        }
        *o = acc;
    }
    Block::from_words(out)
}

pub fn encrypt_ttable(pt: &Block, ks: &RoundKeySchedule, tables: &TTableSet) -> Block {
    encrypt_ttable_with(pt, ks, tables, |_| {})
}

/// Table-driven encryption returning the ordered lookup trace alongside the ciphertext.
pub fn encrypt_ttable_traced(pt: &Block, ks: &RoundKeySchedule, tables: &TTableSet) -> (Block, Vec<Lookup>) {
    let mut trace = Vec::with_capacity(LOOKUPS_PER_ENCRYPTION);
    let ct = encrypt_ttable_with(pt, ks, tables, |l| trace.push(l));
    (ct, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Bitwise GF(2^8) multiply, used to build an S-box independently of the
    // generator walk in `generate_sbox`.
    fn gf_mul(mut a: u8, mut b: u8) -> u8 {
        let mut p = 0u8;
        while b != 0 {
            if b & 1 != 0 {
                p ^= a;
            }
            a = xtime(a);
            b >>= 1;
        }
        p
    }

    fn oracle_sbox(x: u8) -> u8 {
        let inv = if x == 0 { 0 } else { (1..=255u8).find(|&y| gf_mul(x, y) == 1).unwrap() };
        let mut out = 0u8;
        for i in 0..8 {
            let bit = (inv >> i)
                ^ (inv >> ((i + 4) % 8))
                ^ (inv >> ((i + 5) % 8))
                ^ (inv >> ((i + 6) % 8))
                ^ (inv >> ((i + 7) % 8))
                ^ (0x63 >> i);
            out |= (bit & 1) << i;
        }
        out
    }

    // Byte-oriented key expansion straight from the standard's pseudocode.
    fn oracle_expand(key: &[u8; 16]) -> Vec<[u8; 4]> {
        let rcon = [0x01u8, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1b, 0x36];
        let mut w: Vec<[u8; 4]> = key.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        for i in 4..44 {
            let mut temp = w[i - 1];
            if i % 4 == 0 {
                temp = [temp[1], temp[2], temp[3], temp[0]].map(oracle_sbox);
                temp[0] ^= rcon[i / 4 - 1];
            }
            let prev = w[i - 4];
            w.push(std::array::from_fn(|k| prev[k] ^ temp[k]));
        }
        w
    }

    #[test]
    fn sbox_matches_field_inverse_oracle() {
        let tables = generate_tables();
        assert_eq!(tables.sbox[0x00], 0x63);
        for x in 0..=255u8 {
            assert_eq!(tables.sbox[x as usize], oracle_sbox(x), "sbox[{x:#04x}]");
        }
    }

    #[test]
    fn table_invariants() {
        let t = generate_tables();
        assert_eq!(t.round_table_bytes(), 4096);
        for tab in &t.te {
            assert_eq!(std::mem::size_of_val(tab), 1024);
        }
        for x in 0..256 {
            let w = t.te[0][x];
            assert_eq!(t.te[1][x], w.rotate_right(8));
            assert_eq!(t.te[2][x], w.rotate_right(16));
            assert_eq!(t.te[3][x], w.rotate_right(24));
            let s = t.sbox[x];
            assert_eq!(w.to_be_bytes(), [gf_mul(2, s), s, s, gf_mul(3, s)]);
        }
        assert_eq!(generate_tables(), t);
    }

    #[test]
    fn key_expansion_known_words() {
        let ks = expand_key(&Key128::default());
        assert_eq!(&ks.words()[..4], &[0, 0, 0, 0]);
        assert_eq!(ks.word(4), 0x6263_6363);

        let fips = Key128::from_hex("2b7e151628aed2a6abf7158809cf4f3c").unwrap();
        let ks = expand_key(&fips);
        assert_eq!(ks.word(43), 0xb663_0ca6);
        assert_eq!(ks.word(0), 0x2b7e_1516);
    }

    #[test]
    fn key_expansion_matches_byte_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let key = Key128(rng.gen());
            let ks = expand_key(&key);
            let oracle = oracle_expand(&key.0);
            for (i, w) in oracle.iter().enumerate() {
                assert_eq!(ks.word(i), u32::from_be_bytes(*w));
            }
        }
    }

    #[test]
    fn fips_appendix_c_vector() {
        let key = Key128::from_hex("000102030405060708090a0b0c0d0e0f").unwrap();
        let pt = Block::from_hex("00112233445566778899aabbccddeeff").unwrap();
        let ks = expand_key(&key);
        let expected = "69c4e0d86a7b0430d8cdb78070b4c55a";
        assert_eq!(encrypt_reference(&pt, &ks).to_hex(), expected);
        assert_eq!(encrypt_ttable(&pt, &ks, TTableSet::shared()).to_hex(), expected);
    }

    #[test]
    fn zero_key_zero_block() {
        let ks = expand_key(&Key128::default());
        let ct = encrypt_reference(&Block::default(), &ks);
        assert_eq!(ct.to_hex(), "66e94bd4ef8a2c3b884cfa59ca342b2e");
    }

    #[test]
    fn reference_and_ttable_agree() {
        let tables = TTableSet::shared();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let ks = expand_key(&Key128(rng.gen()));
            let pt = Block(rng.gen());
            assert_eq!(encrypt_reference(&pt, &ks), encrypt_ttable(&pt, &ks, tables));
        }
    }

    #[test]
    fn distinct_plaintexts_give_distinct_ciphertexts() {
        let ks = expand_key(&Key128([9; 16]));
        let a = encrypt_reference(&Block([0; 16]), &ks);
        let b = encrypt_reference(&Block([1; 16]), &ks);
        assert_ne!(a, b);
    }

    #[test]
    fn trace_shape() {
        let key = Key128::from_hex("000102030405060708090a0b0c0d0e0f").unwrap();
        let pt = Block::from_hex("00112233445566778899aabbccddeeff").unwrap();
        let (ct, trace) = encrypt_ttable_traced(&pt, &expand_key(&key), TTableSet::shared());
        assert_eq!(ct.to_hex(), "69c4e0d86a7b0430d8cdb78070b4c55a");
        assert_eq!(trace.len(), 160);
        assert_eq!(trace.iter().filter(|l| l.table == TableId::Sbox).count(), 16);
        assert!(trace[144..].iter().all(|l| l.table == TableId::Sbox));

        // The first round indexes byte j with pt[j] ^ key[j]: output word w,
        // table b reads byte b of source word (w + b) % 4.
        let mut seen = [false; 16];
        for (n, l) in trace[..16].iter().enumerate() {
            let (w, b) = (n / 4, n % 4);
            let j = 4 * ((w + b) % 4) + b;
            assert_eq!(l.table, TableId::te(b));
            assert_eq!(l.index, pt.0[j] ^ key.0[j]);
            seen[j] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn hex_parsing() {
        assert!(Block::from_hex("00").is_err());
        assert!(Key128::from_hex("zz0102030405060708090a0b0c0d0e0f").is_err());
        let k: Key128 = "0x000102030405060708090a0b0c0d0e0f".parse().unwrap();
        assert_eq!(k.0[15], 0x0f);
        assert_eq!(Block::from_words(Block([5; 16]).words()), Block([5; 16]));
    }
}
