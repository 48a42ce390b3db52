//! Trivium page cipher protecting flash → DRAM transfers.
//!
//! Bit conventions follow the eSTREAM reference: with `K_j = key[j / 8] >> (j % 8) & 1`,
//! `(s1..s80) = (K_79..K_0)`, the IV goes into `(s94..s173)` the same way, s286..s288 start at
//! one, and keystream bits are packed LSB-first. Register A holds s1..s93, B s94..s177, C s178..s288.
//!
//! Every tap sits at least 66 positions deep in its register, so 64 consecutive rounds can be
//! computed at once on 64-bit words. In those words bit `63 - j` belongs to round `j`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{Nanos, Picos, SeededRng};

pub const KEY_BYTES: usize = 10;
pub const IV_BYTES: usize = 10;
pub const INIT_ROUNDS: usize = 1152;

const MASK_A: u128 = (1 << 93) - 1;
const MASK_B: u128 = (1 << 84) - 1;
const MASK_C: u128 = (1 << 111) - 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CipherError {
    #[error("page buffer holds {got} bytes, expected {expected}")]
    BadLength { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trivium {
    a: u128,
    b: u128,
    c: u128,
}

#[inline]
fn tap(r: u128, q: u32) -> u64 {
    (r >> (q - 64)) as u64
}

impl Trivium {
    pub fn new(key: &[u8; KEY_BYTES], iv: &[u8; IV_BYTES]) -> Self {
        let a = load80(key);
        let b = load80(iv);
        let c = 0b111u128 << 108;
        let mut t = Self { a, b, c };
        for _ in 0..INIT_ROUNDS / 64 {
            t.step64();
        }
        t
    }

    /// Runs 64 rounds and returns their keystream bits, bit `j` = round `j`.
    pub fn next_u64(&mut self) -> u64 {
        self.step64().reverse_bits()
    }

    fn step64(&mut self) -> u64 {
        let (a, b, c) = (self.a, self.b, self.c);
        let mut t1 = tap(a, 66) ^ tap(a, 93);
        let mut t2 = tap(b, 69) ^ tap(b, 84);
        let mut t3 = tap(c, 66) ^ tap(c, 111);
        let z = t1 ^ t2 ^ t3;
        t1 ^= (tap(a, 91) & tap(a, 92)) ^ tap(b, 78);
        t2 ^= (tap(b, 82) & tap(b, 83)) ^ tap(c, 87);
        t3 ^= (tap(c, 109) & tap(c, 110)) ^ tap(a, 69);
        self.a = ((a << 64) | t3 as u128) & MASK_A;
        self.b = ((b << 64) | t1 as u128) & MASK_B;
        self.c = ((c << 64) | t2 as u128) & MASK_C;
        z
    }

    /// XORs the keystream into `data`.
    pub fn apply(&mut self, data: &mut [u8]) {
        for chunk in data.chunks_mut(8) {
            let ks = self.next_u64().to_le_bytes();
            for (d, k) in chunk.iter_mut().zip(ks) {
                *d ^= k;
            }
        }
    }
}

/// Bit `k` of the register is `s(k+1)` and takes input bit `79 - k`.
fn load80(x: &[u8; 10]) -> u128 {
    let mut le = [0u8; 16];
    le[..10].copy_from_slice(x);
    u128::from_le_bytes(le).reverse_bits() >> 48
}

/// `n_bits` of keystream (a multiple of 64), packed LSB-first.
pub fn keystream(key: &[u8; KEY_BYTES], iv: &[u8; IV_BYTES], n_bits: usize) -> Vec<u8> {
    assert!(n_bits % 64 == 0, "keystream length must be a multiple of 64 bits");
    let mut t = Trivium::new(key, iv);
    let mut out = vec![0u8; n_bits / 8];
    t.apply(&mut out);
    out
}

/// 80-bit page IV: the 32-bit PPA followed by 48 PRNG bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PageIv {
    pub ppa: u32,
    pub rand: u64,
}

impl PageIv {
    pub fn new(ppa: u32, rand: u64) -> Self {
        Self { ppa, rand: rand & ((1 << 48) - 1) }
    }

    pub fn to_bytes(self) -> [u8; IV_BYTES] {
        let mut out = [0u8; IV_BYTES];
        out[..4].copy_from_slice(&self.ppa.to_le_bytes());
        out[4..].copy_from_slice(&self.rand.to_le_bytes()[..6]);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CipherConfig {
    pub enabled: bool,
    /// Hide keystream generation behind the flash read.
    pub overlap: bool,
    /// One engine cycle (the controller clock).
    pub cycle_ps: Picos,
    pub energy_nj_per_page: f64,
    pub area_pct: f64,
    pub key: [u8; KEY_BYTES],
    pub prng_seed: u64,
}

impl Default for CipherConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            overlap: true,
            cycle_ps: 625,
            energy_nj_per_page: 10.3,
            area_pct: 1.6,
            key: *b"ssd-secret",
            prng_seed: 0x5eed_c1f3,
        }
    }
}

/// What the external bus sees for one page: ciphertext and IV, nothing else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedPage {
    pub ppa: u32,
    pub iv: PageIv,
    pub ciphertext: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CipherStats {
    pub pages_encrypted: u64,
    pub pages_decrypted: u64,
    pub energy_nj: f64,
    pub charged_ps: Picos,
    pub iv_redraws: u64,
}

/// The engine pair sitting between the flash controller and the internal DMA. The key lives in a
/// secure register that only the engine reads.
#[derive(Debug)]
pub struct CipherEngine {
    cfg: CipherConfig,
    page_bytes: usize,
    prng: SeededRng,
    epoch: u64,
    issued: HashSet<PageIv>,
    stats: CipherStats,
}

impl CipherEngine {
    pub fn new(cfg: CipherConfig, page_bytes: usize) -> Self {
        Self {
            prng: SeededRng::new(cfg.prng_seed),
            cfg,
            page_bytes,
            epoch: 0,
            issued: HashSet::new(),
            stats: CipherStats::default(),
        }
    }

    pub fn config(&self) -> &CipherConfig {
        &self.cfg
    }

    pub fn stats(&self) -> CipherStats {
        self.stats
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Device power cycle: reseeds the PRNG and starts a new IV epoch.
    pub fn power_cycle(&mut self) {
        self.epoch += 1;
        self.prng = SeededRng::new(self.cfg.prng_seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.issued.clear();
    }

    /// Picoseconds added to a page transfer. Overlapped: one cycle; otherwise the full keystream.
    pub fn page_charge_ps(&self) -> Picos {
        if !self.cfg.enabled {
            0
        } else if self.cfg.overlap {
            self.cfg.cycle_ps
        } else {
            self.cfg.cycle_ps * (self.page_bytes as Picos * 8).div_ceil(64)
        }
    }

    /// Whole-ns charge for one page (rounded up).
    pub fn page_charge_ns(&self) -> Nanos {
        crate::sim::ps_to_ns_ceil(self.page_charge_ps())
    }

    fn fresh_iv(&mut self, ppa: u32) -> PageIv {
        loop {
            let iv = PageIv::new(ppa, self.prng.next_u64());
            if self.issued.insert(iv) {
                return iv;
            }
            self.stats.iv_redraws += 1;
        }
    }

    pub fn encrypt_page(&mut self, ppa: u32, plaintext: &[u8]) -> Result<EncryptedPage, CipherError> {
        if plaintext.len() != self.page_bytes {
            return Err(CipherError::BadLength { got: plaintext.len(), expected: self.page_bytes });
        }
        let iv = self.fresh_iv(ppa);
        let mut ciphertext = plaintext.to_vec();
        Trivium::new(&self.cfg.key, &iv.to_bytes()).apply(&mut ciphertext);
        self.stats.pages_encrypted += 1;
        self.stats.energy_nj += self.cfg.energy_nj_per_page * self.page_bytes as f64 / 4096.0;
        self.stats.charged_ps += self.page_charge_ps();
        Ok(EncryptedPage { ppa, iv, ciphertext })
    }

    pub fn decrypt_page(&mut self, iv: PageIv, ciphertext: &[u8]) -> Result<Vec<u8>, CipherError> {
        if ciphertext.len() != self.page_bytes {
            return Err(CipherError::BadLength { got: ciphertext.len(), expected: self.page_bytes });
        }
        let mut out = ciphertext.to_vec();
        Trivium::new(&self.cfg.key, &iv.to_bytes()).apply(&mut out);
        self.stats.pages_decrypted += 1;
        Ok(out)
    }

    /// IVs issued in the current epoch.
    pub fn issued_ivs(&self) -> usize {
        self.issued.len()
    }
}

/// Page buffer in front of the engine: FIFO of pages read from the flash chips.
#[derive(Debug, Default)]
pub struct PageBuffer {
    q: std::collections::VecDeque<(u32, Vec<u8>)>,
}

impl PageBuffer {
    pub fn push(&mut self, ppa: u32, page: Vec<u8>) {
        self.q.push_back((ppa, page));
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Encrypts everything buffered, in arrival order.
    pub fn drain(&mut self, engine: &mut CipherEngine) -> Result<Vec<EncryptedPage>, CipherError> {
        let mut out = Vec::with_capacity(self.q.len());
        while let Some((ppa, page)) = self.q.pop_front() {
            out.push(engine.encrypt_page(ppa, &page)?);
        }
        Ok(out)
    }
}
