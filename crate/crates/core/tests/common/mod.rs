//! Independent reference models shared by the integration tests.

#![allow(dead_code)]

/// Bit-serial Trivium written straight from the algorithm description.
pub struct Serial {
    s: [bool; 289], // s[1..=288]
}

impl Serial {
    pub fn new(key: &[u8; 10], iv: &[u8; 10]) -> Self {
        let mut s = [false; 289];
        let bit = |x: &[u8; 10], j: usize| x[j / 8] >> (j % 8) & 1 == 1;
        for i in 0..80 {
            s[1 + i] = bit(key, 79 - i);
            s[94 + i] = bit(iv, 79 - i);
        }
        s[286] = true;
        s[287] = true;
        s[288] = true;
        let mut t = Self { s };
        for _ in 0..4 * 288 {
            t.round();
        }
        t
    }

    fn round(&mut self) -> bool {
        let s = &mut self.s;
        let mut t1 = s[66] ^ s[93];
        let mut t2 = s[162] ^ s[177];
        let mut t3 = s[243] ^ s[288];
        let z = t1 ^ t2 ^ t3;
        t1 ^= (s[91] & s[92]) ^ s[171];
        t2 ^= (s[175] & s[176]) ^ s[264];
        t3 ^= (s[286] & s[287]) ^ s[69];
        for i in (2..=93).rev() {
            s[i] = s[i - 1];
        }
        s[1] = t3;
        for i in (95..=177).rev() {
            s[i] = s[i - 1];
        }
        s[94] = t1;
        for i in (179..=288).rev() {
            s[i] = s[i - 1];
        }
        s[178] = t2;
        z
    }

    pub fn bytes(&mut self, n: usize) -> Vec<u8> {
        (0..n)
            .map(|_| (0..8).fold(0u8, |b, k| b | (self.round() as u8) << k))
            .collect()
    }
}
