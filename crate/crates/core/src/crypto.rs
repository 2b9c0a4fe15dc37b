//! Keyed primitives for the update protocol: HMAC-SHA256, the one-time key
//! derivation, and the request/ack token constructions.
//!
//! The SHA-256 core is implemented here rather than pulled in as a dependency
//! because the scaling measurements count compression-function invocations;
//! the counter is a thread-local so concurrently running scenarios (and
//! tests) cannot contaminate each other. Conformance is pinned by the RFC
//! 4231 vectors and cross-checked against an independent implementation in
//! the test suite.

use std::cell::Cell;

const BLOCK_LEN: usize = 64;
const DIGEST_LEN: usize = 32;

thread_local! {
    static COMPRESSIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of SHA-256 compression invocations on this thread since the last
/// [`reset_compression_count`].
pub fn compression_count() -> u64 {
    COMPRESSIONS.with(|c| c.get())
}

/// Zero this thread's compression counter.
pub fn reset_compression_count() {
    COMPRESSIONS.with(|c| c.set(0));
}

/// The 32-byte symmetric key shared between verifier and device.
///
/// Deliberately opaque: no `Serialize`, no `Display`, and `Debug` prints a
/// placeholder so key bytes cannot leak into transcripts or reports.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey([u8; 32]);

impl SecretKey {
    pub fn new(bytes: [u8; 32]) -> Self {
        SecretKey(bytes)
    }

    pub(crate) fn bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl std::fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

/// A 32-byte HMAC-SHA256 output.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct MacTag(pub [u8; 32]);

impl MacTag {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Constant-time equality against an arbitrary byte slice.
    pub fn ct_eq(&self, other: &[u8]) -> bool {
        ct_eq(&self.0, other)
    }

    /// The redacted form used in logs and reports: first four bytes, hex.
    pub fn redacted(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl std::fmt::Debug for MacTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MacTag({}..)", self.redacted())
    }
}

/// Constant-time byte-slice comparison. Length mismatch short-circuits,
/// which leaks only the (public) tag length.
pub fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut acc = 0u8;
    for (x, y) in a.iter().zip(b) {
        acc |= x ^ y;
    }
    acc == 0
}

/// HMAC-SHA256 over `msg`.
pub fn hmac(key: &SecretKey, msg: &[u8]) -> MacTag {
    hmac_raw(key.bytes(), msg)
}

fn hmac_raw(key: &[u8], msg: &[u8]) -> MacTag {
    let mut pad_key = [0u8; BLOCK_LEN];
    if key.len() > BLOCK_LEN {
        let digest = sha256(key);
        pad_key[..DIGEST_LEN].copy_from_slice(&digest);
    } else {
        pad_key[..key.len()].copy_from_slice(key);
    }

    let mut inner = Sha256::new();
    let ipad: Vec<u8> = pad_key.iter().map(|b| b ^ 0x36).collect();
    inner.update(&ipad);
    inner.update(msg);
    let inner_digest = inner.finalize();

    let mut outer = Sha256::new();
    let opad: Vec<u8> = pad_key.iter().map(|b| b ^ 0x5c).collect();
    outer.update(&opad);
    outer.update(&inner_digest);
    MacTag(outer.finalize())
}

/// Derive a one-time key from the master key and a challenge.
pub fn kdf(key: &SecretKey, chal: &[u8]) -> SecretKey {
    assert!(!chal.is_empty(), "challenge must be non-empty");
    SecretKey(hmac(key, chal).0)
}

/// Verifier-to-device direction byte prefixed to update-request MAC inputs.
pub const DIR_REQUEST: u8 = 0x00;
/// Device-to-verifier direction byte prefixed to acknowledgment MAC inputs.
pub const DIR_ACK: u8 = 0x01;

/// Authorization token over a serialized image: `HMAC(K, 0x00 || bytes)`.
pub fn tag_request(key: &SecretKey, snew_bytes: &[u8]) -> MacTag {
    let mut msg = Vec::with_capacity(1 + snew_bytes.len());
    msg.push(DIR_REQUEST);
    msg.extend_from_slice(snew_bytes);
    hmac(key, &msg)
}

/// Install acknowledgment binding a version and nonce:
/// `HMAC(K, 0x01 || LE16(v) || n)`.
pub fn tag_ack(key: &SecretKey, version: u16, nonce: &[u8; 16]) -> MacTag {
    let mut msg = Vec::with_capacity(1 + 2 + 16);
    msg.push(DIR_ACK);
    msg.extend_from_slice(&version.to_le_bytes());
    msg.extend_from_slice(nonce);
    hmac(key, &msg)
}

/// SHA-256 of `data` in one shot.
pub fn sha256(data: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(data);
    h.finalize()
}

/// Incremental SHA-256 (FIPS 180-4).
pub struct Sha256 {
    state: [u32; 8],
    buf: [u8; BLOCK_LEN],
    buf_len: usize,
    total_len: u64,
}

impl Default for Sha256 {
    fn default() -> Self {
        Self::new()
    }
}

impl Sha256 {
    pub fn new() -> Self {
        Sha256 {
            state: [
                0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c,
                0x1f83d9ab, 0x5be0cd19,
            ],
            buf: [0u8; BLOCK_LEN],
            buf_len: 0,
            total_len: 0,
        }
    }

    pub fn update(&mut self, mut data: &[u8]) {
        self.total_len += data.len() as u64;
        if self.buf_len > 0 {
            let take = (BLOCK_LEN - self.buf_len).min(data.len());
            self.buf[self.buf_len..self.buf_len + take].copy_from_slice(&data[..take]);
            self.buf_len += take;
            data = &data[take..];
            if self.buf_len == BLOCK_LEN {
                let block = self.buf;
                self.compress(&block);
                self.buf_len = 0;
            }
        }
        while data.len() >= BLOCK_LEN {
            let (block, rest) = data.split_at(BLOCK_LEN);
            self.compress(block.try_into().unwrap());
            data = rest;
        }
        if !data.is_empty() {
            self.buf[..data.len()].copy_from_slice(data);
            self.buf_len = data.len();
        }
    }

    pub fn finalize(mut self) -> [u8; 32] {
        let bit_len = self.total_len * 8;
        self.update(&[0x80]);
        while self.buf_len != 56 {
            self.update(&[0x00]);
        }
        // Length bytes bypass update() so total_len does not double-count.
        self.buf[56..].copy_from_slice(&bit_len.to_be_bytes());
        let block = self.buf;
        self.compress(&block);

        let mut out = [0u8; 32];
        for (chunk, word) in out.chunks_exact_mut(4).zip(self.state) {
            chunk.copy_from_slice(&word.to_be_bytes());
        }
        out
    }

    fn compress(&mut self, block: &[u8; BLOCK_LEN]) {
        COMPRESSIONS.with(|c| c.set(c.get() + 1));

        let mut w = [0u32; 64];
        for (i, chunk) in block.chunks_exact(4).enumerate() {
            w[i] = u32::from_be_bytes(chunk.try_into().unwrap());
        }
        for i in 16..64 {
            let s0 = w[i - 15].rotate_right(7) ^ w[i - 15].rotate_right(18) ^ (w[i - 15] >> 3);
            let s1 = w[i - 2].rotate_right(17) ^ w[i - 2].rotate_right(19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16]
                .wrapping_add(s0)
                .wrapping_add(w[i - 7])
                .wrapping_add(s1);
        }

        let [mut a, mut b, mut c, mut d, mut e, mut f, mut g, mut h] = self.state;
        for i in 0..64 {
            let s1 = e.rotate_right(6) ^ e.rotate_right(11) ^ e.rotate_right(25);
            let ch = (e & f) ^ (!e & g);
            let t1 = h
                .wrapping_add(s1)
                .wrapping_add(ch)
                .wrapping_add(K[i])
                .wrapping_add(w[i]);
            let s0 = a.rotate_right(2) ^ a.rotate_right(13) ^ a.rotate_right(22);
            let maj = (a & b) ^ (a & c) ^ (b & c);
            let t2 = s0.wrapping_add(maj);
            h = g;
            g = f;
            f = e;
            e = d.wrapping_add(t1);
            d = c;
            c = b;
            b = a;
            a = t1.wrapping_add(t2);
        }

        self.state[0] = self.state[0].wrapping_add(a);
        self.state[1] = self.state[1].wrapping_add(b);
        self.state[2] = self.state[2].wrapping_add(c);
        self.state[3] = self.state[3].wrapping_add(d);
        self.state[4] = self.state[4].wrapping_add(e);
        self.state[5] = self.state[5].wrapping_add(f);
        self.state[6] = self.state[6].wrapping_add(g);
        self.state[7] = self.state[7].wrapping_add(h);
    }
}

const K: [u32; 64] = [
    0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
    0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
    0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
    0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
    0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
    0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
    0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
    0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
    0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
    0xc67178f2,
];

/// Expected number of SHA-256 compressions for a message of `msg_len` bytes.
///
/// Padding adds one `0x80` byte plus the 8-byte bit length, so the block
/// count is `ceil((msg_len + 9) / 64)`.
pub fn sha256_blocks(msg_len: usize) -> u64 {
    (msg_len + 9).div_ceil(BLOCK_LEN) as u64
}

/// Expected compressions for one HMAC over a `msg_len`-byte message with a
/// key no longer than one block: inner hash over `ipad || msg`, outer hash
/// over `opad || digest`.
pub fn hmac_compressions(msg_len: usize) -> u64 {
    sha256_blocks(BLOCK_LEN + msg_len) + sha256_blocks(BLOCK_LEN + DIGEST_LEN)
}
