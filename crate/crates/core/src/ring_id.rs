//! 160-bit identifiers on the rendezvous ring.
//!
//! Both the SHA-1 and MD5 identifiers of a username live in this space. SHA-1
//! digests are used as-is. MD5 digests are 128 bits wide and are expanded by
//! left-alignment: the 16 digest bytes become the 16 most significant bytes
//! of the identifier and the remaining 4 low-order bytes are zero. This keeps
//! MD5 identifiers uniformly spread over the ring at any bucket granularity
//! coarser than 2^32.

use std::fmt;

use md5::Md5;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

/// Number of bits in a ring identifier.
pub const RING_BITS: usize = 160;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RingId(pub [u8; 20]);

impl RingId {
    pub const ZERO: RingId = RingId([0u8; 20]);

    pub fn sha1(data: &[u8]) -> Self {
        let digest = Sha1::digest(data);
        let mut out = [0u8; 20];
        out.copy_from_slice(&digest);
        RingId(out)
    }

    /// MD5 digest left-aligned into the 160-bit space.
    pub fn md5(data: &[u8]) -> Self {
        let digest = Md5::digest(data);
        let mut out = [0u8; 20];
        out[..16].copy_from_slice(&digest);
        RingId(out)
    }

    /// Identifier of a server address (`ip:port` text form).
    pub fn of_address(addr: &str) -> Self {
        Self::sha1(addr.as_bytes())
    }

    /// `self + 2^k mod 2^160`.
    pub fn add_pow2(&self, k: usize) -> Self {
        assert!(k < RING_BITS);
        let mut out = self.0;
        let byte = 19 - k / 8;
        let mut carry = 1u16 << (k % 8);
        let mut i = byte as isize;
        while carry != 0 && i >= 0 {
            let sum = out[i as usize] as u16 + carry;
            out[i as usize] = (sum & 0xff) as u8;
            carry = sum >> 8;
            i -= 1;
        }
        RingId(out)
    }

    /// True if `self` lies in the half-open ring interval `(from, to]`.
    /// When `from == to` the interval is the whole ring.
    pub fn in_open_closed(&self, from: &RingId, to: &RingId) -> bool {
        if from < to {
            self > from && self <= to
        } else {
            self > from || self <= to
        }
    }

    /// True if `self` lies in the open ring interval `(from, to)`.
    /// When `from == to` the interval is the whole ring minus `from`.
    pub fn in_open(&self, from: &RingId, to: &RingId) -> bool {
        if from < to {
            self > from && self < to
        } else {
            self > from || self < to
        }
    }

    /// Top `bits` bits interpreted as an integer (bits <= 64).
    pub fn prefix(&self, bits: u32) -> u64 {
        assert!(bits <= 64);
        if bits == 0 {
            return 0;
        }
        let mut head = [0u8; 8];
        head.copy_from_slice(&self.0[..8]);
        u64::from_be_bytes(head) >> (64 - bits)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for RingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RingId({}..)", &self.to_hex()[..10])
    }
}

impl fmt::Display for RingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// The two independent identifiers of a username: `(MD5, SHA-1)`.
pub fn dual_hash(username: &str) -> (RingId, RingId) {
    debug_assert!(!username.is_empty());
    (RingId::md5(username.as_bytes()), RingId::sha1(username.as_bytes()))
}
