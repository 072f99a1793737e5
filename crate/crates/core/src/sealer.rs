//! Authenticated page sealing: ChaCha20 encryption under a fresh nonce per
//! write, then HMAC-SHA256 over `nonce || slot_index || ciphertext`.
//!
//! On-store layout of one slot is fixed:
//!
//! ```text
//! [0, 12)                      nonce
//! [12, 12 + page_size)         ciphertext
//! [12 + page_size, +32)        MAC
//! ```

use std::fmt;

use chacha20::cipher::{KeyIvInit, StreamCipher};
use chacha20::ChaCha20;
use hmac::{Hmac, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;

use crate::{Error, Result};

pub const NONCE_LEN: usize = 12;
pub const MAC_LEN: usize = 32;
pub const KEY_LEN: usize = 32;

pub type Nonce = [u8; NONCE_LEN];

type HmacSha256 = Hmac<Sha256>;

/// Encryption and MAC keys. Never serialized, never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct SealKeys {
    enc_key: [u8; KEY_LEN],
    mac_key: [u8; KEY_LEN],
}

impl SealKeys {
    pub fn new(enc_key: [u8; KEY_LEN], mac_key: [u8; KEY_LEN]) -> Result<Self> {
        if enc_key == mac_key {
            return Err(Error::Domain("encryption and MAC keys must differ".into()));
        }
        Ok(Self { enc_key, mac_key })
    }

    /// Deterministic keys for reproducible runs.
    pub fn from_seed(seed: u64) -> Self {
        Self::from_rng(&mut ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn generate() -> Self {
        Self::from_rng(&mut rand::rngs::OsRng)
    }

    fn from_rng<R: RngCore>(rng: &mut R) -> Self {
        loop {
            let mut enc_key = [0u8; KEY_LEN];
            let mut mac_key = [0u8; KEY_LEN];
            rng.fill_bytes(&mut enc_key);
            rng.fill_bytes(&mut mac_key);
            if let Ok(keys) = Self::new(enc_key, mac_key) {
                return keys;
            }
        }
    }
}

impl fmt::Debug for SealKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SealKeys { .. }")
    }
}

/// One sealed page as it appears on the untrusted store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedSlot {
    pub nonce: Nonce,
    pub ciphertext: Vec<u8>,
    pub mac: [u8; MAC_LEN],
}

impl SealedSlot {
    pub fn encoded_len(&self) -> usize {
        NONCE_LEN + self.ciphertext.len() + MAC_LEN
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.mac);
        out
    }

    pub fn from_bytes(bytes: &[u8], page_size: usize) -> Result<Self> {
        let expected = NONCE_LEN + page_size + MAC_LEN;
        if bytes.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                got: bytes.len(),
            });
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (ciphertext, mac) = rest.split_at(page_size);
        Ok(Self {
            nonce: nonce.try_into().unwrap(),
            ciphertext: ciphertext.to_vec(),
            mac: mac.try_into().unwrap(),
        })
    }
}

/// Seals and unseals pages of a fixed size under one key pair.
#[derive(Debug, Clone)]
pub struct Sealer {
    keys: SealKeys,
    page_size: usize,
}

impl Sealer {
    pub fn new(keys: SealKeys, page_size: usize) -> Self {
        Self { keys, page_size }
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn seal(&self, plain: &[u8], slot: usize, nonce: Nonce) -> Result<SealedSlot> {
        if plain.len() != self.page_size {
            return Err(Error::Seal {
                expected: self.page_size,
                got: plain.len(),
            });
        }
        let mut ciphertext = plain.to_vec();
        ChaCha20::new(&self.keys.enc_key.into(), &nonce.into()).apply_keystream(&mut ciphertext);
        let mac = self.tag(&nonce, slot, &ciphertext).finalize().into_bytes().into();
        Ok(SealedSlot { nonce, ciphertext, mac })
    }

    /// Verifies the MAC for `slot` (constant-time) and decrypts.
    pub fn unseal(&self, sealed: &SealedSlot, slot: usize) -> Result<Vec<u8>> {
        if sealed.ciphertext.len() != self.page_size {
            return Err(Error::Integrity { slot });
        }
        self.tag(&sealed.nonce, slot, &sealed.ciphertext)
            .verify_slice(&sealed.mac)
            .map_err(|_| Error::Integrity { slot })?;
        let mut plain = sealed.ciphertext.clone();
        ChaCha20::new(&self.keys.enc_key.into(), &sealed.nonce.into()).apply_keystream(&mut plain);
        Ok(plain)
    }

    fn tag(&self, nonce: &Nonce, slot: usize, ciphertext: &[u8]) -> HmacSha256 {
        let mut mac = <HmacSha256 as Mac>::new_from_slice(&self.keys.mac_key).expect("HMAC accepts any key length");
        mac.update(nonce);
        mac.update(&(slot as u64).to_le_bytes());
        mac.update(ciphertext);
        mac
    }
}

/// Strictly monotone nonce source held in trusted state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NonceCounter {
    next: u64,
    exhausted: bool,
}

impl NonceCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[cfg(test)]
    pub(crate) fn starting_at(next: u64) -> Self {
        Self { next, exhausted: false }
    }

    /// Value the next call will encode.
    pub fn peek(&self) -> Option<u64> {
        (!self.exhausted).then_some(self.next)
    }

    /// Little-endian counter, zero-padded to 12 bytes.
    pub fn next_nonce(&mut self) -> Result<Nonce> {
        if self.exhausted {
            return Err(Error::NonceExhausted);
        }
        let mut nonce = [0u8; NONCE_LEN];
        nonce[..8].copy_from_slice(&self.next.to_le_bytes());
        match self.next.checked_add(1) {
            Some(n) => self.next = n,
            None => self.exhausted = true,
        }
        Ok(nonce)
    }

    /// Reserves `n` consecutive nonces, e.g. before fanning work out to
    /// threads that must not touch the counter.
    pub fn reserve(&mut self, n: usize) -> Result<Vec<Nonce>> {
        (0..n).map(|_| self.next_nonce()).collect()
    }
}
