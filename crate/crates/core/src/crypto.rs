//! Cipher suites for ESP processing: NULL (identity, no ICV) and AES-CTR
//! with a truncated HMAC-MD5 integrity check value.
//!
//! The AES-CTR keystream follows the RFC 3686 construction: each 16-byte
//! counter block is `nonce (4) || iv (8) || block counter (4, big endian,
//! starting at 1)`, encrypted with AES-128. The explicit per-packet IV is
//! the 64-bit big-endian sequence number, which is unique within an SA
//! incarnation by construction.
//!
//! The ICV is HMAC-MD5 over `esp header || iv || ciphertext`, truncated to
//! 96 bits (the RFC 2403 convention), and is compared in constant time
//! before any plaintext is released.

use alloc::vec::Vec;
use core::fmt;
use core::net::Ipv4Addr;

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;
use md5::{Digest, Md5};
use rand_core::RngCore;
use thiserror::Error;

use crate::packet::{
    self, CodecError, EspHeader, Ipv4Header, ESP_HEADER_LEN, PROTO_ESP,
};

pub const AES_KEY_LEN: usize = 16;
pub const CTR_NONCE_LEN: usize = 4;
pub const HMAC_KEY_LEN: usize = 16;
/// Truncated HMAC-MD5 tag length.
pub const ICV_LEN: usize = 12;
/// Explicit per-packet IV length.
pub const IV_LEN: usize = 8;
/// TTL of the outer tunnel header.
pub const OUTER_TTL: u8 = 64;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("sequence number would exceed 2^32 - 1")]
    SequenceOverflow,
    #[error("sequence number must be at least 1")]
    InvalidSequence,
    #[error("ICV mismatch")]
    IcvMismatch,
    #[error("bad ESP trailer padding")]
    BadPadding,
    #[error("bad ESP trailer next_header {0}")]
    BadNextHeader(u8),
    #[error("ciphertext is missing its explicit IV")]
    MissingIv,
    #[error("ciphertext shorter than the suite framing allows")]
    TruncatedCiphertext,
    #[error("ESP header SPI does not match the SA")]
    SpiMismatch,
    #[error("invalid security association: {0}")]
    InvalidSa(&'static str),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// The cipher suites the data plane implements. Adding a suite means adding
/// a variant here plus its encapsulate/decapsulate arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CipherSuiteId {
    Null,
    AesCtrHmacMd5,
}

impl CipherSuiteId {
    pub fn icv_len(self) -> usize {
        match self {
            CipherSuiteId::Null => 0,
            CipherSuiteId::AesCtrHmacMd5 => ICV_LEN,
        }
    }

    pub fn iv_len(self) -> usize {
        match self {
            CipherSuiteId::Null => 0,
            CipherSuiteId::AesCtrHmacMd5 => IV_LEN,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CipherSuiteId::Null => "null",
            CipherSuiteId::AesCtrHmacMd5 => "aes_ctr_hmac_md5",
        }
    }
}

impl fmt::Display for CipherSuiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Key material for one SA. The NULL suite carries none.
#[derive(Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SaKeyMaterial {
    Empty,
    AesCtrHmacMd5 {
        aes_key: [u8; AES_KEY_LEN],
        ctr_nonce: [u8; CTR_NONCE_LEN],
        hmac_key: [u8; HMAC_KEY_LEN],
    },
}

// Key bytes never appear in logs, debug dumps or reports.
impl fmt::Debug for SaKeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SaKeyMaterial::Empty => f.write_str("SaKeyMaterial::Empty"),
            SaKeyMaterial::AesCtrHmacMd5 { .. } => {
                f.write_str("SaKeyMaterial::AesCtrHmacMd5(redacted)")
            }
        }
    }
}

/// One unidirectional security association.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SecurityAssociation {
    pub spi: u32,
    pub tunnel_src: Ipv4Addr,
    pub tunnel_dst: Ipv4Addr,
    pub suite: CipherSuiteId,
    pub keys: SaKeyMaterial,
    /// Index of the packet counter register on the switch holding this SA's
    /// table entry. Unused on hosts, which count per SPI.
    pub register_index: u32,
    pub soft_limit: u64,
    pub hard_limit: u64,
}

impl SecurityAssociation {
    pub fn validate(&self) -> Result<(), CryptoError> {
        if self.spi < 256 {
            return Err(CryptoError::InvalidSa("spi must be at least 256"));
        }
        if self.soft_limit >= self.hard_limit {
            return Err(CryptoError::InvalidSa("soft limit must be below hard limit"));
        }
        match (self.suite, &self.keys) {
            (CipherSuiteId::Null, SaKeyMaterial::Empty) => Ok(()),
            (CipherSuiteId::AesCtrHmacMd5, SaKeyMaterial::AesCtrHmacMd5 { .. }) => Ok(()),
            _ => Err(CryptoError::InvalidSa("key material does not match suite")),
        }
    }
}

/// Suite output: optional explicit IV, the (possibly encrypted) framed
/// payload, and the ICV. `to_wire` is the byte layout that follows the ESP
/// header on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EspCiphertext {
    pub iv: Option<[u8; IV_LEN]>,
    pub body: Vec<u8>,
    pub icv: Vec<u8>,
}

impl EspCiphertext {
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IV_LEN + self.body.len() + self.icv.len());
        if let Some(iv) = &self.iv {
            out.extend_from_slice(iv);
        }
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.icv);
        out
    }

    /// Split raw post-ESP-header bytes by the given suite's framing.
    pub fn from_wire(suite: CipherSuiteId, raw: &[u8]) -> Result<Self, CryptoError> {
        let iv_len = suite.iv_len();
        let icv_len = suite.icv_len();
        if raw.len() < iv_len + icv_len {
            return Err(CryptoError::TruncatedCiphertext);
        }
        let iv = if iv_len > 0 {
            let mut iv = [0u8; IV_LEN];
            iv.copy_from_slice(&raw[..IV_LEN]);
            Some(iv)
        } else {
            None
        };
        let body_end = raw.len() - icv_len;
        Ok(EspCiphertext {
            iv,
            body: raw[iv_len..body_end].to_vec(),
            icv: raw[body_end..].to_vec(),
        })
    }
}

/// XOR `data` with the RFC 3686 AES-128-CTR keystream for
/// `(key, nonce, iv)`. Encryption and decryption are the same operation.
pub fn aes128_ctr_xor(
    key: &[u8; AES_KEY_LEN],
    nonce: &[u8; CTR_NONCE_LEN],
    iv: &[u8; IV_LEN],
    data: &mut [u8],
) {
    let cipher = Aes128::new(GenericArray::from_slice(key));
    let mut counter_block = [0u8; 16];
    counter_block[..4].copy_from_slice(nonce);
    counter_block[4..12].copy_from_slice(iv);
    for (i, chunk) in data.chunks_mut(16).enumerate() {
        counter_block[12..].copy_from_slice(&(i as u32 + 1).to_be_bytes());
        let mut block = GenericArray::clone_from_slice(&counter_block);
        cipher.encrypt_block(&mut block);
        for (b, k) in chunk.iter_mut().zip(block.iter()) {
            *b ^= k;
        }
    }
}

/// HMAC-MD5 (RFC 2104) over the concatenation of `parts`.
pub fn hmac_md5(key: &[u8], parts: &[&[u8]]) -> [u8; 16] {
    const BLOCK: usize = 64;
    let mut k0 = [0u8; BLOCK];
    if key.len() > BLOCK {
        k0[..16].copy_from_slice(&Md5::digest(key));
    } else {
        k0[..key.len()].copy_from_slice(key);
    }
    let mut inner = Md5::new();
    let ipad: Vec<u8> = k0.iter().map(|b| b ^ 0x36).collect();
    inner.update(&ipad);
    for part in parts {
        inner.update(part);
    }
    let inner_digest = inner.finalize();

    let mut outer = Md5::new();
    let opad: Vec<u8> = k0.iter().map(|b| b ^ 0x5C).collect();
    outer.update(&opad);
    outer.update(inner_digest);
    outer.finalize().into()
}

/// Constant-time byte comparison; unequal lengths compare unequal.
fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut acc = 0u8;
    for (x, y) in a.iter().zip(b.iter()) {
        acc |= x ^ y;
    }
    acc == 0
}

type AesKeyRefs<'a> = (&'a [u8; 16], &'a [u8; 4], &'a [u8; 16]);

fn aes_keys(sa: &SecurityAssociation) -> Result<AesKeyRefs<'_>, CryptoError> {
    match &sa.keys {
        SaKeyMaterial::AesCtrHmacMd5 {
            aes_key,
            ctr_nonce,
            hmac_key,
        } => Ok((aes_key, ctr_nonce, hmac_key)),
        SaKeyMaterial::Empty => Err(CryptoError::InvalidSa("key material does not match suite")),
    }
}

/// Apply the SA's suite to an inner IP packet. The ESP header is built here
/// from the SA's SPI and the per-SA packet counter value `seq`.
pub fn suite_encapsulate(
    sa: &SecurityAssociation,
    seq: u64,
    inner_ip: &[u8],
) -> Result<(EspHeader, EspCiphertext), CryptoError> {
    sa.validate()?;
    if seq == 0 {
        return Err(CryptoError::InvalidSequence);
    }
    if seq > u64::from(u32::MAX) {
        return Err(CryptoError::SequenceOverflow);
    }
    let esp = EspHeader {
        spi: sa.spi,
        seq: seq as u32,
    };
    let (framed, _trailer) = packet::esp_frame(inner_ip, sa.suite.icv_len());
    match sa.suite {
        CipherSuiteId::Null => Ok((
            esp,
            EspCiphertext {
                iv: None,
                body: framed,
                icv: Vec::new(),
            },
        )),
        CipherSuiteId::AesCtrHmacMd5 => {
            let (aes_key, nonce, hmac_key) = aes_keys(sa)?;
            let iv = seq.to_be_bytes();
            let mut body = framed;
            aes128_ctr_xor(aes_key, nonce, &iv, &mut body);
            let tag = hmac_md5(hmac_key, &[&esp.to_bytes(), &iv, &body]);
            Ok((
                esp,
                EspCiphertext {
                    iv: Some(iv),
                    body,
                    icv: tag[..ICV_LEN].to_vec(),
                },
            ))
        }
    }
}

/// Authenticate and decrypt, returning the exact original inner IP packet.
/// The ICV is recomputed and compared in constant time before anything is
/// decrypted; padding and the trailer are validated on the way out.
pub fn suite_decapsulate(
    sa: &SecurityAssociation,
    esp: &EspHeader,
    ct: &EspCiphertext,
) -> Result<Vec<u8>, CryptoError> {
    sa.validate()?;
    if esp.spi != sa.spi {
        return Err(CryptoError::SpiMismatch);
    }
    let framed = match sa.suite {
        CipherSuiteId::Null => ct.body.clone(),
        CipherSuiteId::AesCtrHmacMd5 => {
            let (aes_key, nonce, hmac_key) = aes_keys(sa)?;
            let iv = ct.iv.ok_or(CryptoError::MissingIv)?;
            let tag = hmac_md5(hmac_key, &[&esp.to_bytes(), &iv, &ct.body]);
            if !ct_eq(&tag[..ICV_LEN], &ct.icv) {
                return Err(CryptoError::IcvMismatch);
            }
            let mut body = ct.body.clone();
            aes128_ctr_xor(aes_key, nonce, &iv, &mut body);
            body
        }
    };
    let inner = packet::esp_unframe(&framed).map_err(|e| match e {
        CodecError::BadNextHeader(nh) => CryptoError::BadNextHeader(nh),
        _ => CryptoError::BadPadding,
    })?;
    Ok(inner.to_vec())
}

/// Fresh key material for an SA. The NULL suite needs none.
pub fn generate_key_material<R: RngCore>(suite: CipherSuiteId, rng: &mut R) -> SaKeyMaterial {
    match suite {
        CipherSuiteId::Null => SaKeyMaterial::Empty,
        CipherSuiteId::AesCtrHmacMd5 => {
            let mut aes_key = [0u8; AES_KEY_LEN];
            let mut ctr_nonce = [0u8; CTR_NONCE_LEN];
            let mut hmac_key = [0u8; HMAC_KEY_LEN];
            rng.fill_bytes(&mut aes_key);
            rng.fill_bytes(&mut ctr_nonce);
            rng.fill_bytes(&mut hmac_key);
            SaKeyMaterial::AesCtrHmacMd5 {
                aes_key,
                ctr_nonce,
                hmac_key,
            }
        }
    }
}

/// Outer tunnel header for an SA: proto 50, fresh TTL, endpoints from the SA.
pub fn outer_ipv4_header(sa: &SecurityAssociation) -> Ipv4Header {
    Ipv4Header::simple(sa.tunnel_src, sa.tunnel_dst, PROTO_ESP, OUTER_TTL)
}

/// Encapsulate an inner IPv4 packet into a complete outer IPv4/ESP packet
/// (no Ethernet). This is the single encapsulation path shared by the
/// switch pipeline and the host stack.
pub fn esp_seal(
    sa: &SecurityAssociation,
    seq: u64,
    inner_ip: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let (esp, ct) = suite_encapsulate(sa, seq, inner_ip)?;
    let wire = ct.to_wire();
    let mut payload = Vec::with_capacity(ESP_HEADER_LEN + wire.len());
    payload.extend_from_slice(&esp.to_bytes());
    payload.extend_from_slice(&wire);
    Ok(packet::serialize_ipv4_packet(&outer_ipv4_header(sa), &payload)?)
}

/// Open the post-header bytes of an ESP packet under `sa`, returning the
/// inner IPv4 packet. Counterpart of [`esp_seal`].
pub fn esp_open(
    sa: &SecurityAssociation,
    esp: &EspHeader,
    raw_body: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let ct = EspCiphertext::from_wire(sa.suite, raw_body)?;
    suite_decapsulate(sa, esp, &ct)
}
