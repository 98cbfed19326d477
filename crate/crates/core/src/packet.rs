//! Bit-exact parsing and serialization of Ethernet/IPv4/ESP frames.
//!
//! Wire layout handled here (all multi-byte fields big endian):
//!
//! ```text
//! 0        6       12   14                    34       42
//! +--------+--------+----+---------------------+--------+--------------
//! | dstmac | srcmac | ET |     IPv4 header     |  ESP   | payload ...
//! +--------+--------+----+---------------------+--------+--------------
//!                     0x0800   ihl fixed at 5     spi+seq (proto 50 only)
//! ```
//!
//! ESP payloads end in the RFC 4303 trailer. Padding is aligned to 4 bytes
//! and always holds the monotone values 1, 2, 3; `next_header` is always 4
//! (IP-in-IP) because tunnel mode encapsulates a whole IPv4 packet:
//!
//! ```text
//! | plaintext ... | pad (0-3) | pad_len | next_header | icv (0 or 12) |
//! ```
//!
//! The parser is total: a frame either yields a [`Packet`] or a
//! [`CodecError`]. IPv4 options are not handled (`ihl` must be 5); the
//! pipeline treats such frames as parse drops.

use alloc::string::String;
use alloc::vec::Vec;
use core::net::Ipv4Addr;

use thiserror::Error;

use crate::types::{MacAddr, PortId, SpdPolicy};

pub const ETH_HEADER_LEN: usize = 14;
pub const IPV4_HEADER_LEN: usize = 20;
pub const ESP_HEADER_LEN: usize = 8;
/// Ethernet + minimal IPv4.
pub const MIN_FRAME_LEN: usize = ETH_HEADER_LEN + IPV4_HEADER_LEN;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const PROTO_ESP: u8 = 50;
/// IP-in-IP, the `next_header` value of every tunnel-mode ESP trailer.
pub const PROTO_IPIP: u8 = 4;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated packet: need at least {needed} bytes, got {got}")]
    TruncatedPacket { needed: usize, got: usize },
    #[error("bad IPv4 header checksum")]
    BadChecksum,
    #[error("unsupported ethertype {0:#06x}")]
    UnsupportedEthertype(u16),
    #[error("bad IP version {0}")]
    BadVersion(u8),
    #[error("unsupported IHL {0} (IPv4 options are not handled)")]
    UnsupportedIhl(u8),
    #[error("IPv4 total_length {header} disagrees with available payload {actual}")]
    LengthMismatch { header: u16, actual: usize },
    #[error("checksum input must be exactly 20 bytes, got {0}")]
    WrongLength(usize),
    #[error("invariant violation: {0}")]
    InvariantViolation(&'static str),
    #[error("bad ESP trailer padding")]
    BadPadding,
    #[error("bad ESP trailer next_header {0}, expected 4")]
    BadNextHeader(u8),
    #[error("invalid hex frame")]
    BadHex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EthernetHeader {
    pub dst_mac: MacAddr,
    pub src_mac: MacAddr,
    pub ethertype: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ipv4Header {
    pub version: u8,
    /// Header length in 32-bit words; always 5 here.
    pub ihl: u8,
    pub dscp_ecn: u8,
    pub total_length: u16,
    pub identification: u16,
    pub flags_frag: u16,
    pub ttl: u8,
    pub protocol: u8,
    pub checksum: u16,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
}

impl Ipv4Header {
    /// A header with the fields the pipeline actually varies; everything
    /// else at its fixed default. `total_length` and `checksum` are left
    /// zero, serialization computes both.
    pub fn simple(src: Ipv4Addr, dst: Ipv4Addr, protocol: u8, ttl: u8) -> Self {
        Ipv4Header {
            version: 4,
            ihl: 5,
            dscp_ecn: 0,
            total_length: 0,
            identification: 0,
            flags_frag: 0,
            ttl,
            protocol,
            checksum: 0,
            src,
            dst,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EspHeader {
    pub spi: u32,
    pub seq: u32,
}

impl EspHeader {
    pub fn to_bytes(&self) -> [u8; ESP_HEADER_LEN] {
        let mut out = [0u8; ESP_HEADER_LEN];
        out[..4].copy_from_slice(&self.spi.to_be_bytes());
        out[4..].copy_from_slice(&self.seq.to_be_bytes());
        out
    }
}

/// Shape of an ESP trailer appended by [`esp_frame`]. The padding bytes are
/// implied (monotone 1, 2, 3), the ICV itself lives with the ciphertext.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EspTrailer {
    pub pad_len: u8,
    pub next_header: u8,
    pub icv_len: u8,
}

/// Per-packet user metadata carried through the pipeline. Never serialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UserMetadata {
    /// Set only by the SPD block; `None` means unset.
    pub spd_mark: Option<SpdPolicy>,
    pub soft_limit_reached: bool,
    pub hard_limit_reached: bool,
    pub egress_port: Option<PortId>,
    pub dropped: bool,
}

/// A parsed layered view of one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub eth: EthernetHeader,
    pub ipv4: Ipv4Header,
    /// Present iff `ipv4.protocol == 50`.
    pub esp: Option<EspHeader>,
    /// Remaining bytes after the last parsed header: the IPv4 payload, or
    /// for ESP packets everything after the ESP header (IV, ciphertext
    /// and ICV, still opaque at this layer).
    pub body: Vec<u8>,
    pub meta: UserMetadata,
}

/// RFC 1071 one's-complement checksum over a 20-byte IPv4 header whose
/// checksum field is zeroed. Inserting the result makes the verification
/// sum equal 0xFFFF.
pub fn ipv4_checksum(header: &[u8]) -> Result<u16, CodecError> {
    if header.len() != IPV4_HEADER_LEN {
        return Err(CodecError::WrongLength(header.len()));
    }
    Ok(!ones_complement_sum(header))
}

/// Verify a 20-byte header including its checksum field.
pub fn verify_ipv4_checksum(header: &[u8]) -> bool {
    header.len() == IPV4_HEADER_LEN && ones_complement_sum(header) == 0xFFFF
}

fn ones_complement_sum(bytes: &[u8]) -> u16 {
    let mut sum: u32 = 0;
    for chunk in bytes.chunks(2) {
        let word = if chunk.len() == 2 {
            u16::from_be_bytes([chunk[0], chunk[1]])
        } else {
            u16::from_be_bytes([chunk[0], 0])
        };
        sum += u32::from(word);
    }
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    sum as u16
}

/// Parse a full Ethernet frame.
pub fn parse_packet(bytes: &[u8]) -> Result<Packet, CodecError> {
    if bytes.len() < MIN_FRAME_LEN {
        return Err(CodecError::TruncatedPacket {
            needed: MIN_FRAME_LEN,
            got: bytes.len(),
        });
    }
    let eth = EthernetHeader {
        dst_mac: MacAddr([bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5]]),
        src_mac: MacAddr([bytes[6], bytes[7], bytes[8], bytes[9], bytes[10], bytes[11]]),
        ethertype: u16::from_be_bytes([bytes[12], bytes[13]]),
    };
    if eth.ethertype != ETHERTYPE_IPV4 {
        return Err(CodecError::UnsupportedEthertype(eth.ethertype));
    }
    let (ipv4, payload) = parse_ipv4_packet(&bytes[ETH_HEADER_LEN..])?;
    let (esp, body) = if ipv4.protocol == PROTO_ESP {
        let (esp, rest) = parse_esp(payload)?;
        (Some(esp), rest)
    } else {
        (None, payload)
    };
    Ok(Packet {
        eth,
        ipv4,
        esp,
        body: body.to_vec(),
        meta: UserMetadata::default(),
    })
}

/// Parse a bare IPv4 packet (no Ethernet), e.g. the inner packet recovered
/// from an ESP payload. The checksum is validated and `total_length` must
/// match the byte count exactly.
pub fn parse_ipv4_packet(bytes: &[u8]) -> Result<(Ipv4Header, &[u8]), CodecError> {
    if bytes.len() < IPV4_HEADER_LEN {
        return Err(CodecError::TruncatedPacket {
            needed: IPV4_HEADER_LEN,
            got: bytes.len(),
        });
    }
    let version = bytes[0] >> 4;
    if version != 4 {
        return Err(CodecError::BadVersion(version));
    }
    let ihl = bytes[0] & 0x0F;
    if ihl != 5 {
        return Err(CodecError::UnsupportedIhl(ihl));
    }
    if !verify_ipv4_checksum(&bytes[..IPV4_HEADER_LEN]) {
        return Err(CodecError::BadChecksum);
    }
    let total_length = u16::from_be_bytes([bytes[2], bytes[3]]);
    if usize::from(total_length) != bytes.len() {
        return Err(CodecError::LengthMismatch {
            header: total_length,
            actual: bytes.len(),
        });
    }
    let header = Ipv4Header {
        version,
        ihl,
        dscp_ecn: bytes[1],
        total_length,
        identification: u16::from_be_bytes([bytes[4], bytes[5]]),
        flags_frag: u16::from_be_bytes([bytes[6], bytes[7]]),
        ttl: bytes[8],
        protocol: bytes[9],
        checksum: u16::from_be_bytes([bytes[10], bytes[11]]),
        src: Ipv4Addr::new(bytes[12], bytes[13], bytes[14], bytes[15]),
        dst: Ipv4Addr::new(bytes[16], bytes[17], bytes[18], bytes[19]),
    };
    Ok((header, &bytes[IPV4_HEADER_LEN..]))
}

/// Split an ESP header off an IPv4 payload.
pub fn parse_esp(bytes: &[u8]) -> Result<(EspHeader, &[u8]), CodecError> {
    if bytes.len() < ESP_HEADER_LEN {
        return Err(CodecError::TruncatedPacket {
            needed: ESP_HEADER_LEN,
            got: bytes.len(),
        });
    }
    let esp = EspHeader {
        spi: u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
        seq: u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]),
    };
    Ok((esp, &bytes[ESP_HEADER_LEN..]))
}

/// Serialize a packet back to wire bytes. `total_length` and the IPv4
/// checksum are computed fresh, so `parse(serialize(p)) == p` holds for
/// any packet satisfying the type invariants.
pub fn serialize_packet(p: &Packet) -> Result<Vec<u8>, CodecError> {
    if p.eth.ethertype != ETHERTYPE_IPV4 {
        return Err(CodecError::InvariantViolation("ethertype must be 0x0800"));
    }
    if p.esp.is_some() != (p.ipv4.protocol == PROTO_ESP) {
        return Err(CodecError::InvariantViolation(
            "esp header present iff protocol == 50",
        ));
    }
    if let Some(esp) = &p.esp {
        // RFC 4303 reserves SPIs 0-255; an SA can never carry one.
        if esp.spi < 256 {
            return Err(CodecError::InvariantViolation("spi below 256"));
        }
    }
    let mut payload = Vec::with_capacity(ESP_HEADER_LEN + p.body.len());
    if let Some(esp) = &p.esp {
        payload.extend_from_slice(&esp.to_bytes());
    }
    payload.extend_from_slice(&p.body);

    let mut out = Vec::with_capacity(ETH_HEADER_LEN + IPV4_HEADER_LEN + payload.len());
    out.extend_from_slice(&p.eth.dst_mac.0);
    out.extend_from_slice(&p.eth.src_mac.0);
    out.extend_from_slice(&p.eth.ethertype.to_be_bytes());
    out.extend_from_slice(&serialize_ipv4_packet(&p.ipv4, &payload)?);
    Ok(out)
}

/// Serialize a bare IPv4 packet with fresh `total_length` and checksum.
pub fn serialize_ipv4_packet(h: &Ipv4Header, payload: &[u8]) -> Result<Vec<u8>, CodecError> {
    if h.version != 4 {
        return Err(CodecError::InvariantViolation("version must be 4"));
    }
    if h.ihl != 5 {
        return Err(CodecError::InvariantViolation("ihl must be 5"));
    }
    let total_length = IPV4_HEADER_LEN + payload.len();
    if total_length > usize::from(u16::MAX) {
        return Err(CodecError::InvariantViolation("packet exceeds 65535 bytes"));
    }
    let total_length = total_length as u16;

    let mut out = Vec::with_capacity(IPV4_HEADER_LEN + payload.len());
    out.push((h.version << 4) | h.ihl);
    out.push(h.dscp_ecn);
    out.extend_from_slice(&total_length.to_be_bytes());
    out.extend_from_slice(&h.identification.to_be_bytes());
    out.extend_from_slice(&h.flags_frag.to_be_bytes());
    out.push(h.ttl);
    out.push(h.protocol);
    out.extend_from_slice(&[0, 0]); // checksum placeholder
    out.extend_from_slice(&h.src.octets());
    out.extend_from_slice(&h.dst.octets());
    let checksum = ipv4_checksum(&out[..IPV4_HEADER_LEN]).expect("header is 20 bytes");
    out[10..12].copy_from_slice(&checksum.to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Append the RFC 4303 trailer to a plaintext: padding to 4-byte alignment
/// (so that `len + pad + 2` is a multiple of 4), then `pad_len` and
/// `next_header = 4`. Returns the framed bytes and the trailer shape;
/// `icv_len` is recorded for the caller, no ICV bytes are appended here.
pub fn esp_frame(plaintext: &[u8], icv_len: usize) -> (Vec<u8>, EspTrailer) {
    let pad_len = (4 - (plaintext.len() + 2) % 4) % 4;
    let mut framed = Vec::with_capacity(plaintext.len() + pad_len + 2);
    framed.extend_from_slice(plaintext);
    for i in 0..pad_len {
        framed.push(i as u8 + 1);
    }
    framed.push(pad_len as u8);
    framed.push(PROTO_IPIP);
    let trailer = EspTrailer {
        pad_len: pad_len as u8,
        next_header: PROTO_IPIP,
        icv_len: icv_len as u8,
    };
    (framed, trailer)
}

/// Strip and validate an RFC 4303 trailer appended by [`esp_frame`].
pub fn esp_unframe(framed: &[u8]) -> Result<&[u8], CodecError> {
    if framed.len() < 2 || !framed.len().is_multiple_of(4) {
        return Err(CodecError::BadPadding);
    }
    let next_header = framed[framed.len() - 1];
    if next_header != PROTO_IPIP {
        return Err(CodecError::BadNextHeader(next_header));
    }
    let pad_len = usize::from(framed[framed.len() - 2]);
    if pad_len > 3 || pad_len + 2 > framed.len() {
        return Err(CodecError::BadPadding);
    }
    let inner_len = framed.len() - 2 - pad_len;
    for (i, &b) in framed[inner_len..inner_len + pad_len].iter().enumerate() {
        if b != i as u8 + 1 {
            return Err(CodecError::BadPadding);
        }
    }
    Ok(&framed[..inner_len])
}

/// One frame as a lowercase hex line, the fixture format used in tests.
pub fn frame_to_hex(frame: &[u8]) -> String {
    hex::encode(frame)
}

pub fn frame_from_hex(line: &str) -> Result<Vec<u8>, CodecError> {
    hex::decode(line.trim()).map_err(|_| CodecError::BadHex)
}
