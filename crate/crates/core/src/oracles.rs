//! Independent reference implementations used as oracles by test suites.
//!
//! Nothing here is called from the production paths, and nothing here
//! shares code with them: the AES block function is written out from the
//! FIPS-197 tables, the checksum works per byte instead of per word, and
//! the table matcher is a straight linear scan. Tests compare the real
//! implementations against these.

use alloc::vec::Vec;

use crate::table::{ColumnSpec, MatchKind, MatchValue, TableEntry};

/// FIPS-197 S-box.
const SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab,
    0x76, 0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4,
    0x72, 0xc0, 0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71,
    0xd8, 0x31, 0x15, 0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2,
    0xeb, 0x27, 0xb2, 0x75, 0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6,
    0xb3, 0x29, 0xe3, 0x2f, 0x84, 0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb,
    0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf, 0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45,
    0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8, 0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5,
    0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2, 0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44,
    0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73, 0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a,
    0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb, 0xe0, 0x32, 0x3a, 0x0a, 0x49,
    0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79, 0xe7, 0xc8, 0x37, 0x6d,
    0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08, 0xba, 0x78, 0x25,
    0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a, 0x70, 0x3e,
    0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e, 0xe1,
    0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb,
    0x16,
];

const RCON: [u8; 10] = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36];

fn xtime(b: u8) -> u8 {
    (b << 1) ^ (((b >> 7) & 1) * 0x1B)
}

fn xor16(s: &mut [u8; 16], k: &[u8; 16]) {
    for (a, b) in s.iter_mut().zip(k.iter()) {
        *a ^= b;
    }
}

fn sub_bytes(s: &mut [u8; 16]) {
    for b in s.iter_mut() {
        *b = SBOX[*b as usize];
    }
}

// State layout: byte i sits at row i % 4, column i / 4 (FIPS-197 input
// order). Row r rotates left by r columns.
fn shift_rows(s: &mut [u8; 16]) {
    let old = *s;
    for r in 1..4 {
        for c in 0..4 {
            s[4 * c + r] = old[4 * ((c + r) % 4) + r];
        }
    }
}

fn mix_columns(s: &mut [u8; 16]) {
    for c in 0..4 {
        let col = [s[4 * c], s[4 * c + 1], s[4 * c + 2], s[4 * c + 3]];
        s[4 * c] = xtime(col[0]) ^ xtime(col[1]) ^ col[1] ^ col[2] ^ col[3];
        s[4 * c + 1] = col[0] ^ xtime(col[1]) ^ xtime(col[2]) ^ col[2] ^ col[3];
        s[4 * c + 2] = col[0] ^ col[1] ^ xtime(col[2]) ^ xtime(col[3]) ^ col[3];
        s[4 * c + 3] = xtime(col[0]) ^ col[0] ^ col[1] ^ col[2] ^ xtime(col[3]);
    }
}

/// AES-128 single-block encryption, written out from FIPS-197.
pub fn reference_aes128_encrypt_block(key: &[u8; 16], block: &[u8; 16]) -> [u8; 16] {
    // Key expansion: 44 words.
    let mut w = [[0u8; 4]; 44];
    for i in 0..4 {
        w[i].copy_from_slice(&key[4 * i..4 * i + 4]);
    }
    for i in 4..44 {
        let p = w[i - 1];
        let t = if i % 4 == 0 {
            [
                SBOX[p[1] as usize] ^ RCON[i / 4 - 1],
                SBOX[p[2] as usize],
                SBOX[p[3] as usize],
                SBOX[p[0] as usize],
            ]
        } else {
            p
        };
        for j in 0..4 {
            w[i][j] = w[i - 4][j] ^ t[j];
        }
    }
    let round_key = |r: usize| {
        let mut k = [0u8; 16];
        for c in 0..4 {
            k[4 * c..4 * c + 4].copy_from_slice(&w[4 * r + c]);
        }
        k
    };

    let mut s = *block;
    xor16(&mut s, &round_key(0));
    for r in 1..10 {
        sub_bytes(&mut s);
        shift_rows(&mut s);
        mix_columns(&mut s);
        xor16(&mut s, &round_key(r));
    }
    sub_bytes(&mut s);
    shift_rows(&mut s);
    xor16(&mut s, &round_key(10));
    s
}

/// One keystream block of the RFC 3686 construction:
/// `AES(key, nonce || iv || counter)` with the counter starting at 1 for
/// the first block of a packet.
pub fn reference_ctr_keystream_block(
    key: &[u8; 16],
    nonce: &[u8; 4],
    iv: &[u8; 8],
    counter: u32,
) -> [u8; 16] {
    let mut block = [0u8; 16];
    block[..4].copy_from_slice(nonce);
    block[4..12].copy_from_slice(iv);
    block[12..].copy_from_slice(&counter.to_be_bytes());
    reference_aes128_encrypt_block(key, &block)
}

/// RFC 1071 checksum computed byte-wise over a 20-byte header with a
/// zeroed checksum field.
pub fn reference_ipv4_checksum(header: &[u8; 20]) -> u16 {
    let mut sum: u64 = 0;
    for (i, &b) in header.iter().enumerate() {
        sum += if i % 2 == 0 {
            u64::from(b) << 8
        } else {
            u64::from(b)
        };
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

fn cell_matches(cell: &MatchValue, col: &ColumnSpec, key: u64) -> bool {
    match *cell {
        MatchValue::Exact(v) => v == key,
        MatchValue::Lpm { value, prefix_len } => {
            if prefix_len == 0 {
                true
            } else {
                let shift = col.bits - prefix_len;
                (key >> shift) == (value >> shift)
            }
        }
        MatchValue::Ternary { value, mask } => (key & mask) == (value & mask),
    }
}

/// Brute-force table lookup honoring match kinds and priorities: ternary
/// tables pick the highest priority, LPM tables the longest total prefix,
/// exact tables their unique hit.
pub fn reference_table_lookup<'a>(
    schema: &[ColumnSpec],
    entries: &'a [TableEntry],
    key: &[u64],
) -> Option<&'a TableEntry> {
    let candidates: Vec<&TableEntry> = entries
        .iter()
        .filter(|e| {
            e.key
                .iter()
                .zip(schema)
                .zip(key)
                .all(|((cell, col), k)| cell_matches(cell, col, *k))
        })
        .collect();
    if candidates.is_empty() {
        return None;
    }
    if schema.iter().any(|c| c.kind == MatchKind::Ternary) {
        return candidates.into_iter().max_by_key(|e| e.priority);
    }
    if schema.iter().any(|c| c.kind == MatchKind::Lpm) {
        let total_len = |e: &TableEntry| -> u32 {
            e.key
                .iter()
                .map(|c| match c {
                    MatchValue::Lpm { prefix_len, .. } => u32::from(*prefix_len),
                    _ => 0,
                })
                .sum()
        };
        // First entry wins a (theoretical) tie, matching insert-order
        // semantics.
        let mut best = candidates[0];
        for e in &candidates[1..] {
            if total_len(e) > total_len(best) {
                best = e;
            }
        }
        return Some(best);
    }
    Some(candidates[0])
}
