//! The pointer-MAC engine.
//!
//! A protected pointer is bound to a 64-bit *class* describing the context it
//! is valid in, and the pair is sealed with one AES-128 block:
//!
//! ```text
//! MAC = AES-128(K, pointer || class)
//! ```
//!
//! The class layout packs a domain-separation bit, an optional type-signature
//! hash, and a 48-bit payload address:
//!
//! ```text
//! bit 63       62..48            47..0
//! +---------+---------------+------------------------------+
//! | domain  | sig hash or 0 | payload address              |
//! +---------+---------------+------------------------------+
//! ```
//!
//! Return addresses use domain bit 0 and carry the old frame address as the
//! payload; everything stored by address (function pointers, method-table
//! pointers, manually protected data) uses domain bit 1 and carries the
//! storage address. The differing bit makes return-address MACs and
//! pointer MACs mutually unusable regardless of the payload value.

use crate::aes::Aes128;
use crate::prng::ReservedPrng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Virtual addresses occupy the low 48 bits of a 64-bit word.
pub const ADDRESS_BITS: u32 = 48;
pub const ADDRESS_MASK: u64 = (1 << ADDRESS_BITS) - 1;

const DOMAIN_BIT: u64 = 1 << 63;
const SIG_SHIFT: u32 = 48;
const SIG_MASK: u64 = 0x7fff;

/// 128-bit MAC key. Lives only in the reserved register file; it has no VM
/// address, so no load, store or attacker action can name it.
#[derive(Clone)]
pub struct MacKey {
    bytes: [u8; 16],
    cipher: Aes128,
}

impl MacKey {
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        let cipher = Aes128::new(&bytes);
        MacKey { bytes, cipher }
    }

    /// Raw key bytes. Used by tests that scan attacker-visible memory for
    /// key leakage; nothing in the VM proper reads these back.
    pub fn bytes(&self) -> &[u8; 16] {
        &self.bytes
    }
}

impl PartialEq for MacKey {
    fn eq(&self, other: &Self) -> bool {
        self.bytes == other.bytes
    }
}
impl Eq for MacKey {}

impl fmt::Debug for MacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MacKey(..)")
    }
}

/// Full 128-bit AES output. Stored untruncated.
#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacValue(pub [u8; 16]);

impl MacValue {
    pub const ZERO: MacValue = MacValue([0u8; 16]);

    /// The all-zero value doubles as "no MAC stored here".
    pub fn is_zero(&self) -> bool {
        self.0 == [0u8; 16]
    }
}

impl fmt::Debug for MacValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacValue(")?;
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

/// Which kind of protected object a class tags. Only the domain bit enters
/// the MAC input; the kind itself is diagnostic metadata carried to traps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassKind {
    ReturnAddress,
    FunctionPointer,
    VTablePointer,
    ManualData,
}

impl ClassKind {
    pub fn domain_bit(self) -> u64 {
        match self {
            ClassKind::ReturnAddress => 0,
            _ => DOMAIN_BIT,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassKind::ReturnAddress => "return-address",
            ClassKind::FunctionPointer => "function-pointer",
            ClassKind::VTablePointer => "vtable-pointer",
            ClassKind::ManualData => "manual-data",
        }
    }
}

/// 64-bit pointer class: domain bit, optional 15-bit signature hash, 48-bit
/// payload address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassTag {
    pub value: u64,
    pub kind: ClassKind,
    pub payload_address: u64,
    pub sig_hash: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassError {
    /// Payload address does not fit in 48 bits.
    AddressOutOfRange(u64),
    /// Signature hashes only apply to function pointers.
    SigOnReturnAddress,
}

impl fmt::Display for ClassError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassError::AddressOutOfRange(a) => {
                write!(f, "address {a:#x} exceeds the 48-bit address space")
            }
            ClassError::SigOnReturnAddress => {
                write!(f, "return-address classes cannot carry a signature hash")
            }
        }
    }
}

impl std::error::Error for ClassError {}

/// Assemble a class tag. `payload_address` is the old frame address for
/// return addresses and the storage address for everything else.
pub fn encode_class(
    kind: ClassKind,
    payload_address: u64,
    sig_hash: Option<u16>,
) -> Result<ClassTag, ClassError> {
    if payload_address > ADDRESS_MASK {
        return Err(ClassError::AddressOutOfRange(payload_address));
    }
    if sig_hash.is_some() && kind == ClassKind::ReturnAddress {
        return Err(ClassError::SigOnReturnAddress);
    }
    let sig = sig_hash.map(|s| s as u64 & SIG_MASK).unwrap_or(0);
    let value = kind.domain_bit() | (sig << SIG_SHIFT) | payload_address;
    Ok(ClassTag {
        value,
        kind,
        payload_address,
        sig_hash: sig_hash.map(|s| (s as u64 & SIG_MASK) as u16),
    })
}

/// 15-bit hash of a canonical signature string: FNV-1a over the bytes,
/// xor-folded 64 -> 32 -> 16 bits, then masked to 15 bits.
pub fn sig_hash15(signature: &str) -> u16 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in signature.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let h32 = (h >> 32) ^ (h & 0xffff_ffff);
    let h16 = ((h32 >> 16) ^ (h32 & 0xffff)) as u16;
    h16 & 0x7fff
}

/// Draw a fresh key from the reserved-register randomness source. Called
/// once per VM run; the key is installed directly into the register file.
pub fn generate_key(prng: &mut ReservedPrng) -> MacKey {
    MacKey::from_bytes(prng.bytes_16())
}

/// One AES block over the pointer and its class. The pointer occupies bytes
/// 0..8 of the block and the class value bytes 8..16, both little-endian.
pub fn mac_value(key: &MacKey, pointer: u64, class: &ClassTag) -> MacValue {
    let mut block = [0u8; 16];
    block[..8].copy_from_slice(&pointer.to_le_bytes());
    block[8..].copy_from_slice(&class.value.to_le_bytes());
    MacValue(key.cipher.encrypt_block(&block))
}

/// Recompute and compare. The comparison accumulates over all 16 bytes so
/// behavior does not depend on where a mismatch occurs.
pub fn verify(key: &MacKey, pointer: u64, class: &ClassTag, expected: &MacValue) -> bool {
    let got = mac_value(key, pointer, class);
    let mut diff = 0u8;
    for i in 0..16 {
        diff |= got.0[i] ^ expected.0[i];
    }
    diff == 0
}
