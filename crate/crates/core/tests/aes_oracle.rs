//! MAC engine against an independent AES-128 implementation, plus the
//! engine's algebraic properties.

use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use ccfi_core::aes::Aes128;
use ccfi_core::mac::{encode_class, mac_value, verify, ClassKind, MacKey};
use ccfi_core::prng::ReservedPrng;
use proptest::prelude::*;

fn reference_encrypt(key: &[u8; 16], block: &[u8; 16]) -> [u8; 16] {
    let cipher = aes::Aes128::new(GenericArray::from_slice(key));
    let mut b = *block;
    cipher.encrypt_block(GenericArray::from_mut_slice(&mut b));
    b
}

#[test]
fn agrees_with_reference_on_fips_vectors() {
    let cases = [
        (
            "000102030405060708090a0b0c0d0e0f",
            "00112233445566778899aabbccddeeff",
            "69c4e0d86a7b0430d8cdb78070b4c55a",
        ),
        (
            "2b7e151628aed2a6abf7158809cf4f3c",
            "3243f6a8885a308d313198a2e0370734",
            "3925841d02dc09fbdc118597196a0b32",
        ),
    ];
    for (k, p, c) in cases {
        let key: [u8; 16] = hex::decode(k).unwrap().try_into().unwrap();
        let pt: [u8; 16] = hex::decode(p).unwrap().try_into().unwrap();
        let ours = Aes128::new(&key).encrypt_block(&pt);
        assert_eq!(hex::encode(ours), c);
        assert_eq!(ours, reference_encrypt(&key, &pt));
    }
}

#[test]
fn agrees_with_reference_on_1000_random_pairs() {
    let start = std::time::Instant::now();
    let mut prng = ReservedPrng::from_seed(0x0e5);
    for _ in 0..1000 {
        let key = prng.bytes_16();
        let block = prng.bytes_16();
        let ours = Aes128::new(&key).encrypt_block(&block);
        assert_eq!(ours, reference_encrypt(&key, &block));
    }
    assert!(
        start.elapsed() < std::time::Duration::from_secs(1),
        "1000 oracle comparisons took {:?}",
        start.elapsed()
    );
}

#[test]
fn mac_block_assembly_matches_reference() {
    // pointer little-endian in block bytes 0..8, class value in 8..16
    let mut prng = ReservedPrng::from_seed(77);
    for _ in 0..100 {
        let key_bytes = prng.bytes_16();
        let key = MacKey::from_bytes(key_bytes);
        let pointer = prng.next_u64();
        let class = encode_class(
            ClassKind::FunctionPointer,
            prng.next_u64() & ((1 << 48) - 1),
            Some((prng.next_u64() & 0x7fff) as u16),
        )
        .unwrap();
        let mut block = [0u8; 16];
        block[..8].copy_from_slice(&pointer.to_le_bytes());
        block[8..].copy_from_slice(&class.value.to_le_bytes());
        assert_eq!(mac_value(&key, pointer, &class).0, reference_encrypt(&key_bytes, &block));
    }
}

#[test]
fn distinct_classes_distinct_macs_on_sampled_pairs() {
    let key = MacKey::from_bytes([9u8; 16]);
    let mut prng = ReservedPrng::from_seed(123);
    for _ in 0..200 {
        let p = prng.next_u64();
        let a1 = prng.next_u64() & ((1 << 48) - 1);
        let a2 = prng.next_u64() & ((1 << 48) - 1);
        if a1 == a2 {
            continue;
        }
        let c1 = encode_class(ClassKind::FunctionPointer, a1, None).unwrap();
        let c2 = encode_class(ClassKind::FunctionPointer, a2, None).unwrap();
        assert_ne!(mac_value(&key, p, &c1), mac_value(&key, p, &c2));
        assert!(!verify(&key, p, &c2, &mac_value(&key, p, &c1)));
    }
}

proptest! {
    // distinct (pointer, class value) pairs assemble to distinct blocks,
    // so equal MACs imply equal inputs under a fixed key
    #[test]
    fn block_assembly_is_injective(p1: u64, p2: u64, a1 in 0u64..(1 << 48), a2 in 0u64..(1 << 48)) {
        let c1 = encode_class(ClassKind::FunctionPointer, a1, None).unwrap();
        let c2 = encode_class(ClassKind::FunctionPointer, a2, None).unwrap();
        let key = MacKey::from_bytes([3u8; 16]);
        if (p1, c1.value) != (p2, c2.value) {
            prop_assert_ne!(mac_value(&key, p1, &c1), mac_value(&key, p2, &c2));
        } else {
            prop_assert_eq!(mac_value(&key, p1, &c1), mac_value(&key, p2, &c2));
        }
    }

    #[test]
    fn verify_round_trips(p: u64, a in 0u64..(1 << 48), flip in 0usize..128) {
        let key = MacKey::from_bytes([5u8; 16]);
        let class = encode_class(ClassKind::ManualData, a, None).unwrap();
        let mut m = mac_value(&key, p, &class);
        prop_assert!(verify(&key, p, &class, &m));
        m.0[flip / 8] ^= 1 << (flip % 8);
        prop_assert!(!verify(&key, p, &class, &m));
    }

    #[test]
    fn domain_bit_separates_equal_payloads(p: u64, a in 0u64..(1 << 48)) {
        let key = MacKey::from_bytes([7u8; 16]);
        let ret = encode_class(ClassKind::ReturnAddress, a, None).unwrap();
        let fun = encode_class(ClassKind::FunctionPointer, a, None).unwrap();
        prop_assert!(!verify(&key, p, &ret, &mac_value(&key, p, &fun)));
    }
}
