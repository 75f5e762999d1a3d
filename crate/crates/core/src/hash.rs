//! Seeded hashing used by local hashing and by server-side seed assignment.

const ITEM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// 64-bit finalizer (murmur3 `fmix64`). A bijection on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z ^= z >> 33;
    z = z.wrapping_mul(0xff51_afd7_ed55_8ccd);
    z ^= z >> 33;
    z = z.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    z ^ (z >> 33)
}

/// Per-item key fed into [`hash_with_key`]. Precompute once per domain.
#[inline]
pub fn item_key(v: usize) -> u64 {
    mix64((v as u64).wrapping_add(ITEM_SALT))
}

/// Maps `(hash_id, item)` to `[0, g)` given a precomputed item key.
#[inline]
pub fn hash_with_key(hash_id: u64, key: u64, g: usize) -> usize {
    let h = mix64(hash_id ^ key);
    ((h as u128 * g as u128) >> 64) as usize
}

/// Universal hash `H(hash_id, v)` with range `[0, g)`.
///
/// For a fixed item the map from `hash_id` to output is uniform up to a bias
/// of `g / 2^64`, because `mix64` is a bijection.
#[inline]
pub fn universal_hash(hash_id: u64, v: usize, g: usize) -> usize {
    hash_with_key(hash_id, item_key(v), g)
}

/// Item keys for a whole domain.
pub fn domain_keys(d: usize) -> Vec<u64> {
    (0..d).map(item_key).collect()
}

/// Combines two words into one well-mixed word.
#[inline]
pub fn combine(a: u64, b: u64) -> u64 {
    mix64(a ^ mix64(b.wrapping_add(ITEM_SALT)).rotate_left(17))
}
