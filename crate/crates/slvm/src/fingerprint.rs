//! Parameter and file digests.
//!
//! Frozen components are verified by comparing SHA-256 fingerprints taken
//! over their parameter bytes; configs and registries are compared by the
//! digest of their canonical serialization.

use sha2::{Digest, Sha256};

/// Hex SHA-256 of raw bytes.
pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

/// Hex SHA-256 over named f64 slices, order-sensitive. Names are hashed too
/// so that swapping two equal-length tensors changes the digest.
pub fn digest_params<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> String {
    let mut h = Sha256::new();
    for (name, values) in tensors {
        h.update(name.as_bytes());
        h.update([0u8]);
        for v in values {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_order_and_name_sensitive() {
        let a = [1.0, 2.0];
        let b = [3.0];
        let d1 = digest_params([("x", &a[..]), ("y", &b[..])]);
        let d2 = digest_params([("y", &b[..]), ("x", &a[..])]);
        let d3 = digest_params([("z", &a[..]), ("y", &b[..])]);
        assert_ne!(d1, d2);
        assert_ne!(d1, d3);
        assert_eq!(d1, digest_params([("x", &a[..]), ("y", &b[..])]));
    }

    #[test]
    fn known_sha256_vector() {
        assert_eq!(
            digest_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
