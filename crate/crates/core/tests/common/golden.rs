//! Stable digests for regression fixtures.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of floats printed at 6 significant digits, so the fixture survives
/// last-bit differences between GEMM kernels.
pub fn float_digest<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    let text: String = values.into_iter().map(|v| format!("{v:.5e};")).collect();
    sha256_hex(text.as_bytes())
}
