use crate::fingerprint::Key;
use aes::cipher::{KeyIvInit, StreamCipher};

type Aes256Ctr = ctr::Ctr128BE<aes::Aes256>;

/// XORs `data` with the AES-256-CTR keystream; its own inverse.
pub fn apply_keystream(key: &Key, nonce: &[u8; 16], data: &mut [u8]) {
    let mut cipher = Aes256Ctr::new(key.as_bytes().into(), nonce.into());
    cipher.apply_keystream(data);
}
