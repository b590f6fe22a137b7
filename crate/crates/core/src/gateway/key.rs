use sha2::{Digest, Sha256};

use super::LmmRequest;

const KEY_DOMAIN: &[u8] = b"lmmclip.request.v1";

fn field(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

/// SHA-256 (hex) over a length-prefixed encoding of model id, prompt, image
/// digest (empty when text-only) and generation parameters. The image path is
/// not part of the key, only its content.
pub fn cache_key(request: &LmmRequest) -> String {
    let mut h = Sha256::new();
    field(&mut h, KEY_DOMAIN);
    field(&mut h, request.model_id.as_bytes());
    field(&mut h, request.prompt_text.as_bytes());
    field(&mut h, request.image_digest().map(|d| &d.0[..]).unwrap_or(&[]));
    field(&mut h, &request.params.temperature.to_bits().to_le_bytes());
    field(&mut h, &u64::from(request.params.max_output_tokens).to_le_bytes());
    hex::encode(h.finalize())
}
