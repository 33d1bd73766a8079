//! Byte-level tokenizer: ids 0..=255 are raw UTF-8 bytes, 256..=259 are specials.

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const IMG: usize = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn is_special(id: usize) -> bool {
    (PAD..VOCAB_SIZE).contains(&id)
}

pub fn tokenize(s: &str) -> Vec<usize> {
    tokenize_bytes(s.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Byte ids back to bytes. Special ids are dropped.
pub fn detokenize_bytes(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
}

/// Byte ids back to text; invalid UTF-8 (possible in generated output) is replaced.
pub fn detokenize(ids: &[usize]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(ids)).into_owned()
}
