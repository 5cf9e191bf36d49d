//! Hash-bucket caption tokenizer: whitespace split, lowercase, FNV-1a into
//! `[0, vocab)`. Empty text is the null condition.

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Token ids for `text`, truncated to `max_tokens`.
pub fn caption_ids(text: &str, vocab: usize, max_tokens: usize) -> Vec<usize> {
    text.split_whitespace()
        .take(max_tokens)
        .map(|w| (fnv1a(w.to_lowercase().as_bytes()) % vocab as u64) as usize)
        .collect()
}
