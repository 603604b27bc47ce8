//! Byte-level tokenizer: 256 byte values plus four special ids.
//!
//! Every byte maps to its own id, so any byte string tokenizes exactly and
//! round-trips losslessly. Special ids are only ever inserted by template
//! code, never produced by `tokenize`.

/// Beginning-of-sequence marker.
pub const BOS: u32 = 256;
/// End-of-sequence marker; greedy generation stops on it.
pub const EOS: u32 = 257;
/// User-turn delimiter.
pub const USER: u32 = 258;
/// Assistant-turn delimiter.
pub const ASSISTANT: u32 = 259;
/// Total vocabulary size: 256 bytes + 4 specials.
pub const VOCAB_SIZE: usize = 260;

/// True for the four non-byte ids.
pub fn is_special(id: u32) -> bool {
    id >= 256
}

/// One id per byte.
pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`]; special ids render as nothing.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
}

/// Chat rendering: `BOS USER <user bytes> ASSISTANT`. The adversarial
/// region, when present, is spliced in between the user content and the
/// assistant delimiter by the attack code.
pub fn chat_prefix_ids(user: &[u8]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(user.len() + 3);
    ids.push(BOS);
    ids.push(USER);
    ids.extend(tokenize(user));
    ids.push(ASSISTANT);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_and_ascii() {
        assert_eq!(tokenize(b""), Vec::<u32>::new());
        assert_eq!(tokenize(b"ab"), vec![97, 98]);
        assert_eq!(detokenize(&[97, 98]), b"ab");
    }

    #[test]
    fn specials_are_dropped_on_detokenize() {
        assert_eq!(detokenize(&[BOS, 104, 105, EOS, USER, ASSISTANT]), b"hi");
    }

    #[test]
    fn all_ids_below_vocab() {
        for b in 0u8..=255 {
            assert!((tokenize(&[b])[0] as usize) < VOCAB_SIZE);
        }
        assert!(is_special(BOS) && is_special(ASSISTANT));
        assert!(!is_special(255));
    }

    proptest! {
        #[test]
        fn round_trip_any_byte_string(s in proptest::collection::vec(any::<u8>(), 0..512)) {
            prop_assert_eq!(detokenize(&tokenize(&s)), s);
        }
    }
}
