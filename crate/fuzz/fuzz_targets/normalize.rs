#![no_main]
use libfuzzer_sys::fuzz_target;
use sentifuse::textnorm::{has_raw_patterns, normalize, EmojiMode, NormPolicy};

fuzz_target!(|data: &[u8]| {
    let Some((&mode, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let policy = NormPolicy {
        emoji_mode: if mode & 1 == 0 { EmojiMode::TextualAlias } else { EmojiMode::Placeholder },
        punctuation_canonicalization: mode & 2 == 0,
        ..NormPolicy::default()
    };
    let once = normalize(text, &policy);
    assert_eq!(normalize(&once, &policy), once);
    assert!(!has_raw_patterns(&once, &policy));
});
