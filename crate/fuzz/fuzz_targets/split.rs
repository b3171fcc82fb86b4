#![no_main]
use libfuzzer_sys::fuzz_target;
use sentifuse::dataset::{parse_folds, parse_split};

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let _ = parse_split(&text);
    let _ = parse_folds(&text);
});
