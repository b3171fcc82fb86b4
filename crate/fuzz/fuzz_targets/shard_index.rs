#![no_main]
use libfuzzer_sys::fuzz_target;
use sentifuse::featurestore::decode_index;

fuzz_target!(|data: &[u8]| {
    if let Ok((_, consumed)) = decode_index(data) {
        assert!(consumed <= data.len());
    }
});
