#![no_main]
use libfuzzer_sys::fuzz_target;
use sentifuse::featurestore::{decode_record, encode_record};

// Anything that decodes must re-encode to the same bytes.
fuzz_target!(|data: &[u8]| {
    if let Ok((key, record)) = decode_record(data, "fuzz") {
        assert_eq!(encode_record(&key, &record), data);
    }
});
