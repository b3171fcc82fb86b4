#![no_main]
use libfuzzer_sys::fuzz_target;
use sentifuse::encoders::parse_sidecar;

fuzz_target!(|data: &[u8]| {
    let _ = parse_sidecar(&String::from_utf8_lossy(data));
});
