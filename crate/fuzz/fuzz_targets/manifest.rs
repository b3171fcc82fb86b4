#![no_main]
use libfuzzer_sys::fuzz_target;
use sentifuse::dataset::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ds) = parse_manifest(text) {
        assert_eq!(ds.ids().count(), ds.len());
    }
});
