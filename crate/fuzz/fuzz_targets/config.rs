#![no_main]
use libfuzzer_sys::fuzz_target;
use sentifuse_cli::parse_config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Err(e) = parse_config(text) {
        assert!(e.exit_code() == 2 || e.exit_code() == 3);
    }
});
