#![no_main]
use libfuzzer_sys::fuzz_target;
use sentifuse::fusion::decode_checkpoint;

fuzz_target!(|data: &[u8]| {
    let _ = decode_checkpoint(data);
});
