#![no_main]

use hmg_core::dataset::decode_episode;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_episode(data);
});
