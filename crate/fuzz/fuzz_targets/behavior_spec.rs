#![no_main]

use hmg_core::experts::BehaviorSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = BehaviorSpec::from_json_bytes(data);
});
