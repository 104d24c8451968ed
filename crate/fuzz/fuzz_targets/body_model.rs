#![no_main]

use hmg_core::physim::BodyModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = BodyModel::from_json_bytes(data);
});
