#![no_main]

use hmg_core::dataset::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = DatasetManifest::from_json_bytes(data);
});
