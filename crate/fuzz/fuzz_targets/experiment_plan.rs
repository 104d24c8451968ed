#![no_main]

use hmg_core::harness::ExperimentPlan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = ExperimentPlan::from_json_bytes(data);
});
