#![no_main]

use libfuzzer_sys::fuzz_target;

use afrl::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let _ = RunConfig::from_json(data);
});
