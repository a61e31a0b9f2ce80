#![no_main]

use libfuzzer_sys::fuzz_target;

use afrl::scan::ScanManifest;

fuzz_target!(|data: &[u8]| {
    let _ = ScanManifest::from_json(data);
});
