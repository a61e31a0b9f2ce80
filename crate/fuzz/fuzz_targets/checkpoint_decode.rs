#![no_main]

use libfuzzer_sys::fuzz_target;

use afrl::neural::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        // Whatever decodes must re-encode and decode to the same value.
        let bytes = ckpt.to_bytes();
        let again = Checkpoint::from_bytes(&bytes).expect("round trip");
        assert_eq!(again, ckpt);
    }
});
