#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Decoding must never panic or overflow; round-trip what parses.
    if let Ok(img) = afrl::pgm::decode_pgm(data) {
        let bytes = afrl::pgm::encode_pgm(&img);
        let again = afrl::pgm::decode_pgm(&bytes).expect("re-encode must parse");
        assert_eq!(again.width(), img.width());
        assert_eq!(again.height(), img.height());
    }
});
