#![no_main]
use libfuzzer_sys::fuzz_target;
use trustci_core::crypto::Digest;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(d) = Digest::from_hex(s) {
            assert_eq!(d.to_hex(), s);
        }
    }
});
