#![no_main]
use libfuzzer_sys::fuzz_target;
use trustci_core::canonical;

fuzz_target!(|data: &[u8]| {
    // Anything decode_value accepts re-encodes to itself.
    if let Ok(v) = canonical::decode_value(data) {
        let again = canonical::encode_value(&v).expect("decoded values encode");
        assert_eq!(again.as_bytes(), data);
    }
    let _ = canonical::parse_relaxed::<serde_json::Value>(data);
});
