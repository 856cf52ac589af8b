#![no_main]
use libfuzzer_sys::fuzz_target;
use trustci_core::policy::load_policy;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = load_policy(data) {
        assert!(p.id_ok());
        let bytes = p.to_canonical().expect("loaded policies encode");
        assert_eq!(load_policy(&bytes).expect("round trip"), p);
    }
});
