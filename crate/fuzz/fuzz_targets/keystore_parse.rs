#![no_main]
use libfuzzer_sys::fuzz_target;
use trustci_core::crypto::Keystore;

fuzz_target!(|data: &[u8]| {
    if let Ok(ks) = Keystore::parse(data) {
        let lines = ks.to_lines().expect("parsed keystores encode");
        assert_eq!(Keystore::parse(&lines).expect("round trip"), ks);
        for k in ks.iter() {
            let _ = ks.endorsement_chain(&k.key_id);
        }
    }
});
