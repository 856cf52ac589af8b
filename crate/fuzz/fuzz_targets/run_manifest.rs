#![no_main]
use libfuzzer_sys::fuzz_target;
use trustci_core::bundle::RunManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = RunManifest::parse(data) {
        let bytes = m.to_bytes().expect("parsed manifests encode");
        assert_eq!(RunManifest::parse(&bytes).expect("round trip"), m);
    }
});
