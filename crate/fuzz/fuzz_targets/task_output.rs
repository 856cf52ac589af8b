#![no_main]
use libfuzzer_sys::fuzz_target;
use trustci_core::dbs::TaskOutput;

fuzz_target!(|data: &[u8]| {
    if let Ok(out) = TaskOutput::parse(data) {
        let _ = out.digest_ok();
        assert_eq!(out.payload_bytes().expect("parsed outputs encode"), data);
    }
});
