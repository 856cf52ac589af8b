#![no_main]
use libfuzzer_sys::fuzz_target;
use trustci_core::registry::parse_records;

fuzz_target!(|data: &[u8]| {
    let _ = parse_records(data);
});
