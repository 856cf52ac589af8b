#![no_main]
use libfuzzer_sys::fuzz_target;
use trustci_core::ledger::{parse_entries, verify_chain, verify_chain_bytes, Ledger};

fuzz_target!(|data: &[u8]| {
    let (entries, err) = parse_entries(data);
    let verdict = verify_chain_bytes(data);
    if err.is_none() {
        assert_eq!(verdict, verify_chain(&entries));
    } else {
        assert!(!verdict.ok);
    }
    let ledger = Ledger::from_entries(entries);
    for i in 0..ledger.len() as u64 {
        let _ = ledger.is_revoked(i);
    }
});
