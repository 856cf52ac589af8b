#![no_main]
use libfuzzer_sys::fuzz_target;
use trustci_core::dbs::{scan, DependencyManifest, TestSuite, VulnDb};

fuzz_target!(|data: &[u8]| {
    let manifest = DependencyManifest::parse(data);
    let db = VulnDb::parse(data);
    let _ = TestSuite::parse(data);
    if let (Ok(m), Ok(db)) = (manifest, db) {
        let _ = scan(&m, &db);
    }
});
