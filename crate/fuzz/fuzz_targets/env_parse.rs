#![no_main]
use libfuzzer_sys::fuzz_target;
use trustci_core::tee::{EnvSet, ReferenceEnvironment};

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = EnvSet::parse(data) {
        let lines = set.to_lines().expect("parsed env sets encode");
        assert_eq!(EnvSet::parse(&lines).expect("round trip"), set);
    }
    if let Ok(env) = ReferenceEnvironment::parse(data) {
        assert!(env.is_consistent());
    }
});
