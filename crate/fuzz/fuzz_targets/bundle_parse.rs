#![no_main]
use libfuzzer_sys::fuzz_target;
use trustci_core::bundle::Bundle;
use trustci_core::crypto::Keystore;
use trustci_core::policy::Policy;
use trustci_core::tee::EnvSet;
use trustci_core::verifier::full_audit;

fuzz_target!(|data: &[u8]| {
    if let Ok(b) = Bundle::parse(data) {
        assert_eq!(b.to_bytes().expect("parsed bundles encode"), data);
        // With no trust configuration nothing may pass.
        let policy = Policy::new(vec![]).expect("empty policy");
        let r = full_audit(&b, &[], &policy, &Keystore::new(), &EnvSet::new());
        assert!(!r.pass);
    }
});
