#![no_main]
use libfuzzer_sys::fuzz_target;
use trustci::fixtures::PipelineConfig;
use trustci::scaling::ScalingScenario;
use trustci_core::canonical;

fuzz_target!(|data: &[u8]| {
    let _ = canonical::parse_relaxed::<PipelineConfig>(data);
    let _ = canonical::parse_relaxed::<ScalingScenario>(data);
});
