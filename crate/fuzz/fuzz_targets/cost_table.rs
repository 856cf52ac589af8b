#![no_main]
use libfuzzer_sys::fuzz_target;
use trustci::scaling::{simulate_scaling, CostTable, ScalingScenario};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = CostTable::parse(data) {
        for row in &t.rows {
            let s = ScalingScenario {
                months: 3,
                use_case: row.use_case.clone(),
                ..ScalingScenario::default()
            };
            if let Ok(c) = simulate_scaling(&s, &t) {
                let _ = c.to_csv();
            }
        }
    }
});
