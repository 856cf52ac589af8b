//! Consumer-growth cost model: every consumer rebuilding each release versus
//! one trusted producer run plus a signature check per consumer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use trustci_core::canonical::{self, EncodingError};

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("{use_case}.{field}: `{value}` is not a positive decimal")]
    NotPositive {
        use_case: String,
        field: &'static str,
        value: String,
    },
    #[error("verify_cost_ms must be positive")]
    ZeroVerifyCost,
    #[error("cost table has no rows")]
    Empty,
    #[error("unknown use case `{0}`")]
    UnknownUseCase(String),
    #[error("months must be at least 1")]
    NoMonths,
}

/// A `[without, with]` pair.
pub type Pair = [f64; 2];

/// Measured costs of one use case without and with the trusted pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub use_case: String,
    pub time_min: Pair,
    pub cpu_s: Pair,
    pub mem_unit_s: Pair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub verify_cost_ms: u64,
    pub rows: Vec<CostRow>,
}

/// File form. Canonical JSON has no floats, so costs are decimal strings.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CostTableFile {
    verify_cost_ms: u64,
    rows: Vec<CostRowFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CostRowFile {
    use_case: String,
    time_min: [String; 2],
    cpu_s: [String; 2],
    mem_unit_s: [String; 2],
}

fn decimal(use_case: &str, field: &'static str, s: &str) -> Result<f64, CostError> {
    let bad = || CostError::NotPositive {
        use_case: use_case.to_string(),
        field,
        value: s.to_string(),
    };
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit() || b == b'.') {
        return Err(bad());
    }
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(bad()),
    }
}

impl CostTable {
    pub fn parse(bytes: &[u8]) -> Result<CostTable, CostError> {
        let file: CostTableFile = canonical::parse_relaxed(bytes)?;
        if file.verify_cost_ms == 0 {
            return Err(CostError::ZeroVerifyCost);
        }
        if file.rows.is_empty() {
            return Err(CostError::Empty);
        }
        let rows = file
            .rows
            .iter()
            .map(|r| {
                let pair = |field, v: &[String; 2]| -> Result<Pair, CostError> {
                    Ok([decimal(&r.use_case, field, &v[0])?, decimal(&r.use_case, field, &v[1])?])
                };
                Ok(CostRow {
                    use_case: r.use_case.clone(),
                    time_min: pair("time_min", &r.time_min)?,
                    cpu_s: pair("cpu_s", &r.cpu_s)?,
                    mem_unit_s: pair("mem_unit_s", &r.mem_unit_s)?,
                })
            })
            .collect::<Result<Vec<_>, CostError>>()?;
        Ok(CostTable {
            verify_cost_ms: file.verify_cost_ms,
            rows,
        })
    }

    /// Look a row up by id, case-insensitively, with spaces read as dashes
    /// ("Backend Service" finds `backend-service`).
    pub fn row(&self, use_case: &str) -> Result<&CostRow, CostError> {
        let want = use_case.trim().to_ascii_lowercase().replace(' ', "-");
        self.rows
            .iter()
            .find(|r| r.use_case == want)
            .ok_or_else(|| CostError::UnknownUseCase(use_case.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Workflow minutes.
    #[default]
    Time,
    /// CPU seconds.
    Cpu,
    /// Memory seconds per 100 MiB.
    Mem,
}

impl Metric {
    pub fn unit(self) -> &'static str {
        match self {
            Metric::Time => "min",
            Metric::Cpu => "cpu-s",
            Metric::Mem => "mem-s/100MiB",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Growth {
    /// `growth × m` consumers in month m.
    #[default]
    Linear,
    /// `growth^m` consumers in month m.
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingScenario {
    pub months: u32,
    pub consumer_growth_per_month: u64,
    pub releases_per_month: u64,
    pub use_case: String,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub growth: Growth,
    /// Consumers process every release published so far each month instead
    /// of only the newest ones.
    #[serde(default)]
    pub back_catalog: bool,
}

impl Default for ScalingScenario {
    fn default() -> Self {
        ScalingScenario {
            months: 12,
            consumer_growth_per_month: 10,
            releases_per_month: 1,
            use_case: "backend-service".into(),
            metric: Metric::Time,
            growth: Growth::Linear,
            back_catalog: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonthRow {
    pub month: u32,
    pub consumers: f64,
    pub untrusted_month: f64,
    pub untrusted_cum: f64,
    pub trusted_month: f64,
    pub trusted_cum: f64,
    /// Producer pipeline cost alone.
    pub producer_cum: f64,
    /// Producer cost above an untrusted pipeline.
    pub producer_overhead_cum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostCurves {
    pub scenario: ScalingScenario,
    pub unit: &'static str,
    /// Cost of one verification in the chosen metric.
    pub verify_cost: f64,
    pub rows: Vec<MonthRow>,
    /// First month whose cumulative trusted cost is below the untrusted one.
    pub crossover_month: Option<u32>,
}

impl CostCurves {
    pub fn last(&self) -> &MonthRow {
        self.rows.last().expect("months >= 1")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "month,consumers,untrusted_month,untrusted_cum,trusted_month,trusted_cum,producer_cum,producer_overhead_cum\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.0},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.month,
                r.consumers,
                r.untrusted_month,
                r.untrusted_cum,
                r.trusted_month,
                r.trusted_cum,
                r.producer_cum,
                r.producer_overhead_cum
            );
        }
        out
    }

    /// Line chart of the two cumulative curves.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const PAD: f64 = 56.0;
        let max_y = self
            .rows
            .iter()
            .map(|r| r.untrusted_cum.max(r.trusted_cum))
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let n = self.rows.len().max(2) as f64 - 1.0;
        let x = |m: u32| PAD + (m as f64 - 1.0) / n * (W - 2.0 * PAD);
        let y = |v: f64| H - PAD - v / max_y * (H - 2.0 * PAD);
        let line = |f: &dyn Fn(&MonthRow) -> f64| {
            self.rows
                .iter()
                .map(|r| format!("{:.1},{:.1}", x(r.month), y(f(r))))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<polyline points="{PAD},{PAD} {PAD},{b} {r},{b}" fill="none" stroke="black"/>"#,
            b = H - PAD,
            r = W - PAD
        );
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="crimson" stroke-width="2"/>"#,
            line(&|r| r.untrusted_cum)
        );
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="seagreen" stroke-width="2"/>"#,
            line(&|r| r.trusted_cum)
        );
        let _ = writeln!(
            s,
            r#"<text x="{PAD}" y="{t}">cumulative cost ({}), max {:.1}</text>"#,
            self.unit,
            max_y,
            t = PAD - 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">month</text>"#,
            W - PAD,
            H - PAD + 24.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="crimson">untrusted</text>"#, W - PAD - 90.0, PAD);
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="seagreen">trusted</text>"#, W - PAD - 90.0, PAD + 16.0);
        s.push_str("</svg>\n");
        s
    }
}

pub fn consumers(s: &ScalingScenario, month: u32) -> f64 {
    match s.growth {
        Growth::Linear => s.consumer_growth_per_month as f64 * month as f64,
        Growth::Geometric => (s.consumer_growth_per_month as f64).powi(month as i32),
    }
}

pub fn simulate_scaling(s: &ScalingScenario, table: &CostTable) -> Result<CostCurves, CostError> {
    if s.months == 0 {
        return Err(CostError::NoMonths);
    }
    let row = table.row(&s.use_case)?;
    let ([without, with], verify) = match s.metric {
        Metric::Time => (row.time_min, table.verify_cost_ms as f64 / 60_000.0),
        Metric::Cpu => (row.cpu_s, table.verify_cost_ms as f64 / 1_000.0),
        // Signature checks have no measurable memory footprint.
        Metric::Mem => (row.mem_unit_s, 0.0),
    };
    let releases = s.releases_per_month as f64;
    let mut rows = Vec::with_capacity(s.months as usize);
    let (mut untrusted_cum, mut trusted_cum, mut producer_cum) = (0.0, 0.0, 0.0);
    let mut crossover_month = None;
    for m in 1..=s.months {
        let c = consumers(s, m);
        let per_consumer = if s.back_catalog { releases * m as f64 } else { releases };
        let producer = releases * with;
        let untrusted_month = c * per_consumer * without;
        let trusted_month = producer + c * per_consumer * verify;
        untrusted_cum += untrusted_month;
        trusted_cum += trusted_month;
        producer_cum += producer;
        if crossover_month.is_none() && trusted_cum < untrusted_cum {
            crossover_month = Some(m);
        }
        rows.push(MonthRow {
            month: m,
            consumers: c,
            untrusted_month,
            untrusted_cum,
            trusted_month,
            trusted_cum,
            producer_cum,
            producer_overhead_cum: releases * (with - without) * m as f64,
        });
    }
    Ok(CostCurves {
        scenario: s.clone(),
        unit: s.metric.unit(),
        verify_cost: verify,
        rows,
        crossover_month,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::FixtureSet;
    use proptest::prelude::*;

    fn table() -> CostTable {
        FixtureSet::embedded().costs
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * b.abs().max(1.0)
    }

    #[test]
    fn parses_fixture_rows() {
        let t = table();
        assert_eq!(t.verify_cost_ms, 80);
        let b = t.row("Backend Service").unwrap();
        assert_eq!(b.time_min, [9.13, 16.50]);
        assert_eq!(b.cpu_s, [59.40, 107.80]);
        assert_eq!(t.row("oracle-core").unwrap().mem_unit_s, [4.80, 9.60]);
        assert!(matches!(t.row("nope"), Err(CostError::UnknownUseCase(_))));
    }

    #[test]
    fn rejects_non_positive_and_floats() {
        let bad = br#"{"verify_cost_ms":80,"rows":[{"use_case":"x","time_min":["0","1"],"cpu_s":["1","1"],"mem_unit_s":["1","1"]}]}"#;
        assert!(matches!(CostTable::parse(bad), Err(CostError::NotPositive { field: "time_min", .. })));
        let neg = br#"{"verify_cost_ms":80,"rows":[{"use_case":"x","time_min":["-1","1"],"cpu_s":["1","1"],"mem_unit_s":["1","1"]}]}"#;
        assert!(CostTable::parse(neg).is_err());
        let float = br#"{"verify_cost_ms":80,"rows":[{"use_case":"x","time_min":[1.0,"1"],"cpu_s":["1","1"],"mem_unit_s":["1","1"]}]}"#;
        assert!(CostTable::parse(float).is_err());
        assert!(matches!(CostTable::parse(br#"{"verify_cost_ms":80,"rows":[]}"#), Err(CostError::Empty)));
    }

    #[test]
    fn backend_twelve_months_matches_closed_form() {
        let curves = simulate_scaling(&ScalingScenario::default(), &table()).unwrap();
        // 10 + 20 + ... + 120 rebuilds.
        let runs = 10.0 * (12.0 * 13.0 / 2.0);
        assert_eq!(runs, 780.0);
        let last = curves.last();
        assert!(close(last.untrusted_cum, runs * 9.13));
        assert!(close(last.trusted_cum, 12.0 * 16.50 + runs * 80.0 / 60_000.0));
        assert!((last.untrusted_cum - 7121.4).abs() < 1e-6);
        assert!((last.trusted_cum - 199.04).abs() < 1e-6);
        assert_eq!(curves.crossover_month, Some(1));
    }

    #[test]
    fn zero_growth_is_producer_only() {
        let s = ScalingScenario {
            consumer_growth_per_month: 0,
            ..ScalingScenario::default()
        };
        let c = simulate_scaling(&s, &table()).unwrap();
        assert_eq!(c.last().untrusted_cum, 0.0);
        assert!(close(c.last().trusted_cum, 12.0 * 16.50));
        assert_eq!(c.crossover_month, None);
    }

    #[test]
    fn single_month() {
        let s = ScalingScenario {
            months: 1,
            ..ScalingScenario::default()
        };
        let r = simulate_scaling(&s, &table()).unwrap().rows;
        assert!(close(r[0].untrusted_cum, 10.0 * 9.13));
        assert!(close(r[0].trusted_cum, 16.50 + 10.0 * 80.0 / 60_000.0));
        assert!(matches!(
            simulate_scaling(&ScalingScenario { months: 0, ..s }, &table()),
            Err(CostError::NoMonths)
        ));
    }

    #[test]
    fn every_row_amortizes_from_month_two() {
        let t = table();
        for row in &t.rows {
            for metric in [Metric::Time, Metric::Cpu, Metric::Mem] {
                let s = ScalingScenario {
                    use_case: row.use_case.clone(),
                    metric,
                    ..ScalingScenario::default()
                };
                let c = simulate_scaling(&s, &t).unwrap();
                for r in &c.rows[1..] {
                    assert!(r.trusted_cum < r.untrusted_cum, "{} {metric:?} month {}", row.use_case, r.month);
                }
            }
        }
    }

    #[test]
    fn geometric_and_back_catalog() {
        let t = table();
        let s = ScalingScenario {
            months: 3,
            growth: Growth::Geometric,
            ..ScalingScenario::default()
        };
        let c = simulate_scaling(&s, &t).unwrap();
        assert_eq!(c.rows.iter().map(|r| r.consumers).collect::<Vec<_>>(), [10.0, 100.0, 1000.0]);
        assert!(close(c.last().untrusted_cum, 1110.0 * 9.13));
        let s = ScalingScenario {
            months: 3,
            back_catalog: true,
            ..ScalingScenario::default()
        };
        let c = simulate_scaling(&s, &t).unwrap();
        // Month m: 10m consumers each handling m releases.
        assert!(close(c.last().untrusted_cum, (10.0 + 40.0 + 90.0) * 9.13));
    }

    #[test]
    fn csv_and_svg_shape() {
        let c = simulate_scaling(&ScalingScenario::default(), &table()).unwrap();
        let csv = c.to_csv();
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.lines().last().unwrap().starts_with("12,120,1095.6000,7121.4000,"));
        let svg = c.to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 3);
    }

    #[test]
    fn scenario_file_round_trip() {
        let s = ScalingScenario::default();
        let bytes = canonical::encode(&s).unwrap();
        let back: ScalingScenario = canonical::decode_exact(bytes.as_bytes()).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn untrusted_strictly_increasing_and_producer_independent_of_consumers(
            growth in 1u64..50, releases in 1u64..4, months in 2u32..36, row in 0usize..3,
        ) {
            let t = table();
            let s = ScalingScenario {
                months,
                consumer_growth_per_month: growth,
                releases_per_month: releases,
                use_case: t.rows[row].use_case.clone(),
                ..ScalingScenario::default()
            };
            let c = simulate_scaling(&s, &t).unwrap();
            for w in c.rows.windows(2) {
                prop_assert!(w[1].untrusted_cum > w[0].untrusted_cum);
                // Superlinear: monthly increments grow.
                prop_assert!(w[1].untrusted_month > w[0].untrusted_month);
            }
            let other = simulate_scaling(&ScalingScenario { consumer_growth_per_month: growth + 7, ..s.clone() }, &t).unwrap();
            for (a, b) in c.rows.iter().zip(&other.rows) {
                prop_assert_eq!(a.producer_cum, b.producer_cum);
                prop_assert!(close(a.producer_cum, releases as f64 * t.rows[row].time_min[1] * a.month as f64));
            }
        }
    }
}
