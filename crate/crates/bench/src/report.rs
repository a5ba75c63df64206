//! Accuracy reports: overall and stratified by difficulty and physics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grade::Correctness;
use crate::ledger::RunLedger;
use crate::registry::{Difficulty, Physics, Registry};

/// Renders `100 * correct / total` to two decimals, rounding half to even on the
/// exact rational. An empty denominator renders as `0.00`.
pub fn percent_2dp(correct: u64, total: u64) -> String {
    if total == 0 {
        return "0.00".into();
    }
    let num = u128::from(correct) * 10_000;
    let den = u128::from(total);
    let (q, r) = (num / den, num % den);
    let hundredths = match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q % 2),
    };
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub correct: u64,
    pub total: u64,
    pub percent: String,
}

impl Ratio {
    pub fn new(correct: u64, total: u64) -> Self {
        Self { correct, total, percent: percent_2dp(correct, total) }
    }

    fn bump(&mut self, correct: bool) {
        self.total += 1;
        self.correct += u64::from(correct);
        self.percent = percent_2dp(self.correct, self.total);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub framework_id: String,
    pub overall: Ratio,
    pub by_difficulty: BTreeMap<Difficulty, Ratio>,
    pub by_physics: BTreeMap<Physics, Ratio>,
    /// Problems whose verdict is still ungraded; counted as incorrect.
    pub ungraded: Vec<String>,
    /// Registry problems with no ledger entry; counted as incorrect.
    pub missing: Vec<String>,
}

/// Accuracy of one framework over the whole registry.
pub fn accuracy_report(ledger: &RunLedger, framework_id: &str, registry: &Registry) -> Report {
    let mut report = Report {
        framework_id: framework_id.to_string(),
        overall: Ratio::new(0, 0),
        by_difficulty: Difficulty::ALL.iter().map(|&d| (d, Ratio::new(0, 0))).collect(),
        by_physics: Physics::ALL.iter().map(|&p| (p, Ratio::new(0, 0))).collect(),
        ungraded: Vec::new(),
        missing: Vec::new(),
    };
    for p in registry.problems() {
        let correct = match ledger.get(framework_id, &p.id) {
            None => {
                report.missing.push(p.id.clone());
                false
            }
            Some(e) => match e.verdict.correct {
                Correctness::Yes => e.executable,
                Correctness::No => false,
                Correctness::Ungraded => {
                    report.ungraded.push(p.id.clone());
                    false
                }
            },
        };
        report.overall.bump(correct);
        report.by_difficulty.get_mut(&p.difficulty).expect("all tiers present").bump(correct);
        report.by_physics.get_mut(&p.physics).expect("all classes present").bump(correct);
    }
    report
}

impl Report {
    /// `scope,category,correct,total,percent` rows.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("framework,scope,category,correct,total,percent\n");
        self.write_rows(&mut s);
        s
    }

    fn write_rows(&self, s: &mut String) {
        let f = &self.framework_id;
        let o = &self.overall;
        let _ = writeln!(s, "{f},overall,all,{},{},{}", o.correct, o.total, o.percent);
        for (d, r) in &self.by_difficulty {
            let _ = writeln!(s, "{f},difficulty,{d},{},{},{}", r.correct, r.total, r.percent);
        }
        for (p, r) in &self.by_physics {
            let _ = writeln!(s, "{f},physics,{p},{},{},{}", r.correct, r.total, r.percent);
        }
    }

    /// Bar-chart series: one label and one percentage per bar.
    pub fn plot_data(&self) -> serde_json::Value {
        let series = |pairs: Vec<(String, &Ratio)>| {
            let labels: Vec<String> = pairs.iter().map(|(l, _)| l.clone()).collect();
            let values: Vec<f64> = pairs.iter().map(|(_, r)| r.percent.parse::<f64>().unwrap_or(0.0)).collect();
            serde_json::json!({ "labels": labels, "percent": values })
        };
        serde_json::json!({
            "framework": self.framework_id,
            "overall": self.overall.percent.parse::<f64>().unwrap_or(0.0),
            "by_difficulty": series(self.by_difficulty.iter().map(|(d, r)| (d.to_string(), r)).collect()),
            "by_physics": series(self.by_physics.iter().map(|(p, r)| (p.to_string(), r)).collect()),
        })
    }

    /// Writes `report.json`, `table.csv` and `plot_data.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self).expect("report serializes"))?;
        std::fs::write(dir.join("table.csv"), self.table_csv())?;
        std::fs::write(dir.join("plot_data.json"), serde_json::to_string_pretty(&self.plot_data()).expect("serializes"))
    }
}

/// One CSV with the rows of several frameworks, for side-by-side comparison.
pub fn comparison_csv(reports: &[Report]) -> String {
    let mut s = String::from("framework,scope,category,correct,total,percent\n");
    for r in reports {
        r.write_rows(&mut s);
    }
    s
}
