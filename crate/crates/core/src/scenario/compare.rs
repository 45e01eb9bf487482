//! Headline-metric comparison of two runs.

use std::fmt::Write as _;

use super::runner::{Manifest, HEADLINE_RATES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub rule: String,
    pub rate: f64,
    /// Seed-averaged accuracy in each run.
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    pub delta: f64,
    /// Three binomial standard errors of the difference.
    pub band: f64,
}

impl CompareRow {
    pub fn within_band(&self) -> bool {
        self.delta.abs() <= self.band
    }
}

fn mean_headline(m: &Manifest, rule: &str, rate: f64) -> Option<f64> {
    let vals: Vec<f64> = m
        .runs
        .iter()
        .filter_map(|r| r.headline.iter().find(|h| h.rule == rule && h.rate == rate))
        .map(|h| h.accuracy)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Accuracy deltas (B minus A) for every rule present in both runs, in A's
/// rule order.
pub fn compare_manifests(a: &Manifest, b: &Manifest) -> Result<Vec<CompareRow>> {
    if a.scenario != b.scenario {
        return Err(Error::Incompatible(format!(
            "scenario {:?} cannot be compared with scenario {:?}",
            a.scenario, b.scenario
        )));
    }
    let na = (a.test_samples * a.runs.len().max(1)) as f64;
    let nb = (b.test_samples * b.runs.len().max(1)) as f64;
    let mut rows = Vec::new();
    for rule in a.rules.iter().filter(|r| b.rules.contains(r)) {
        for &rate in &HEADLINE_RATES {
            let (Some(pa), Some(pb)) = (mean_headline(a, rule, rate), mean_headline(b, rule, rate)) else {
                continue;
            };
            let var = pa * (1.0 - pa) / na + pb * (1.0 - pb) / nb;
            rows.push(CompareRow {
                rule: rule.clone(),
                rate,
                accuracy_a: pa,
                accuracy_b: pb,
                delta: pb - pa,
                band: 3.0 * var.max(0.0).sqrt(),
            });
        }
    }
    Ok(rows)
}

pub fn format_comparison(a: &Manifest, b: &Manifest, rows: &[CompareRow]) -> String {
    let mut s = String::new();
    let seeds = |m: &Manifest| m.seeds.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let _ = writeln!(s, "scenario: {}", a.scenario);
    let _ = writeln!(s, "A: seeds {} (config {})", seeds(a), &a.config_sha256[..a.config_sha256.len().min(12)]);
    let _ = writeln!(s, "B: seeds {} (config {})", seeds(b), &b.config_sha256[..b.config_sha256.len().min(12)]);
    let width = rows.iter().map(|r| r.rule.len()).max().unwrap_or(4).max(4);
    let _ = writeln!(
        s,
        "{:<width$}  {:>5}  {:>8}  {:>8}  {:>9}  {:>8}  within",
        "rule", "rate", "acc A", "acc B", "delta", "3se"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>5.2}  {:>8.4}  {:>8.4}  {:>+9.4}  {:>8.4}  {}",
            r.rule,
            r.rate,
            r.accuracy_a,
            r.accuracy_b,
            r.delta,
            r.band,
            if r.within_band() { "yes" } else { "no" }
        );
    }
    s
}
