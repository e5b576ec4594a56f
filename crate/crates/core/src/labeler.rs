//! Engagement → graded relevance labels.
//!
//! Each query's engaged products fall into one tier by their strongest
//! signal. Inside a tier, a smoothed rate is mapped linearly onto the tier's
//! score band so the best product gets the band top and the worst the band
//! bottom:
//!
//! | tier       | signal                     | band    |
//! |------------|----------------------------|---------|
//! | purchase   | (orders + α)/(impr + α)    | [8, 10] |
//! | click      | (clicks + α)/(impr + α)    | [5, 7]  |
//! | impression | (impr + α)/(total impr + α)| [2, 4]  |
//! | negative   | mined / in-batch           | 0       |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::corpus::{Counts, EngagementTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Purchase,
    Click,
    Impression,
    Negative,
}

impl Tier {
    /// (top, bottom) of the tier's score band.
    pub fn band(self) -> (f64, f64) {
        match self {
            Tier::Purchase => (10.0, 8.0),
            Tier::Click => (7.0, 5.0),
            Tier::Impression => (4.0, 2.0),
            Tier::Negative => (0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub query: String,
    pub product_id: String,
    pub score: f64,
    pub tier: Tier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelerConfig {
    pub alpha: f64,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self { alpha: 5.0 }
    }
}

impl LabelerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

pub fn smoothed_rate(orders: u64, impressions: u64, alpha: f64) -> Result<f64> {
    LabelerConfig { alpha }.validate()?;
    Ok((orders as f64 + alpha) / (impressions as f64 + alpha))
}

/// Linear map of `rates` onto `[band_lo, band_hi]`. A degenerate tier (all
/// rates equal, including a single rate) maps entirely to `band_hi`.
pub fn band_score(rates: &[f64], band_hi: f64, band_lo: f64) -> Vec<f64> {
    let Some(&first) = rates.first() else {
        return Vec::new();
    };
    let (min, max) = rates
        .iter()
        .fold((first, first), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    if max == min {
        return vec![band_hi; rates.len()];
    }
    rates
        .iter()
        .map(|&r| (band_hi - band_lo) * (r - min) / (max - min) + band_lo)
        .collect()
}

pub fn tier_of(c: &Counts) -> Option<Tier> {
    if c.orders > 0 {
        Some(Tier::Purchase)
    } else if c.clicks > 0 {
        Some(Tier::Click)
    } else if c.impressions > 0 {
        Some(Tier::Impression)
    } else {
        None
    }
}

/// Labels one query's engagement rows. Rows without any signal are skipped.
/// Output is ordered by product id.
pub fn label_query(
    query: &str,
    rows: &BTreeMap<String, Counts>,
    config: &LabelerConfig,
) -> Result<Vec<LabeledExample>> {
    config.validate()?;
    let alpha = config.alpha;
    let total_impressions: u64 = rows.values().map(|c| c.impressions).sum();

    let mut tiers: BTreeMap<Tier, Vec<(&str, f64)>> = BTreeMap::new();
    for (pid, c) in rows {
        let Some(tier) = tier_of(c) else { continue };
        let rate = match tier {
            Tier::Purchase => (c.orders as f64 + alpha) / (c.impressions as f64 + alpha),
            Tier::Click => (c.clicks as f64 + alpha) / (c.impressions as f64 + alpha),
            Tier::Impression => {
                (c.impressions as f64 + alpha) / (total_impressions as f64 + alpha)
            }
            Tier::Negative => unreachable!(),
        };
        tiers.entry(tier).or_default().push((pid, rate));
    }

    let mut out = Vec::with_capacity(rows.len());
    for (tier, members) in tiers {
        let rates: Vec<f64> = members.iter().map(|&(_, r)| r).collect();
        let (hi, lo) = tier.band();
        for ((pid, _), score) in members.iter().zip(band_score(&rates, hi, lo)) {
            out.push(LabeledExample {
                query: query.to_string(),
                product_id: pid.to_string(),
                score,
                tier,
            });
        }
    }
    out.sort_by(|a, b| a.product_id.cmp(&b.product_id));
    Ok(out)
}

/// Labels every query in the table; queries in lexicographic order.
pub fn label_all(table: &EngagementTable, config: &LabelerConfig) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for q in table.queries() {
        out.extend(label_query(q, table.rows_for(q).unwrap(), config)?);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[LabeledExample]) -> Result<()> {
    let mut out = String::new();
    for l in labels {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    codec::write_file(path, out.as_bytes())
}

pub fn read_labels(path: &Path) -> Result<Vec<LabeledExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smoothed_rate_examples() {
        assert_eq!(smoothed_rate(0, 0, 1.0).unwrap(), 1.0);
        assert!((smoothed_rate(5, 95, 5.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(smoothed_rate(10, 10, 2.0).unwrap(), 1.0);
        assert!(smoothed_rate(1, 1, 0.0).is_err());
        assert!(smoothed_rate(1, 1, -2.0).is_err());
    }

    #[test]
    fn band_score_examples() {
        assert_eq!(band_score(&[0.1, 0.3], 10.0, 8.0), vec![8.0, 10.0]);
        let s = band_score(&[0.1, 0.2, 0.3], 10.0, 8.0);
        assert_eq!(s[0], 8.0);
        assert!((s[1] - 9.0).abs() < 1e-12);
        assert_eq!(s[2], 10.0);
        assert_eq!(band_score(&[0.4], 10.0, 8.0), vec![10.0]);
        assert_eq!(band_score(&[0.2, 0.2, 0.2], 7.0, 5.0), vec![7.0; 3]);
    }

    fn rows(entries: &[(&str, u64, u64, u64)]) -> BTreeMap<String, Counts> {
        entries
            .iter()
            .map(|&(id, i, c, o)| (id.to_string(), Counts::new(i, c, o)))
            .collect()
    }

    #[test]
    fn label_purchase_and_click_degenerate() {
        let r = rows(&[("a", 20, 4, 2), ("b", 30, 3, 0)]);
        let l = label_query("q", &r, &LabelerConfig::default()).unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!((l[0].tier, l[0].score), (Tier::Purchase, 10.0));
        assert_eq!((l[1].tier, l[1].score), (Tier::Click, 7.0));
    }

    #[test]
    fn label_two_purchases_and_impression() {
        // alpha = 5: (1+5)/(55+5) = 0.1 and (13+5)/(55+5) = 0.3
        let r = rows(&[("a", 55, 2, 1), ("b", 55, 20, 13), ("c", 40, 0, 0)]);
        let l = label_query("q", &r, &LabelerConfig::default()).unwrap();
        let scores: Vec<f64> = l.iter().map(|e| e.score).collect();
        assert_eq!(scores, vec![8.0, 10.0, 4.0]);
        assert_eq!(l[2].tier, Tier::Impression);
    }

    #[test]
    fn label_empty_and_zero_rows() {
        assert!(label_query("q", &BTreeMap::new(), &LabelerConfig::default())
            .unwrap()
            .is_empty());
        assert!(label_query("q", &rows(&[("a", 0, 0, 0)]), &LabelerConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn labels_roundtrip_file() {
        let r = rows(&[("a", 55, 2, 1), ("b", 55, 20, 13), ("c", 40, 0, 0)]);
        let l = label_query("red shoes", &r, &LabelerConfig::default()).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_labels(f.path(), &l).unwrap();
        assert_eq!(read_labels(f.path()).unwrap(), l);
        let line = fs::read_to_string(f.path()).unwrap();
        assert!(line.starts_with(r#"{"query":"red shoes","product_id":"a","score":8.0,"tier":"purchase"}"#));
    }

    proptest! {
        #[test]
        fn band_score_affine_invariant(
            rates in prop::collection::vec(0.0f64..1.0, 2..12),
            a in 0.1f64..50.0,
            b in -5.0f64..5.0,
        ) {
            let base = band_score(&rates, 10.0, 8.0);
            let moved: Vec<f64> = rates.iter().map(|r| a * r + b).collect();
            let shifted = band_score(&moved, 10.0, 8.0);
            for (x, y) in base.iter().zip(&shifted) {
                prop_assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }

        #[test]
        fn band_score_hits_endpoints(rates in prop::collection::vec(0.0f64..1.0, 1..12)) {
            let s = band_score(&rates, 7.0, 5.0);
            let max = s.iter().cloned().fold(f64::MIN, f64::max);
            let min = s.iter().cloned().fold(f64::MAX, f64::min);
            prop_assert_eq!(max, 7.0);
            let distinct = rates.iter().any(|&r| r != rates[0]);
            prop_assert_eq!(min, if distinct { 5.0 } else { 7.0 });
        }
    }
}
