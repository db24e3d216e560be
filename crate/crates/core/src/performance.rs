//! Security performance labels from basis-point payment summaries.
//!
//! A security meets expectations (ME) when neither its principal shortfall nor its other
//! shortfalls and losses exceed the class's ME threshold, and fails expectations (FE)
//! when either reaches the FE threshold. Everything in between is NME. FNE is FE ∪ NME.
//! Both boundaries are inclusive: exactly `me_max` is ME, exactly `fe_min` is FE.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SecurityClass {
    A,
    M,
    B,
}

impl SecurityClass {
    pub const ALL: [SecurityClass; 3] = [SecurityClass::A, SecurityClass::M, SecurityClass::B];

    pub fn as_str(self) -> &'static str {
        match self {
            SecurityClass::A => "A",
            SecurityClass::M => "M",
            SecurityClass::B => "B",
        }
    }
}

impl fmt::Display for SecurityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SecurityClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().trim_matches('_').to_ascii_uppercase().as_str() {
            "A" => Ok(SecurityClass::A),
            "M" => Ok(SecurityClass::M),
            "B" => Ok(SecurityClass::B),
            other => Err(Error::invalid(format!("unknown security class `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaymentSummary {
    pub principal_shortfall_bps: f64,
    pub other_shortfall_loss_bps: f64,
}

impl PaymentSummary {
    pub fn new(principal_shortfall_bps: f64, other_shortfall_loss_bps: f64) -> Self {
        PaymentSummary {
            principal_shortfall_bps,
            other_shortfall_loss_bps,
        }
    }

    /// The binding channel: a security is judged by its worse component.
    pub fn worst_bps(&self) -> f64 {
        self.principal_shortfall_bps.max(self.other_shortfall_loss_bps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds {
    pub me_max_bps: f64,
    pub fe_min_bps: f64,
}

impl ClassThresholds {
    pub fn new(me_max_bps: f64, fe_min_bps: f64) -> Result<Self> {
        if !(me_max_bps > 0.0 && me_max_bps < fe_min_bps && fe_min_bps.is_finite()) {
            return Err(Error::invalid(format!(
                "thresholds must satisfy 0 < me_max ({me_max_bps}) < fe_min ({fe_min_bps})"
            )));
        }
        Ok(ClassThresholds { me_max_bps, fe_min_bps })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfThresholds {
    pub class_a: ClassThresholds,
    pub class_m: ClassThresholds,
    pub class_b: ClassThresholds,
}

impl PerfThresholds {
    pub fn for_class(&self, class: SecurityClass) -> ClassThresholds {
        match class {
            SecurityClass::A => self.class_a,
            SecurityClass::M => self.class_m,
            SecurityClass::B => self.class_b,
        }
    }
}

impl Default for PerfThresholds {
    fn default() -> Self {
        default_thresholds()
    }
}

/// Class A: ME ≤ 100 bps, FE ≥ 2,500 bps. Classes M and B: ME ≤ 500 bps, FE ≥ 5,000 bps.
pub fn default_thresholds() -> PerfThresholds {
    PerfThresholds {
        class_a: ClassThresholds {
            me_max_bps: 100.0,
            fe_min_bps: 2500.0,
        },
        class_m: ClassThresholds {
            me_max_bps: 500.0,
            fe_min_bps: 5000.0,
        },
        class_b: ClassThresholds {
            me_max_bps: 500.0,
            fe_min_bps: 5000.0,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Expectation {
    #[serde(rename = "ME")]
    Meets,
    #[serde(rename = "NME")]
    NotMeets,
    #[serde(rename = "FE")]
    Fails,
}

impl Expectation {
    pub fn as_str(self) -> &'static str {
        match self {
            Expectation::Meets => "ME",
            Expectation::NotMeets => "NME",
            Expectation::Fails => "FE",
        }
    }
}

impl FromStr for Expectation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ME" => Ok(Expectation::Meets),
            "NME" => Ok(Expectation::NotMeets),
            "FE" => Ok(Expectation::Fails),
            other => Err(Error::invalid(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerformanceLabel {
    pub value: Expectation,
    pub fe: bool,
    pub fne: bool,
}

impl From<Expectation> for PerformanceLabel {
    fn from(value: Expectation) -> Self {
        PerformanceLabel {
            value,
            fe: value == Expectation::Fails,
            fne: value != Expectation::Meets,
        }
    }
}

pub fn label_security(class: SecurityClass, summary: &PaymentSummary, thresholds: &PerfThresholds) -> Result<PerformanceLabel> {
    let (p, o) = (summary.principal_shortfall_bps, summary.other_shortfall_loss_bps);
    if !(p >= 0.0 && o >= 0.0) || !p.is_finite() || !o.is_finite() {
        return Err(Error::invalid(format!(
            "payment summary components must be finite and non-negative, got ({p}, {o})"
        )));
    }
    let t = thresholds.for_class(class);
    let worst = summary.worst_bps();
    let value = if worst <= t.me_max_bps {
        Expectation::Meets
    } else if worst >= t.fe_min_bps {
        Expectation::Fails
    } else {
        Expectation::NotMeets
    };
    Ok(value.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSecurity {
    pub security_id: String,
    pub class: SecurityClass,
    pub year: i32,
    pub label: PerformanceLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupKey {
    Year,
    Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub year: Option<i32>,
    pub class: Option<SecurityClass>,
    pub n: usize,
    pub fe_rate: f64,
    pub fne_rate: f64,
}

/// FE and FNE rates per group. An empty key set gives one overall row.
pub fn summarize_rates(labeled: &[LabeledSecurity], group_keys: &[GroupKey]) -> Result<Vec<RateRow>> {
    if labeled.is_empty() {
        return Err(Error::invalid("cannot summarize rates over zero securities"));
    }
    let by_year = group_keys.contains(&GroupKey::Year);
    let by_class = group_keys.contains(&GroupKey::Class);
    let mut groups: BTreeMap<(Option<i32>, Option<SecurityClass>), (usize, usize, usize)> = BTreeMap::new();
    for s in labeled {
        let key = (by_year.then_some(s.year), by_class.then_some(s.class));
        let e = groups.entry(key).or_default();
        e.0 += 1;
        e.1 += s.label.fe as usize;
        e.2 += s.label.fne as usize;
    }
    Ok(groups
        .into_iter()
        .map(|((year, class), (n, fe, fne))| RateRow {
            year,
            class,
            n,
            fe_rate: fe as f64 / n as f64,
            fne_rate: fne as f64 / n as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicPerformance {
    pub topic: usize,
    pub n: usize,
    pub fe_rate: f64,
    pub ssup_fraction: f64,
}

/// Per-topic FE rate and share of SSUP securities. Inputs are aligned per security;
/// topics with no securities are absent from the output.
pub fn topic_performance(dominant_topics: &[usize], labels: &[PerformanceLabel], ssup: &[bool]) -> Result<Vec<TopicPerformance>> {
    if dominant_topics.len() != labels.len() || labels.len() != ssup.len() {
        return Err(Error::Dimension(format!(
            "topics ({}), labels ({}) and SSUP flags ({}) must align",
            dominant_topics.len(),
            labels.len(),
            ssup.len()
        )));
    }
    let mut acc: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for ((&t, l), &s) in dominant_topics.iter().zip(labels).zip(ssup) {
        let e = acc.entry(t).or_default();
        e.0 += 1;
        e.1 += l.fe as usize;
        e.2 += s as usize;
    }
    Ok(acc
        .into_iter()
        .map(|(topic, (n, fe, s))| TopicPerformance {
            topic,
            n,
            fe_rate: fe as f64 / n as f64,
            ssup_fraction: s as f64 / n as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaymentRow {
    pub security_id: String,
    pub class: SecurityClass,
    pub principal_shortfall_bps: f64,
    pub other_shortfall_loss_bps: f64,
}

impl PaymentRow {
    pub fn summary(&self) -> PaymentSummary {
        PaymentSummary::new(self.principal_shortfall_bps, self.other_shortfall_loss_bps)
    }
}

pub fn read_payments_csv<R: Read>(reader: R) -> Result<Vec<PaymentRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_payments_csv<W: Write>(rows: &[PaymentRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("writing payments", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub security_id: String,
    pub label: Expectation,
    pub fe: u8,
    pub fne: u8,
}

pub fn write_labels_csv<W: Write>(rows: &[(String, PerformanceLabel)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (id, l) in rows {
        w.serialize(LabelRow {
            security_id: id.clone(),
            label: l.value,
            fe: l.fe as u8,
            fne: l.fne as u8,
        })?;
    }
    w.flush().map_err(|e| Error::io("writing labels", e))?;
    Ok(())
}

pub fn read_labels_csv<R: Read>(reader: R) -> Result<Vec<(String, PerformanceLabel)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<LabelRow>() {
        let row = row?;
        out.push((row.security_id, row.label.into()));
    }
    Ok(out)
}

pub fn write_rates_csv<W: Write>(rows: &[RateRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["year", "class", "n", "fe_rate", "fne_rate"])?;
    for r in rows {
        w.write_record([
            r.year.map_or_else(|| "all".to_string(), |y| y.to_string()),
            r.class.map_or_else(|| "all".to_string(), |c| c.to_string()),
            r.n.to_string(),
            format!("{:.3}", r.fe_rate),
            format!("{:.3}", r.fne_rate),
        ])?;
    }
    w.flush().map_err(|e| Error::io("writing rates", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(class: SecurityClass, p: f64, o: f64) -> Expectation {
        label_security(class, &PaymentSummary::new(p, o), &default_thresholds()).unwrap().value
    }

    #[test]
    fn default_threshold_values() {
        let t = default_thresholds();
        assert_eq!((t.class_a.me_max_bps, t.class_a.fe_min_bps), (100.0, 2500.0));
        assert_eq!((t.class_m.me_max_bps, t.class_m.fe_min_bps), (500.0, 5000.0));
        assert_eq!((t.class_b.me_max_bps, t.class_b.fe_min_bps), (500.0, 5000.0));
    }

    #[test]
    fn basic_labels() {
        use Expectation::*;
        assert_eq!(label(SecurityClass::A, 0.0, 0.0), Meets);
        assert_eq!(label(SecurityClass::A, 2600.0, 0.0), Fails);
        assert_eq!(label(SecurityClass::M, 0.0, 700.0), NotMeets);
    }

    #[test]
    fn negative_inputs_rejected() {
        let r = label_security(SecurityClass::A, &PaymentSummary::new(-1.0, 0.0), &default_thresholds());
        assert!(r.is_err());
        let r = label_security(SecurityClass::A, &PaymentSummary::new(f64::NAN, 0.0), &default_thresholds());
        assert!(r.is_err());
    }

    #[test]
    fn label_flags() {
        for v in [Expectation::Meets, Expectation::NotMeets, Expectation::Fails] {
            let l = PerformanceLabel::from(v);
            assert!(!l.fe || l.fne);
            assert_eq!(l.fne, v != Expectation::Meets);
        }
    }

    fn labeled(v: Expectation) -> LabeledSecurity {
        LabeledSecurity {
            security_id: "s".into(),
            class: SecurityClass::A,
            year: 2004,
            label: v.into(),
        }
    }

    #[test]
    fn rates_by_counting() {
        use Expectation::*;
        let rows = summarize_rates(&[labeled(Meets), labeled(Meets)], &[]).unwrap();
        assert_eq!((rows[0].fe_rate, rows[0].fne_rate), (0.0, 0.0));
        let rows = summarize_rates(&[labeled(Fails), labeled(Fails)], &[GroupKey::Year]).unwrap();
        assert_eq!((rows[0].fe_rate, rows[0].fne_rate), (1.0, 1.0));
        let rows = summarize_rates(
            &[labeled(Fails), labeled(NotMeets), labeled(Meets), labeled(Meets)],
            &[GroupKey::Year, GroupKey::Class],
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].fe_rate, rows[0].fne_rate), (0.25, 0.5));
        assert!(summarize_rates(&[], &[]).is_err());
    }

    #[test]
    fn topic_table() {
        let fe: PerformanceLabel = Expectation::Fails.into();
        let me: PerformanceLabel = Expectation::Meets.into();
        let out = topic_performance(&[3, 3], &[fe, fe], &[false, false]).unwrap();
        assert_eq!(out, vec![TopicPerformance { topic: 3, n: 2, fe_rate: 1.0, ssup_fraction: 0.0 }]);
        assert!(topic_performance(&[], &[], &[]).unwrap().is_empty());

        // 10 securities: 4 FE, 1 SSUP.
        let labels: Vec<_> = (0..10).map(|i| if i < 4 { fe } else { me }).collect();
        let ssup: Vec<_> = (0..10).map(|i| i == 9).collect();
        let out = topic_performance(&[0; 10], &labels, &ssup).unwrap();
        assert_eq!((out[0].fe_rate, out[0].ssup_fraction), (0.4, 0.1));
    }
}
