//! Toxicity labels for institutions and communities, and their agreement with fitted
//! topic coefficients.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::Role;
use crate::error::{Error, Result};
use crate::features::topic_column;
use crate::lasso::LassoFit;
use crate::topics::{top_terms, DtmFit, DynamicsLabel, TopicModel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstitutionEvidence {
    pub fi_id: String,
    pub bankruptcy_or_fines: bool,
    pub involuntary_merger: bool,
    pub tarp_funds: bool,
    pub subprime_distress: bool,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstitutionToxicity {
    None,
    Partial,
    Toxic,
}

pub fn label_institution(e: &InstitutionEvidence) -> InstitutionToxicity {
    if e.bankruptcy_or_fines || e.involuntary_merger {
        InstitutionToxicity::Toxic
    } else if e.tarp_funds || e.subprime_distress {
        InstitutionToxicity::Partial
    } else {
        InstitutionToxicity::None
    }
}

fn parse_flag(field: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" => Ok(true),
        "0" | "false" | "no" | "n" | "" => Ok(false),
        other => Err(Error::invalid(format!("{field}: expected a 0/1 flag, got `{other}`"))),
    }
}

/// Reads evidence with columns `fi_id, bankruptcy_or_fines, involuntary_merger,
/// tarp_funds, subprime_distress, notes`.
pub fn read_evidence_csv<R: Read>(reader: R) -> Result<Vec<InstitutionEvidence>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let fi_id = get(0).trim().to_string();
        if fi_id.is_empty() {
            return Err(Error::invalid("evidence row without fi_id"));
        }
        out.push(InstitutionEvidence {
            bankruptcy_or_fines: parse_flag("bankruptcy_or_fines", get(1))?,
            involuntary_merger: parse_flag("involuntary_merger", get(2))?,
            tarp_funds: parse_flag("tarp_funds", get(3))?,
            subprime_distress: parse_flag("subprime_distress", get(4))?,
            notes: get(5).to_string(),
            fi_id,
        });
    }
    Ok(out)
}

pub fn write_evidence_csv<W: Write>(evidence: &[InstitutionEvidence], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["fi_id", "bankruptcy_or_fines", "involuntary_merger", "tarp_funds", "subprime_distress", "notes"])?;
    let b = |x: bool| if x { "1" } else { "0" };
    for e in evidence {
        w.write_record([
            e.fi_id.as_str(),
            b(e.bankruptcy_or_fines),
            b(e.involuntary_merger),
            b(e.tarp_funds),
            b(e.subprime_distress),
            e.notes.as_str(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("writing evidence", e))?;
    Ok(())
}

pub fn institution_labels(evidence: &[InstitutionEvidence]) -> BTreeMap<String, InstitutionToxicity> {
    evidence.iter().map(|e| (e.fi_id.clone(), label_institution(e))).collect()
}

/// An institution among a community's top terms, with the roles and years it appears in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProminentInstitution {
    pub fi: String,
    pub roles: BTreeSet<Role>,
    pub years: BTreeSet<i32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommunityLabel {
    NonToxic,
    Partial,
    Toxic,
    Excluded,
}

impl CommunityLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            CommunityLabel::NonToxic => "non_toxic",
            CommunityLabel::Partial => "partial",
            CommunityLabel::Toxic => "toxic",
            CommunityLabel::Excluded => "excluded",
        }
    }
}

impl fmt::Display for CommunityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToxicityRules {
    /// Communities with fewer prospectuses are excluded.
    pub min_prospectuses: usize,
    /// Distinct toxic institutions in key roles that make a community toxic.
    pub min_toxic_institutions: usize,
    /// A single toxic institution is enough when it holds this many roles...
    pub many_roles: usize,
    /// ...across this many years.
    pub many_years: usize,
    pub key_roles: Vec<Role>,
    /// Terms per topic considered prominent.
    pub top_n: usize,
}

impl Default for ToxicityRules {
    fn default() -> Self {
        ToxicityRules {
            min_prospectuses: 40,
            min_toxic_institutions: 2,
            many_roles: 3,
            many_years: 2,
            key_roles: vec![Role::issuer(), Role::originator()],
            top_n: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityToxicity {
    pub topic: usize,
    pub value: CommunityLabel,
    /// Human-readable reasons, one per contributing institution.
    pub evidence: Vec<String>,
}

/// Applies the community rule. Institutions without evidence count as not toxic.
pub fn label_community(
    topic: usize,
    n_prospectuses: usize,
    prominent: &[ProminentInstitution],
    labels: &BTreeMap<String, InstitutionToxicity>,
    rules: &ToxicityRules,
) -> CommunityToxicity {
    let label_of = |fi: &str| labels.get(fi).copied().unwrap_or(InstitutionToxicity::None);
    let mut evidence = Vec::new();
    if n_prospectuses < rules.min_prospectuses || prominent.is_empty() {
        evidence.push(format!(
            "{n_prospectuses} prospectuses, {} prominent institutions",
            prominent.len()
        ));
        return CommunityToxicity {
            topic,
            value: CommunityLabel::Excluded,
            evidence,
        };
    }
    let mut toxic_key = BTreeSet::new();
    let mut entrenched = false;
    let mut any_flagged = false;
    for p in prominent {
        let l = label_of(&p.fi);
        if l == InstitutionToxicity::None {
            continue;
        }
        any_flagged = true;
        let roles: Vec<&str> = p.roles.iter().map(Role::as_str).collect();
        evidence.push(format!("{} ({:?}) as {}", p.fi, l, roles.join("/")));
        if l == InstitutionToxicity::Toxic && p.roles.iter().any(|r| rules.key_roles.contains(r)) {
            toxic_key.insert(p.fi.clone());
            if p.roles.len() >= rules.many_roles && p.years.len() >= rules.many_years {
                entrenched = true;
            }
        }
    }
    let value = if toxic_key.len() >= rules.min_toxic_institutions || entrenched {
        CommunityLabel::Toxic
    } else if any_flagged {
        CommunityLabel::Partial
    } else {
        CommunityLabel::NonToxic
    };
    CommunityToxicity { topic, value, evidence }
}

/// Institutions whose pairs rank in the topic's top terms, time-averaged; roles come from
/// those pairs and years from the slices where the pair is also a top term.
pub fn prominent_institutions(fit: &DtmFit, topic: usize, top_n: usize) -> Result<Vec<ProminentInstitution>> {
    if topic >= fit.num_topics() {
        return Err(Error::OutOfRange(format!("topic {topic} of {}", fit.num_topics())));
    }
    let avg = fit.time_averaged(topic);
    let mut idx: Vec<usize> = (0..avg.len()).collect();
    idx.sort_by(|&a, &b| avg[b].total_cmp(&avg[a]).then(a.cmp(&b)));
    let terms = fit.vocabulary.terms();
    let mut by_fi: BTreeMap<String, ProminentInstitution> = BTreeMap::new();
    let per_slice: Vec<Vec<_>> = (0..fit.num_slices())
        .map(|s| top_terms(fit, topic, s, top_n).map(|v| v.into_iter().map(|(p, _)| p).collect()))
        .collect::<Result<_>>()?;
    for &w in idx.iter().take(top_n) {
        let pair = &terms[w];
        let e = by_fi.entry(pair.fi.clone()).or_insert_with(|| ProminentInstitution {
            fi: pair.fi.clone(),
            roles: BTreeSet::new(),
            years: BTreeSet::new(),
        });
        e.roles.insert(pair.role.clone());
        for (s, top) in per_slice.iter().enumerate() {
            if top.contains(pair) {
                e.years.insert(fit.years[s]);
            }
        }
    }
    Ok(by_fi.into_values().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
    #[serde(rename = "0")]
    Zero,
}

impl Sign {
    pub fn of(v: f64) -> Sign {
        if v > 0.0 {
            Sign::Positive
        } else if v < 0.0 {
            Sign::Negative
        } else {
            Sign::Zero
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sign::Positive => "+",
            Sign::Negative => "-",
            Sign::Zero => "0",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignRow {
    pub topic: usize,
    pub toxicity: CommunityLabel,
    pub fe: Sign,
    pub fne: Sign,
    /// Non-toxic topics should not raise risk and toxic ones should not lower it.
    pub consistent: bool,
}

pub fn compare_signs(labels: &[CommunityToxicity], fe: &LassoFit, fne: &LassoFit) -> Result<Vec<SignRow>> {
    labels
        .iter()
        .map(|c| {
            let col = topic_column(c.topic);
            let sign = |fit: &LassoFit| -> Result<Sign> {
                if !fit.feature_names.contains(&col) {
                    return Err(Error::invalid(format!("fit has no column {col}")));
                }
                Ok(Sign::of(fit.get(&col)))
            };
            let (a, b) = (sign(fe)?, sign(fne)?);
            let consistent = match c.value {
                CommunityLabel::NonToxic => a != Sign::Positive && b != Sign::Positive,
                CommunityLabel::Toxic => a != Sign::Negative && b != Sign::Negative,
                _ => true,
            };
            Ok(SignRow {
                topic: c.topic,
                toxicity: c.value,
                fe: a,
                fne: b,
                consistent,
            })
        })
        .collect()
}

/// One row per community in the layout of a toxicity summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct ToxicityReportRow {
    pub topic: usize,
    pub n_prospectuses: usize,
    pub dynamics: Option<DynamicsLabel>,
    pub supply_chain: String,
    pub label: CommunityLabel,
    pub fe: Sign,
    pub fne: Sign,
}

/// Compact description of a community's key institutions: `fi (role/role)` joined by `; `.
pub fn supply_chain_summary(prominent: &[ProminentInstitution]) -> String {
    prominent
        .iter()
        .map(|p| {
            let roles: Vec<&str> = p.roles.iter().map(Role::as_str).collect();
            format!("{} ({})", p.fi, roles.join("/"))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn write_toxicity_report<W: Write>(rows: &[ToxicityReportRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["topic", "prospectuses", "type", "supply_chain", "toxic", "fe", "fne"])?;
    for r in rows {
        let kind = match r.dynamics {
            Some(DynamicsLabel::Stable) => "stable",
            Some(DynamicsLabel::Evolving) => "evolving",
            Some(DynamicsLabel::Dynamic) => "dynamic",
            None => "",
        };
        w.write_record([
            format!("Topic {}", r.topic + 1),
            r.n_prospectuses.to_string(),
            kind.to_string(),
            r.supply_chain.clone(),
            r.label.to_string(),
            r.fe.as_str().to_string(),
            r.fne.as_str().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("writing toxicity report", e))?;
    Ok(())
}

/// A community described directly by its prominent institutions, as in fixture files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityFixture {
    pub topic: usize,
    pub n_prospectuses: usize,
    pub prominent: Vec<ProminentInstitution>,
    pub expected: CommunityLabel,
    #[serde(default)]
    pub note: String,
}

pub fn read_community_fixtures<R: Read>(reader: R) -> Result<Vec<CommunityFixture>> {
    Ok(serde_json::from_reader(reader)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(fi: &str, flags: [bool; 4]) -> InstitutionEvidence {
        InstitutionEvidence {
            fi_id: fi.into(),
            bankruptcy_or_fines: flags[0],
            involuntary_merger: flags[1],
            tarp_funds: flags[2],
            subprime_distress: flags[3],
            notes: String::new(),
        }
    }

    fn prom(fi: &str, roles: &[&str], years: &[i32]) -> ProminentInstitution {
        ProminentInstitution {
            fi: fi.into(),
            roles: roles.iter().map(|r| Role::new(r)).collect(),
            years: years.iter().copied().collect(),
        }
    }

    #[test]
    fn institution_rule() {
        assert_eq!(label_institution(&ev("x", [true, false, false, false])), InstitutionToxicity::Toxic);
        assert_eq!(label_institution(&ev("x", [false, true, true, false])), InstitutionToxicity::Toxic);
        assert_eq!(label_institution(&ev("x", [false, false, true, false])), InstitutionToxicity::Partial);
        assert_eq!(label_institution(&ev("x", [false, false, false, true])), InstitutionToxicity::Partial);
        assert_eq!(label_institution(&ev("x", [false; 4])), InstitutionToxicity::None);
    }

    #[test]
    fn community_rule() {
        let labels = institution_labels(&[
            ev("ameriquest", [true, false, false, false]),
            ev("weyerhaeuser", [true, false, false, false]),
            ev("bofa", [false, false, true, false]),
        ]);
        let rules = ToxicityRules::default();
        let two = [prom("ameriquest", &["issuer"], &[2004]), prom("weyerhaeuser", &["issuer"], &[2005])];
        assert_eq!(label_community(0, 41, &two, &labels, &rules).value, CommunityLabel::Toxic);
        let one = [prom("ameriquest", &["originator"], &[2004])];
        assert_eq!(label_community(0, 41, &one, &labels, &rules).value, CommunityLabel::Partial);
        let entrenched = [prom("ameriquest", &["issuer", "servicer", "seller"], &[2004, 2005])];
        assert_eq!(label_community(0, 41, &entrenched, &labels, &rules).value, CommunityLabel::Toxic);
        let clean = [prom("someone", &["issuer"], &[2004])];
        assert_eq!(label_community(0, 41, &clean, &labels, &rules).value, CommunityLabel::NonToxic);
        let tarp = [prom("bofa", &["issuer", "servicer"], &[2004])];
        assert_eq!(label_community(0, 41, &tarp, &labels, &rules).value, CommunityLabel::Partial);
        assert_eq!(label_community(0, 39, &two, &labels, &rules).value, CommunityLabel::Excluded);
        assert_eq!(label_community(0, 41, &[], &labels, &rules).value, CommunityLabel::Excluded);
        // Toxic institutions outside the key roles do not make a community toxic.
        let side = [prom("ameriquest", &["servicer"], &[2004]), prom("weyerhaeuser", &["trustee"], &[2005])];
        assert_eq!(label_community(0, 41, &side, &labels, &rules).value, CommunityLabel::Partial);
    }

    #[test]
    fn evidence_csv_round_trip() {
        let e = vec![ev("a", [true, false, false, true]), ev("b", [false; 4])];
        let mut buf = Vec::new();
        write_evidence_csv(&e, &mut buf).unwrap();
        assert_eq!(read_evidence_csv(&buf[..]).unwrap(), e);
        assert!(read_evidence_csv("fi_id,b,i,t,s,n\nx,maybe,0,0,0,\n".as_bytes()).is_err());
    }

    #[test]
    fn signs() {
        use crate::lasso::{Coef, Scaling};
        let fit = |v: f64| LassoFit {
            intercept: 0.0,
            coefficients: if v == 0.0 { vec![] } else { vec![Coef { index: 1, name: "Topic2".into(), value: v }] },
            feature_names: vec!["Topic1".into(), "Topic2".into()],
            lambda: 0.1,
            converged: true,
            n_iter: 1,
            scaling: vec![Scaling { mean: 0.0, scale: 1.0 }; 2],
        };
        let c = |value| CommunityToxicity { topic: 1, value, evidence: vec![] };
        let rows = compare_signs(&[c(CommunityLabel::NonToxic)], &fit(-0.662), &fit(-0.061)).unwrap();
        assert_eq!((rows[0].fe, rows[0].fne, rows[0].consistent), (Sign::Negative, Sign::Negative, true));
        let rows = compare_signs(&[c(CommunityLabel::Toxic)], &fit(0.4), &fit(0.3)).unwrap();
        assert_eq!((rows[0].fe, rows[0].fne, rows[0].consistent), (Sign::Positive, Sign::Positive, true));
        let rows = compare_signs(&[c(CommunityLabel::Partial)], &fit(0.0), &fit(0.0)).unwrap();
        assert_eq!((rows[0].fe, rows[0].fne), (Sign::Zero, Sign::Zero));
        let missing = CommunityToxicity { topic: 5, value: CommunityLabel::Toxic, evidence: vec![] };
        assert!(compare_signs(&[missing], &fit(0.0), &fit(0.0)).is_err());
    }
}
