//! Security, prospectus and topic feature tiers assembled into one named matrix.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::performance::SecurityClass;
use crate::topics::dominant_topic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MirLevel {
    Aaa,
    Aa,
    A,
    Baa,
    Ba,
    B,
    Caa,
    Ca,
    C,
    #[serde(rename = "NR")]
    NotRated,
    #[serde(rename = "null")]
    Null,
}

impl MirLevel {
    pub const ALL: [MirLevel; 11] = [
        MirLevel::Aaa,
        MirLevel::Aa,
        MirLevel::A,
        MirLevel::Baa,
        MirLevel::Ba,
        MirLevel::B,
        MirLevel::Caa,
        MirLevel::Ca,
        MirLevel::C,
        MirLevel::NotRated,
        MirLevel::Null,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MirLevel::Aaa => "Aaa",
            MirLevel::Aa => "Aa",
            MirLevel::A => "A",
            MirLevel::Baa => "Baa",
            MirLevel::Ba => "Ba",
            MirLevel::B => "B",
            MirLevel::Caa => "Caa",
            MirLevel::Ca => "Ca",
            MirLevel::C => "C",
            MirLevel::NotRated => "NR",
            MirLevel::Null => "null",
        }
    }

    pub fn column_name(self) -> String {
        format!("MIR_{}", self.as_str())
    }
}

impl fmt::Display for MirLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Maps a raw Moody's rating to its letter grade: numeric modifiers, provisional
/// markers and `(sf)` tags are dropped; withdrawn or not-rated codes become NR.
pub fn aggregate_mir(mir_raw: Option<&str>) -> Result<MirLevel> {
    let raw = match mir_raw.map(str::trim) {
        None | Some("") => return Ok(MirLevel::Null),
        Some(r) => r,
    };
    let mut s = raw.to_string();
    for tag in ["(sf)", "(P)", "(p)", "*-", "*+", "*"] {
        s = s.replace(tag, "");
    }
    let grade = s.trim().trim_end_matches(|c: char| c.is_ascii_digit()).trim();
    let level = match grade.to_ascii_lowercase().as_str() {
        "aaa" => MirLevel::Aaa,
        "aa" => MirLevel::Aa,
        "a" => MirLevel::A,
        "baa" => MirLevel::Baa,
        "ba" => MirLevel::Ba,
        "b" => MirLevel::B,
        "caa" => MirLevel::Caa,
        "ca" => MirLevel::Ca,
        "c" => MirLevel::C,
        "nr" | "wr" | "n/r" | "not rated" | "withdrawn" => MirLevel::NotRated,
        _ => return Err(Error::UnknownRating(raw.to_string())),
    };
    Ok(level)
}

pub const FLAG_COUNT: usize = 73;

/// Flag names that appear in published coefficient tables; the registry pads the rest.
const NAMED_FLAGS: [&str; 40] = [
    "AD", "AFC", "AS", "CMPLX", "CPT", "CSTR", "DGT", "DLY", "EXCH", "EXE", "FLT", "FTV", "INV", "IRC", "MEZ",
    "MR", "NAS", "NTL", "OC", "PAC1", "PIP", "PT", "R", "RAKE", "RSTP", "RTL", "SC", "SEQ", "SSNR", "SSUP",
    "STEP", "SUB", "SUP", "TAC.1.22.", "TAC.11.", "TAC.2.22.", "TAC.22.", "TAC.33.", "W", "Z",
];

pub const SSUP: &str = "SSUP";

/// Fixed, ordered set of tranche flag names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagRegistry {
    names: Vec<String>,
}

impl Default for FlagRegistry {
    fn default() -> Self {
        let mut names: Vec<String> = NAMED_FLAGS.iter().map(|s| s.to_string()).collect();
        let mut i = names.len();
        while names.len() < FLAG_COUNT {
            i += 1;
            names.push(format!("FLAG{i:02}"));
        }
        FlagRegistry { names }
    }
}

impl FlagRegistry {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() != FLAG_COUNT {
            return Err(Error::invalid(format!(
                "flag registry must list {FLAG_COUNT} names, found {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() || n.contains([',', ';']) {
                return Err(Error::invalid(format!("invalid flag name `{n}`")));
            }
            if !seen.insert(n) {
                return Err(Error::invalid(format!("duplicate flag name `{n}`")));
            }
        }
        if !seen.contains(&SSUP.to_string()) {
            return Err(Error::invalid("flag registry must include SSUP"));
        }
        Ok(FlagRegistry { names })
    }

    /// One name per line; blank lines and `#` comments are skipped.
    pub fn from_lines<R: BufRead>(reader: R) -> Result<Self> {
        let mut names = Vec::new();
        for line in reader.lines() {
            let line = line.map_err(|e| Error::io("reading flag registry", e))?;
            let t = line.trim();
            if !t.is_empty() && !t.starts_with('#') {
                names.push(t.to_string());
            }
        }
        Self::new(names)
    }

    pub fn write_lines<W: Write>(&self, mut writer: W) -> Result<()> {
        for n in &self.names {
            writeln!(writer, "{n}").map_err(|e| Error::io("writing flag registry", e))?;
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityRecord {
    pub id: String,
    pub prospectus_id: String,
    pub class: SecurityClass,
    pub year: i32,
    pub mir_raw: Option<String>,
    /// Names of the flags that are set.
    pub flags: Vec<String>,
    /// USD.
    pub original_principal: f64,
}

impl SecurityRecord {
    pub fn has_flag(&self, name: &str) -> bool {
        self.flags.iter().any(|f| f == name)
    }

    pub fn is_ssup(&self) -> bool {
        self.has_flag(SSUP)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SecurityRow {
    id: String,
    prospectus_id: String,
    class: SecurityClass,
    year: i32,
    mir_raw: String,
    flags: String,
    original_principal: f64,
}

pub fn write_securities_csv<W: Write>(records: &[SecurityRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(SecurityRow {
            id: r.id.clone(),
            prospectus_id: r.prospectus_id.clone(),
            class: r.class,
            year: r.year,
            mir_raw: r.mir_raw.clone().unwrap_or_default(),
            flags: r.flags.join(";"),
            original_principal: r.original_principal,
        })?;
    }
    w.flush().map_err(|e| Error::io("writing securities", e))?;
    Ok(())
}

pub fn read_securities_csv<R: Read>(reader: R) -> Result<Vec<SecurityRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<SecurityRow>() {
        let row = row?;
        if !(row.original_principal >= 0.0) {
            return Err(Error::invalid(format!("security {} has a negative principal", row.id)));
        }
        out.push(SecurityRecord {
            id: row.id,
            prospectus_id: row.prospectus_id,
            class: row.class,
            year: row.year,
            mir_raw: Some(row.mir_raw).filter(|s| !s.trim().is_empty()),
            flags: row.flags.split(';').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect(),
            original_principal: row.original_principal,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureTier {
    Security,
    Prospectus,
    Comprehensive,
}

impl FromStr for FeatureTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "security" => Ok(FeatureTier::Security),
            "prospectus" => Ok(FeatureTier::Prospectus),
            "comprehensive" => Ok(FeatureTier::Comprehensive),
            other => Err(Error::invalid(format!("unknown feature tier `{other}`"))),
        }
    }
}

impl FeatureTier {
    pub const ALL: [FeatureTier; 3] = [FeatureTier::Security, FeatureTier::Prospectus, FeatureTier::Comprehensive];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureTier::Security => "security",
            FeatureTier::Prospectus => "prospectus",
            FeatureTier::Comprehensive => "comprehensive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Binary,
    Fraction,
    /// Standardized before fitting.
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub tier: FeatureTier,
    pub kind: ColumnKind,
    /// One-hot group the column belongs to, if any.
    pub group: Option<String>,
}

impl ColumnSpec {
    fn new(name: impl Into<String>, tier: FeatureTier, kind: ColumnKind, group: Option<&str>) -> Self {
        ColumnSpec {
            name: name.into(),
            tier,
            kind,
            group: group.map(String::from),
        }
    }
}

/// Everything needed to lay out columns consistently across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureContext {
    pub registry: FlagRegistry,
    pub years: Vec<i32>,
    pub baseline_year: i32,
    /// Principal and volume columns are divided by this many USD.
    pub principal_unit: f64,
    pub k: usize,
}

impl Default for FeatureContext {
    fn default() -> Self {
        FeatureContext {
            registry: FlagRegistry::default(),
            years: (2002..=2007).collect(),
            baseline_year: 2005,
            principal_unit: 1e8,
            k: 30,
        }
    }
}

pub const CLASS_COLUMNS: [&str; 2] = ["IsA", "IsB"];
pub const PRINCIPAL_COLUMN: &str = "MTG.ORIG.AMT";
pub const HAS_SSUP_COLUMN: &str = "HasSSUP";

pub fn year_column(year: i32) -> String {
    format!("Year{year}")
}

pub fn topic_column(topic: usize) -> String {
    format!("Topic{}", topic + 1)
}

impl FeatureContext {
    fn dummy_years(&self) -> impl Iterator<Item = i32> + '_ {
        self.years.iter().copied().filter(move |&y| y != self.baseline_year)
    }

    pub fn security_columns(&self) -> Vec<ColumnSpec> {
        use ColumnKind::*;
        let t = FeatureTier::Security;
        let mut cols: Vec<ColumnSpec> = CLASS_COLUMNS.iter().map(|c| ColumnSpec::new(*c, t, Binary, Some("class"))).collect();
        cols.extend(MirLevel::ALL.iter().map(|m| ColumnSpec::new(m.column_name(), t, Binary, Some("mir"))));
        cols.extend(self.registry.names().iter().map(|f| ColumnSpec::new(f.clone(), t, Binary, None)));
        cols.extend(self.dummy_years().map(|y| ColumnSpec::new(year_column(y), t, Binary, Some("year"))));
        cols.push(ColumnSpec::new(PRINCIPAL_COLUMN, t, Continuous, None));
        cols
    }

    pub fn prospectus_columns(&self) -> Vec<ColumnSpec> {
        use ColumnKind::*;
        let t = FeatureTier::Prospectus;
        let mut cols = Vec::new();
        for (stem, kind) in [("Count", Continuous), ("Frac", Fraction), ("Vol", Continuous), ("VolFrac", Fraction)] {
            for c in SecurityClass::ALL {
                cols.push(ColumnSpec::new(format!("{stem}{c}"), t, kind, None));
            }
        }
        cols.push(ColumnSpec::new(HAS_SSUP_COLUMN, t, Binary, None));
        cols
    }

    pub fn topic_columns(&self) -> Vec<ColumnSpec> {
        (0..self.k)
            .map(|j| ColumnSpec::new(topic_column(j), FeatureTier::Comprehensive, ColumnKind::Binary, Some("topic")))
            .collect()
    }

    pub fn columns(&self, tier: FeatureTier) -> Vec<ColumnSpec> {
        let mut cols = self.security_columns();
        if tier >= FeatureTier::Prospectus {
            cols.extend(self.prospectus_columns());
        }
        if tier >= FeatureTier::Comprehensive {
            cols.extend(self.topic_columns());
        }
        cols
    }
}

/// Row fragment aligned with [`FeatureContext::security_columns`].
pub fn build_security_features(record: &SecurityRecord, ctx: &FeatureContext) -> Result<Vec<f64>> {
    if !(record.original_principal >= 0.0) {
        return Err(Error::invalid(format!("security {} has a negative principal", record.id)));
    }
    let mut row = vec![
        (record.class == SecurityClass::A) as u8 as f64,
        (record.class == SecurityClass::B) as u8 as f64,
    ];
    let mir = aggregate_mir(record.mir_raw.as_deref())?;
    row.extend(MirLevel::ALL.iter().map(|m| (*m == mir) as u8 as f64));
    let mut flags = vec![0.0; ctx.registry.names().len()];
    for f in &record.flags {
        let i = ctx
            .registry
            .index_of(f)
            .ok_or_else(|| Error::invalid(format!("security {}: flag `{f}` is not in the registry", record.id)))?;
        flags[i] = 1.0;
    }
    row.extend(flags);
    row.extend(ctx.dummy_years().map(|y| (y == record.year) as u8 as f64));
    row.push(record.original_principal / ctx.principal_unit);
    Ok(row)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProspectusFeatures {
    pub count: [f64; 3],
    pub frac: [f64; 3],
    /// In principal units.
    pub vol: [f64; 3],
    pub volfrac: [f64; 3],
    pub has_ssup: bool,
}

impl ProspectusFeatures {
    /// Values aligned with [`FeatureContext::prospectus_columns`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(13);
        for part in [&self.count, &self.frac, &self.vol, &self.volfrac] {
            v.extend_from_slice(part);
        }
        v.push(self.has_ssup as u8 as f64);
        v
    }
}

fn class_index(c: SecurityClass) -> usize {
    match c {
        SecurityClass::A => 0,
        SecurityClass::M => 1,
        SecurityClass::B => 2,
    }
}

/// Class composition of one prospectus, by count and by volume.
pub fn build_prospectus_features(securities: &[&SecurityRecord], principal_unit: f64) -> Result<ProspectusFeatures> {
    if securities.is_empty() {
        return Err(Error::invalid("prospectus has no securities"));
    }
    let mut count = [0.0; 3];
    let mut usd = [0.0; 3];
    for s in securities {
        let i = class_index(s.class);
        count[i] += 1.0;
        usd[i] += s.original_principal;
    }
    let n: f64 = count.iter().sum();
    let total: f64 = usd.iter().sum();
    let volfrac = if total > 0.0 {
        usd.map(|v| v / total)
    } else {
        log::warn!(
            "prospectus {} has zero total principal; volume fractions set to 0",
            securities[0].prospectus_id
        );
        [0.0; 3]
    };
    Ok(ProspectusFeatures {
        count,
        frac: count.map(|c| c / n),
        vol: usd.map(|v| v / principal_unit),
        volfrac,
        has_ssup: securities.iter().any(|s| s.is_ssup()),
    })
}

/// Prospectus fragments for every prospectus referenced by `records`.
pub fn prospectus_features_by_id(records: &[SecurityRecord], principal_unit: f64) -> Result<BTreeMap<String, ProspectusFeatures>> {
    let mut groups: BTreeMap<&str, Vec<&SecurityRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.prospectus_id).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(id, secs)| Ok((id.to_string(), build_prospectus_features(&secs, principal_unit)?)))
        .collect()
}

/// One-hot on the largest weight, lowest index on ties.
pub fn attach_topic_indicator(weights: &[f64], k: usize) -> Vec<f64> {
    let mut row = vec![0.0; k];
    if k > 0 {
        let top = dominant_topic(&weights[..weights.len().min(k)], 1.0).topic;
        row[top] = 1.0;
    }
    row
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub tier: FeatureTier,
    pub row_ids: Vec<String>,
    /// Prospectus of each row, used for grouped folds.
    pub groups: Vec<String>,
    pub columns: Vec<ColumnSpec>,
    pub values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["security_id".to_string(), "prospectus_id".to_string()];
        header.extend(self.column_names());
        w.write_record(&header)?;
        for (i, row) in self.values.outer_iter().enumerate() {
            let mut rec = vec![self.row_ids[i].clone(), self.groups[i].clone()];
            rec.extend(row.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("writing feature matrix", e))?;
        Ok(())
    }

    pub fn write_manifest<W: Write>(&self, writer: W) -> Result<()> {
        let m = FeatureManifest {
            tier: self.tier,
            columns: self.columns.clone(),
        };
        serde_json::to_writer_pretty(writer, &m)?;
        Ok(())
    }

    pub fn read<R1: Read, R2: Read>(csv_reader: R1, manifest_reader: R2) -> Result<Self> {
        let manifest: FeatureManifest = serde_json::from_reader(manifest_reader)?;
        let mut rdr = csv::Reader::from_reader(csv_reader);
        let header = rdr.headers()?.clone();
        let names: Vec<&str> = header.iter().skip(2).collect();
        if names.len() != manifest.columns.len() || names.iter().zip(&manifest.columns).any(|(a, b)| *a != b.name) {
            return Err(Error::Dimension("feature CSV header does not match its manifest".into()));
        }
        let p = names.len();
        let mut row_ids = Vec::new();
        let mut groups = Vec::new();
        let mut data = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            row_ids.push(rec[0].to_string());
            groups.push(rec[1].to_string());
            for v in rec.iter().skip(2) {
                data.push(
                    v.parse::<f64>()
                        .map_err(|_| Error::invalid(format!("non-numeric feature value `{v}`")))?,
                );
            }
        }
        let values = Array2::from_shape_vec((row_ids.len(), p), data).map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(FeatureMatrix {
            tier: manifest.tier,
            row_ids,
            groups,
            columns: manifest.columns,
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub tier: FeatureTier,
    pub columns: Vec<ColumnSpec>,
}

/// Builds the matrix for `tier`. `topic_weights` maps prospectus ids to topic mixtures
/// and is only consulted at the comprehensive tier.
pub fn assemble_matrix(
    records: &[SecurityRecord],
    prospectus: &BTreeMap<String, ProspectusFeatures>,
    topic_weights: &BTreeMap<String, Vec<f64>>,
    tier: FeatureTier,
    ctx: &FeatureContext,
) -> Result<FeatureMatrix> {
    if records.is_empty() {
        return Err(Error::invalid("no security records to assemble"));
    }
    let columns = ctx.columns(tier);
    let mut values = Array2::zeros((records.len(), columns.len()));
    for (i, r) in records.iter().enumerate() {
        let mut row = build_security_features(r, ctx)?;
        if tier >= FeatureTier::Prospectus {
            let p = prospectus.get(&r.prospectus_id).ok_or_else(|| {
                Error::invalid(format!("security {}: no prospectus features for {}", r.id, r.prospectus_id))
            })?;
            row.extend(p.to_vec());
        }
        if tier >= FeatureTier::Comprehensive {
            let w = topic_weights.get(&r.prospectus_id).ok_or_else(|| {
                Error::invalid(format!("security {}: no topic weights for {}", r.id, r.prospectus_id))
            })?;
            row.extend(attach_topic_indicator(w, ctx.k));
        }
        debug_assert_eq!(row.len(), columns.len());
        values.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    Ok(FeatureMatrix {
        tier,
        row_ids: records.iter().map(|r| r.id.clone()).collect(),
        groups: records.iter().map(|r| r.prospectus_id.clone()).collect(),
        columns,
        values,
    })
}
