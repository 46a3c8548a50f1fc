//! Listening-test ratings: loading, validation and MOS aggregation.
//!
//! A ratings file holds one row per individual rating. Utterance MOS is the
//! plain mean of that utterance's scores; split statistics summarize the
//! utterance MOS values per system.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const REQUIRED_COLUMNS: [&str; 5] = [
    "utterance_id",
    "system_id",
    "rater_group_id",
    "rater_id",
    "score",
];
pub const DEMOGRAPHIC_COLUMNS: [&str; 3] = ["age", "sex", "hearing"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Validation,
    Test,
    Custom,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
            SplitTag::Custom => "custom",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "validation" | "val" => Ok(SplitTag::Validation),
            "test" => Ok(SplitTag::Test),
            "custom" => Ok(SplitTag::Custom),
            other => Err(Error::Config(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rating {
    pub utterance_id: String,
    pub system_id: String,
    pub rater_group_id: String,
    pub rater_id: String,
    pub score: u8,
    /// Optional `age`/`sex`/`hearing` values. Carried through, never modeled.
    pub demographics: BTreeMap<String, String>,
}

impl Rating {
    pub fn new(
        utterance_id: impl Into<String>,
        system_id: impl Into<String>,
        rater_group_id: impl Into<String>,
        rater_id: impl Into<String>,
        score: u8,
    ) -> Self {
        Rating {
            utterance_id: utterance_id.into(),
            system_id: system_id.into(),
            rater_group_id: rater_group_id.into(),
            rater_id: rater_id.into(),
            score,
            demographics: BTreeMap::new(),
        }
    }
}

/// Validated, immutable collection of ratings for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingTable {
    ratings: Vec<Rating>,
    split: SplitTag,
}

impl RatingTable {
    pub fn new(ratings: Vec<Rating>, split: SplitTag) -> Result<Self> {
        let mut pairs: HashSet<(&str, &str)> = HashSet::with_capacity(ratings.len());
        let mut systems: HashMap<&str, &str> = HashMap::new();
        for (row, r) in ratings.iter().enumerate() {
            if !(1..=5).contains(&r.score) {
                return Err(Error::Validation(format!(
                    "rating {row}: score {} outside 1..=5",
                    r.score
                )));
            }
            for (name, value) in [
                ("utterance_id", &r.utterance_id),
                ("system_id", &r.system_id),
                ("rater_group_id", &r.rater_group_id),
                ("rater_id", &r.rater_id),
            ] {
                if value.is_empty() {
                    return Err(Error::Validation(format!("rating {row}: empty {name}")));
                }
            }
            if !pairs.insert((&r.utterance_id, &r.rater_id)) {
                return Err(Error::Validation(format!(
                    "rating {row}: duplicate rating of utterance `{}` by rater `{}`",
                    r.utterance_id, r.rater_id
                )));
            }
            match systems.get(r.utterance_id.as_str()) {
                Some(sys) if *sys != r.system_id => {
                    return Err(Error::Validation(format!(
                        "rating {row}: utterance `{}` listed under systems `{}` and `{}`",
                        r.utterance_id, sys, r.system_id
                    )));
                }
                Some(_) => {}
                None => {
                    systems.insert(&r.utterance_id, &r.system_id);
                }
            }
        }
        Ok(RatingTable { ratings, split })
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.ratings
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn into_ratings(self) -> Vec<Rating> {
        self.ratings
    }

    /// Keeps the ratings of utterances for which `keep` returns true.
    pub fn retain_utterances(&self, mut keep: impl FnMut(&str) -> bool) -> RatingTable {
        RatingTable {
            ratings: self
                .ratings
                .iter()
                .filter(|r| keep(&r.utterance_id))
                .cloned()
                .collect(),
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: SplitTag) -> RatingTable {
        self.split = split;
        self
    }

    /// Concatenates tables, revalidating the union.
    pub fn concat(tables: &[&RatingTable], split: SplitTag) -> Result<RatingTable> {
        let ratings = tables
            .iter()
            .flat_map(|t| t.ratings.iter().cloned())
            .collect();
        RatingTable::new(ratings, split)
    }
}

pub fn load_ratings(path: impl AsRef<Path>, split: SplitTag) -> Result<RatingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(file, &path.display().to_string(), split)
}

/// Parses the ratings CSV format from any reader. `origin` names the source in
/// error messages.
pub fn parse_ratings<R: Read>(reader: R, origin: &str, split: SplitTag) -> Result<RatingTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let parse_err = |line: u64, message: String| Error::Parse {
        origin: origin.to_string(),
        line,
        message,
    };

    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let header_line = 1;
    if header.len() < REQUIRED_COLUMNS.len()
        || header.iter().take(REQUIRED_COLUMNS.len()).ne(REQUIRED_COLUMNS)
    {
        return Err(parse_err(
            header_line,
            format!(
                "header must start with `{}`, found `{}`",
                REQUIRED_COLUMNS.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let extra: Vec<String> = header.iter().skip(REQUIRED_COLUMNS.len()).map(String::from).collect();
    for (i, name) in extra.iter().enumerate() {
        if !DEMOGRAPHIC_COLUMNS.contains(&name.as_str()) || extra[..i].contains(name) {
            return Err(parse_err(header_line, format!("unexpected column `{name}`")));
        }
    }

    let mut ratings = Vec::new();
    let mut lines = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} columns, found {}", header.len(), record.len()),
            ));
        }
        for (i, name) in REQUIRED_COLUMNS.iter().enumerate().take(4) {
            if record[i].is_empty() {
                return Err(parse_err(line, format!("empty {name}")));
            }
        }
        let score: i64 = record[4]
            .parse()
            .map_err(|_| parse_err(line, format!("score `{}` is not an integer", &record[4])))?;
        if !(1..=5).contains(&score) {
            return Err(parse_err(line, format!("score {score} outside 1..=5")));
        }
        let mut rating = Rating::new(&record[0], &record[1], &record[2], &record[3], score as u8);
        for (name, value) in extra.iter().zip(record.iter().skip(REQUIRED_COLUMNS.len())) {
            if !value.is_empty() {
                rating.demographics.insert(name.clone(), value.to_string());
            }
        }
        ratings.push(rating);
        lines.push(line);
    }

    RatingTable::new(ratings, split).map_err(|e| match e {
        // Point validation failures at the offending source line.
        Error::Validation(msg) => {
            let line = msg
                .strip_prefix("rating ")
                .and_then(|rest| rest.split(':').next())
                .and_then(|n| n.parse::<usize>().ok())
                .and_then(|n| lines.get(n).copied());
            match line {
                Some(line) => Error::Validation(format!("{origin}:{line}: {msg}")),
                None => Error::Validation(msg),
            }
        }
        other => other,
    })
}

/// Writes the table in the ratings CSV format. Demographic columns are emitted
/// only if some rating carries them.
pub fn write_ratings<W: Write>(table: &RatingTable, writer: W) -> Result<()> {
    let demo: Vec<&str> = DEMOGRAPHIC_COLUMNS
        .iter()
        .copied()
        .filter(|c| table.ratings.iter().any(|r| r.demographics.contains_key(*c)))
        .collect();
    let mut wtr = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    header.extend(&demo);
    wtr.write_record(&header).map_err(csv_err)?;
    for r in &table.ratings {
        let score = r.score.to_string();
        let mut row: Vec<&str> = vec![
            &r.utterance_id,
            &r.system_id,
            &r.rater_group_id,
            &r.rater_id,
            &score,
        ];
        for c in &demo {
            row.push(r.demographics.get(*c).map(String::as_str).unwrap_or(""));
        }
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn save_ratings(table: &RatingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_ratings(table, std::io::BufWriter::new(file))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub system_id: String,
    pub rater_group_id: String,
    pub mos: f64,
    pub rating_count: usize,
}

/// One record per distinct utterance, sorted by utterance id.
///
/// If an utterance was rated by more than one group, the group of its first
/// rating is kept and a warning is logged.
pub fn compute_utterance_mos(table: &RatingTable) -> Vec<UtteranceRecord> {
    struct Acc<'a> {
        system: &'a str,
        group: &'a str,
        sum: u64,
        count: usize,
        mixed_groups: bool,
    }
    let mut acc: BTreeMap<&str, Acc> = BTreeMap::new();
    for r in &table.ratings {
        let entry = acc.entry(&r.utterance_id).or_insert(Acc {
            system: &r.system_id,
            group: &r.rater_group_id,
            sum: 0,
            count: 0,
            mixed_groups: false,
        });
        entry.sum += u64::from(r.score);
        entry.count += 1;
        if entry.group != r.rater_group_id {
            entry.mixed_groups = true;
        }
    }
    acc.into_iter()
        .map(|(utt, a)| {
            if a.mixed_groups {
                log::warn!(
                    "utterance `{utt}` was rated by several rater groups; keeping `{}`",
                    a.group
                );
            }
            UtteranceRecord {
                utterance_id: utt.to_string(),
                system_id: a.system.to_string(),
                rater_group_id: a.group.to_string(),
                mos: a.sum as f64 / a.count as f64,
                rating_count: a.count,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemSummary {
    pub mean: f64,
    /// Population standard deviation (divisor `count`).
    pub std: f64,
    pub count: usize,
}

impl SystemSummary {
    pub fn from_values(values: &[f64]) -> SystemSummary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        SystemSummary {
            mean,
            std: var.sqrt(),
            count: values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitStats {
    pub n_utterances: usize,
    pub n_systems: usize,
    pub n_rater_groups: usize,
    pub global_mos: f64,
    pub per_system: BTreeMap<String, SystemSummary>,
}

pub fn split_stats(records: &[UtteranceRecord]) -> Result<SplitStats> {
    if records.is_empty() {
        return Err(Error::Validation("split statistics need at least one utterance".into()));
    }
    let mut by_system: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut groups: HashSet<&str> = HashSet::new();
    for r in records {
        by_system.entry(&r.system_id).or_default().push(r.mos);
        groups.insert(&r.rater_group_id);
    }
    let per_system: BTreeMap<String, SystemSummary> = by_system
        .iter()
        .map(|(sys, values)| (sys.to_string(), SystemSummary::from_values(values)))
        .collect();
    let weighted: f64 = per_system.values().map(|s| s.mean * s.count as f64).sum();
    Ok(SplitStats {
        n_utterances: records.len(),
        n_systems: per_system.len(),
        n_rater_groups: groups.len(),
        global_mos: weighted / records.len() as f64,
        per_system,
    })
}

/// Loads a baseline-MOS CSV (`utterance_id,predicted_mos`).
pub fn load_baseline_mos(path: impl AsRef<Path>) -> Result<HashMap<String, f64>> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: u64, message: String| Error::Parse {
        origin: origin.clone(),
        line,
        message,
    };
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if header.iter().ne(["utterance_id", "predicted_mos"]) {
        return Err(parse_err(1, "header must be `utterance_id,predicted_mos`".into()));
    }
    let mut out = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            parse_err(e.position().map(|p| p.line()).unwrap_or(0), e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let value: f64 = record[1]
            .parse()
            .map_err(|_| parse_err(line, format!("`{}` is not a real number", &record[1])))?;
        if !value.is_finite() {
            return Err(parse_err(line, "predicted MOS must be finite".into()));
        }
        if out.insert(record[0].to_string(), value).is_some() {
            return Err(parse_err(line, format!("duplicate utterance `{}`", &record[0])));
        }
    }
    Ok(out)
}

pub fn save_baseline_mos<'a>(
    rows: impl IntoIterator<Item = (&'a str, f64)>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("utterance_id,predicted_mos\n");
    for (utt, mos) in rows {
        out.push_str(&format!("{utt},{mos:?}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
