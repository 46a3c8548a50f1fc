//! Metadata vocabularies, one-hot encoding with an unknown slot, and
//! per-utterance feature assembly.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::UtteranceRecord;
use crate::emb::Frames;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CategoryKind {
    System,
    RaterGroup,
}

/// Train-split system and rater-group vocabularies. Each one-hot block has one
/// extra terminal slot for ids not seen during training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataVocab {
    systems: Vec<String>,
    rater_groups: Vec<String>,
    system_index: HashMap<String, usize>,
    group_index: HashMap<String, usize>,
}

impl MetadataVocab {
    pub fn new(systems: Vec<String>, rater_groups: Vec<String>) -> Result<Self> {
        let index = |ids: &[String], what: &str| -> Result<HashMap<String, usize>> {
            let mut map = HashMap::with_capacity(ids.len());
            for (i, id) in ids.iter().enumerate() {
                if map.insert(id.clone(), i).is_some() {
                    return Err(Error::Validation(format!("duplicate {what} `{id}` in vocabulary")));
                }
            }
            Ok(map)
        };
        let system_index = index(&systems, "system")?;
        let group_index = index(&rater_groups, "rater group")?;
        Ok(MetadataVocab {
            systems,
            rater_groups,
            system_index,
            group_index,
        })
    }

    pub fn systems(&self) -> &[String] {
        &self.systems
    }

    pub fn rater_groups(&self) -> &[String] {
        &self.rater_groups
    }

    fn ids(&self, kind: CategoryKind) -> &[String] {
        match kind {
            CategoryKind::System => &self.systems,
            CategoryKind::RaterGroup => &self.rater_groups,
        }
    }

    /// Length of the one-hot block for `kind`, unknown slot included.
    pub fn encoded_len(&self, kind: CategoryKind) -> usize {
        self.ids(kind).len() + 1
    }

    pub fn unknown_index(&self, kind: CategoryKind) -> usize {
        self.ids(kind).len()
    }

    pub fn contains(&self, kind: CategoryKind, id: &str) -> bool {
        self.lookup(kind, id).is_some()
    }

    fn lookup(&self, kind: CategoryKind, id: &str) -> Option<usize> {
        match kind {
            CategoryKind::System => self.system_index.get(id).copied(),
            CategoryKind::RaterGroup => self.group_index.get(id).copied(),
        }
    }

    /// Index of `id`, or the unknown slot.
    pub fn index_of(&self, kind: CategoryKind, id: &str) -> usize {
        self.lookup(kind, id).unwrap_or_else(|| self.unknown_index(kind))
    }
}

/// Distinct system and rater-group ids in first-appearance order.
pub fn build_vocab(train_records: &[UtteranceRecord]) -> Result<MetadataVocab> {
    if train_records.is_empty() {
        return Err(Error::Validation("cannot build a vocabulary from an empty split".into()));
    }
    let mut systems = Vec::new();
    let mut groups = Vec::new();
    let mut seen_sys = std::collections::HashSet::new();
    let mut seen_grp = std::collections::HashSet::new();
    for r in train_records {
        if seen_sys.insert(r.system_id.as_str()) {
            systems.push(r.system_id.clone());
        }
        if seen_grp.insert(r.rater_group_id.as_str()) {
            groups.push(r.rater_group_id.clone());
        }
    }
    MetadataVocab::new(systems, groups)
}

pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

pub fn encode_one_hot(vocab: &MetadataVocab, id: &str, kind: CategoryKind) -> Vec<f64> {
    one_hot(vocab.index_of(kind, id), vocab.encoded_len(kind))
}

/// Replaces `index` with `unknown_index` with probability `p`. Always consumes
/// exactly one draw from `rng`.
pub fn apply_unknown_dropout<R: Rng + ?Sized>(
    index: usize,
    unknown_index: usize,
    p: f64,
    rng: &mut R,
) -> usize {
    let draw: f64 = rng.random();
    if draw < p {
        unknown_index
    } else {
        index
    }
}

pub const DEFAULT_UNKNOWN_DROPOUT_P: f64 = 0.1;

/// Which inputs a model consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    /// Acoustic frame embeddings (W2V).
    pub use_acoustic: bool,
    /// Synthesis system one-hot (S).
    pub use_system: bool,
    /// Rater group one-hot (R).
    pub use_rater: bool,
    /// Rater group forced to unknown at inference (BR).
    pub rater_blinded: bool,
    /// External baseline MOS prediction (M).
    pub use_baseline_mos: bool,
    pub unknown_dropout_p: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            use_acoustic: false,
            use_system: false,
            use_rater: false,
            rater_blinded: false,
            use_baseline_mos: false,
            unknown_dropout_p: DEFAULT_UNKNOWN_DROPOUT_P,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rater_blinded && !self.use_rater {
            return Err(Error::Config("blinded rater requires the rater feature".into()));
        }
        if !(0.0..=1.0).contains(&self.unknown_dropout_p) {
            return Err(Error::Config(format!(
                "unknown_dropout_p = {} outside [0, 1]",
                self.unknown_dropout_p
            )));
        }
        Ok(())
    }

    /// Length of the metadata vector: the one-hot blocks, without the baseline scalar.
    pub fn metadata_len(&self, vocab: &MetadataVocab) -> usize {
        let mut n = 0;
        if self.use_system {
            n += vocab.encoded_len(CategoryKind::System);
        }
        if self.use_rater {
            n += vocab.encoded_len(CategoryKind::RaterGroup);
        }
        n
    }

    /// True when no input is selected; such a model sees a constant input.
    pub fn is_no_input(&self) -> bool {
        !(self.use_acoustic || self.use_system || self.use_rater || self.use_baseline_mos)
    }
}

/// Renders as the feature label, e.g. `W2V+BR+S+M`, or `none`.
impl fmt::Display for FeatureConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.use_acoustic {
            parts.push("W2V");
        }
        if self.use_rater {
            parts.push(if self.rater_blinded { "BR" } else { "R" });
        }
        if self.use_system {
            parts.push("S");
        }
        if self.use_baseline_mos {
            parts.push("M");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for FeatureConfig {
    type Err = Error;

    /// Parses a `+`-separated feature label in any order (`S+BR`, `W2V+R+S+M`).
    fn from_str(label: &str) -> Result<Self> {
        let mut cfg = FeatureConfig::default();
        let label = label.trim();
        if label.eq_ignore_ascii_case("none") {
            return Ok(cfg);
        }
        for token in label.split('+').map(str::trim) {
            let slot = match token.to_ascii_uppercase().as_str() {
                "W2V" => &mut cfg.use_acoustic,
                "S" => &mut cfg.use_system,
                "M" => &mut cfg.use_baseline_mos,
                "R" => &mut cfg.use_rater,
                "BR" => {
                    cfg.rater_blinded = true;
                    &mut cfg.use_rater
                }
                _ => return Err(Error::Config(format!("unknown feature `{token}` in `{label}`"))),
            };
            if *slot {
                return Err(Error::Config(format!("feature `{token}` repeated in `{label}`")));
            }
            *slot = true;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Unknown-class dropout active.
    Train,
    /// Deterministic; blinded configs force the rater slot to unknown.
    Infer,
}

/// Model inputs for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle<'a> {
    pub frames: Option<&'a Frames>,
    pub metadata: Vec<f64>,
    pub baseline_mos: Option<f64>,
}

pub fn assemble_bundle<'a, R: Rng + ?Sized>(
    config: &FeatureConfig,
    vocab: &MetadataVocab,
    record: &UtteranceRecord,
    frames: Option<&'a Frames>,
    baseline: Option<f64>,
    mode: Mode,
    rng: &mut R,
) -> Result<FeatureBundle<'a>> {
    match (config.use_acoustic, frames.is_some()) {
        (true, false) => {
            return Err(Error::Config(format!(
                "utterance `{}`: acoustic features enabled but no frames supplied",
                record.utterance_id
            )))
        }
        (false, true) => {
            return Err(Error::Config(format!(
                "utterance `{}`: frames supplied but acoustic features disabled",
                record.utterance_id
            )))
        }
        _ => {}
    }
    match (config.use_baseline_mos, baseline.is_some()) {
        (true, false) => {
            return Err(Error::Config(format!(
                "utterance `{}`: baseline MOS enabled but not supplied",
                record.utterance_id
            )))
        }
        (false, true) => {
            return Err(Error::Config(format!(
                "utterance `{}`: baseline MOS supplied but feature disabled",
                record.utterance_id
            )))
        }
        _ => {}
    }

    let mut metadata = Vec::with_capacity(config.metadata_len(vocab));
    let mut push_block = |kind: CategoryKind, id: &str, force_unknown: bool, rng: &mut R| {
        let unknown = vocab.unknown_index(kind);
        let mut index = vocab.index_of(kind, id);
        if force_unknown {
            index = unknown;
        } else if mode == Mode::Train {
            index = apply_unknown_dropout(index, unknown, config.unknown_dropout_p, rng);
        }
        metadata.extend(one_hot(index, vocab.encoded_len(kind)));
    };
    if config.use_system {
        push_block(CategoryKind::System, &record.system_id, false, rng);
    }
    if config.use_rater {
        let blind = mode == Mode::Infer && config.rater_blinded;
        push_block(CategoryKind::RaterGroup, &record.rater_group_id, blind, rng);
    }

    Ok(FeatureBundle {
        frames,
        metadata,
        baseline_mos: baseline,
    })
}
