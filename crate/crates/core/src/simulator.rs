//! Synthetic listening tests.
//!
//! Each utterance `i` of system `s` is rated by every rater of one group `g`:
//!
//! ```text
//! score = clamp(round(mu_s + u_i + b_g + e_r), 1, 5)
//! mu_s ~ U(lo, hi)   u_i ~ N(0, sigma_utterance)
//! b_g ~ N(0, sigma_group_bias)   e_r ~ N(0, sigma_rater_noise)
//! ```
//!
//! Draw order on the main stream: all `mu_s`, then all `b_g`, then for each
//! utterance in system-major order its `u_i` followed by one `e_r` per rater.
//! Groups are assigned round-robin over the global utterance index. Rounding
//! is half away from zero.
//!
//! Embeddings and baseline scores come from their own streams of the same
//! seed, so changing `embed_dim` never changes the ratings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{join_list, KeyValues};
use crate::data::{compute_utterance_mos, Rating, RatingTable, SplitTag};
use crate::emb::Frames;
use crate::error::{Error, Result};
use crate::model::Example;

const EMBEDDING_STREAM: u64 = 1;
const BASELINE_STREAM: u64 = 2;

/// Utterances per system: one value for all systems, or one per system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Counts {
    Constant(usize),
    PerSystem(Vec<usize>),
}

impl Counts {
    pub fn get(&self, system: usize) -> usize {
        match self {
            Counts::Constant(c) => *c,
            Counts::PerSystem(v) => v[system],
        }
    }

    fn render(&self) -> String {
        match self {
            Counts::Constant(c) => c.to_string(),
            Counts::PerSystem(v) => join_list(v),
        }
    }

    fn read(kv: &KeyValues, key: &str) -> Result<Option<Counts>> {
        Ok(kv.get_list::<usize>(key)?.map(|v| {
            if v.len() == 1 {
                Counts::Constant(v[0])
            } else {
                Counts::PerSystem(v)
            }
        }))
    }

    fn check(&self, key: &str, n_systems: usize, allow_zero: bool) -> Result<()> {
        if let Counts::PerSystem(v) = self {
            if v.len() != n_systems {
                return Err(Error::Config(format!(
                    "field `{key}`: {} counts for {n_systems} systems",
                    v.len()
                )));
            }
        }
        if !allow_zero && (0..n_systems).any(|s| self.get(s) == 0) {
            return Err(Error::Config(format!("field `{key}`: counts must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_systems: usize,
    pub utterances_per_system: Counts,
    pub n_rater_groups: usize,
    pub raters_per_group: usize,
    pub system_mean_range: (f64, f64),
    pub sigma_utterance: f64,
    pub sigma_group_bias: f64,
    pub sigma_rater_noise: f64,
    pub embed_dim: usize,
    pub frames_range: (usize, usize),
    pub embedding_noise: f64,
    /// Noise of the synthetic external predictor written to `baseline_mos.csv`.
    pub baseline_noise: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_systems: 40,
            utterances_per_system: Counts::Constant(25),
            n_rater_groups: 8,
            raters_per_group: 8,
            system_mean_range: (1.5, 4.5),
            sigma_utterance: 0.4,
            sigma_group_bias: 0.3,
            sigma_rater_noise: 0.5,
            embed_dim: 32,
            frames_range: (8, 24),
            embedding_noise: 0.1,
            baseline_noise: 0.3,
            seed: 0,
        }
    }
}

const SIM_KEYS: [&str; 13] = [
    "n_systems",
    "utterances_per_system",
    "n_rater_groups",
    "raters_per_group",
    "system_mean_range",
    "sigma_utterance",
    "sigma_group_bias",
    "sigma_rater_noise",
    "embed_dim",
    "frames_range",
    "embedding_noise",
    "baseline_noise",
    "seed",
];

fn read_pair<T: std::str::FromStr + Copy>(kv: &KeyValues, key: &str) -> Result<Option<(T, T)>> {
    match kv.get_list::<T>(key)? {
        None => Ok(None),
        Some(v) if v.len() == 2 => Ok(Some((v[0], v[1]))),
        Some(_) => Err(Error::Config(format!("field `{key}` needs two values `lo, hi`"))),
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_systems == 0 || self.n_rater_groups == 0 || self.raters_per_group == 0 {
            return bad("n_systems, n_rater_groups and raters_per_group must be positive".into());
        }
        self.utterances_per_system
            .check("utterances_per_system", self.n_systems, false)?;
        let (lo, hi) = self.system_mean_range;
        if !(1.0..=5.0).contains(&lo) || !(1.0..=5.0).contains(&hi) || lo > hi {
            return bad(format!("field `system_mean_range`: [{lo}, {hi}] must be ordered within [1, 5]"));
        }
        for (name, v) in [
            ("sigma_utterance", self.sigma_utterance),
            ("sigma_group_bias", self.sigma_group_bias),
            ("sigma_rater_noise", self.sigma_rater_noise),
            ("embedding_noise", self.embedding_noise),
            ("baseline_noise", self.baseline_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("field `{name}`: {v} must be a finite value >= 0"));
            }
        }
        if self.embed_dim == 0 {
            return bad("field `embed_dim` must be positive".into());
        }
        let (fmin, fmax) = self.frames_range;
        if fmin == 0 || fmin > fmax {
            return bad(format!("field `frames_range`: [{fmin}, {fmax}] must be ordered and positive"));
        }
        Ok(())
    }

    /// Overrides defaults with any simulator keys present in `kv`.
    pub fn from_kv(kv: &KeyValues) -> Result<SimConfig> {
        let d = SimConfig::default();
        let c = SimConfig {
            n_systems: kv.get("n_systems")?.unwrap_or(d.n_systems),
            utterances_per_system: Counts::read(kv, "utterances_per_system")?
                .unwrap_or(d.utterances_per_system),
            n_rater_groups: kv.get("n_rater_groups")?.unwrap_or(d.n_rater_groups),
            raters_per_group: kv.get("raters_per_group")?.unwrap_or(d.raters_per_group),
            system_mean_range: read_pair(kv, "system_mean_range")?.unwrap_or(d.system_mean_range),
            sigma_utterance: kv.get("sigma_utterance")?.unwrap_or(d.sigma_utterance),
            sigma_group_bias: kv.get("sigma_group_bias")?.unwrap_or(d.sigma_group_bias),
            sigma_rater_noise: kv.get("sigma_rater_noise")?.unwrap_or(d.sigma_rater_noise),
            embed_dim: kv.get("embed_dim")?.unwrap_or(d.embed_dim),
            frames_range: read_pair(kv, "frames_range")?.unwrap_or(d.frames_range),
            embedding_noise: kv.get("embedding_noise")?.unwrap_or(d.embedding_noise),
            baseline_noise: kv.get("baseline_noise")?.unwrap_or(d.baseline_noise),
            seed: kv.get("seed")?.unwrap_or(d.seed),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn write_to(&self, kv: &mut KeyValues) {
        kv.set("n_systems", self.n_systems);
        kv.set("utterances_per_system", self.utterances_per_system.render());
        kv.set("n_rater_groups", self.n_rater_groups);
        kv.set("raters_per_group", self.raters_per_group);
        kv.set(
            "system_mean_range",
            format!("{:?},{:?}", self.system_mean_range.0, self.system_mean_range.1),
        );
        kv.set("sigma_utterance", format!("{:?}", self.sigma_utterance));
        kv.set("sigma_group_bias", format!("{:?}", self.sigma_group_bias));
        kv.set("sigma_rater_noise", format!("{:?}", self.sigma_rater_noise));
        kv.set("embed_dim", self.embed_dim);
        kv.set("frames_range", format!("{},{}", self.frames_range.0, self.frames_range.1));
        kv.set("embedding_noise", format!("{:?}", self.embedding_noise));
        kv.set("baseline_noise", format!("{:?}", self.baseline_noise));
        kv.set("seed", self.seed);
    }

    pub fn total_utterances(&self) -> usize {
        (0..self.n_systems).map(|s| self.utterances_per_system.get(s)).sum()
    }
}

fn id_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

pub fn system_id(s: usize, n_systems: usize) -> String {
    format!("sys{s:0w$}", w = id_width(n_systems))
}

pub fn group_id(g: usize, n_groups: usize) -> String {
    format!("grp{g:0w$}", w = id_width(n_groups))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub system_mu: BTreeMap<String, f64>,
    pub group_bias: BTreeMap<String, f64>,
    pub utterance_offset: BTreeMap<String, f64>,
}

impl GroundTruth {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (header, map) in [
            ("system_id,mu", &self.system_mu),
            ("group_id,bias", &self.group_bias),
            ("utterance_id,offset", &self.utterance_offset),
        ] {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(header);
            out.push('\n');
            for (k, v) in map {
                let _ = writeln!(out, "{k},{v:?}");
            }
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<GroundTruth> {
        let mut gt = GroundTruth::default();
        let mut section: Option<&mut BTreeMap<String, f64>> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            let perr = |m: String| Error::Parse { origin: "ground_truth.csv".into(), line: i as u64 + 1, message: m };
            match line {
                "" => section = None,
                "system_id,mu" => section = Some(&mut gt.system_mu),
                "group_id,bias" => section = Some(&mut gt.group_bias),
                "utterance_id,offset" => section = Some(&mut gt.utterance_offset),
                row => {
                    let map = section.as_mut().ok_or_else(|| perr(format!("row outside a section: `{row}`")))?;
                    let (k, v) = row.split_once(',').ok_or_else(|| perr(format!("expected `id,value`: `{row}`")))?;
                    let v: f64 = v.parse().map_err(|_| perr(format!("bad number `{v}`")))?;
                    map.insert(k.to_string(), v);
                }
            }
        }
        Ok(gt)
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    /// Every rating, tagged `custom`.
    pub table: RatingTable,
    pub truth: GroundTruth,
    /// Utterance id -> frames, for every utterance.
    pub embeddings: BTreeMap<String, Frames>,
    /// Utterance id -> noisy external prediction of the utterance's latent quality.
    pub baseline: BTreeMap<String, f64>,
}

impl SimulatedDataset {
    /// Utterance examples of `table` with frames and baseline attached.
    pub fn examples(&self, table: &RatingTable) -> Vec<Example> {
        compute_utterance_mos(table)
            .into_iter()
            .map(|record| Example {
                frames: self.embeddings.get(&record.utterance_id).cloned(),
                baseline: self.baseline.get(&record.utterance_id).copied(),
                record,
            })
            .collect()
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    sigma * rng.sample::<f64, _>(StandardNormal)
}

/// clamp(round(x), 1, 5) with round-half-away-from-zero.
pub fn discretize(x: f64) -> u8 {
    x.round().clamp(1.0, 5.0) as u8
}

/// Random unit vector.
pub fn unit_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng, 1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Frames `q * direction + N(0, noise)` with `q = mu_s + u_i`.
pub fn simulate_embeddings<R: Rng + ?Sized>(
    mu_s: f64,
    u_i: f64,
    direction: &[f64],
    n_frames: usize,
    noise: f64,
    rng: &mut R,
) -> Result<Frames> {
    if direction.is_empty() || n_frames == 0 {
        return Err(Error::Config("embedding dims must be positive".into()));
    }
    let q = mu_s + u_i;
    let mut data = Vec::with_capacity(n_frames * direction.len());
    for _ in 0..n_frames {
        for d in direction {
            data.push(q * d + normal(rng, noise));
        }
    }
    Frames::new(n_frames, direction.len(), data)
}

pub fn simulate_dataset(config: &SimConfig) -> Result<SimulatedDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (lo, hi) = config.system_mean_range;
    let mu: Vec<f64> = (0..config.n_systems)
        .map(|_| lo + (hi - lo) * rng.random::<f64>())
        .collect();
    let bias: Vec<f64> = (0..config.n_rater_groups)
        .map(|_| normal(&mut rng, config.sigma_group_bias))
        .collect();

    let mut emb_rng = ChaCha8Rng::seed_from_u64(config.seed);
    emb_rng.set_stream(EMBEDDING_STREAM);
    let direction = unit_direction(config.embed_dim, &mut emb_rng);
    let mut base_rng = ChaCha8Rng::seed_from_u64(config.seed);
    base_rng.set_stream(BASELINE_STREAM);

    let mut truth = GroundTruth::default();
    let groups: Vec<String> = (0..config.n_rater_groups)
        .map(|g| group_id(g, config.n_rater_groups))
        .collect();
    for (g, b) in groups.iter().zip(&bias) {
        truth.group_bias.insert(g.clone(), *b);
    }

    let max_utts = (0..config.n_systems)
        .map(|s| config.utterances_per_system.get(s))
        .max()
        .unwrap_or(1);
    let mut ratings = Vec::with_capacity(config.total_utterances() * config.raters_per_group);
    let mut embeddings = BTreeMap::new();
    let mut baseline = BTreeMap::new();
    let mut global = 0usize;
    for (s, &mu_s) in mu.iter().enumerate() {
        let sys = system_id(s, config.n_systems);
        truth.system_mu.insert(sys.clone(), mu_s);
        for j in 0..config.utterances_per_system.get(s) {
            let utt = format!("{sys}_u{j:0w$}", w = id_width(max_utts));
            let g = global % config.n_rater_groups;
            global += 1;
            let u_i = normal(&mut rng, config.sigma_utterance);
            for r in 0..config.raters_per_group {
                let e = normal(&mut rng, config.sigma_rater_noise);
                let score = discretize(mu_s + u_i + bias[g] + e);
                ratings.push(Rating::new(&utt, &sys, &groups[g], format!("{}_r{r}", groups[g]), score));
            }
            let n_frames = emb_rng.random_range(config.frames_range.0..=config.frames_range.1);
            embeddings.insert(
                utt.clone(),
                simulate_embeddings(mu_s, u_i, &direction, n_frames, config.embedding_noise, &mut emb_rng)?,
            );
            baseline.insert(utt.clone(), mu_s + u_i + normal(&mut base_rng, config.baseline_noise));
            truth.utterance_offset.insert(utt, u_i);
        }
    }
    Ok(SimulatedDataset {
        table: RatingTable::new(ratings, SplitTag::Custom)?,
        truth,
        embeddings,
        baseline,
    })
}

/// Which utterances go to an evaluation split.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HoldoutSpec {
    /// Per seen system: how many of its seen-group utterances to hold out.
    /// Systems not listed hold out none.
    pub eval_counts: BTreeMap<String, usize>,
    /// Systems moved to eval entirely.
    pub unseen_systems: BTreeSet<String>,
    /// Rater groups whose utterances all move to eval, on top of the counts.
    pub unseen_rater_groups: BTreeSet<String>,
}

/// Splits `table` into (train, eval).
///
/// For each seen system the held-out utterances are the last `c_s`, in
/// utterance-id order, among those rated by seen groups. Every seen system
/// must keep at least one utterance in train.
pub fn make_imbalanced_split(table: &RatingTable, spec: &HoldoutSpec) -> Result<(RatingTable, RatingTable)> {
    let mut by_system: BTreeMap<&str, BTreeMap<&str, &str>> = BTreeMap::new();
    for r in table.ratings() {
        by_system
            .entry(&r.system_id)
            .or_default()
            .entry(&r.utterance_id)
            .or_insert(&r.rater_group_id);
    }
    for name in spec.eval_counts.keys().chain(&spec.unseen_systems) {
        if !by_system.contains_key(name.as_str()) {
            return Err(Error::Validation(format!("holdout spec names unknown system `{name}`")));
        }
    }
    let mut eval: BTreeSet<&str> = BTreeSet::new();
    for (sys, utts) in &by_system {
        if spec.unseen_systems.contains(*sys) {
            eval.extend(utts.keys());
            continue;
        }
        let seen: Vec<&str> = utts
            .iter()
            .filter(|(_, g)| !spec.unseen_rater_groups.contains(**g))
            .map(|(u, _)| *u)
            .collect();
        let c = spec.eval_counts.get(*sys).copied().unwrap_or(0);
        if c >= seen.len() {
            return Err(Error::Validation(format!(
                "system `{sys}`: holding out {c} of {} seen-group utterances leaves none for training",
                seen.len()
            )));
        }
        eval.extend(&seen[seen.len() - c..]);
        eval.extend(
            utts.iter()
                .filter(|(_, g)| spec.unseen_rater_groups.contains(**g))
                .map(|(u, _)| *u),
        );
    }
    if eval.is_empty() {
        return Err(Error::Validation("holdout spec selects no evaluation utterances".into()));
    }
    let train = table.retain_utterances(|u| !eval.contains(u)).with_split(SplitTag::Train);
    let test = table.retain_utterances(|u| eval.contains(u)).with_split(SplitTag::Test);
    Ok((train, test))
}

/// Train / validation / test layout of a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub test_per_system: Counts,
    pub validation_per_system: Counts,
    /// The last `k` systems are test-only.
    pub unseen_systems: usize,
    /// The last `k` rater groups only rate test utterances.
    pub unseen_rater_groups: usize,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            test_per_system: Counts::Constant(5),
            validation_per_system: Counts::Constant(0),
            unseen_systems: 0,
            unseen_rater_groups: 0,
        }
    }
}

const SPLIT_KEYS: [&str; 4] = [
    "test_per_system",
    "validation_per_system",
    "unseen_systems",
    "unseen_rater_groups",
];

pub fn known_keys() -> Vec<&'static str> {
    SIM_KEYS.iter().chain(SPLIT_KEYS.iter()).copied().collect()
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: RatingTable,
    pub validation: Option<RatingTable>,
    pub test: Option<RatingTable>,
}

impl SplitPlan {
    pub fn from_kv(kv: &KeyValues, sim: &SimConfig) -> Result<SplitPlan> {
        let d = SplitPlan::default();
        let p = SplitPlan {
            test_per_system: Counts::read(kv, "test_per_system")?.unwrap_or(d.test_per_system),
            validation_per_system: Counts::read(kv, "validation_per_system")?
                .unwrap_or(d.validation_per_system),
            unseen_systems: kv.get("unseen_systems")?.unwrap_or(d.unseen_systems),
            unseen_rater_groups: kv.get("unseen_rater_groups")?.unwrap_or(d.unseen_rater_groups),
        };
        p.validate(sim)?;
        Ok(p)
    }

    pub fn validate(&self, sim: &SimConfig) -> Result<()> {
        self.test_per_system.check("test_per_system", sim.n_systems, true)?;
        self.validation_per_system
            .check("validation_per_system", sim.n_systems, true)?;
        if self.unseen_systems >= sim.n_systems {
            return Err(Error::Config("field `unseen_systems`: at least one system must be seen".into()));
        }
        if self.unseen_rater_groups >= sim.n_rater_groups {
            return Err(Error::Config(
                "field `unseen_rater_groups`: at least one group must be seen".into(),
            ));
        }
        Ok(())
    }

    pub fn write_to(&self, kv: &mut KeyValues) {
        kv.set("test_per_system", self.test_per_system.render());
        kv.set("validation_per_system", self.validation_per_system.render());
        kv.set("unseen_systems", self.unseen_systems);
        kv.set("unseen_rater_groups", self.unseen_rater_groups);
    }

    fn holdout(&self, counts: &Counts, sim: &SimConfig, with_unseen: bool) -> HoldoutSpec {
        let first_unseen = sim.n_systems - self.unseen_systems;
        let mut spec = HoldoutSpec::default();
        for s in 0..first_unseen {
            if counts.get(s) > 0 {
                spec.eval_counts.insert(system_id(s, sim.n_systems), counts.get(s));
            }
        }
        if with_unseen {
            spec.unseen_systems = (first_unseen..sim.n_systems)
                .map(|s| system_id(s, sim.n_systems))
                .collect();
            spec.unseen_rater_groups = (sim.n_rater_groups - self.unseen_rater_groups..sim.n_rater_groups)
                .map(|g| group_id(g, sim.n_rater_groups))
                .collect();
        }
        spec
    }

    pub fn apply(&self, table: &RatingTable, sim: &SimConfig) -> Result<Splits> {
        self.validate(sim)?;
        let test_spec = self.holdout(&self.test_per_system, sim, true);
        let (train, test) = if test_spec == HoldoutSpec::default() {
            (table.clone().with_split(SplitTag::Train), None)
        } else {
            let (tr, te) = make_imbalanced_split(table, &test_spec)?;
            (tr, Some(te))
        };
        let val_spec = self.holdout(&self.validation_per_system, sim, false);
        let (train, validation) = if val_spec == HoldoutSpec::default() {
            (train, None)
        } else {
            let (tr, va) = make_imbalanced_split(&train, &val_spec)?;
            (tr, Some(va.with_split(SplitTag::Validation)))
        };
        Ok(Splits { train, validation, test })
    }
}

/// Writes `ground_truth.csv` into `dir`.
pub fn save_ground_truth(truth: &GroundTruth, dir: impl AsRef<Path>) -> Result<()> {
    let path = dir.as_ref().join("ground_truth.csv");
    std::fs::write(&path, truth.to_csv()).map_err(|e| Error::io(&path, e))
}
