//! Mixture manifests and exact-count sampling of the SFT training mixture.
//!
//! Ratios are held as hundredths of a percent so the sum-to-100 check and the
//! per-source apportionment are exact integer arithmetic.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::chat::{ChatError, Conversation};
use crate::jsonl::{self, JsonlError};
use crate::seed;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("mixture ratios sum to {0}%, expected 100.00%")]
    RatioSumError(Ratio),
    #[error("duplicate source name {0:?}")]
    DuplicateSource(String),
    #[error("source {name:?}: file {path} does not exist")]
    MissingFile { name: String, path: PathBuf },
    #[error("source {name:?}: ratio {ratio}% must be in (0, 100]")]
    InvalidRatio { name: String, ratio: Ratio },
    #[error("source {0:?} has no records")]
    EmptySource(String),
    #[error("total {total} is smaller than the number of sources ({sources})")]
    TotalTooSmall { total: usize, sources: usize },
    #[error("source {source_name:?} record {line}: {error}")]
    InvalidRecord { source_name: String, line: usize, error: ChatError },
    #[error("manifest {path}: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("manifest {path}: {source}")]
    ManifestIo { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// A percentage with two fixed decimals, stored as hundredths of a percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Ratio(u32);

impl Ratio {
    pub const HUNDRED: Ratio = Ratio(10_000);

    pub fn from_hundredths(h: u32) -> Self {
        Ratio(h)
    }

    pub fn hundredths(self) -> u32 {
        self.0
    }

    pub fn as_percent(self) -> f64 {
        f64::from(self.0) / 100.0
    }

    /// Parses a decimal percentage; more than two decimals is rejected.
    pub fn from_percent(pct: f64) -> Option<Self> {
        let scaled = pct * 100.0;
        let rounded = scaled.round();
        if !scaled.is_finite() || (scaled - rounded).abs() > 1e-6 || rounded < 0.0 || rounded > u32::MAX as f64 {
            return None;
        }
        Some(Ratio(rounded as u32))
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_percent())
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let pct = f64::deserialize(d)?;
        Ratio::from_percent(pct)
            .ok_or_else(|| serde::de::Error::custom(format!("ratio {pct} is not a two-decimal percentage")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Medical,
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub name: String,
    pub path: PathBuf,
    pub domain: Domain,
    pub ratio_pct: Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureManifest {
    pub seed: u64,
    pub sources: Vec<SourceSpec>,
}

impl MixtureManifest {
    /// Checks the ratio and naming invariants (not file existence).
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut names = HashSet::new();
        for s in &self.sources {
            if !names.insert(s.name.as_str()) {
                return Err(CorpusError::DuplicateSource(s.name.clone()));
            }
            if s.ratio_pct.0 == 0 || s.ratio_pct > Ratio::HUNDRED {
                return Err(CorpusError::InvalidRatio { name: s.name.clone(), ratio: s.ratio_pct });
            }
        }
        let sum: u32 = self.sources.iter().map(|s| s.ratio_pct.0).sum();
        if sum != Ratio::HUNDRED.0 {
            return Err(CorpusError::RatioSumError(Ratio(sum)));
        }
        Ok(())
    }

    pub fn domain_ratio(&self, domain: Domain) -> Ratio {
        Ratio(self.sources.iter().filter(|s| s.domain == domain).map(|s| s.ratio_pct.0).sum())
    }
}

/// Loads and validates a manifest. Relative source paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<MixtureManifest, CorpusError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| CorpusError::ManifestIo { path: path.to_path_buf(), source })?;
    let mut manifest: MixtureManifest =
        serde_json::from_str(&text).map_err(|source| CorpusError::Manifest { path: path.to_path_buf(), source })?;
    manifest.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    for s in &mut manifest.sources {
        if s.path.is_relative() {
            s.path = base.join(&s.path);
        }
        if !s.path.is_file() {
            return Err(CorpusError::MissingFile { name: s.name.clone(), path: s.path.clone() });
        }
    }
    Ok(manifest)
}

/// Largest-remainder apportionment of `total` records over the sources.
/// Remainder ties go to the source listed first. Counts are in manifest order.
pub fn apportion_counts(manifest: &MixtureManifest, total: usize) -> Result<Vec<(String, usize)>, CorpusError> {
    let n = manifest.sources.len();
    if total < n {
        return Err(CorpusError::TotalTooSmall { total, sources: n });
    }
    let denom = u128::from(Ratio::HUNDRED.0);
    let mut counts = Vec::with_capacity(n);
    let mut remainders = Vec::with_capacity(n);
    for (i, s) in manifest.sources.iter().enumerate() {
        let quota = u128::from(s.ratio_pct.0) * total as u128;
        counts.push((quota / denom) as usize);
        remainders.push((quota % denom, i));
    }
    // Ratios sum to 100%, so fewer than `n` records remain after the floors.
    let leftover = total - counts.iter().sum::<usize>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(leftover) {
        counts[i] += 1;
    }
    Ok(manifest.sources.iter().map(|s| s.name.clone()).zip(counts).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    #[serde(rename = "messages")]
    pub conversation: Conversation,
    #[serde(default)]
    pub source: String,
}

/// How many records a source contributed and whether its file had to be
/// reused to reach the apportioned count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDraw {
    pub name: String,
    pub domain: Domain,
    pub requested: usize,
    pub available: usize,
    pub with_replacement: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub records: Vec<SftRecord>,
    pub draws: Vec<SourceDraw>,
}

impl Mixture {
    pub fn domain_count(&self, manifest: &MixtureManifest, domain: Domain) -> usize {
        let names: HashSet<&str> =
            manifest.sources.iter().filter(|s| s.domain == domain).map(|s| s.name.as_str()).collect();
        self.records.iter().filter(|r| names.contains(r.source.as_str())).count()
    }
}

pub fn load_source(spec: &SourceSpec) -> Result<Vec<SftRecord>, CorpusError> {
    let mut records: Vec<SftRecord> = jsonl::read(&spec.path)?;
    for (i, r) in records.iter_mut().enumerate() {
        r.conversation.validate().map_err(|error| CorpusError::InvalidRecord {
            source_name: spec.name.clone(),
            line: i + 1,
            error,
        })?;
        // Records are attributed to the manifest source they were drawn from.
        r.source = spec.name.clone();
    }
    Ok(records)
}

fn draw(records: &[SftRecord], count: usize, stream_seed: u64) -> Vec<SftRecord> {
    let mut rng = seed::rng(stream_seed);
    let n = records.len();
    let mut out = Vec::with_capacity(count);
    // Whole passes first, then a without-replacement draw for the rest.
    for _ in 0..count / n {
        out.extend_from_slice(records);
    }
    let mut picks = index::sample(&mut rng, n, count % n).into_vec();
    picks.sort_unstable();
    out.extend(picks.into_iter().map(|i| records[i].clone()));
    out
}

/// Materializes the mixture: exact apportioned counts per source, then one
/// seeded shuffle over the collected list.
pub fn sample_mixture(manifest: &MixtureManifest, total: usize) -> Result<Mixture, CorpusError> {
    let counts = apportion_counts(manifest, total)?;
    let loaded: Vec<Vec<SftRecord>> = manifest.sources.par_iter().map(load_source).collect::<Result<_, _>>()?;

    let mut records = Vec::with_capacity(total);
    let mut draws = Vec::with_capacity(manifest.sources.len());
    for (i, ((spec, pool), (_, count))) in manifest.sources.iter().zip(&loaded).zip(&counts).enumerate() {
        if pool.is_empty() {
            if *count > 0 {
                return Err(CorpusError::EmptySource(spec.name.clone()));
            }
        } else {
            records.extend(draw(pool, *count, seed::derive(manifest.seed, &[1, i as u64])));
        }
        draws.push(SourceDraw {
            name: spec.name.clone(),
            domain: spec.domain,
            requested: *count,
            available: pool.len(),
            with_replacement: *count > pool.len(),
        });
    }
    records.shuffle(&mut seed::rng(seed::derive(manifest.seed, &[2])));
    Ok(Mixture { records, draws })
}

/// Published fine-tuning mixture ratios of the clinical models. The listed
/// medical rows sum to 42.24%, short of the stated 73.50% medical total; the
/// difference is carried by an explicit `medical-unlisted-remainder` source.
pub const REFERENCE_MIXTURE: &[(&str, Domain, u32)] = &[
    ("MedMCQA", Domain::Medical, 1392),
    ("Medical Flashcards", Domain::Medical, 232),
    ("StackExchange", Domain::Medical, 496),
    ("MedQA (USMLE)", Domain::Medical, 87),
    ("CORD-19", Domain::Medical, 137),
    ("PubMedQA", Domain::Medical, 4),
    ("HeadQA", Domain::Medical, 20),
    ("MediQA", Domain::Medical, 15),
    ("SciQ", Domain::Medical, 90),
    ("PubMed Causal", Domain::Medical, 17),
    ("OpenGPT", Domain::Medical, 509),
    ("MedQUAD", Domain::Medical, 112),
    ("MMLU", Domain::Medical, 2),
    ("Niv2", Domain::Medical, 88),
    ("Pubhealth", Domain::Medical, 76),
    ("Medical-Instruction", Domain::Medical, 926),
    ("ACI-Bench", Domain::Medical, 1),
    ("MTS-Dialog", Domain::Medical, 20),
    ("medical-unlisted-remainder", Domain::Medical, 3126),
    ("SlimOrca T0", Domain::General, 843),
    ("SlimOrca Flan", Domain::General, 842),
    ("SlimOrca CoT", Domain::General, 572),
    ("Ultrachat", Domain::General, 393),
];

/// Builds the reference manifest with every source pointing at
/// `dir/<slug>.jsonl`.
pub fn reference_manifest(dir: &Path, seed: u64) -> MixtureManifest {
    let sources = REFERENCE_MIXTURE
        .iter()
        .map(|&(name, domain, h)| {
            let slug: String =
                name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect();
            SourceSpec { name: name.to_string(), path: dir.join(format!("{slug}.jsonl")), domain, ratio_pct: Ratio(h) }
        })
        .collect();
    MixtureManifest { seed, sources }
}
