//! Bone-class curation: label aggregation, eligibility, balanced splits and
//! JSON-lines manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nifti::{self, Datatype, NiftiError};
use crate::volume::{Axis, Volume, VolumeKind};

pub const BONE_RULES: &str = include_str!("../data/bone_rules.json");

pub const MANIFEST_SCHEMA: u32 = 1;

/// Eligible masks cover strictly more axial slices than this.
pub const MIN_AXIAL_SLICES: usize = 6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("label `{label}` has dims {actual:?}, expected {expected:?}")]
    DimMismatch {
        label: String,
        expected: [usize; 3],
        actual: [usize; 3],
    },
    #[error("label `{0}` appears in more than one rule")]
    OverlappingRules(String),
    #[error("class `{class}` has {available} eligible candidates, {needed} needed")]
    InsufficientCandidates { class: String, available: usize, needed: usize },
    #[error("manifest {0} not found")]
    ManifestMissing(PathBuf),
    #[error("manifest line {line}: {detail}")]
    ManifestInvalid { line: usize, detail: String },
    #[error("rule table: {0}")]
    Rules(#[from] serde_json::Error),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Identity,
    BilateralUnion,
    SerialUnion,
    SerialBilateral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationRule {
    pub target_class: String,
    pub kind: RuleKind,
    pub constituent_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleTable {
    pub schema: u32,
    pub dataset: String,
    /// Scans in the source dataset, each annotated with every label.
    pub scans: usize,
    pub rules: Vec<AggregationRule>,
}

impl RuleTable {
    pub fn builtin() -> Self {
        Self::parse(BONE_RULES).expect("bundled rule table is valid")
    }

    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let table: RuleTable = serde_json::from_str(text)?;
        let mut seen = BTreeSet::new();
        for label in table.rules.iter().flat_map(|r| &r.constituent_labels) {
            if !seen.insert(label) {
                return Err(DatasetError::OverlappingRules(label.clone()));
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn classes(&self) -> Vec<String> {
        self.rules.iter().map(|r| r.target_class.clone()).collect()
    }

    /// SHA-256 of the table's compact JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("serializable");
        hex::encode(Sha256::digest(bytes))
    }

    /// Raw masks available per class: labels times scans.
    pub fn raw_counts(&self) -> BTreeMap<String, usize> {
        self.rules
            .iter()
            .map(|r| (r.target_class.clone(), r.constituent_labels.len() * self.scans))
            .collect()
    }
}

/// Voxel-wise OR of each rule's present constituents. Classes with no present
/// constituent are omitted.
pub fn aggregate_labels(
    case: &BTreeMap<String, Volume>,
    rules: &[AggregationRule],
) -> Result<BTreeMap<String, Volume>, DatasetError> {
    let mut expected: Option<&Volume> = None;
    for (label, v) in case {
        match expected {
            None => expected = Some(v),
            Some(e) if e.dims() != v.dims() => {
                return Err(DatasetError::DimMismatch {
                    label: label.clone(),
                    expected: e.dims(),
                    actual: v.dims(),
                })
            }
            _ => {}
        }
    }
    let mut out = BTreeMap::new();
    for rule in rules {
        let mut acc: Option<Vec<f32>> = None;
        let mut like = None;
        for label in &rule.constituent_labels {
            let Some(v) = case.get(label) else { continue };
            like = Some(v);
            let acc = acc.get_or_insert_with(|| vec![0.0; v.len()]);
            for (a, &x) in acc.iter_mut().zip(v.data()) {
                if x > 0.0 {
                    *a = 1.0;
                }
            }
        }
        if let (Some(data), Some(like)) = (acc, like) {
            out.insert(
                rule.target_class.clone(),
                like.with_data(VolumeKind::BinaryMask, data).expect("same dims"),
            );
        }
    }
    Ok(out)
}

/// Axial slice statistics used by the eligibility rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AxialCoverage {
    /// Axial slices holding foreground.
    pub nonempty_slices: usize,
    /// `last - first + 1`, or 0 for an empty mask.
    pub extent: usize,
}

pub fn axial_coverage(mask: &Volume) -> AxialCoverage {
    let seq = mask.slices(Axis::Axial);
    let nonempty: Vec<usize> = (0..seq.len())
        .filter(|&t| seq.slice(t).data.iter().any(|&v| v > 0.0))
        .collect();
    AxialCoverage {
        nonempty_slices: nonempty.len(),
        extent: match (nonempty.first(), nonempty.last()) {
            (Some(a), Some(b)) => b - a + 1,
            _ => 0,
        },
    }
}

/// More than six axial slices with foreground.
pub fn eligible(mask: &Volume) -> bool {
    axial_coverage(mask).nonempty_slices > MIN_AXIAL_SLICES
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Ablation500,
    Final2500,
    Custom,
}

impl Split {
    pub fn per_class(self) -> Option<usize> {
        match self {
            Split::Ablation500 => Some(50),
            Split::Final2500 => Some(250),
            Split::Custom => None,
        }
    }

    /// Default seeds differ so the two named splits are drawn independently.
    pub fn default_seed(self) -> u64 {
        match self {
            Split::Ablation500 => 500,
            Split::Final2500 => 2500,
            Split::Custom => 0,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Ablation500 => "ablation500",
            Split::Final2500 => "final2500",
            Split::Custom => "custom",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ablation500" => Ok(Split::Ablation500),
            "final2500" => Ok(Split::Final2500),
            "custom" => Ok(Split::Custom),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One eligible `(case, class)` pair with its files.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub target_class: String,
    pub case_id: String,
    pub volume: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub schema: u32,
    pub split: Split,
    pub seed: u64,
    pub per_class: usize,
    pub rule_table_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: ManifestHeader,
}

fn class_seed(seed: u64, class: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(class.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Draws exactly `per_class` entries per class present in `candidates`,
/// seeded per class so one class's candidates never affect another's draw.
/// Output is sorted by class then case.
pub fn build_split(
    candidates: &[ManifestEntry],
    per_class: usize,
    seed: u64,
    split: Split,
    rule_table_hash: &str,
) -> Result<Manifest, DatasetError> {
    let mut by_class: BTreeMap<&str, BTreeSet<&ManifestEntry>> = BTreeMap::new();
    for c in candidates {
        by_class.entry(&c.target_class).or_default().insert(c);
    }
    let mut entries = Vec::with_capacity(per_class * by_class.len());
    for (class, pool) in &by_class {
        if pool.len() < per_class {
            return Err(DatasetError::InsufficientCandidates {
                class: class.to_string(),
                available: pool.len(),
                needed: per_class,
            });
        }
        let pool: Vec<&ManifestEntry> = pool.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(class_seed(seed, class));
        let mut picked: Vec<usize> = sample(&mut rng, pool.len(), per_class).into_vec();
        picked.sort_unstable();
        entries.extend(picked.into_iter().map(|i| pool[i].clone()));
    }
    Ok(Manifest {
        header: ManifestHeader {
            schema: MANIFEST_SCHEMA,
            split,
            seed,
            per_class,
            rule_table_hash: rule_table_hash.to_string(),
        },
        entries,
    })
}

impl Manifest {
    /// Header record then one entry per line.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut out, &HeaderLine { header: self.header.clone() })?;
        out.write_all(b"\n")?;
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self, DatasetError> {
        let mut lines = input.lines().enumerate().filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
        let invalid = |line: usize, detail: String| DatasetError::ManifestInvalid { line: line + 1, detail };
        let (n, first) = lines.next().ok_or_else(|| invalid(0, "missing header".into()))?;
        let header = serde_json::from_str::<HeaderLine>(&first?)
            .map_err(|e| invalid(n, e.to_string()))?
            .header;
        let mut entries = Vec::new();
        for (n, line) in lines {
            entries.push(serde_json::from_str(&line?).map_err(|e| invalid(n, e.to_string()))?);
        }
        Ok(Self { header, entries })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => DatasetError::ManifestMissing(path.to_path_buf()),
            _ => DatasetError::Io(e),
        })?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }

    pub fn per_class_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.target_class.clone()).or_insert(0) += 1;
        }
        m
    }
}

/// `(case, class)` pairs present in both manifests.
pub fn overlap(a: &Manifest, b: &Manifest) -> Vec<(String, String)> {
    let keys: BTreeSet<(&str, &str)> = a
        .entries
        .iter()
        .map(|e| (e.case_id.as_str(), e.target_class.as_str()))
        .collect();
    b.entries
        .iter()
        .filter(|e| keys.contains(&(e.case_id.as_str(), e.target_class.as_str())))
        .map(|e| (e.case_id.clone(), e.target_class.clone()))
        .collect()
}

/// Outcome of scanning one case for one class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRecord {
    pub case_id: String,
    pub target_class: String,
    pub coverage: AxialCoverage,
    pub eligible: bool,
}

/// Scans a `<root>/<case>/ct.nii.gz` + `<root>/<case>/segmentations/*.nii.gz`
/// tree, writes aggregated class masks under `out/<case>/<class>.nii.gz` and
/// returns eligible candidates with paths relative to `out`.
pub fn scan_dataset(
    root: &Path,
    table: &RuleTable,
    out: &Path,
) -> Result<(Vec<ManifestEntry>, Vec<ScanRecord>), DatasetError> {
    let wanted: BTreeSet<&str> = table
        .rules
        .iter()
        .flat_map(|r| r.constituent_labels.iter().map(String::as_str))
        .collect();
    let mut cases: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("segmentations").is_dir())
        .collect();
    cases.sort();
    let mut candidates = Vec::new();
    let mut records = Vec::new();
    for case_dir in cases {
        let case_id = case_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut labels = BTreeMap::new();
        let mut files: Vec<PathBuf> = std::fs::read_dir(case_dir.join("segmentations"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        files.sort();
        for f in files {
            let name = f.file_name().unwrap_or_default().to_string_lossy();
            let label = name.trim_end_matches(".gz").trim_end_matches(".nii");
            if wanted.contains(label) {
                let v = nifti::load_volume(&f, VolumeKind::BinaryMask)?;
                labels.insert(label.to_string(), v);
            }
        }
        let ct = ["ct.nii.gz", "ct.nii"]
            .iter()
            .map(|n| case_dir.join(n))
            .find(|p| p.exists())
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, format!("{case_id}: no ct.nii(.gz)")))?;
        for (class, mask) in aggregate_labels(&labels, &table.rules)? {
            let coverage = axial_coverage(&mask);
            let ok = coverage.nonempty_slices > MIN_AXIAL_SLICES;
            records.push(ScanRecord {
                case_id: case_id.clone(),
                target_class: class.clone(),
                coverage,
                eligible: ok,
            });
            if !ok {
                continue;
            }
            let rel = format!("{case_id}/{class}.nii.gz");
            std::fs::create_dir_all(out.join(&case_id))?;
            nifti::save_volume(out.join(&rel), &mask, Datatype::UInt8)?;
            candidates.push(ManifestEntry {
                target_class: class,
                case_id: case_id.clone(),
                volume: ct.to_string_lossy().into_owned(),
                mask: rel,
            });
        }
    }
    Ok((candidates, records))
}
