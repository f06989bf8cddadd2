//! Anomaly taxonomies, stage-labelled test samples and one-hot ground truth.
//!
//! A taxonomy fixes the order of anomaly names for a dataset; that order
//! defines the positions of every [`OneHotVector`] built against it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("taxonomy for dataset `{0}` lists no anomalies")]
    EmptyTaxonomy(String),
    #[error("taxonomy lists `{0}` more than once")]
    DuplicateAnomaly(String),
    #[error("taxonomy contains an empty anomaly name")]
    EmptyAnomalyName,
    #[error("sample `{sample_id}` is annotated with unknown anomaly `{label}`")]
    UnknownLabel { sample_id: String, label: String },
    #[error("anomaly `{0}` is not part of the taxonomy")]
    UnknownAnomaly(String),
    #[error("sample `{sample_id}` has no {stage} image")]
    MissingStage { sample_id: String, stage: Stage },
    #[error("sample `{0}` appears more than once")]
    DuplicateSample(String),
    #[error("one-hot vector has {actual} bits but the taxonomy has {expected} anomalies")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("one-hot bit {0} is not 0 or 1")]
    InvalidBit(u8),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DatasetError::MissingFile(path.to_path_buf())
        } else {
            DatasetError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

/// Ordered, unique anomaly names for one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyFile", into = "TaxonomyFile")]
pub struct AnomalyTaxonomy {
    dataset_id: String,
    anomalies: Vec<String>,
}

/// On-disk dataset config: `{"dataset_id": str, "anomalies": [str]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyFile {
    dataset_id: String,
    anomalies: Vec<String>,
}

impl TryFrom<TaxonomyFile> for AnomalyTaxonomy {
    type Error = DatasetError;

    fn try_from(file: TaxonomyFile) -> Result<Self> {
        AnomalyTaxonomy::new(file.dataset_id, file.anomalies)
    }
}

impl From<AnomalyTaxonomy> for TaxonomyFile {
    fn from(t: AnomalyTaxonomy) -> Self {
        TaxonomyFile {
            dataset_id: t.dataset_id,
            anomalies: t.anomalies,
        }
    }
}

impl AnomalyTaxonomy {
    pub fn new(dataset_id: impl Into<String>, anomalies: Vec<String>) -> Result<Self> {
        let dataset_id = dataset_id.into();
        if anomalies.is_empty() {
            return Err(DatasetError::EmptyTaxonomy(dataset_id));
        }
        let mut seen = HashSet::new();
        for name in &anomalies {
            if name.trim().is_empty() {
                return Err(DatasetError::EmptyAnomalyName);
            }
            if !seen.insert(name.to_lowercase()) {
                return Err(DatasetError::DuplicateAnomaly(name.clone()));
            }
        }
        Ok(Self {
            dataset_id,
            anomalies,
        })
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn anomalies(&self) -> &[String] {
        &self.anomalies
    }

    pub fn len(&self) -> usize {
        self.anomalies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anomalies.is_empty()
    }

    /// Position of `name`, compared case-insensitively.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        let wanted = name.trim().to_lowercase();
        self.anomalies
            .iter()
            .position(|a| a.to_lowercase() == wanted)
    }

    /// Canonical spelling of `name` as written in the taxonomy.
    pub fn canonical(&self, name: &str) -> Option<&str> {
        self.index_of(name).map(|i| self.anomalies[i].as_str())
    }
}

/// Reads a dataset config file; anomaly order follows the file.
pub fn load_taxonomy(config_path: impl AsRef<Path>) -> Result<AnomalyTaxonomy> {
    let path = config_path.as_ref();
    let bytes = read_file(path)?;
    let file: TaxonomyFile = serde_json::from_slice(&bytes).map_err(|source| DatasetError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    AnomalyTaxonomy::try_from(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PostMelting,
    PostSpreading,
}

impl Stage {
    pub const ALL: [Stage; 2] = [Stage::PostMelting, Stage::PostSpreading];

    /// Fixed wording used inside prompts.
    pub fn description(self) -> &'static str {
        match self {
            Stage::PostMelting => "image captured post-melting",
            Stage::PostSpreading => "image captured after powder spreading",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::PostMelting => "post_melting",
            Stage::PostSpreading => "post_spreading",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageImage {
    pub stage: Stage,
    pub image_ref: PathBuf,
    pub stage_description: String,
}

impl StageImage {
    pub fn new(stage: Stage, image_ref: impl Into<PathBuf>) -> Self {
        Self {
            stage,
            image_ref: image_ref.into(),
            stage_description: stage.description().to_string(),
        }
    }
}

/// One build layer: a post-melting and a post-spreading image plus its annotated anomalies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSample {
    pub sample_id: String,
    pub dataset_id: String,
    /// Always `[post_melting, post_spreading]`.
    pub images: Vec<StageImage>,
    pub ground_truth: BTreeSet<String>,
}

impl TestSample {
    pub fn image(&self, stage: Stage) -> Option<&StageImage> {
        self.images.iter().find(|i| i.stage == stage)
    }
}

/// Ordered 0/1 vector aligned with a taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawOneHot")]
pub struct OneHotVector {
    dataset_id: String,
    bits: Vec<u8>,
}

#[derive(Deserialize)]
struct RawOneHot {
    dataset_id: String,
    bits: Vec<u8>,
}

impl TryFrom<RawOneHot> for OneHotVector {
    type Error = DatasetError;

    fn try_from(raw: RawOneHot) -> Result<Self> {
        OneHotVector::from_bits(raw.dataset_id, raw.bits)
    }
}

impl OneHotVector {
    pub fn from_bits(dataset_id: impl Into<String>, bits: Vec<u8>) -> Result<Self> {
        if let Some(&bad) = bits.iter().find(|&&b| b > 1) {
            return Err(DatasetError::InvalidBit(bad));
        }
        Ok(Self {
            dataset_id: dataset_id.into(),
            bits,
        })
    }

    pub fn zeros(taxonomy: &AnomalyTaxonomy) -> Self {
        Self {
            dataset_id: taxonomy.dataset_id.clone(),
            bits: vec![0; taxonomy.len()],
        }
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Names at the set positions.
    pub fn decode(&self, taxonomy: &AnomalyTaxonomy) -> Result<BTreeSet<String>> {
        if self.bits.len() != taxonomy.len() {
            return Err(DatasetError::LengthMismatch {
                expected: taxonomy.len(),
                actual: self.bits.len(),
            });
        }
        Ok(self
            .bits
            .iter()
            .zip(taxonomy.anomalies())
            .filter(|(&b, _)| b == 1)
            .map(|(_, name)| name.clone())
            .collect())
    }
}

impl fmt::Display for OneHotVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, b) in self.bits.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{b}")?;
        }
        f.write_str("]")
    }
}

pub fn encode_one_hot<'a, I>(truth: I, taxonomy: &AnomalyTaxonomy) -> Result<OneHotVector>
where
    I: IntoIterator<Item = &'a String>,
{
    let mut out = OneHotVector::zeros(taxonomy);
    for name in truth {
        let i = taxonomy
            .index_of(name)
            .ok_or_else(|| DatasetError::UnknownAnomaly(name.clone()))?;
        out.bits[i] = 1;
    }
    Ok(out)
}

/// One annotation record before it is validated against a taxonomy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawAnnotation {
    pub sample_id: String,
    pub images: BTreeMap<Stage, PathBuf>,
    pub anomalies: Vec<String>,
}

/// Converts an annotation file in some external schema into [`RawAnnotation`]s.
pub trait AnnotationAdapter {
    fn read(&self, path: &Path) -> Result<Vec<RawAnnotation>>;
}

/// The native schema:
/// `[{"sample_id": str, "images": {"post_melting": path, "post_spreading": path}, "anomalies": [str]}]`.
///
/// Relative image paths resolve against the annotation file's directory.
#[derive(Debug, Default, Clone, Copy)]
pub struct JsonAnnotations;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonAnnotationRecord {
    sample_id: String,
    images: JsonStageImages,
    #[serde(default)]
    anomalies: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonStageImages {
    post_melting: Option<PathBuf>,
    post_spreading: Option<PathBuf>,
}

impl AnnotationAdapter for JsonAnnotations {
    fn read(&self, path: &Path) -> Result<Vec<RawAnnotation>> {
        let bytes = read_file(path)?;
        let records: Vec<JsonAnnotationRecord> =
            serde_json::from_slice(&bytes).map_err(|source| DatasetError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        Ok(records
            .into_iter()
            .map(|r| {
                let mut images = BTreeMap::new();
                for (stage, p) in [
                    (Stage::PostMelting, r.images.post_melting),
                    (Stage::PostSpreading, r.images.post_spreading),
                ] {
                    if let Some(p) = p {
                        images.insert(stage, base.join(p));
                    }
                }
                RawAnnotation {
                    sample_id: r.sample_id,
                    images,
                    anomalies: r.anomalies,
                }
            })
            .collect())
    }
}

fn validate_labels(
    record: &RawAnnotation,
    taxonomy: &AnomalyTaxonomy,
) -> Result<BTreeSet<String>> {
    record
        .anomalies
        .iter()
        .map(|label| {
            taxonomy
                .canonical(label)
                .map(str::to_string)
                .ok_or_else(|| DatasetError::UnknownLabel {
                    sample_id: record.sample_id.clone(),
                    label: label.clone(),
                })
        })
        .collect()
}

/// Full test samples, in file order, using the native JSON schema.
pub fn load_samples(
    annotations_path: impl AsRef<Path>,
    taxonomy: &AnomalyTaxonomy,
) -> Result<Vec<TestSample>> {
    load_samples_with(&JsonAnnotations, annotations_path.as_ref(), taxonomy)
}

pub fn load_samples_with(
    adapter: &dyn AnnotationAdapter,
    annotations_path: &Path,
    taxonomy: &AnomalyTaxonomy,
) -> Result<Vec<TestSample>> {
    let records = adapter.read(annotations_path)?;
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(records.len());
    for record in records {
        if !seen.insert(record.sample_id.clone()) {
            return Err(DatasetError::DuplicateSample(record.sample_id));
        }
        let ground_truth = validate_labels(&record, taxonomy)?;
        let mut images = Vec::with_capacity(2);
        for stage in Stage::ALL {
            let path = record
                .images
                .get(&stage)
                .ok_or_else(|| DatasetError::MissingStage {
                    sample_id: record.sample_id.clone(),
                    stage,
                })?;
            images.push(StageImage::new(stage, path.clone()));
        }
        samples.push(TestSample {
            sample_id: record.sample_id,
            dataset_id: taxonomy.dataset_id().to_string(),
            images,
            ground_truth,
        });
    }
    Ok(samples)
}

/// Sample id to annotated anomaly names; unannotated samples map to the empty set.
pub fn load_ground_truth(
    annotations_path: impl AsRef<Path>,
    taxonomy: &AnomalyTaxonomy,
) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let records = JsonAnnotations.read(annotations_path.as_ref())?;
    let mut out = BTreeMap::new();
    for record in &records {
        let truth = validate_labels(record, taxonomy)?;
        if out.insert(record.sample_id.clone(), truth).is_some() {
            return Err(DatasetError::DuplicateSample(record.sample_id.clone()));
        }
    }
    Ok(out)
}
