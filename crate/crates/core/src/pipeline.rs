//! Detection, classification and explanation for test samples.
//!
//! Per sample and anomaly, one detection prompt over both stage images is
//! sent `R` times; each answer goes through a classification call that
//! reduces it to a bit. The anomaly is flagged when the mean bit is at least
//! one half. Detected anomalies then get one explanation call.

// Errors keep the gateway error inline so callers can downcast it from the
// source chain; they are cold and rare, so their size does not matter.
#![allow(clippy::result_large_err)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AnomalyTaxonomy, DatasetError, OneHotVector, TestSample};
use crate::gateway::{
    request_digest, transcript, Capability, ChatMessage, Gateway, GatewayError, GenerationParams, ImageData, ModelResponse,
};
use crate::parse::{parse_binary_verdict, parse_sections, split_anomaly_blocks, ParseError};
use crate::prompts::{self, DetectionInputs, PromptError, RetrievedContext, EXPLANATION_HEADINGS};
use crate::retrieval::AnomalyKnowledge;

pub const DEFAULT_REPETITIONS: u32 = 3;
pub const NO_ANOMALIES_MESSAGE: &str = "No anomalies detected; no explanation generated.";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("repetitions must be >= 1")]
    ZeroRepetitions,
    #[error("no knowledge packet for `{0}`")]
    MissingKnowledge(String),
    #[error("cannot read image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("sample `{sample_id}`, anomaly `{anomaly}`, repetition {repetition}: {stage} call failed: {source}")]
    Gateway {
        sample_id: String,
        anomaly: String,
        repetition: u32,
        stage: &'static str,
        #[source]
        source: GatewayError,
    },
    #[error("sample `{sample_id}`, anomaly `{anomaly}`, repetition {repetition}: unparseable classification {raw:?}")]
    Verdict {
        sample_id: String,
        anomaly: String,
        repetition: u32,
        raw: String,
    },
    #[error("sample `{sample_id}`: explanation call failed: {source}")]
    ExplanationCall {
        sample_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("sample `{sample_id}`: explanation is malformed after one re-ask: {source}")]
    ExplanationStructure {
        sample_id: String,
        #[source]
        source: ParseError,
    },
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Whether each detection answer gets its own classification call, or one
/// call sees all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationMode {
    #[default]
    PerRepetition,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub repetitions: u32,
    pub classification_mode: ClassificationMode,
    pub detection: GenerationParams,
    pub structured: GenerationParams,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            repetitions: DEFAULT_REPETITIONS,
            classification_mode: ClassificationMode::PerRepetition,
            detection: GenerationParams::detection(),
            structured: GenerationParams::structured(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub anomaly_name: String,
    /// 1-based.
    pub repetition: u32,
    pub raw_response: String,
    pub bit: u8,
}

/// `final == 1` iff `mean(bits) >= 1/2`, decided on integers.
pub fn aggregate_final(bits: &[u8]) -> u8 {
    let ones = bits.iter().filter(|&&b| b == 1).count();
    u8::from(!bits.is_empty() && 2 * ones >= bits.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyDecision {
    pub anomaly_name: String,
    pub bits: Vec<u8>,
    pub mean: f64,
    #[serde(rename = "final")]
    pub final_bit: u8,
}

impl AnomalyDecision {
    pub fn from_bits(anomaly_name: impl Into<String>, bits: Vec<u8>) -> Self {
        let ones = bits.iter().filter(|&&b| b == 1).count();
        Self {
            anomaly_name: anomaly_name.into(),
            mean: ones as f64 / bits.len().max(1) as f64,
            final_bit: aggregate_final(&bits),
            bits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub sample_id: String,
    /// Taxonomy order.
    pub per_anomaly: Vec<AnomalyDecision>,
    pub one_hot: OneHotVector,
}

impl ClassificationResult {
    pub fn detected(&self) -> Vec<&str> {
        self.per_anomaly
            .iter()
            .filter(|d| d.final_bit == 1)
            .map(|d| d.anomaly_name.as_str())
            .collect()
    }

    /// `Name: bit` pairs in taxonomy order.
    pub fn summary(&self) -> String {
        self.per_anomaly
            .iter()
            .map(|d| format!("{}: {}", d.anomaly_name, d.final_bit))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyExplanation {
    pub anomaly_name: String,
    pub root_cause: String,
    pub prevention_strategies: String,
    pub additional_insights: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub sample_id: String,
    pub detected: Vec<String>,
    pub per_anomaly: Vec<AnomalyExplanation>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeKind {
    Detection,
    Classification,
    Explanation,
}

/// One model call as recorded in run artifacts. Timing is left out so that
/// records are reproducible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub kind: ExchangeKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub anomaly: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub repetition: Option<u32>,
    pub capability: Capability,
    pub backend_id: String,
    pub request_digest: String,
    pub request: String,
    pub response: String,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub ablate_retrieval: bool,
    pub classification: ClassificationResult,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub explanation: Option<ExplanationReport>,
    pub exchanges: Vec<Exchange>,
}

pub fn load_test_images(sample: &TestSample) -> Result<Vec<(&str, ImageData)>> {
    sample
        .images
        .iter()
        .map(|si| {
            let img = ImageData::from_path(&si.image_ref).map_err(|source| PipelineError::Image {
                path: si.image_ref.clone(),
                source,
            })?;
            Ok((si.stage_description.as_str(), img))
        })
        .collect()
}

/// Detection messages for one anomaly. `knowledge == None` renders the
/// retrieval-free prompt.
pub fn build_detection_prompt(
    anomaly_name: &str,
    knowledge: Option<&AnomalyKnowledge>,
    test_images: &[(&str, ImageData)],
) -> Result<Vec<ChatMessage>> {
    let info = knowledge.map(|k| k.info_text.render());
    let retrieved = knowledge.zip(info.as_deref()).map(|(k, info)| RetrievedContext {
        reference: k
            .reference_image
            .as_ref()
            .zip(k.reference_image_description.as_deref())
            .map(|(r, d)| (r.image.clone(), d)),
        info_anomaly_text: info,
    });
    Ok(prompts::detection_messages(&DetectionInputs {
        anomaly_name,
        test_images: test_images.to_vec(),
        retrieved,
    })?)
}

fn record(kind: ExchangeKind, anomaly: Option<&str>, repetition: Option<u32>, capability: Capability, messages: &[ChatMessage], r: &ModelResponse) -> Exchange {
    Exchange {
        kind,
        anomaly: anomaly.map(str::to_string),
        repetition,
        capability,
        backend_id: r.backend_id.clone(),
        request_digest: request_digest(messages),
        request: transcript(messages),
        response: r.text.clone(),
        attempt_count: r.attempt_count,
    }
}

/// Runs detection and classification for every anomaly of one sample.
pub struct Detector<'a> {
    gateway: &'a Gateway,
    taxonomy: &'a AnomalyTaxonomy,
    /// `None` runs without retrieval.
    knowledge: Option<&'a BTreeMap<String, AnomalyKnowledge>>,
    params: PipelineParams,
}

impl<'a> Detector<'a> {
    pub fn new(
        gateway: &'a Gateway,
        taxonomy: &'a AnomalyTaxonomy,
        knowledge: Option<&'a BTreeMap<String, AnomalyKnowledge>>,
        params: PipelineParams,
    ) -> Result<Self> {
        if params.repetitions < 1 {
            return Err(PipelineError::ZeroRepetitions);
        }
        Ok(Self {
            gateway,
            taxonomy,
            knowledge,
            params,
        })
    }

    pub fn ablated(&self) -> bool {
        self.knowledge.is_none()
    }

    fn knowledge_for(&self, anomaly: &str) -> Result<Option<&'a AnomalyKnowledge>> {
        match self.knowledge {
            None => Ok(None),
            Some(map) => map
                .get(anomaly)
                .map(Some)
                .ok_or_else(|| PipelineError::MissingKnowledge(anomaly.to_string())),
        }
    }

    fn detection_params(&self, repetition: u32) -> GenerationParams {
        let p = self.params.detection;
        p.with_seed(p.seed.map(|s| s.wrapping_add(u64::from(repetition))))
    }

    fn classify_once(&self, sample_id: &str, anomaly: &str, repetition: u32, detection_results: &str, log: &mut Vec<Exchange>) -> Result<(String, u8)> {
        let msgs = prompts::classification_messages(anomaly, detection_results)?;
        let mut last = String::new();
        // one retry on an unparseable answer
        for _ in 0..2 {
            let r = self
                .gateway
                .complete_chat(&msgs, &self.params.structured)
                .map_err(|source| PipelineError::Gateway {
                    sample_id: sample_id.to_string(),
                    anomaly: anomaly.to_string(),
                    repetition,
                    stage: "classification",
                    source,
                })?;
            log.push(record(ExchangeKind::Classification, Some(anomaly), Some(repetition), Capability::Chat, &msgs, &r));
            if let Ok(bit) = parse_binary_verdict(&r.text) {
                return Ok((r.text, bit));
            }
            last = r.text;
        }
        Err(PipelineError::Verdict {
            sample_id: sample_id.to_string(),
            anomaly: anomaly.to_string(),
            repetition,
            raw: last,
        })
    }

    /// `R` verdicts for one anomaly; repetitions run in order.
    pub fn run_detection(&self, sample_id: &str, anomaly: &str, test_images: &[(&str, ImageData)]) -> Result<(Vec<DetectionVerdict>, Vec<Exchange>)> {
        let knowledge = self.knowledge_for(anomaly)?;
        let msgs = build_detection_prompt(anomaly, knowledge, test_images)?;
        let mut log = Vec::new();
        let mut answers = Vec::new();
        for repetition in 1..=self.params.repetitions {
            let r = self
                .gateway
                .complete_vision(&msgs, &self.detection_params(repetition))
                .map_err(|source| PipelineError::Gateway {
                    sample_id: sample_id.to_string(),
                    anomaly: anomaly.to_string(),
                    repetition,
                    stage: "detection",
                    source,
                })?;
            log.push(record(ExchangeKind::Detection, Some(anomaly), Some(repetition), Capability::Vision, &msgs, &r));
            if self.params.classification_mode == ClassificationMode::PerRepetition {
                let (_, bit) = self.classify_once(sample_id, anomaly, repetition, &r.text, &mut log)?;
                answers.push((r.text, bit));
            } else {
                answers.push((r.text, 0));
            }
        }
        if self.params.classification_mode == ClassificationMode::Joint {
            let joined = answers
                .iter()
                .map(|(t, _)| t.trim())
                .collect::<Vec<_>>()
                .join("\n\n");
            let (_, bit) = self.classify_once(sample_id, anomaly, self.params.repetitions, &joined, &mut log)?;
            answers.iter_mut().for_each(|a| a.1 = bit);
        }
        let verdicts = answers
            .into_iter()
            .zip(1..)
            .map(|((raw_response, bit), repetition)| DetectionVerdict {
                anomaly_name: anomaly.to_string(),
                repetition,
                raw_response,
                bit,
            })
            .collect();
        Ok((verdicts, log))
    }

    /// All anomalies of one sample (concurrently), assembled in taxonomy order.
    pub fn classify_sample(&self, sample: &TestSample) -> Result<(ClassificationResult, Vec<Exchange>)> {
        let images = load_test_images(sample)?;
        let outcomes: Vec<(Vec<DetectionVerdict>, Vec<Exchange>)> = self
            .taxonomy
            .anomalies()
            .par_iter()
            .map(|a| self.run_detection(&sample.sample_id, a, &images))
            .collect::<Result<_>>()?;
        let mut per_anomaly = Vec::with_capacity(outcomes.len());
        let mut log = Vec::new();
        for (name, (verdicts, ex)) in self.taxonomy.anomalies().iter().zip(outcomes) {
            per_anomaly.push(AnomalyDecision::from_bits(name.clone(), verdicts.iter().map(|v| v.bit).collect()));
            log.extend(ex);
        }
        let one_hot = OneHotVector::from_bits(
            self.taxonomy.dataset_id(),
            per_anomaly.iter().map(|d| d.final_bit).collect(),
        )?;
        Ok((
            ClassificationResult {
                sample_id: sample.sample_id.clone(),
                per_anomaly,
                one_hot,
            },
            log,
        ))
    }

    /// Classification plus (with retrieval) the explanation report.
    pub fn process_sample(&self, sample: &TestSample) -> Result<SampleRecord> {
        let (classification, mut exchanges) = self.classify_sample(sample)?;
        let explanation = match self.knowledge {
            Some(k) => {
                let (report, ex) = generate_explanation(&classification, k, self.gateway, &self.params.structured)?;
                exchanges.extend(ex);
                Some(report)
            }
            None => None,
        };
        Ok(SampleRecord {
            sample_id: sample.sample_id.clone(),
            ablate_retrieval: self.ablated(),
            classification,
            explanation,
            exchanges,
        })
    }
}

fn parse_explanation(text: &str, detected: &[String]) -> Result<Vec<AnomalyExplanation>, ParseError> {
    let blocks = split_anomaly_blocks(text, detected)?;
    detected
        .iter()
        .zip(blocks)
        .map(|(name, block)| {
            let mut s = parse_sections(&block, &EXPLANATION_HEADINGS)?.into_iter();
            let mut next = || s.next().expect("one body per heading");
            Ok(AnomalyExplanation {
                anomaly_name: name.clone(),
                root_cause: next(),
                prevention_strategies: next(),
                additional_insights: next(),
            })
        })
        .collect()
}

/// `{info_anomaly_text}` for the explanation call: the packet text of each
/// detected anomaly, labelled with its name when there are several.
pub fn explanation_info_text(detected: &[String], knowledge: &BTreeMap<String, AnomalyKnowledge>) -> Result<String> {
    let texts = detected
        .iter()
        .map(|a| {
            knowledge
                .get(a)
                .map(|k| k.info_text.render())
                .ok_or_else(|| PipelineError::MissingKnowledge(a.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    if texts.len() == 1 {
        return Ok(texts.into_iter().next().expect("one text"));
    }
    Ok(detected
        .iter()
        .zip(texts)
        .map(|(a, t)| format!("{a}:\n{t}"))
        .collect::<Vec<_>>()
        .join("\n\n"))
}

pub fn generate_explanation(
    result: &ClassificationResult,
    knowledge: &BTreeMap<String, AnomalyKnowledge>,
    gateway: &Gateway,
    params: &GenerationParams,
) -> Result<(ExplanationReport, Vec<Exchange>)> {
    let detected: Vec<String> = result.detected().into_iter().map(str::to_string).collect();
    if detected.is_empty() {
        return Ok((
            ExplanationReport {
                sample_id: result.sample_id.clone(),
                detected,
                per_anomaly: Vec::new(),
                message: Some(NO_ANOMALIES_MESSAGE.to_string()),
            },
            Vec::new(),
        ));
    }
    let info = explanation_info_text(&detected, knowledge)?;
    let msgs = prompts::explanation_messages(&result.summary(), &info)?;
    let call = |m: &[ChatMessage]| {
        gateway
            .complete_chat(m, params)
            .map_err(|source| PipelineError::ExplanationCall {
                sample_id: result.sample_id.clone(),
                source,
            })
    };
    let mut log = Vec::new();
    let first = call(&msgs)?;
    log.push(record(ExchangeKind::Explanation, None, None, Capability::Chat, &msgs, &first));
    let per_anomaly = match parse_explanation(&first.text, &detected) {
        Ok(p) => p,
        Err(_) => {
            let again = prompts::reask_messages(&msgs, &first.text, &EXPLANATION_HEADINGS, &detected);
            let second = call(&again)?;
            log.push(record(ExchangeKind::Explanation, None, None, Capability::Chat, &again, &second));
            parse_explanation(&second.text, &detected).map_err(|source| PipelineError::ExplanationStructure {
                sample_id: result.sample_id.clone(),
                source,
            })?
        }
    };
    Ok((
        ExplanationReport {
            sample_id: result.sample_id.clone(),
            detected,
            per_anomaly,
            message: None,
        },
        log,
    ))
}
