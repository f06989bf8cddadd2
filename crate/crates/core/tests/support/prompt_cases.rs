//! Fixed inputs for the prompt golden files. Shared by the core prompt
//! tests and the CLI acceptance suite.

#![allow(dead_code)]

use std::path::PathBuf;

use pbf_rag_core::dataset::Stage;
use pbf_rag_core::gateway::{transcript, ImageData};
use pbf_rag_core::pipeline::build_detection_prompt;
use pbf_rag_core::prompts;
use pbf_rag_core::retrieval::{AnomalyKnowledge, InfoText, Provenance, ReferenceImage};

pub const ANOMALY: &str = "Recoater Streaking";

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden")
}

pub fn png(shade: u8) -> ImageData {
    let img = image::RgbImage::from_pixel(4, 4, image::Rgb([shade, shade / 2, 255 - shade]));
    let mut c = std::io::Cursor::new(Vec::new());
    img.write_to(&mut c, image::ImageFormat::Png).unwrap();
    ImageData::new(c.into_inner())
}

pub fn test_images() -> Vec<(&'static str, ImageData)> {
    vec![
        (Stage::PostMelting.description(), png(40)),
        (Stage::PostSpreading.description(), png(90)),
    ]
}

pub fn knowledge(with_reference: bool) -> AnomalyKnowledge {
    AnomalyKnowledge {
        anomaly_name: ANOMALY.into(),
        reference_image: with_reference.then(|| ReferenceImage {
            image: png(200),
            doc_id: "streaking_study".into(),
            page_no: 2,
        }),
        reference_image_description: with_reference
            .then(|| "Long straight grooves run parallel to the recoat direction across the whole bed.".into()),
        info_text: InfoText {
            detailed_description: "A linear groove dragged through the powder by a damaged blade.".into(),
            common_causes: "Nicks in the blade edge or a particle trapped under it.".into(),
            visual_characteristics: "Straight lines along the travel direction that repeat on later layers.".into(),
            prevention_strategies: "Inspect and replace worn blades; sieve the powder.".into(),
        },
        provenance: vec![Provenance {
            entry_id: "chunk:0000000000000000".into(),
            score: 0.5,
        }],
    }
}

pub struct Case {
    pub file: &'static str,
    pub template: &'static str,
    pub rendered: String,
}

pub fn cases() -> Vec<Case> {
    let images = test_images();
    let full = knowledge(true);
    let text_only = knowledge(false);
    let detection = |k: Option<&AnomalyKnowledge>| transcript(&build_detection_prompt(ANOMALY, k, &images).unwrap());
    let results = "Yes. Both images show a straight groove along the recoat direction.\n\nNo visible streak in this repetition.";
    vec![
        Case {
            file: "detection.txt",
            template: prompts::DETECTION,
            rendered: detection(Some(&full)),
        },
        Case {
            file: "detection_text_only.txt",
            template: prompts::DETECTION_TEXT_ONLY,
            rendered: detection(Some(&text_only)),
        },
        Case {
            file: "detection_ablated.txt",
            template: prompts::DETECTION_ABLATED,
            rendered: detection(None),
        },
        Case {
            file: "classification.txt",
            template: prompts::CLASSIFICATION,
            rendered: transcript(&prompts::classification_messages(ANOMALY, results).unwrap()),
        },
        Case {
            file: "explanation.txt",
            template: prompts::EXPLANATION,
            rendered: transcript(
                &prompts::explanation_messages(
                    "Recoater Hopping: 0, Recoater Streaking: 1, Soot: 0",
                    &full.info_text.render(),
                )
                .unwrap(),
            ),
        },
        Case {
            file: "text_retrieval.txt",
            template: prompts::TEXT_QUERY,
            rendered: transcript(
                &prompts::text_retrieval_messages(
                    ANOMALY,
                    &["First retrieved chunk.".into(), "Second retrieved chunk.".into()],
                )
                .unwrap(),
            ),
        },
        Case {
            file: "image_description.txt",
            template: prompts::IMAGE_DESCRIPTION,
            rendered: transcript(&prompts::image_description_messages(ANOMALY, &png(200)).unwrap()),
        },
    ]
}

/// The literal text between placeholders, in order.
pub fn literal_segments(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push(&rest[..open]);
        let close = rest[open..].find('}').expect("balanced template") + open;
        rest = &rest[close + 1..];
    }
    out.push(rest);
    out.into_iter().filter(|s| !s.is_empty()).collect()
}

/// Every literal segment of `template` occurs in `rendered`, in order.
pub fn embeds_verbatim(template: &str, rendered: &str) -> bool {
    let mut pos = 0;
    for seg in literal_segments(template) {
        match rendered[pos..].find(seg) {
            Some(i) => pos += i + seg.len(),
            None => return false,
        }
    }
    true
}

/// Packet strings (split into sentences) and the reference image tag that
/// appear in `rendered`.
pub fn leaked_packet_content(k: &AnomalyKnowledge, rendered: &str) -> Vec<String> {
    let mut leaks: Vec<String> = k
        .retrieved_strings()
        .into_iter()
        .flat_map(|s| s.split(". ").map(|x| x.trim().trim_end_matches('.').to_string()).collect::<Vec<_>>())
        .filter(|s| !s.is_empty() && rendered.contains(s.as_str()))
        .collect();
    if let Some(r) = &k.reference_image {
        let tag = &r.image.digest()[..16];
        if rendered.contains(tag) {
            leaks.push(format!("reference image {tag}"));
        }
    }
    for h in prompts::KNOWLEDGE_HEADINGS {
        if rendered.contains(h) {
            leaks.push(h.to_string());
        }
    }
    leaks
}
