//! Prompt templates and a small `{placeholder}` renderer.
//!
//! Templates are plain strings with `{name}` slots. A slot can be bound to
//! text or to a run of message parts (so images land exactly where the
//! template puts them). Rendering fails on any unbound slot; bound values are
//! inserted verbatim and never rescanned.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::gateway::{ChatMessage, ImageData, Part, Role};

/// Embedded query for reference-page retrieval.
pub const IMAGE_QUERY: &str =
    "Retrieve images related to the {anomaly_name}, strictly from provided resources.";

/// Sent to the vision model together with the retrieved page.
pub const IMAGE_DESCRIPTION: &str = "1: Retrieve images related to the {anomaly_name}, strictly from provided resources. 2: Analyze the retrieved image and include the visual characteristics to help in anomaly identification.";

/// Embedded query for text retrieval (the instruction sentence only).
pub const TEXT_QUERY_HEAD: &str =
    "Retrieve comprehensive information about {anomaly_name}, exclusively from provided resources.";

pub const TEXT_QUERY: &str = "Retrieve comprehensive information about {anomaly_name}, exclusively from provided resources. Ensure the response includes the following details:\n\n1. Detailed Description\n2. Common Causes\n3. Visual Characteristics\n4. Prevention Strategies";

pub const DETECTION: &str = "Analyze the test image carefully and determine if {anomaly_name} is possible. Use the information provided in the reference image and additional scientific information to support your assessment. Provide a clear, short, and reasoned answer with supporting evidence. These are the test images: {test_images}. The reference image shows an example of {anomaly_name}: {reference_image} {reference_image_description}. Use it for comparison. Here is additional scientific information about {anomaly_name}: {info_anomaly_text}.";

/// Detection when no usable reference page was found.
pub const DETECTION_TEXT_ONLY: &str = "Analyze the test image carefully and determine if {anomaly_name} is possible. Use the information provided in the reference image and additional scientific information to support your assessment. Provide a clear, short, and reasoned answer with supporting evidence. These are the test images: {test_images}. Here is additional scientific information about {anomaly_name}: {info_anomaly_text}.";

/// Detection with all retrieved content removed.
pub const DETECTION_ABLATED: &str = "Analyze the test image carefully and determine if {anomaly_name} is possible. Provide a clear, short, and reasoned answer with supporting evidence. These are the test images: {test_images}.";

pub const CLASSIFICATION: &str = "This is the decision about whether the Anomaly exist: {detection_results}. If {anomaly_name} is detected in even one of the test images, return 1; otherwise, return 0. Do not provide any additional explanation or reasoning in the response.";

pub const EXPLANATION: &str = "Given the detected anomalies in the manufacturing process: {classification_results}, provide a detailed scientific explanation covering the following:\n\n1. Root Cause\n2. Prevention Strategies\n3. Additional Insights\n\nEnsure the response is precise, technical, and grounded in provided information: {info_anomaly_text}";

pub const KNOWLEDGE_HEADINGS: [&str; 4] = [
    "Detailed Description",
    "Common Causes",
    "Visual Characteristics",
    "Prevention Strategies",
];

pub const EXPLANATION_HEADINGS: [&str; 3] = ["Root Cause", "Prevention Strategies", "Additional Insights"];

pub const REASK_PREFIX: &str = "Rewrite the answer using exactly these headings";

/// Fixed prefixes used to recognise a request's kind (the mock rule engine relies on them).
pub mod prefix {
    pub const DETECTION: &str = "Analyze the test image carefully and determine if ";
    pub const CLASSIFICATION: &str = "This is the decision about whether the Anomaly exist: ";
    pub const TEXT_QUERY: &str = "Retrieve comprehensive information about ";
    pub const IMAGE_DESCRIPTION: &str = "1: Retrieve images related to the ";
    pub const EXPLANATION: &str = "Given the detected anomalies in the manufacturing process: ";
    pub const RESOURCES: &str = "\n\nProvided resources:\n\n";
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("unclosed placeholder starting at byte {0}")]
    Unclosed(usize),
    #[error("invalid placeholder `{{{name}}}` at byte {pos}")]
    InvalidName { name: String, pos: usize },
    #[error("placeholder `{{{0}}}` is not bound")]
    Unbound(String),
    #[error("placeholder `{{{0}}}` is bound to images but the template renders to text")]
    ImageInText(String),
    #[error("detection prompt needs at least one test image")]
    NoTestImages,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Binding {
    Text(String),
    Parts(Vec<Part>),
}

impl From<String> for Binding {
    fn from(s: String) -> Self {
        Binding::Text(s)
    }
}

impl From<&str> for Binding {
    fn from(s: &str) -> Self {
        Binding::Text(s.to_string())
    }
}

pub type Bindings = BTreeMap<&'static str, Binding>;

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl Template {
    pub fn parse(source: &str) -> Result<Self, PromptError> {
        let mut segments = Vec::new();
        let mut rest = source;
        let mut offset = 0;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                segments.push(Segment::Literal(rest[..open].to_string()));
            }
            let close = rest[open..]
                .find('}')
                .ok_or(PromptError::Unclosed(offset + open))?
                + open;
            let name = &rest[open + 1..close];
            if !valid_name(name) {
                return Err(PromptError::InvalidName {
                    name: name.to_string(),
                    pos: offset + open,
                });
            }
            segments.push(Segment::Slot(name.to_string()));
            offset += close + 1;
            rest = &rest[close + 1..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Literal(rest.to_string()));
        }
        Ok(Self { segments })
    }

    pub fn placeholders(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.segments {
            if let Segment::Slot(n) = s {
                if !out.contains(&n.as_str()) {
                    out.push(n);
                }
            }
        }
        out
    }

    /// Renders into message parts, merging adjacent text.
    pub fn render_parts(&self, bindings: &Bindings) -> Result<Vec<Part>, PromptError> {
        let mut parts: Vec<Part> = Vec::new();
        let push_text = |parts: &mut Vec<Part>, t: &str| {
            if t.is_empty() {
                return;
            }
            match parts.last_mut() {
                Some(Part::Text(prev)) => prev.push_str(t),
                _ => parts.push(Part::Text(t.to_string())),
            }
        };
        for seg in &self.segments {
            match seg {
                Segment::Literal(t) => push_text(&mut parts, t),
                Segment::Slot(name) => match bindings.get(name.as_str()) {
                    None => return Err(PromptError::Unbound(name.clone())),
                    Some(Binding::Text(t)) => push_text(&mut parts, t),
                    Some(Binding::Parts(ps)) => {
                        for p in ps {
                            match p {
                                Part::Text(t) => push_text(&mut parts, t),
                                Part::Image(_) => parts.push(p.clone()),
                            }
                        }
                    }
                },
            }
        }
        Ok(parts)
    }

    pub fn render_text(&self, bindings: &Bindings) -> Result<String, PromptError> {
        for seg in &self.segments {
            if let Segment::Slot(name) = seg {
                if let Some(Binding::Parts(ps)) = bindings.get(name.as_str()) {
                    if ps.iter().any(|p| matches!(p, Part::Image(_))) {
                        return Err(PromptError::ImageInText(name.clone()));
                    }
                }
            }
        }
        let parts = self.render_parts(bindings)?;
        Ok(parts
            .into_iter()
            .map(|p| match p {
                Part::Text(t) => t,
                Part::Image(_) => unreachable!("checked above"),
            })
            .collect())
    }
}

/// Renders a built-in template; these always parse.
pub fn render(template: &str, bindings: &Bindings) -> Result<String, PromptError> {
    Template::parse(template)?.render_text(bindings)
}

fn name_binding(anomaly_name: &str) -> Bindings {
    let mut b = Bindings::new();
    b.insert("anomaly_name", anomaly_name.into());
    b
}

/// Values that the template itself closes with a period lose their own.
fn sentence_body(s: &str) -> &str {
    s.trim_end().trim_end_matches('.')
}

pub fn image_query(anomaly_name: &str) -> Result<String, PromptError> {
    render(IMAGE_QUERY, &name_binding(anomaly_name))
}

pub fn text_query_head(anomaly_name: &str) -> Result<String, PromptError> {
    render(TEXT_QUERY_HEAD, &name_binding(anomaly_name))
}

/// Text query followed by the retrieved chunks, numbered in rank order.
pub fn text_retrieval_messages(anomaly_name: &str, chunks: &[String]) -> Result<Vec<ChatMessage>, PromptError> {
    let mut text = render(TEXT_QUERY, &name_binding(anomaly_name))?;
    if !chunks.is_empty() {
        text.push_str(prefix::RESOURCES);
        let body: Vec<String> = chunks
            .iter()
            .enumerate()
            .map(|(i, c)| format!("[{}] {}", i + 1, c.trim()))
            .collect();
        text.push_str(&body.join("\n\n"));
    }
    Ok(vec![ChatMessage::user_text(text)])
}

pub fn image_description_messages(anomaly_name: &str, image: &ImageData) -> Result<Vec<ChatMessage>, PromptError> {
    let text = render(IMAGE_DESCRIPTION, &name_binding(anomaly_name))?;
    Ok(vec![ChatMessage::new(
        Role::User,
        vec![Part::Text(text), Part::Image(image.clone())],
    )])
}

/// What goes into one detection prompt.
#[derive(Debug, Clone)]
pub struct DetectionInputs<'a> {
    pub anomaly_name: &'a str,
    /// `(stage description, image)` in stage order.
    pub test_images: Vec<(&'a str, ImageData)>,
    pub retrieved: Option<RetrievedContext<'a>>,
}

#[derive(Debug, Clone)]
pub struct RetrievedContext<'a> {
    pub reference: Option<(ImageData, &'a str)>,
    pub info_anomaly_text: &'a str,
}

pub fn detection_messages(inputs: &DetectionInputs<'_>) -> Result<Vec<ChatMessage>, PromptError> {
    if inputs.test_images.is_empty() {
        return Err(PromptError::NoTestImages);
    }
    let mut test_parts = Vec::new();
    for (i, (desc, img)) in inputs.test_images.iter().enumerate() {
        if i > 0 {
            test_parts.push(Part::Text(", ".into()));
        }
        test_parts.push(Part::Text(format!("{desc}: ")));
        test_parts.push(Part::Image(img.clone()));
    }
    let mut b = name_binding(inputs.anomaly_name);
    b.insert("test_images", Binding::Parts(test_parts));
    let template = match &inputs.retrieved {
        None => DETECTION_ABLATED,
        Some(ctx) => {
            b.insert("info_anomaly_text", sentence_body(ctx.info_anomaly_text).into());
            match &ctx.reference {
                Some((img, desc)) => {
                    b.insert("reference_image", Binding::Parts(vec![Part::Image(img.clone())]));
                    b.insert("reference_image_description", sentence_body(desc).into());
                    DETECTION
                }
                None => DETECTION_TEXT_ONLY,
            }
        }
    };
    let parts = Template::parse(template)?.render_parts(&b)?;
    Ok(vec![ChatMessage::new(Role::User, parts)])
}

pub fn classification_messages(anomaly_name: &str, detection_results: &str) -> Result<Vec<ChatMessage>, PromptError> {
    let mut b = name_binding(anomaly_name);
    b.insert("detection_results", detection_results.trim().into());
    Ok(vec![ChatMessage::user_text(render(CLASSIFICATION, &b)?)])
}

pub fn explanation_messages(classification_results: &str, info_anomaly_text: &str) -> Result<Vec<ChatMessage>, PromptError> {
    let mut b = Bindings::new();
    b.insert("classification_results", classification_results.into());
    b.insert("info_anomaly_text", info_anomaly_text.into());
    Ok(vec![ChatMessage::user_text(render(EXPLANATION, &b)?)])
}

/// Follow-up asking for the expected headings after a malformed answer.
pub fn reask_messages(original: &[ChatMessage], response: &str, headings: &[&str], per_anomaly: &[String]) -> Vec<ChatMessage> {
    let numbered: Vec<String> = headings
        .iter()
        .enumerate()
        .map(|(i, h)| format!("{}. {h}", i + 1))
        .collect();
    let mut ask = format!("{REASK_PREFIX}, in this order: {}.", numbered.join(", "));
    if per_anomaly.len() > 1 {
        ask.push_str(&format!(
            " Write one block per anomaly, each starting with a heading line that names it: {}.",
            per_anomaly.join(", ")
        ));
    }
    let mut msgs = original.to_vec();
    msgs.push(ChatMessage::assistant_text(response));
    msgs.push(ChatMessage::user_text(ask));
    msgs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::transcript;

    fn png(shade: u8) -> ImageData {
        let img = image::RgbImage::from_pixel(2, 2, image::Rgb([shade, shade, shade]));
        let mut c = std::io::Cursor::new(Vec::new());
        img.write_to(&mut c, image::ImageFormat::Png).unwrap();
        ImageData::new(c.into_inner())
    }

    #[test]
    fn parse_and_render() {
        let t = Template::parse("a {x} b {y}{x}").unwrap();
        assert_eq!(t.placeholders(), vec!["x", "y"]);
        let mut b = Bindings::new();
        b.insert("x", "1".into());
        assert_eq!(t.render_text(&b), Err(PromptError::Unbound("y".into())));
        b.insert("y", "{x}".into());
        assert_eq!(t.render_text(&b).unwrap(), "a 1 b {x}1");
    }

    #[test]
    fn malformed_templates() {
        assert_eq!(Template::parse("a {b"), Err(PromptError::Unclosed(2)));
        assert!(matches!(Template::parse("{a b}"), Err(PromptError::InvalidName { .. })));
        assert!(matches!(Template::parse("{}"), Err(PromptError::InvalidName { .. })));
    }

    #[test]
    fn builtin_templates_parse() {
        for t in [
            IMAGE_QUERY,
            IMAGE_DESCRIPTION,
            TEXT_QUERY_HEAD,
            TEXT_QUERY,
            DETECTION,
            DETECTION_TEXT_ONLY,
            DETECTION_ABLATED,
            CLASSIFICATION,
            EXPLANATION,
        ] {
            Template::parse(t).unwrap();
        }
        assert!(DETECTION.starts_with(prefix::DETECTION));
        assert!(CLASSIFICATION.starts_with(prefix::CLASSIFICATION));
        assert!(TEXT_QUERY.starts_with(prefix::TEXT_QUERY));
        assert!(IMAGE_DESCRIPTION.starts_with(prefix::IMAGE_DESCRIPTION));
        assert!(EXPLANATION.starts_with(prefix::EXPLANATION));
    }

    #[test]
    fn detection_places_images_in_order() {
        let inputs = DetectionInputs {
            anomaly_name: "Debris",
            test_images: vec![("image captured post-melting", png(1)), ("image captured after powder spreading", png(2))],
            retrieved: Some(RetrievedContext {
                reference: Some((png(3), "dark particles")),
                info_anomaly_text: "INFO",
            }),
        };
        let msgs = detection_messages(&inputs).unwrap();
        let images: Vec<_> = msgs[0].images().map(|i| i.digest()).collect();
        assert_eq!(images, vec![png(1).digest(), png(2).digest(), png(3).digest()]);
        let t = transcript(&msgs);
        assert!(t.contains("These are the test images: image captured post-melting: <image:image/png:"));
        assert!(t.contains("> dark particles. Use it for comparison."));
        assert!(t.ends_with("about Debris: INFO.\n"));
    }

    #[test]
    fn detection_variants() {
        let base = DetectionInputs {
            anomaly_name: "Soot",
            test_images: vec![("s", png(1))],
            retrieved: Some(RetrievedContext {
                reference: None,
                info_anomaly_text: "INFO",
            }),
        };
        let text_only = msgs_text(&detection_messages(&base).unwrap());
        assert!(!text_only.contains("The reference image shows an example of"));
        assert!(text_only.contains("INFO"));

        let ablated = DetectionInputs { retrieved: None, ..base };
        let t = msgs_text(&detection_messages(&ablated).unwrap());
        assert!(!t.contains("INFO") && !t.contains("reference image"));

        let none = DetectionInputs {
            anomaly_name: "Soot",
            test_images: vec![],
            retrieved: None,
        };
        assert_eq!(detection_messages(&none), Err(PromptError::NoTestImages));
    }

    fn msgs_text(m: &[ChatMessage]) -> String {
        m.iter().map(ChatMessage::text).collect()
    }

    #[test]
    fn reask_appends_turns() {
        let orig = vec![ChatMessage::user_text("q")];
        let m = reask_messages(&orig, "bad", &KNOWLEDGE_HEADINGS, &[]);
        assert_eq!(m.len(), 3);
        assert_eq!(m[1].role, Role::Assistant);
        assert!(m[2].text().starts_with(REASK_PREFIX));
        assert!(m[2].text().contains("1. Detailed Description, 2. Common Causes"));
    }
}
