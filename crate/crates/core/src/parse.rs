//! Parsing of model answers: binary verdicts and headed sections.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("expected a bare 0 or 1, got {0:?}")]
    Verdict(String),
    #[error("missing or empty sections: {}", .0.join(", "))]
    MissingSections(Vec<String>),
    #[error("no block found for: {}", .0.join(", "))]
    MissingBlocks(Vec<String>),
}

/// Accepts exactly `0` or `1`, optionally wrapped in whitespace, quotes,
/// backticks, bold markers or a code fence.
pub fn parse_binary_verdict(raw: &str) -> Result<u8, ParseError> {
    let mut s = raw.trim();
    loop {
        let before = s;
        if let Some(inner) = s.strip_prefix("```").and_then(|x| x.strip_suffix("```")) {
            // drop an optional language tag on the opening fence line
            s = match inner.split_once('\n') {
                Some((tag, body)) if !tag.trim().chars().any(|c| c == '0' || c == '1') => body,
                _ => inner,
            };
        }
        for (open, close) in [("**", "**"), ("`", "`"), ("\"", "\""), ("'", "'"), ("*", "*")] {
            if s.len() >= open.len() + close.len() {
                if let Some(inner) = s.strip_prefix(open).and_then(|x| x.strip_suffix(close)) {
                    s = inner;
                }
            }
        }
        s = s.trim();
        if s == before {
            break;
        }
    }
    match s {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(ParseError::Verdict(raw.to_string())),
    }
}

fn strip_emphasis(s: &str) -> &str {
    s.trim().trim_matches(|c| c == '*' || c == '_').trim()
}

fn strip_numbering(s: &str) -> &str {
    let digits = s.chars().take_while(char::is_ascii_digit).count();
    if digits == 0 {
        return s;
    }
    let rest = &s[digits..];
    match rest.chars().next() {
        Some('.' | ')' | ':') => rest[1..].trim_start(),
        _ => s,
    }
}

/// Heading text of a line with markdown and numbering removed, e.g.
/// `"## 2. **Common Causes:** text"` → `"Common Causes:** text"`.
fn heading_candidate(line: &str) -> &str {
    let s = line.trim().trim_start_matches('#').trim();
    let s = s.trim_start_matches(['*', '_']).trim_start();
    let s = strip_numbering(s);
    s.trim_start_matches(['*', '_']).trim_start()
}

/// If `line` opens a section named in `headings`, returns its index and any
/// inline content that follows the heading.
fn match_heading(line: &str, headings: &[&str]) -> Option<(usize, String)> {
    let cand = heading_candidate(line);
    for (i, h) in headings.iter().enumerate() {
        if cand.len() < h.len() || !cand.is_char_boundary(h.len()) {
            continue;
        }
        if !cand[..h.len()].eq_ignore_ascii_case(h) {
            continue;
        }
        let rest = cand[h.len()..].trim_start_matches(['*', '_']);
        if rest.trim().is_empty() {
            return Some((i, String::new()));
        }
        if let Some(inline) = rest.trim_start().strip_prefix(':') {
            return Some((i, strip_emphasis(inline).to_string()));
        }
    }
    None
}

/// Splits `text` into the given headed sections, returned in `headings`
/// order. Headings may be numbered, bolded, prefixed with `#` or carry
/// content on the same line after a colon. Text before the first heading is
/// ignored; a repeated heading keeps its first occurrence.
pub fn parse_sections(text: &str, headings: &[&str]) -> Result<Vec<String>, ParseError> {
    let mut bodies: Vec<Option<Vec<String>>> = vec![None; headings.len()];
    let mut current: Option<usize> = None;
    for line in text.lines() {
        if let Some((i, inline)) = match_heading(line, headings) {
            if bodies[i].is_none() {
                bodies[i] = Some(if inline.is_empty() { vec![] } else { vec![inline] });
                current = Some(i);
            } else {
                current = None;
            }
            continue;
        }
        if let Some(body) = current.and_then(|i| bodies[i].as_mut()) {
            body.push(line.to_string());
        }
    }
    let mut out = Vec::with_capacity(headings.len());
    let mut missing = Vec::new();
    for (h, body) in headings.iter().zip(bodies) {
        let joined = body.map(|b| b.join("\n").trim().to_string()).unwrap_or_default();
        if joined.is_empty() {
            missing.push(h.to_string());
        }
        out.push(joined);
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(ParseError::MissingSections(missing))
    }
}

/// Splits an answer into per-anomaly blocks, each introduced by a line whose
/// heading text is exactly the anomaly name. A single expected anomaly with
/// no heading takes the whole answer.
pub fn split_anomaly_blocks(text: &str, names: &[String]) -> Result<Vec<String>, ParseError> {
    let mut blocks: Vec<Option<Vec<&str>>> = vec![None; names.len()];
    let mut current: Option<usize> = None;
    for line in text.lines() {
        let cand = strip_emphasis(heading_candidate(line).trim_end_matches(':'));
        let cand = cand.trim_end_matches(':').trim();
        if let Some(i) = names.iter().position(|n| n.eq_ignore_ascii_case(cand)) {
            if blocks[i].is_none() {
                blocks[i] = Some(Vec::new());
            }
            current = Some(i);
            continue;
        }
        if let Some(b) = current.and_then(|i| blocks[i].as_mut()) {
            b.push(line);
        }
    }
    if names.len() == 1 && blocks[0].is_none() {
        return Ok(vec![text.to_string()]);
    }
    let missing: Vec<String> = names
        .iter()
        .zip(&blocks)
        .filter(|(_, b)| b.is_none())
        .map(|(n, _)| n.clone())
        .collect();
    if !missing.is_empty() {
        return Err(ParseError::MissingBlocks(missing));
    }
    Ok(blocks.into_iter().map(|b| b.unwrap_or_default().join("\n")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{EXPLANATION_HEADINGS, KNOWLEDGE_HEADINGS};

    #[test]
    fn verdicts() {
        for (raw, bit) in [
            (" 1\n", 1),
            ("`0`", 0),
            ("\"1\"", 1),
            ("**1**", 1),
            ("```\n0\n```", 0),
            ("```text\n1\n```", 1),
            ("'0'", 0),
        ] {
            assert_eq!(parse_binary_verdict(raw), Ok(bit), "{raw:?}");
        }
        for raw in ["Yes, anomaly present", "", "10", "1.", "0 or 1", "``"] {
            assert!(parse_binary_verdict(raw).is_err(), "{raw:?}");
        }
    }

    #[test]
    fn sections_with_markdown_variants() {
        let text = "Intro line.\n\
                    ## 1. Detailed Description\nA thing.\nMore.\n\
                    **Common Causes**\n- blade wear\n\
                    3) **Visual Characteristics:** streaks\n\
                    Prevention Strategies: keep it clean";
        let s = parse_sections(text, &KNOWLEDGE_HEADINGS).unwrap();
        assert_eq!(s[0], "A thing.\nMore.");
        assert_eq!(s[1], "- blade wear");
        assert_eq!(s[2], "streaks");
        assert_eq!(s[3], "keep it clean");
    }

    #[test]
    fn prose_mentioning_heading_is_not_a_heading() {
        let text = "Root Cause\nx\nPrevention strategies include y\nAdditional Insights\nz";
        assert_eq!(
            parse_sections(text, &EXPLANATION_HEADINGS),
            Err(ParseError::MissingSections(vec!["Prevention Strategies".into()]))
        );
    }

    #[test]
    fn missing_and_empty_sections() {
        let text = "1. Detailed Description\na\n2. Common Causes\n\n3. Visual Characteristics\nc";
        assert_eq!(
            parse_sections(text, &KNOWLEDGE_HEADINGS),
            Err(ParseError::MissingSections(vec![
                "Common Causes".into(),
                "Prevention Strategies".into()
            ]))
        );
    }

    #[test]
    fn anomaly_blocks() {
        let names = vec!["Soot".to_string(), "Debris".to_string()];
        let text = "## Debris\nRoot Cause: a\n## **Soot:**\nRoot Cause: b";
        let b = split_anomaly_blocks(text, &names).unwrap();
        assert_eq!(b[0], "Root Cause: b");
        assert_eq!(b[1], "Root Cause: a");
        assert_eq!(
            split_anomaly_blocks("Root Cause: a", &names),
            Err(ParseError::MissingBlocks(names.clone()))
        );
        let one = vec!["Soot".to_string()];
        assert_eq!(split_anomaly_blocks("whole", &one).unwrap(), vec!["whole"]);
    }
}
