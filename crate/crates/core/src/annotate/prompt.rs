use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::NodeTable;
use crate::sampling::Bundle;

pub const TRUNCATION_MARKER: &str = " [truncated]";
pub const EMPTY_TEXT: &str = "(no text)";

/// The fixed system message sent with every bundle query.
pub const SYSTEM_INSTRUCTION: &str = "You are an expert annotator. You read a group of related items \
and decide which single category most of them belong to. You reply with one category name only.";

/// Appended to the user message when a reply could not be parsed.
pub const REASK_SUFFIX: &str = "Answer with exactly one category name from the list, nothing else.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub bundle_id: usize,
    pub text: String,
    pub sha256: String,
}

impl Prompt {
    pub fn new(bundle_id: usize, text: String) -> Self {
        let sha256 = sha256_hex(&text);
        Prompt {
            bundle_id,
            text,
            sha256,
        }
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn render_item(text: &str, max_chars: usize) -> String {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return EMPTY_TEXT.to_string();
    }
    let flat = |s: &str| s.replace(['\r', '\n'], " ");
    match trimmed.char_indices().nth(max_chars) {
        Some((cut, _)) => format!("{}{TRUNCATION_MARKER}", flat(&trimmed[..cut])),
        None => flat(trimmed),
    }
}

/// Dataset description, numbered member texts, then the mode-category task.
pub fn build_prompt(
    bundle: &Bundle,
    table: &NodeTable,
    dataset_description: &str,
    max_chars_per_item: usize,
) -> Result<Prompt> {
    let texts = table
        .texts
        .as_ref()
        .ok_or_else(|| Error::Invalid("node table carries no texts".into()))?;
    let mut out = String::new();
    out.push_str(dataset_description.trim());
    out.push_str("\n\n");
    out.push_str(&format!(
        "Below are {} items that were sampled together:\n",
        bundle.members.len()
    ));
    for (pos, &node) in bundle.members.iter().enumerate() {
        let text = texts.get(node).ok_or_else(|| {
            Error::Invalid(format!(
                "bundle {} references node {node}, which has no table row",
                bundle.id
            ))
        })?;
        out.push_str(&format!(
            "Item {}: {}\n",
            pos + 1,
            render_item(text, max_chars_per_item.max(1))
        ));
    }
    let categories = table.class_names.join(", ");
    out.push_str(&format!(
        "\nTask: identify the single category that MOST of these items belong to. \
         The categories are: {categories}. \
         Answer with exactly one category name from this list, nothing else."
    ));
    Ok(Prompt::new(bundle.id, out))
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Resolves a free-text reply to a class index.
///
/// Returns `None` unless exactly one distinct class name occurs. Longer names
/// are consumed first so a name contained in another is not double-counted.
pub fn parse_response(raw: &str, class_names: &[String]) -> Option<usize> {
    let mut hay: Vec<char> = raw.to_lowercase().chars().collect();
    let mut order: Vec<(usize, Vec<char>)> = class_names
        .iter()
        .map(|c| c.trim().to_lowercase().chars().collect::<Vec<_>>())
        .enumerate()
        .collect();
    order.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));

    let mut found = Vec::new();
    for (idx, name) in order {
        if name.is_empty() || name.len() > hay.len() {
            continue;
        }
        let mut hit = false;
        let mut start = 0;
        while start + name.len() <= hay.len() {
            let end = start + name.len();
            let bounded = (start == 0 || !is_word_char(hay[start - 1]))
                && (end == hay.len() || !is_word_char(hay[end]));
            if bounded && hay[start..end] == name[..] {
                hit = true;
                hay[start..end].fill('\0');
                start = end;
            } else {
                start += 1;
            }
        }
        if hit {
            found.push(idx);
        }
    }
    match found[..] {
        [only] => Some(only),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(texts: &[&str], classes: &[&str]) -> NodeTable {
        NodeTable::new(
            Some(texts.iter().map(|s| s.to_string()).collect()),
            None,
            classes.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    fn names(c: &[&str]) -> Vec<String> {
        c.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn prompt_contains_items_classes_and_task() {
        let t = table(&["alpha", "beta"], &["A", "B"]);
        let b = Bundle::new(7, 0, vec![0, 1]);
        let p = build_prompt(&b, &t, "A toy dataset.", 2000).unwrap();
        assert!(p.text.starts_with("A toy dataset."));
        assert!(p.text.contains("Item 1: alpha"));
        assert!(p.text.contains("Item 2: beta"));
        assert!(p.text.contains("A, B"));
        assert!(p.text.contains("MOST of these items"));
        assert!(p.text.contains("exactly one category name"));
        assert_eq!(p.bundle_id, 7);
        assert_eq!(p.sha256, sha256_hex(&p.text));
        assert_eq!(p.sha256.len(), 64);
    }

    #[test]
    fn prompt_truncates_long_items() {
        let long = "x".repeat(10_000);
        let t = table(&[&long, ""], &["A"]);
        let b = Bundle::new(0, 0, vec![0, 1]);
        let p = build_prompt(&b, &t, "d", 2000).unwrap();
        let expected = format!("Item 1: {}{TRUNCATION_MARKER}\n", "x".repeat(2000));
        assert!(p.text.contains(&expected));
        assert!(!p.text.contains(&"x".repeat(2001)));
        assert!(p.text.contains("Item 2: (no text)"));
    }

    #[test]
    fn prompt_is_order_sensitive() {
        let t = table(&["alpha", "beta"], &["A", "B"]);
        let a = build_prompt(&Bundle::new(0, 0, vec![0, 1]), &t, "d", 100).unwrap();
        let b = build_prompt(&Bundle::new(0, 0, vec![1, 0]), &t, "d", 100).unwrap();
        assert_ne!(a.text, b.text);
        assert_ne!(a.sha256, b.sha256);
    }

    #[test]
    fn prompt_missing_row() {
        let t = table(&["alpha"], &["A"]);
        assert!(build_prompt(&Bundle::new(0, 0, vec![0, 3]), &t, "d", 100).is_err());
    }

    #[test]
    fn parse_examples() {
        let classes = names(&["Agents", "Databases", "Information Retrieval", "ML"]);
        assert_eq!(parse_response("Information Retrieval", &classes), Some(2));
        assert_eq!(
            parse_response("The main category is databases.", &classes),
            Some(1)
        );
        assert_eq!(parse_response("Either Agents or Databases", &classes), None);
        assert_eq!(parse_response("no idea", &classes), None);
        assert_eq!(parse_response("HTML pages", &classes), None);
    }

    #[test]
    fn parse_prefers_longer_names() {
        let classes = names(&["Learning", "Machine Learning"]);
        assert_eq!(parse_response("Machine Learning", &classes), Some(1));
        assert_eq!(parse_response("learning", &classes), Some(0));
    }

    #[test]
    fn parse_each_class_name_exhaustively() {
        let classes = names(&[
            "Agents",
            "AI",
            "DB",
            "IR",
            "ML",
            "HCI",
            "Information Retrieval",
            "Retrieval",
            "Human-Computer Interaction",
        ]);
        for (i, c) in classes.iter().enumerate() {
            assert_eq!(parse_response(c, &classes), Some(i), "{c}");
        }
    }
}
