//! Parsing of decoded attribute lists.

use crate::backbones::tokenizer::normalize;

fn is_list_marker(word: &str) -> bool {
    let w = word.strip_suffix('.').unwrap_or(word);
    !w.is_empty() && w.chars().all(|c| c.is_ascii_digit())
}

/// Splits text on numbered-list markers (`1.`, `2`, …). Text before the first
/// marker counts as an item, since prompts usually end with the first marker.
pub fn parse_numbered_list(text: &str) -> Vec<String> {
    let mut items = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for w in text.split_whitespace() {
        if is_list_marker(w) {
            if !cur.is_empty() {
                items.push(cur.join(" "));
                cur.clear();
            }
        } else {
            cur.push(w);
        }
    }
    if !cur.is_empty() {
        items.push(cur.join(" "));
    }
    items
}

/// Drops exact repeats after normalization, keeping first occurrences in order.
pub fn dedup_attributes(items: &[String]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    items
        .iter()
        .map(|s| normalize(s))
        .filter(|s| !s.is_empty() && seen.insert(s.clone()))
        .collect()
}
