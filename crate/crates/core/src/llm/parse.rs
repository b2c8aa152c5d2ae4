//! Extraction of list items from free-form completions.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:\d+[.)]|[-•])\s+(.*)$").expect("valid regex"))
}

const QUOTE_PAIRS: [(char, char); 4] = [('"', '"'), ('\'', '\''), ('“', '”'), ('‘', '’')];

fn strip_quotes(item: &str) -> &str {
    let item = item.trim();
    for (open, close) in QUOTE_PAIRS {
        if item.chars().count() >= 2 && item.starts_with(open) && item.ends_with(close) {
            return item[open.len_utf8()..item.len() - close.len_utf8()].trim();
        }
    }
    item
}

/// Items from an enumerated list (`1.`, `1)`, `-`, `•`).
///
/// Marker, surrounding quotes and outer whitespace are stripped. When no
/// line carries a marker every non-empty line is an item. Never returns
/// more than `expected_k` items or an empty item.
pub fn parse_enumerated_items(raw: &str, expected_k: usize) -> Vec<String> {
    parse_items(raw, expected_k, None)
}

/// Like [`parse_enumerated_items`], additionally dropping lines that echo
/// the first or last line of `prompt`. Lines of fewer than four words (a
/// bare class name, say) are never treated as echoable.
pub fn parse_enumerated_items_for_prompt(raw: &str, expected_k: usize, prompt: &str) -> Vec<String> {
    parse_items(raw, expected_k, Some(prompt))
}

fn parse_items(raw: &str, expected_k: usize, prompt: Option<&str>) -> Vec<String> {
    let echoable: Vec<&str> = prompt.map(instruction_lines).unwrap_or_default();
    let lines: Vec<&str> = raw.lines().collect();
    let marked: Vec<&str> = lines
        .iter()
        .filter_map(|l| marker_re().captures(l).map(|c| c.get(1).map_or("", |m| m.as_str())))
        .collect();
    let candidates: Vec<&str> = if marked.is_empty() {
        lines.into_iter().collect()
    } else {
        marked
    };
    candidates
        .into_iter()
        .map(strip_quotes)
        .filter(|item| !item.is_empty())
        .filter(|item| !echoable.iter().any(|p| echoes(item, p)))
        .take(expected_k)
        .map(str::to_string)
        .collect()
}

fn instruction_lines(prompt: &str) -> Vec<&str> {
    let mut nonempty = prompt.lines().filter(|l| !l.trim().is_empty());
    let first = nonempty.next();
    let last = nonempty.next_back();
    first
        .into_iter()
        .chain(last)
        .filter(|l| words(l).len() >= 4)
        .collect()
}

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// True when the line contains at least 80% of the preamble's words.
fn echoes(line: &str, preamble: &str) -> bool {
    let pre = words(preamble);
    if pre.is_empty() {
        return false;
    }
    let have: HashSet<String> = words(line).into_iter().collect();
    let hit = pre.iter().filter(|w| have.contains(*w)).count();
    hit * 5 >= pre.len() * 4
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_numbering() {
        assert_eq!(parse_enumerated_items("1. a\n2. b\n3. c", 3), ["a", "b", "c"]);
    }

    #[test]
    fn bullets_with_shortfall() {
        assert_eq!(parse_enumerated_items("- x\n- y", 5), ["x", "y"]);
    }

    #[test]
    fn paren_numbers_and_dots() {
        assert_eq!(parse_enumerated_items("1) one\n  2) two\n• three", 5), ["one", "two", "three"]);
    }

    #[test]
    fn fallback_to_lines() {
        assert_eq!(parse_enumerated_items("first\n\n second  \n", 5), ["first", "second"]);
    }

    #[test]
    fn truncates_to_k() {
        assert_eq!(parse_enumerated_items("1. a\n2. b\n3. c", 2), ["a", "b"]);
    }

    #[test]
    fn empty_items_dropped() {
        assert_eq!(parse_enumerated_items("1. \"\"\n2. ok\n3.  ", 5), ["ok"]);
    }

    #[test]
    fn drops_echoed_preamble() {
        let prompt = "Describe this class in one sentence.\nmore";
        let raw = "Describe this class in one sentence:\nIt is about taxis.";
        assert_eq!(parse_enumerated_items_for_prompt(raw, 3, prompt), ["It is about taxis."]);
    }

    #[test]
    fn drops_echoed_instruction_but_not_class_names() {
        let prompt = "transport_taxi :\n- call a cab\nModify this query text to be suitable for transport_taxi.";
        let raw = "Modify this query text to be suitable for transport_taxi:\nSend a transport_taxi now";
        assert_eq!(
            parse_enumerated_items_for_prompt(raw, 3, prompt),
            ["Send a transport_taxi now"]
        );
    }

    #[test]
    fn non_numbered_decimal_not_a_marker() {
        assert_eq!(parse_enumerated_items("1.5 million", 3), ["1.5 million"]);
    }
}
