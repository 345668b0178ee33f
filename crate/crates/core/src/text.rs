//! Tokenization and string normalization shared by every module.
//!
//! There is exactly one tokenization rule in the crate: lowercase, then split
//! on runs of non-alphanumeric characters. Jaccard distances, diversity
//! statistics and BLEU all go through [`tokenize`].

use std::collections::BTreeSet;

/// Lowercased alphanumeric tokens of `text`, in order.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().collect()
}

/// `1 - |A ∩ B| / |A ∪ B|` over token sets. Two empty sets are at distance 0.
pub fn jaccard_distance(a: &str, b: &str) -> f64 {
    set_jaccard_distance(&token_set(a), &token_set(b))
}

pub fn set_jaccard_distance(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    1.0 - inter as f64 / union as f64
}

/// Canonical comparison form of a value or utterance: lowercase, trimmed,
/// internal whitespace collapsed to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Removes trailing `.`, `?` and `!` (and surrounding whitespace).
pub fn strip_terminal_punct(text: &str) -> &str {
    text.trim()
        .trim_end_matches(|c: char| matches!(c, '.' | '?' | '!') || c.is_whitespace())
}

/// `"get_weather"` / `"GetWeather"` -> `"get weather"`.
pub fn humanize_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len() + 4);
    let mut prev: Option<char> = None;
    for c in name.chars() {
        if c == '_' || c == '-' {
            out.push(' ');
        } else {
            if c.is_uppercase() && prev.is_some_and(|p| p.is_lowercase() || p.is_ascii_digit()) {
                out.push(' ');
            }
            out.extend(c.to_lowercase());
        }
        prev = Some(c);
    }
    normalize(&out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_on_non_alphanumeric_runs() {
        assert_eq!(tokenize("How much did it COST?"), ["how", "much", "did", "it", "cost"]);
        assert_eq!(tokenize("Nando's -- 7pm"), ["nando", "s", "7pm"]);
        assert!(tokenize("?!  ..").is_empty());
    }

    #[test]
    fn jaccard_examples() {
        assert!((jaccard_distance("a b", "b c") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(jaccard_distance("name of the city", "Name of the CITY."), 0.0);
        assert_eq!(jaccard_distance("a b", "c d"), 1.0);
        assert_eq!(jaccard_distance("", "..."), 0.0);
        assert_eq!(jaccard_distance("", "a"), 1.0);
    }

    #[test]
    fn normalize_collapses_whitespace() {
        assert_eq!(normalize("  New   York\t"), "new york");
    }

    #[test]
    fn terminal_punctuation() {
        assert_eq!(strip_terminal_punct("Where do you want to dine?"), "Where do you want to dine");
        assert_eq!(strip_terminal_punct("Really?! "), "Really");
        assert_eq!(strip_terminal_punct("Nando's."), "Nando's");
        assert_eq!(strip_terminal_punct("?"), "");
    }

    #[test]
    fn humanize() {
        assert_eq!(humanize_name("get_weather"), "get weather");
        assert_eq!(humanize_name("GetWeather"), "get weather");
        assert_eq!(humanize_name("price_per_ticket"), "price per ticket");
        assert_eq!(humanize_name("city"), "city");
    }
}
