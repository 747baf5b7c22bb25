//! Small shared helpers.

use std::collections::BTreeSet;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a sequence of byte slices, hashed as one concatenation.
pub fn fnv1a64(parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Lowercase whitespace tokens.
pub fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokens(text).into_iter().collect()
}

/// Lowercase words with surrounding punctuation trimmed (`"wi-fi,"` gives `"wi-fi"`).
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Fraction of `label`'s distinct tokens that also occur in `query`.
pub fn label_overlap(label: &str, query: &BTreeSet<String>) -> f64 {
    let label: BTreeSet<String> = words(label).into_iter().collect();
    if label.is_empty() {
        return 0.0;
    }
    let hit = label.iter().filter(|t| query.contains(*t)).count();
    hit as f64 / label.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(&[b""]), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(&[b"a"]), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(&[b"foobar"]), 0x85944171f73967e8);
        assert_eq!(fnv1a64(&[b"foo", b"bar"]), fnv1a64(&[b"foobar"]));
    }

    #[test]
    fn overlap_ratio() {
        let q: BTreeSet<String> = words("Open Network, and switch wifi on")
            .into_iter()
            .collect();
        assert_eq!(label_overlap("wifi", &q), 1.0);
        assert_eq!(label_overlap("wifi calling", &q), 0.5);
        assert_eq!(label_overlap("", &q), 0.0);
        assert_eq!(
            words("Turn on Wi-Fi, then (quickly)"),
            ["turn", "on", "wi-fi", "then", "quickly"]
        );
    }
}
