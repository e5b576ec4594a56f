//! Text normalization shared by every component that touches raw strings.

/// Lowercase, trim and collapse runs of whitespace to a single space.
pub fn normalize_query(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for word in raw.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Lowercase and split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_collapses_and_lowercases() {
        assert_eq!(normalize_query("  Red   SHOES\t"), "red shoes");
        assert_eq!(normalize_query(""), "");
    }

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(tokenize("Men's Red-Shoes, size 10"), vec!["men", "s", "red", "shoes", "size", "10"]);
        assert!(tokenize(" -- ").is_empty());
    }

    proptest::proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_query(&s);
            proptest::prop_assert_eq!(normalize_query(&once), once);
        }
    }
}
