//! The fixed category word pool and the matcher that maps free-form POI
//! category text onto pool word ids.

/// Pool words in source order, duplicates already removed.
pub fn default_word_pool() -> Vec<String> {
    include_str!("../../data/category_pool.txt")
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

/// Matches category text against the pool.
///
/// Tokens are scanned left to right; the first token that matches anything
/// decides the result. Per token, exact (case-insensitive) equality wins over
/// substring containment in either direction; substring matching requires at
/// least three characters to keep one-letter tokens from flooding the result.
/// Text that matches nothing falls back to the full pool, which leaves the
/// point-wise attention free to learn the blend.
pub fn match_categories(category_text: &str, pool: &[String]) -> Vec<usize> {
    let lower: Vec<String> = pool.iter().map(|w| w.to_lowercase()).collect();
    let fallback: Vec<usize> = (0..pool.len()).collect();
    let tokens: Vec<String> = category_text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect();
    if tokens.is_empty() {
        return fallback;
    }
    for token in &tokens {
        let exact: Vec<usize> =
            lower.iter().enumerate().filter(|(_, w)| *w == token).map(|(i, _)| i).collect();
        if !exact.is_empty() {
            return exact;
        }
        if token.len() >= 3 {
            let sub: Vec<usize> = lower
                .iter()
                .enumerate()
                .filter(|(_, w)| w.contains(token) || (w.len() >= 3 && token.contains(w.as_str())))
                .map(|(i, _)| i)
                .collect();
            if !sub.is_empty() {
                return sub;
            }
        }
    }
    fallback
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_is_deduplicated_and_nonempty() {
        let pool = default_word_pool();
        assert!(pool.len() > 200);
        let mut lower: Vec<String> = pool.iter().map(|w| w.to_lowercase()).collect();
        lower.sort();
        lower.dedup();
        assert_eq!(lower.len(), pool.len(), "pool contains duplicates");
    }

    #[test]
    fn coffee_shop_matches_coffeehouse() {
        // Derived by hand over the pool: the first token "coffee" has no
        // exact member but is a substring of exactly one word, and that
        // short-circuits before "shop" is considered.
        let pool = default_word_pool();
        let ids = match_categories("Coffee Shop", &pool);
        let words: Vec<&str> = ids.iter().map(|&i| pool[i].as_str()).collect();
        assert_eq!(words, vec!["Coffeehouse"]);
    }

    #[test]
    fn exact_pool_member_matches_itself() {
        let pool = default_word_pool();
        let ids = match_categories("Restaurant", &pool);
        let words: Vec<&str> = ids.iter().map(|&i| pool[i].as_str()).collect();
        assert_eq!(words, vec!["Restaurant"]);
    }

    #[test]
    fn empty_text_falls_back_to_full_pool() {
        let pool = default_word_pool();
        assert_eq!(match_categories("", &pool).len(), pool.len());
        assert_eq!(match_categories("  ;; ", &pool).len(), pool.len());
    }

    #[test]
    fn unmatched_text_falls_back_to_full_pool() {
        let pool = default_word_pool();
        assert_eq!(match_categories("xqzzy", &pool).len(), pool.len());
    }

    #[test]
    fn matching_is_case_insensitive() {
        let pool = default_word_pool();
        assert_eq!(match_categories("RESTAURANT", &pool), match_categories("restaurant", &pool));
    }

    #[test]
    fn result_is_total_for_random_text() {
        let pool = default_word_pool();
        for text in ["a", "Gym & Fitness Center", "Deli / Bodega", "漢字", "123"] {
            assert!(!match_categories(text, &pool).is_empty());
        }
    }
}
