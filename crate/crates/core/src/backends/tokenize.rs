/// Token counting hook used for billing and prompt accounting.
pub trait Tokenizer: Send + Sync {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str>;

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

/// Splits on Unicode whitespace. The default for cost accounting.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        text.split_whitespace().collect()
    }
}

/// Alphanumeric runs and single punctuation marks as separate tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordPunctTokenizer;

impl Tokenizer for WordPunctTokenizer {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut out = Vec::new();
        let mut start: Option<usize> = None;
        for (i, ch) in text.char_indices() {
            if ch.is_alphanumeric() || ch == '_' {
                start.get_or_insert(i);
                continue;
            }
            if let Some(s) = start.take() {
                out.push(&text[s..i]);
            }
            if !ch.is_whitespace() {
                out.push(&text[i..i + ch.len_utf8()]);
            }
        }
        if let Some(s) = start {
            out.push(&text[s..]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_counts() {
        assert_eq!(WhitespaceTokenizer.count(""), 0);
        assert_eq!(WhitespaceTokenizer.count("  a b\tc\n"), 3);
    }

    #[test]
    fn word_punct_splits_punctuation() {
        assert_eq!(
            WordPunctTokenizer.tokenize("Hi, it's me."),
            vec!["Hi", ",", "it", "'", "s", "me", "."]
        );
        assert_eq!(WordPunctTokenizer.count("   "), 0);
    }
}
