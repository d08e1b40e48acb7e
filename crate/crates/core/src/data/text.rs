//! Word-level tokenization and a rule-based sentence splitter.

/// Lowercases and splits on whitespace; every non-alphanumeric character is
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// Lowercased, whitespace-collapsed form used for answer identity.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub const DEFAULT_ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "ft", "vs", "etc", "inc", "ltd", "co",
    "corp", "no", "vol", "fig", "gen", "col", "lt", "sgt", "capt", "rev", "gov", "sen", "rep",
    "e.g", "i.e", "u.s", "u.k", "a.m", "p.m", "approx", "est", "jan", "feb", "mar", "apr", "aug",
    "sept", "sep", "oct", "nov", "dec", "c",
];

#[derive(Clone, Debug)]
pub struct SplitterConfig {
    pub abbreviations: Vec<String>,
}

impl Default for SplitterConfig {
    fn default() -> Self {
        Self {
            abbreviations: DEFAULT_ABBREVIATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A sentence as a half-open range of char (code point) offsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
}

/// Splits on `.`, `!` or `?` followed by whitespace. A period does not end a
/// sentence after a listed abbreviation or a single-letter initial.
///
/// Spans tile the text: each sentence owns the whitespace that follows it,
/// so every char offset belongs to exactly one span. Callers trim.
pub fn split_sentences(text: &str, cfg: &SplitterConfig) -> Vec<SentenceSpan> {
    let chars: Vec<char> = text.chars().collect();
    let mut spans = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let next_ws = chars.get(i + 1).is_some_and(|n| n.is_whitespace());
        if matches!(c, '.' | '!' | '?') && next_ws && !(c == '.' && is_abbreviation(&chars, i, cfg)) {
            let mut end = i + 1;
            while end < chars.len() && chars[end].is_whitespace() {
                end += 1;
            }
            spans.push(SentenceSpan { start, end });
            start = end;
            i = end;
            continue;
        }
        i += 1;
    }
    if start < chars.len() {
        spans.push(SentenceSpan {
            start,
            end: chars.len(),
        });
    }
    spans
}

fn is_abbreviation(chars: &[char], dot: usize, cfg: &SplitterConfig) -> bool {
    let mut j = dot;
    while j > 0 && (chars[j - 1].is_alphanumeric() || chars[j - 1] == '.') {
        j -= 1;
    }
    let word: String = chars[j..dot].iter().collect::<String>().to_lowercase();
    if word.is_empty() {
        return false;
    }
    let letters = word.chars().filter(|c| c.is_alphabetic()).count();
    if letters == 1 && word.chars().count() == 1 && chars[j].is_uppercase() {
        return true;
    }
    cfg.abbreviations.contains(&word)
}

/// Text of `span`, trimmed.
pub fn span_text(text: &str, span: SentenceSpan) -> String {
    text.chars()
        .skip(span.start)
        .take(span.end - span.start)
        .collect::<String>()
        .trim()
        .to_string()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(
            tokenize("Who won Super Bowl 50? The Broncos!"),
            vec!["who", "won", "super", "bowl", "50", "?", "the", "broncos", "!"]
        );
        assert_eq!(tokenize("Levi's"), vec!["levi", "'", "s"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn splits_three_sentences() {
        let text = "First one here. Second, with Dr. Who in it! Third?";
        let cfg = SplitterConfig::default();
        let spans = split_sentences(text, &cfg);
        let sents: Vec<String> = spans.iter().map(|&s| span_text(text, s)).collect();
        assert_eq!(sents, vec!["First one here.", "Second, with Dr. Who in it!", "Third?"]);
    }

    #[test]
    fn initials_and_decimals_do_not_split() {
        let cfg = SplitterConfig::default();
        let text = "John F. Kennedy paid 3.5 dollars. Then he left.";
        let sents: Vec<String> = split_sentences(text, &cfg)
            .into_iter()
            .map(|s| span_text(text, s))
            .collect();
        assert_eq!(sents, vec!["John F. Kennedy paid 3.5 dollars.", "Then he left."]);
    }

    #[test]
    fn spans_tile_the_text() {
        let text = "A b. C d!  E f? g";
        let spans = split_sentences(text, &SplitterConfig::default());
        assert_eq!(spans.first().unwrap().start, 0);
        assert_eq!(spans.last().unwrap().end, text.chars().count());
        for w in spans.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
    }

    proptest! {
        #[test]
        fn detokenize_round_trips(words in prop::collection::vec("[a-z0-9]{1,6}|[.,?!']", 1..20)) {
            let toks = tokenize(&detokenize(&words));
            prop_assert_eq!(&toks, &words);
            prop_assert_eq!(tokenize(&detokenize(&toks)), toks);
        }
    }
}
