//! Social-media text normalization.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;

/// Sentiment hashtags deleted by [`normalize_text`].
pub const SENTIMENT_HASHTAGS: &str = include_str!("../../data/sentiment_hashtags.txt");

static LEXICON: LazyLock<HashSet<String>> = LazyLock::new(|| parse_lexicon(SENTIMENT_HASHTAGS));
static URL_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(?:https?://|www\.)\S+").unwrap());
static MENTION_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\B@\w+").unwrap());
static HASHTAG_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\B#(\w+)").unwrap());

pub fn parse_lexicon(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

/// Emoji detection by block: pictographs, emoticons, transport, supplemental
/// symbols, symbols and pictographs extended-A, regional indicators,
/// miscellaneous symbols, dingbats, and the star/circle arrows block.
pub fn is_emoji(c: char) -> bool {
    matches!(c as u32,
        0x1F000..=0x1FAFF | 0x2600..=0x27BF | 0x2B00..=0x2BFF | 0x2300..=0x23FF)
}

/// Variation selector 16 and zero-width joiner glue emoji sequences together.
fn is_emoji_glue(c: char) -> bool {
    matches!(c, '\u{FE0F}' | '\u{200D}')
}

fn replace_emoji(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_run = false;
    for c in text.chars() {
        if is_emoji(c) || (in_run && is_emoji_glue(c)) {
            if !in_run {
                out.push_str(" EMOJI ");
                in_run = true;
            }
        } else if is_emoji_glue(c) {
            continue;
        } else {
            in_run = false;
            out.push(c);
        }
    }
    out
}

fn collapse_punctuation(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut prev = None;
    for c in text.chars() {
        if c.is_ascii_punctuation() && prev == Some(c) {
            continue;
        }
        out.push(c);
        prev = Some(c);
    }
    out
}

fn normalize_once(text: &str, lexicon: &HashSet<String>) -> String {
    let s = URL_RE.replace_all(text, "HTTPURL");
    let s = replace_emoji(&s);
    let s = MENTION_RE.replace_all(&s, "@USER");
    let s = HASHTAG_RE.replace_all(&s, |caps: &regex::Captures<'_>| {
        let tag = &caps[1];
        if lexicon.contains(&tag.to_lowercase()) {
            String::new()
        } else {
            tag.to_string()
        }
    });
    let s = collapse_punctuation(&s);
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// URLs become `HTTPURL`, mentions `@USER`, emoji runs `EMOJI`; sentiment
/// hashtags are deleted and other hashtags lose their `#`; runs of one
/// repeated ASCII punctuation mark shrink to one; whitespace is collapsed.
///
/// The rules are applied until the text stops changing, so the result is a
/// fixed point.
pub fn normalize_text(raw: &str) -> String {
    normalize_with(raw, &LEXICON)
}

pub fn normalize_with(raw: &str, lexicon: &HashSet<String>) -> String {
    let mut cur = normalize_once(raw, lexicon);
    loop {
        let next = normalize_once(&cur, lexicon);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}
