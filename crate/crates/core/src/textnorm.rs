//! Social-media text normalization.
//!
//! Passes run left to right over the whole string: punctuation canonicalization
//! (optional), URLs, user mentions, emoji, the optional abbreviation table,
//! then whitespace collapsing. Every pass maps its output outside its own
//! input pattern, so the composition is idempotent.

use std::borrow::Cow;
use std::sync::OnceLock;

use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmojiMode {
    /// Replace each emoji with `:its_name:`.
    #[default]
    TextualAlias,
    /// Replace each emoji with the policy's emoji placeholder.
    Placeholder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormPolicy {
    pub user_placeholder: String,
    pub url_placeholder: String,
    pub emoji_placeholder: String,
    pub emoji_mode: EmojiMode,
    pub punctuation_canonicalization: bool,
    /// Whole-word substitutions, applied case-sensitively after the other passes.
    pub abbreviations: Vec<(String, String)>,
}

impl Default for NormPolicy {
    fn default() -> Self {
        Self {
            user_placeholder: "@USER".into(),
            url_placeholder: "HTTPURL".into(),
            emoji_placeholder: "EMOJI".into(),
            emoji_mode: EmojiMode::TextualAlias,
            punctuation_canonicalization: true,
            abbreviations: Vec::new(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("placeholder {0:?} must be non-empty and contain no whitespace")]
    BadPlaceholder(String),
    #[error("placeholder {0:?} would itself be rewritten by normalization")]
    UnstablePlaceholder(String),
    #[error("abbreviation entry {0:?} must map a single word to non-empty text")]
    BadAbbreviation(String),
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(?:https?://|www\.)\S*").unwrap())
}

fn mention_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"@\w+").unwrap())
}

impl NormPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        for p in [&self.user_placeholder, &self.url_placeholder, &self.emoji_placeholder] {
            if p.is_empty() || p.chars().any(char::is_whitespace) {
                return Err(PolicyError::BadPlaceholder(p.clone()));
            }
            if url_re().is_match(p) || emojis_in(p) {
                return Err(PolicyError::UnstablePlaceholder(p.clone()));
            }
        }
        let user = &self.user_placeholder;
        if user.contains('@') && !mention_re().find_iter(user).all(|m| m.as_str() == user) {
            return Err(PolicyError::UnstablePlaceholder(user.clone()));
        }
        for p in [&self.url_placeholder, &self.emoji_placeholder] {
            if mention_re().is_match(p) {
                return Err(PolicyError::UnstablePlaceholder(p.clone()));
            }
        }
        for (from, to) in &self.abbreviations {
            let bad_from = from.is_empty() || from.chars().any(|c| !c.is_alphanumeric() && c != '\'');
            let bad_to = to.trim().is_empty()
                || self.has_raw(to)
                || emojis_in(to)
                || to.split_whitespace().any(|t| self.abbreviations.iter().any(|(f, _)| f == t));
            if bad_from || bad_to {
                return Err(PolicyError::BadAbbreviation(from.clone()));
            }
        }
        Ok(())
    }

    /// True when `m` is a raw mention, i.e. anything but the placeholder.
    fn is_raw_mention(&self, m: &str) -> bool {
        m != self.user_placeholder
    }

    fn has_raw(&self, text: &str) -> bool {
        has_raw_patterns(text, self)
    }
}

fn emojis_in(s: &str) -> bool {
    s.graphemes(true).any(|g| emojis::get(g).is_some())
}

fn canonical_punctuation(c: char) -> Option<&'static str> {
    Some(match c {
        '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{2032}' | '\u{00B4}' => "'",
        '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{2033}' | '\u{00AB}' | '\u{00BB}' => "\"",
        '\u{2013}' | '\u{2014}' | '\u{2015}' | '\u{2212}' => "-",
        '\u{2026}' => "...",
        '\u{FF01}' => "!",
        '\u{FF1F}' => "?",
        '\u{FF0C}' => ",",
        _ => return None,
    })
}

fn canonicalize_punctuation(text: &str) -> Cow<'_, str> {
    if !text.chars().any(|c| canonical_punctuation(c).is_some()) {
        return Cow::Borrowed(text);
    }
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match canonical_punctuation(c) {
            Some(rep) => out.push_str(rep),
            None => out.push(c),
        }
    }
    Cow::Owned(out)
}

/// `:lowercase_name:` from an emoji's descriptive name.
fn alias(name: &str) -> String {
    let mut out = String::from(":");
    let mut pending_sep = false;
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            if pending_sep && out.len() > 1 {
                out.push('_');
            }
            pending_sep = false;
            out.push(c.to_ascii_lowercase());
        } else {
            pending_sep = true;
        }
    }
    out.push(':');
    out
}

fn replace_emoji(text: &str, policy: &NormPolicy) -> String {
    let mut out = String::with_capacity(text.len());
    for g in text.graphemes(true) {
        match emojis::get(g) {
            Some(e) => {
                out.push(' ');
                match policy.emoji_mode {
                    EmojiMode::TextualAlias => out.push_str(&alias(e.name())),
                    EmojiMode::Placeholder => out.push_str(&policy.emoji_placeholder),
                }
                out.push(' ');
            }
            None => out.push_str(g),
        }
    }
    out
}

fn replace_abbreviations(tokens: Vec<&str>, table: &[(String, String)]) -> Vec<String> {
    tokens
        .into_iter()
        .map(|t| {
            table
                .iter()
                .find(|(from, _)| from == t)
                .map_or_else(|| t.to_string(), |(_, to)| to.clone())
        })
        .collect()
}

pub fn normalize(text: &str, policy: &NormPolicy) -> String {
    let text = if policy.punctuation_canonicalization {
        canonicalize_punctuation(text)
    } else {
        Cow::Borrowed(text)
    };
    let text = url_re().replace_all(&text, policy.url_placeholder.as_str());
    let text = mention_re().replace_all(&text, |c: &Captures| {
        let m = &c[0];
        if policy.is_raw_mention(m) {
            policy.user_placeholder.clone()
        } else {
            m.to_string()
        }
    });
    let text = replace_emoji(&text, policy);
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if policy.abbreviations.is_empty() {
        tokens.join(" ")
    } else {
        replace_abbreviations(tokens, &policy.abbreviations).join(" ")
    }
}

/// True when `text` still holds a mention or URL that [`normalize`] would rewrite.
pub fn has_raw_patterns(text: &str, policy: &NormPolicy) -> bool {
    url_re().is_match(text) || mention_re().find_iter(text).any(|m| policy.is_raw_mention(m.as_str()))
}
