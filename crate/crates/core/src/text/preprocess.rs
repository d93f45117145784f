//! Tweet normalization: emoji extraction, mention/URL substitution and
//! hashtag normalization, then assembly into the encoder input string.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::emoji::{collapse_whitespace, extract_emojis};
use super::vocab::{CLS, SEP, SPECIAL_TOKENS};

pub const MENTION_TOKEN: &str = "user";
pub const URL_TOKEN: &str = "url";

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(?:https?://|www\.)\S+").unwrap())
}

// A mention is `@` plus at least one word character, not glued to a
// preceding word character or `@` (so `a@b` is left alone).
fn mention_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(^|[^\w@])@\w+").unwrap())
}

fn hashtag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"#(\w+)").unwrap())
}

fn underscores_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"_+").unwrap())
}

/// Replaces URLs with `url` and @-mentions with `user`.
pub fn substitute_mentions_urls(text: &str) -> String {
    let text = url_re().replace_all(text, URL_TOKEN);
    mention_re()
        .replace_all(&text, format!("${{1}}{MENTION_TOKEN}"))
        .into_owned()
}

/// Drops `#` and turns underscores inside hashtag bodies into spaces.
pub fn normalize_hashtags(text: &str) -> String {
    let text = hashtag_re().replace_all(text, |caps: &regex::Captures<'_>| {
        underscores_re().replace_all(&caps[1], " ").into_owned()
    });
    text.replace('#', "")
}

/// Arabic short vowels, tanween, shadda, sukun and superscript alef.
pub fn strip_diacritics(text: &str) -> String {
    text.chars()
        .filter(|c| !matches!(c, '\u{064B}'..='\u{0652}' | '\u{0670}'))
        .collect()
}

/// Literal encoder markers typed by users would corrupt the segment layout,
/// so they are lowercased. Lowercasing cannot form a new marker.
fn neutralize_markers(text: &str) -> String {
    let mut out = text.to_string();
    for marker in SPECIAL_TOKENS {
        if out.contains(marker) {
            out = out.replace(marker, &marker.to_lowercase());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedInput {
    pub normalized_text: String,
    pub emojis: Vec<String>,
    pub rendered: String,
}

impl NormalizedInput {
    pub fn new(normalized_text: String, emojis: Vec<String>) -> Self {
        let rendered = render_input(&normalized_text, &emojis);
        Self {
            normalized_text,
            emojis,
            rendered,
        }
    }
}

/// `"[CLS] {text} [SEP] {emojis} [SEP]"`, or `"[CLS] {text} [SEP] [SEP]"`
/// when there are no emojis.
pub fn render_input(text: &str, emojis: &[String]) -> String {
    if emojis.is_empty() {
        format!("{CLS} {text} {SEP} {SEP}")
    } else {
        format!("{CLS} {text} {SEP} {} {SEP}", emojis.join(" "))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessor {
    /// Off by default: the shared-task data ships without diacritics.
    pub strip_diacritics: bool,
}

impl Preprocessor {
    pub fn process(&self, text: &str) -> NormalizedInput {
        let (text, emojis) = extract_emojis(text);
        // URLs go first so hashtag rewriting cannot mangle them; the second
        // URL pass catches URLs formed by removing `#`.
        let text = url_re().replace_all(&text, URL_TOKEN);
        let text = normalize_hashtags(&text);
        let text = substitute_mentions_urls(&text);
        let text = if self.strip_diacritics {
            strip_diacritics(&text)
        } else {
            text
        };
        let text = neutralize_markers(&collapse_whitespace(&text));
        NormalizedInput::new(text, emojis)
    }
}

pub fn preprocess(text: &str) -> NormalizedInput {
    Preprocessor::default().process(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::emoji;
    use proptest::prelude::*;

    #[test]
    fn mention_and_url_substitution() {
        assert_eq!(substitute_mentions_urls("@sara http://x.co عيب"), "user url عيب");
        assert_eq!(substitute_mentions_urls(""), "");
        assert_eq!(
            substitute_mentions_urls("email a@b not a mention"),
            "email a@b not a mention"
        );
        assert_eq!(substitute_mentions_urls("(@x_1) www.a.com/b?c"), "(user) url");
        assert_eq!(substitute_mentions_urls("@أحمد"), "user");
    }

    #[test]
    fn hashtag_normalization() {
        assert_eq!(normalize_hashtags("#تحرش_جماعي"), "تحرش جماعي");
        assert_eq!(normalize_hashtags("no tags"), "no tags");
        assert_eq!(normalize_hashtags("#A_B_C end"), "A B C end");
        assert_eq!(normalize_hashtags("a # b"), "a  b");
    }

    #[test]
    fn render_formats() {
        assert_eq!(render_input("مرحبا", &["😂".into()]), "[CLS] مرحبا [SEP] 😂 [SEP]");
        assert_eq!(render_input("x", &[]), "[CLS] x [SEP] [SEP]");
        assert_eq!(
            render_input("a b", &["🙂".into(), "🙂".into()]),
            "[CLS] a b [SEP] 🙂 🙂 [SEP]"
        );
    }

    #[test]
    fn full_pipeline() {
        let n = preprocess("@sara شوفي #تحرش_جماعي 😂 https://t.co/abc 😂");
        assert_eq!(n.normalized_text, "user شوفي تحرش جماعي url");
        assert_eq!(n.emojis, vec!["😂", "😂"]);
        assert_eq!(n.rendered, "[CLS] user شوفي تحرش جماعي url [SEP] 😂 😂 [SEP]");
    }

    #[test]
    fn user_typed_markers_are_neutralized() {
        let n = preprocess("a [SEP] b [CL#S]");
        assert_eq!(n.rendered.matches("[SEP]").count(), 2);
        assert_eq!(n.rendered.matches("[CLS]").count(), 1);
    }

    #[test]
    fn diacritics_flag() {
        let p = Preprocessor {
            strip_diacritics: true,
        };
        assert_eq!(p.process("كَتَبَ").normalized_text, "كتب");
        assert_eq!(preprocess("كَتَبَ").normalized_text, "كَتَبَ");
    }

    fn tweetish() -> impl Strategy<Value = String> {
        let atoms = prop::sample::select(vec![
            "a", "b", "_", "#", "@", " ", "  ", "http://", "www.", ".", "/", "ب", "ت", "😂",
            "\u{200D}", "\u{1F3FD}", "\u{1F468}", "[CLS]", "[SEP]", "[", "]", "S", "1", "\u{FE0F}",
            "\u{20E3}", "\u{1F1F2}",
        ]);
        prop::collection::vec(atoms, 0..24).prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn pipeline_is_idempotent(s in tweetish()) {
            let once = preprocess(&s);
            let twice = preprocess(&once.normalized_text);
            prop_assert_eq!(&twice.normalized_text, &once.normalized_text);
            prop_assert!(twice.emojis.is_empty());
        }

        #[test]
        fn rendered_has_marker_layout(s in tweetish()) {
            let n = preprocess(&s);
            let toks: Vec<&str> = n.rendered.split_whitespace().collect();
            prop_assert_eq!(toks[0], CLS);
            prop_assert_eq!(toks.iter().filter(|t| **t == SEP).count(), 2);
            prop_assert_eq!(n.rendered.matches(CLS).count(), 1);
            prop_assert_eq!(n.rendered.matches(SEP).count(), 2);
        }

        #[test]
        fn normalized_text_is_clean(s in tweetish()) {
            let n = preprocess(&s);
            prop_assert!(!n.normalized_text.contains('#'));
            prop_assert!(!n.normalized_text.chars().any(|c| emoji::table().contains(c)));
            prop_assert!(!mention_re().is_match(&n.normalized_text));
            prop_assert!(!url_re().is_match(&n.normalized_text));
        }
    }
}
