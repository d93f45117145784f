//! Emoji cluster segmentation against the bundled inventory in
//! `data/emoji_table.txt`.

use std::sync::OnceLock;

const TABLE_SOURCE: &str = include_str!("../../data/emoji_table.txt");

const ZWJ: char = '\u{200D}';
const KEYCAP: char = '\u{20E3}';

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Base,
    Component,
    Keycap,
}

#[derive(Debug)]
pub struct EmojiTable {
    pub version: u32,
    ranges: Vec<(u32, u32, Class)>,
}

impl EmojiTable {
    fn parse(src: &str) -> Self {
        let mut version = 0;
        let mut ranges = Vec::new();
        for line in src.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (kind, value) = line.split_once(' ').expect("malformed emoji table line");
            if kind == "version" {
                version = value.parse().expect("emoji table version");
                continue;
            }
            let class = match kind {
                "base" => Class::Base,
                "component" => Class::Component,
                "keycap" => Class::Keycap,
                other => panic!("unknown emoji table entry {other}"),
            };
            let (lo, hi) = value.split_once("..").unwrap_or((value, value));
            let lo = u32::from_str_radix(lo, 16).expect("hex codepoint");
            let hi = u32::from_str_radix(hi, 16).expect("hex codepoint");
            ranges.push((lo, hi, class));
        }
        ranges.sort_by_key(|r| r.0);
        Self { version, ranges }
    }

    fn class(&self, c: char) -> Option<Class> {
        let cp = c as u32;
        let i = self.ranges.partition_point(|r| r.0 <= cp);
        let (lo, hi, class) = *self.ranges.get(i.checked_sub(1)?)?;
        (lo <= cp && cp <= hi).then_some(class)
    }

    /// Whether `c` is any codepoint the table lists as emoji material
    /// (keycap starters excluded: they are ordinary ASCII on their own).
    pub fn contains(&self, c: char) -> bool {
        matches!(self.class(c), Some(Class::Base | Class::Component))
    }

    fn is_base(&self, c: char) -> bool {
        self.class(c) == Some(Class::Base)
    }

    fn is_component(&self, c: char) -> bool {
        self.class(c) == Some(Class::Component)
    }
}

pub fn table() -> &'static EmojiTable {
    static TABLE: OnceLock<EmojiTable> = OnceLock::new();
    TABLE.get_or_init(|| EmojiTable::parse(TABLE_SOURCE))
}

fn is_regional_indicator(c: char) -> bool {
    ('\u{1F1E6}'..='\u{1F1FF}').contains(&c)
}

fn is_modifier_or_selector(c: char) -> bool {
    matches!(c, '\u{FE0E}' | '\u{FE0F}' | '\u{1F3FB}'..='\u{1F3FF}' | '\u{E0020}'..='\u{E007F}')
}

/// Length in chars of the emoji cluster starting at `chars[0]`, if any.
fn cluster_len(chars: &[char], table: &EmojiTable) -> Option<usize> {
    let first = *chars.first()?;

    if table.class(first) == Some(Class::Keycap) {
        let mut i = 1;
        if chars.get(i) == Some(&'\u{FE0F}') {
            i += 1;
        }
        return (chars.get(i) == Some(&KEYCAP)).then_some(i + 1);
    }

    if !table.is_base(first) {
        return None;
    }

    let mut i = element_len(chars, 0);
    while chars.get(i) == Some(&ZWJ) && chars.get(i + 1).is_some_and(|&c| table.is_base(c)) {
        i = element_len(chars, i + 1);
    }
    Some(i)
}

/// One emoji element: a base followed by selectors/modifiers/tags, or a
/// regional-indicator pair.
fn element_len(chars: &[char], start: usize) -> usize {
    let mut i = start + 1;
    if is_regional_indicator(chars[start]) {
        if chars.get(i).is_some_and(|&c| is_regional_indicator(c)) {
            i += 1;
        }
        return i;
    }
    while chars.get(i).is_some_and(|&c| is_modifier_or_selector(c)) {
        i += 1;
    }
    i
}

/// Removes emoji clusters from `text`, returning the remaining text with
/// whitespace collapsed and the clusters in order of occurrence. Stray
/// joiners, selectors and modifiers are dropped.
pub fn extract_emojis(text: &str) -> (String, Vec<String>) {
    let table = table();
    let chars: Vec<char> = text.chars().collect();
    let mut rest = String::with_capacity(text.len());
    let mut emojis = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if let Some(n) = cluster_len(&chars[i..], table) {
            emojis.push(chars[i..i + n].iter().collect());
            rest.push(' ');
            i += n;
        } else if table.is_component(chars[i]) {
            rest.push(' ');
            i += 1;
        } else {
            rest.push(chars[i]);
            i += 1;
        }
    }
    (collapse_whitespace(&rest), emojis)
}

pub(crate) fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
