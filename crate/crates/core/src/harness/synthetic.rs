//! Seeded generator of tweet-like labeled examples. Each category has its
//! own cue words; filler words, mentions, URLs, hashtags and emojis are
//! shared by all categories.

use crate::models::{Category, Misogyny, NUM_CATEGORIES};
use crate::tensor::SeededRng;
use crate::text::RawExample;

/// Class counts of the bundled 64-example fixture, in category order.
pub const FIXTURE_64_COUNTS: [usize; NUM_CATEGORIES] = [22, 6, 6, 6, 6, 6, 6, 6];
/// Seed the bundled fixture was generated with.
pub const FIXTURE_64_SEED: u64 = 64;
/// Imbalanced 2000-example set with a 50:1 dominant-to-rarest ratio.
pub const IMBALANCED_COUNTS: [usize; NUM_CATEGORIES] = [1000, 200, 70, 400, 70, 20, 150, 90];

const CUES: [&[&str]; NUM_CATEGORIES] = [
    &["صباح", "قهوة", "مباراة", "سفر", "كتاب", "طقس"],
    &["لعنة", "ملعونة", "تبا", "يلعن"],
    &["تبرير", "مبالغة", "تهويل", "مزعومة"],
    &["غبية", "تافهة", "جاهلة", "فاشلة"],
    &["طاعة", "مكانك", "اسكتي", "سيطرة"],
    &["جسمك", "تعالي", "صورك", "مثيرة"],
    &["المطبخ", "للزواج", "ناقصة", "عاطفية"],
    &["سأضربك", "اقتلك", "تهديد", "انتقام"],
];

const FILLER: [&str; 10] = ["هذه", "كل", "يوم", "الناس", "في", "على", "من", "هي", "انت", "والله"];
const EMOJIS: [&str; 4] = ["😂", "😡", "🙄", "👍🏽"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub counts: [usize; NUM_CATEGORIES],
    /// Probability of adding a cue word of another random category.
    pub confusion: f64,
    /// Probability of an example carrying no cue word of its own category.
    pub cue_dropout: f64,
}

impl SyntheticSpec {
    /// Cleanly separable: every example has its own cues and no others.
    pub fn separable(counts: [usize; NUM_CATEGORIES]) -> Self {
        Self {
            counts,
            confusion: 0.0,
            cue_dropout: 0.0,
        }
    }

    pub fn noisy(counts: [usize; NUM_CATEGORIES]) -> Self {
        Self {
            counts,
            confusion: 0.35,
            cue_dropout: 0.15,
        }
    }
}

fn pick<'a>(rng: &mut SeededRng, items: &[&'a str]) -> &'a str {
    items[rng.below(items.len())]
}

fn tweet(rng: &mut SeededRng, class: usize, spec: &SyntheticSpec) -> String {
    let mut words: Vec<String> = (0..2 + rng.below(3)).map(|_| pick(rng, &FILLER).to_string()).collect();
    if rng.uniform() >= spec.cue_dropout {
        for _ in 0..1 + rng.below(2) {
            let at = rng.below(words.len() + 1);
            words.insert(at, pick(rng, CUES[class]).to_string());
        }
    }
    if rng.uniform() < spec.confusion {
        let other = (class + 1 + rng.below(NUM_CATEGORIES - 1)) % NUM_CATEGORIES;
        let at = rng.below(words.len() + 1);
        words.insert(at, pick(rng, CUES[other]).to_string());
    }
    if rng.uniform() < 0.3 {
        words.insert(0, format!("@user_{}", rng.below(50)));
    }
    if rng.uniform() < 0.2 {
        words.push(format!("#{}_{}", pick(rng, &FILLER), pick(rng, &FILLER)));
    }
    if rng.uniform() < 0.2 {
        words.push(format!("https://t.co/{:x}", rng.next_u64() & 0xffff_ffff));
    }
    let mut text = words.join(" ");
    if rng.uniform() < 0.4 {
        text.push(' ');
        for _ in 0..1 + rng.below(2) {
            text.push_str(pick(rng, &EMOJIS));
        }
    }
    text
}

/// Examples in a seeded random order, ids `syn-0001` upward.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Vec<RawExample> {
    let mut rng = SeededRng::new(seed);
    let mut classes: Vec<usize> = spec
        .counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    rng.shuffle(&mut classes);
    classes
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let category = Category::from_index(c).expect("category index");
            RawExample {
                id: format!("syn-{:04}", i + 1),
                text: tweet(&mut rng, c, spec),
                task1_label: Some(Misogyny::from_flag(category != Category::None)),
                task2_label: Some(category),
            }
        })
        .collect()
}

/// The bundled 64-example fixture.
pub fn fixture_64() -> Vec<RawExample> {
    generate(&SyntheticSpec::separable(FIXTURE_64_COUNTS), FIXTURE_64_SEED)
}
