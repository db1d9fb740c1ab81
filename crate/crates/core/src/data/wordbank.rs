//! Closed word bank for the synthetic world: concept names, their held-out
//! synonym names, and every auxiliary word the prompts and captions use.

/// How a concept appears in video frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptKind {
    /// Same appearance in every frame.
    Static,
    /// A moving pattern; `pair` concepts share appearance and differ only in direction.
    Temporal,
}

#[derive(Clone, Copy, Debug)]
pub struct ConceptEntry {
    pub name: &'static str,
    pub synonym: &'static str,
    pub kind: ConceptKind,
    /// Caption sentence used by the captioning stub.
    pub caption: &'static str,
}

const fn stat(name: &'static str, synonym: &'static str, caption: &'static str) -> ConceptEntry {
    ConceptEntry {
        name,
        synonym,
        kind: ConceptKind::Static,
        caption,
    }
}

const fn temp(name: &'static str, synonym: &'static str, caption: &'static str) -> ConceptEntry {
    ConceptEntry {
        name,
        synonym,
        kind: ConceptKind::Temporal,
        caption,
    }
}

pub const STATIC_CONCEPTS: &[ConceptEntry] = &[
    stat("water slide", "aqua chute", "a child is going down a water slide"),
    stat("red car", "crimson automobile", "a red car is parked on the street"),
    stat("small dog", "little puppy", "a small dog is sitting on the grass"),
    stat("wooden table", "timber desk", "a wooden table stands in the room"),
    stat("green tree", "leafy oak", "a green tree grows near the road"),
    stat("bright lamp", "glowing lantern", "a bright lamp lights the room"),
    stat("blue sky", "azure heavens", "the blue sky is visible above"),
    stat("stone bridge", "rock viaduct", "a stone bridge crosses the river"),
    stat("soccer ball", "football sphere", "a soccer ball lies on the field"),
    stat("black cat", "dark kitten", "a black cat is resting on the sofa"),
    stat("tall building", "high tower", "a tall building rises over the city"),
    stat("snowy mountain", "frosty peak", "a snowy mountain is in the distance"),
    stat("fresh bread", "warm loaf", "fresh bread is on the counter"),
    stat("grilling meat", "barbecuing steak", "a man is grilling meat outside"),
];

/// Consecutive entries form direction pairs (`2j`, `2j+1`).
pub const TEMPORAL_CONCEPTS: &[ConceptEntry] = &[
    temp("rising balloon", "ascending blimp", "a balloon is rising into the air"),
    temp("falling balloon", "descending blimp", "a balloon is falling to the ground"),
    temp("opening door", "unsealing gate", "a person is opening a door"),
    temp("closing door", "shutting gate", "a person is closing a door"),
    temp("pushing cart", "shoving trolley", "a woman is pushing a cart"),
    temp("pulling cart", "dragging trolley", "a woman is pulling a cart"),
    temp("approaching house", "nearing home", "a person is approaching a house"),
    temp("leaving house", "departing home", "a person is leaving a house"),
];

/// Words used by prompt templates, attribute prompts and list numbering.
pub const PROMPT_WORDS: &[&str] = &[
    "q", "what", "are", "useful", "features", "for", "distinguishing", "a", "in", "photo", "there", "several",
    "visual", "to", "tell", "about", "video", "of", "clip", "showing", "footage", "recording", "an", "example",
    "which", "has", "the", "this", "1", "2", "3", "4", "5", "6", "7", "8", "9",
];

/// Descriptive words the toy language model can emit when decoding text.
pub const ATTRIBUTE_WORDS: &[&str] = &[
    "shape", "color", "texture", "size", "motion", "edges", "pattern", "parts", "fur", "wheels", "legs", "surface",
    "light", "shadow", "long", "short", "round", "flat", "shiny", "soft", "hard", "big", "large", "mane", "four",
    "two", "handle", "tail", "roof", "windows", "branches", "leaves", "crust", "smoke", "string", "hinge", "frame",
    "stripes", "spots", "metal", "glass", "paper", "smooth", "rough", "curved", "straight", "upward", "downward",
    "forward", "backward", "moving", "still", "heavy", "thin", "wide", "narrow", "dark", "pale",
];

/// Extra words appearing in stub captions and pipeline fixtures.
pub const CAPTION_WORDS: &[&str] = &[
    "child", "is", "going", "down", "parked", "on", "street", "sitting", "grass", "stands", "room", "grows",
    "near", "road", "lights", "visible", "above", "crosses", "river", "lies", "field", "resting", "sofa",
    "rises", "over", "city", "distance", "counter", "man", "outside", "balloon", "into", "air", "ground",
    "person", "door", "woman", "house", "riding", "sliding", "barbequing", "barbecue", "cooking", "campfire",
    "grilling", "playground", "playing", "park", "at", "night",
];

/// Word-bank entry whose name or synonym is `name`.
pub fn entry_by_name(name: &str) -> Option<&'static ConceptEntry> {
    STATIC_CONCEPTS.iter().chain(TEMPORAL_CONCEPTS).find(|c| c.name == name || c.synonym == name)
}

/// Word-level synonym pairs derived from the concept names.
pub fn synonym_word_pairs() -> Vec<(&'static str, &'static str)> {
    let mut out = Vec::new();
    for c in STATIC_CONCEPTS.iter().chain(TEMPORAL_CONCEPTS) {
        for (a, b) in c.name.split_whitespace().zip(c.synonym.split_whitespace()) {
            if a != b && !out.contains(&(a, b)) {
                out.push((a, b));
            }
        }
    }
    out
}

/// Every word of the closed vocabulary, sorted and deduplicated.
pub fn all_words() -> Vec<String> {
    let mut words: Vec<String> = STATIC_CONCEPTS
        .iter()
        .chain(TEMPORAL_CONCEPTS)
        .flat_map(|c| {
            c.name
                .split_whitespace()
                .chain(c.synonym.split_whitespace())
                .chain(c.caption.split_whitespace())
        })
        .chain(PROMPT_WORDS.iter().copied())
        .chain(ATTRIBUTE_WORDS.iter().copied())
        .chain(CAPTION_WORDS.iter().copied())
        .map(str::to_string)
        .collect();
    words.sort();
    words.dedup();
    words
}
