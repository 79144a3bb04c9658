//! Cold-start profiling: a vision-language backend describes the face, and
//! the description is parsed into prior attributes.
//!
//! The grammar is small and anchored to sentences like
//! "The person appears to be a southeast Asian female, approximately 60 to
//! 69 years old.":
//!
//! - age: `A to B years` (also `A-B`, `A and B`), else `A years old`
//! - gender: first of male, female, man, woman, boy, girl
//! - ethnicity: the words directly before the gender token, back to the
//!   first article, verb or age word
//! - emotion: the word after appears/looks/seems (skipping `to be`)
//!
//! Text where none of these is found is kept whole as a `raw_profile` trait.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::domain::{AgeRange, GenerationConfig, ProfileFields, UserProfile};
use crate::gateway::{GatewayError, ImageData, VisionBackend};

/// Trait name holding backend text the grammar could not structure.
pub const RAW_PROFILE_TRAIT: &str = "raw_profile";

pub const DEFAULT_COLD_START_QUERY: &str =
    "Describe this person's apparent age, gender, and ethnicity in one sentence.";

const GENDERS: &[&str] = &["male", "female", "man", "woman", "boy", "girl"];
const EMOTION_VERBS: &[&str] =
    &["appears", "appear", "appearing", "looks", "look", "looking", "seems", "seem", "seeming"];

/// Words that end an ethnicity phrase when walking back from the gender token.
const PHRASE_STOPS: &[&str] = &[
    "a",
    "an",
    "the",
    "this",
    "that",
    "be",
    "is",
    "are",
    "was",
    "were",
    "being",
    "to",
    "of",
    "and",
    "or",
    "as",
    "like",
    "appears",
    "appear",
    "appearing",
    "looks",
    "look",
    "looking",
    "seems",
    "seem",
    "seeming",
    "person",
    "individual",
    "likely",
    "probably",
    "possibly",
    "perhaps",
    "young",
    "old",
    "elderly",
    "older",
    "younger",
    "senior",
    "aged",
    "adult",
    "middle-aged",
    "very",
    "about",
    "approximately",
    "around",
    "roughly",
    "maybe",
    "with",
    "who",
    "in",
    "her",
    "his",
    "their",
];

/// Words that can never be an emotion.
const EMOTION_REJECTS: &[&str] = &[
    "a",
    "an",
    "the",
    "this",
    "that",
    "be",
    "is",
    "are",
    "was",
    "to",
    "of",
    "and",
    "or",
    "as",
    "like",
    "in",
    "on",
    "at",
    "with",
    "for",
    "from",
    "by",
    "her",
    "his",
    "their",
    "its",
    "it",
    "he",
    "she",
    "they",
    "about",
    "approximately",
    "around",
    "roughly",
    "maybe",
    "perhaps",
    "probably",
    "likely",
    "possibly",
    "person",
    "individual",
    "years",
    "year",
    "old",
    "aged",
    "young",
    "elderly",
    "older",
    "younger",
    "very",
    "quite",
    "somewhat",
    "rather",
    "feel",
    "feeling",
    "being",
    "not",
    "so",
];

fn range_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(\d{1,3})\s*(?:to|-|–|and)\s*(\d{1,3})\s*(?:years?|yrs?)\b").expect("valid regex")
    })
}

fn single_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(\d{1,3})[\s-]*(?:years?|yrs?)[\s-]*old\b").expect("valid regex"))
}

fn age_value_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:about|approximately|around)?\s*(\d{1,3})\s*(?:(?:to|-|–|and)\s*(\d{1,3}))?\s*(?:(?:years?|yrs?)(?:[\s-]*old)?)?\s*$")
            .expect("valid regex")
    })
}

fn token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{L}+(?:[-'’]\p{L}+)*|\d+|\S").expect("valid regex"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokenKind {
    Word,
    Other,
}

struct Token<'a> {
    text: &'a str,
    lower: String,
    kind: TokenKind,
}

fn tokens(text: &str) -> Vec<Token<'_>> {
    token_re()
        .find_iter(text)
        .map(|m| {
            let t = m.as_str();
            let kind =
                if t.chars().next().is_some_and(char::is_alphabetic) { TokenKind::Word } else { TokenKind::Other };
            Token { text: t, lower: t.to_lowercase(), kind }
        })
        .collect()
}

fn parse_bound(s: &str) -> Option<u32> {
    s.parse().ok()
}

fn parse_age(text: &str) -> Option<AgeRange> {
    if let Some(c) = range_re().captures(text) {
        return AgeRange::new(parse_bound(&c[1])?, parse_bound(&c[2])?);
    }
    let c = single_re().captures(text)?;
    let age = parse_bound(&c[1])?;
    AgeRange::new(age, age)
}

/// Parses an age value as written in a profile update: "62 to 65", "60-69", "45".
pub fn parse_age_value(value: &str) -> Option<AgeRange> {
    let c = age_value_re().captures(value)?;
    let low = parse_bound(&c[1])?;
    let high = match c.get(2) {
        Some(h) => parse_bound(h.as_str())?,
        None => low,
    };
    AgeRange::new(low, high)
}

fn is_gender(word: &str) -> bool {
    GENDERS.contains(&word)
}

fn parse_emotion(toks: &[Token<'_>]) -> Option<String> {
    for (i, t) in toks.iter().enumerate() {
        if t.kind != TokenKind::Word || !EMOTION_VERBS.contains(&t.lower.as_str()) {
            continue;
        }
        let mut j = i + 1;
        if toks.get(j).is_some_and(|t| t.lower == "to")
            && toks.get(j + 1).is_some_and(|t| t.lower == "be" || t.lower == "feel")
        {
            j += 2;
        }
        let Some(cand) = toks.get(j) else { continue };
        if cand.kind != TokenKind::Word
            || EMOTION_REJECTS.contains(&cand.lower.as_str())
            || is_gender(&cand.lower)
            || EMOTION_VERBS.contains(&cand.lower.as_str())
        {
            continue;
        }
        // lowercasing can split a word (dotted capital I), which would not re-parse
        if starts_noun_phrase(toks, j) || tokens(&cand.lower).len() != 1 {
            continue;
        }
        return Some(cand.lower.clone());
    }
    None
}

/// True when the word at `i` opens a phrase ending in a gender noun
/// ("appears Indian male"): it then describes the person, not a mood.
fn starts_noun_phrase(toks: &[Token<'_>], i: usize) -> bool {
    toks[i + 1..]
        .iter()
        .take_while(|t| t.kind == TokenKind::Word && !PHRASE_STOPS.contains(&t.lower.as_str()))
        .any(|t| is_gender(&t.lower))
}

/// Extracts structured attributes from free-text profile output. Never fails.
pub fn parse_profile_text(text: &str) -> ProfileFields {
    let mut fields = ProfileFields::default();
    if text.trim().is_empty() {
        return fields;
    }
    let toks = tokens(text);

    fields.age_range = parse_age(text);

    if let Some(g) = toks.iter().position(|t| t.kind == TokenKind::Word && is_gender(&t.lower)) {
        fields.gender = Some(toks[g].lower.clone());
        let mut start = g;
        while start > 0 {
            let prev = &toks[start - 1];
            if prev.kind != TokenKind::Word || PHRASE_STOPS.contains(&prev.lower.as_str()) || is_gender(&prev.lower) {
                break;
            }
            start -= 1;
        }
        if start < g {
            let phrase: Vec<&str> = toks[start..g].iter().map(|t| t.text).collect();
            fields.ethnicity = Some(phrase.join(" "));
        }
    }

    fields.emotion = parse_emotion(&toks);

    if fields.is_empty() {
        fields.extra_traits.push((RAW_PROFILE_TRAIT.to_string(), text.trim().to_string()));
    }
    fields
}

fn article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Canonical sentence form of parsed fields; parsing it yields the same fields.
pub fn profile_sentence(fields: &ProfileFields) -> String {
    let mut sentences = Vec::new();
    let age = fields.age_range.map(|a| format!("approximately {} to {} years old", a.low, a.high));
    match (&fields.gender, &age) {
        (Some(gender), _) => {
            let noun = match &fields.ethnicity {
                Some(eth) => format!("{eth} {gender}"),
                None => gender.clone(),
            };
            let mut s = format!("The person appears to be {} {noun}", article(&noun));
            if let Some(age) = &age {
                s.push_str(", ");
                s.push_str(age);
            }
            s.push('.');
            sentences.push(s);
        }
        (None, Some(age)) => sentences.push(format!("The person is {age}.")),
        (None, None) => {}
    }
    if let Some(emotion) = &fields.emotion {
        sentences.push(format!("The person appears {emotion}."));
    }
    if sentences.is_empty() {
        if let Some((_, raw)) = fields.extra_traits.iter().find(|(n, _)| n == RAW_PROFILE_TRAIT) {
            return raw.clone();
        }
    }
    sentences.join(" ")
}

/// Result of a cold-start query.
#[derive(Debug, Clone, PartialEq)]
pub struct ColdStart {
    /// Backend text verbatim; empty when consent was withheld.
    pub profile_text: String,
    pub profile: UserProfile,
}

/// Builds a revision-0 prior profile for `user_id` from a face image.
///
/// Without consent the image is never read and the backend is never called.
pub fn init_profile(
    user_id: &str,
    image_path: &Path,
    query: &str,
    backend: &dyn VisionBackend,
    config: &GenerationConfig,
    consent: bool,
    max_image_bytes: usize,
) -> Result<ColdStart, GatewayError> {
    if !consent {
        return Ok(ColdStart { profile_text: String::new(), profile: UserProfile::empty(user_id, false) });
    }
    let image = ImageData::load(image_path, max_image_bytes)?;
    init_profile_from_image(user_id, &image, query, backend, config, consent)
}

/// [`init_profile`] for an image already in memory.
pub fn init_profile_from_image(
    user_id: &str,
    image: &ImageData,
    query: &str,
    backend: &dyn VisionBackend,
    config: &GenerationConfig,
    consent: bool,
) -> Result<ColdStart, GatewayError> {
    if !consent {
        return Ok(ColdStart { profile_text: String::new(), profile: UserProfile::empty(user_id, false) });
    }
    let profile_text = backend.vision_complete(image, query, config)?;
    let fields = parse_profile_text(&profile_text);
    tracing::debug!(user_id, fields = ?fields, "cold-start profile parsed");
    let profile = UserProfile::from_prior_fields(user_id, fields, true);
    Ok(ColdStart { profile_text, profile })
}
