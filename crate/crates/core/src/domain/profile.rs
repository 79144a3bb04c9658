//! User profile model with prior/posterior provenance per attribute.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::TurnRef;

/// Upper bound on any age the profile will hold.
pub const MAX_AGE_YEARS: u32 = 130;

/// Default confidence attached to appearance-derived attributes.
pub const PRIOR_CONFIDENCE: f64 = 0.5;
/// Default confidence attached to attributes confirmed in dialogue.
pub const POSTERIOR_CONFIDENCE: f64 = 0.9;

/// Where an attribute value came from.
///
/// Ordered: `Prior < Posterior`. A field may be promoted but never demoted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Prior,
    Posterior,
}

impl Provenance {
    pub fn default_confidence(self) -> f64 {
        match self {
            Provenance::Prior => PRIOR_CONFIDENCE,
            Provenance::Posterior => POSTERIOR_CONFIDENCE,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Prior => "prior",
            Provenance::Posterior => "posterior",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inclusive age range in years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeRange {
    pub low: u32,
    pub high: u32,
}

impl AgeRange {
    /// Returns `None` unless `low <= high <= MAX_AGE_YEARS`.
    pub fn new(low: u32, high: u32) -> Option<Self> {
        (low <= high && high <= MAX_AGE_YEARS).then_some(Self { low, high })
    }

    pub fn is_valid(&self) -> bool {
        self.low <= self.high && self.high <= MAX_AGE_YEARS
    }
}

impl fmt::Display for AgeRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.low, self.high)
    }
}

/// A profile value tagged with provenance and confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute<T> {
    pub value: T,
    pub provenance: Provenance,
    pub confidence: f64,
}

impl<T> Attribute<T> {
    pub fn prior(value: T) -> Self {
        Self { value, provenance: Provenance::Prior, confidence: PRIOR_CONFIDENCE }
    }

    pub fn posterior(value: T) -> Self {
        Self { value, provenance: Provenance::Posterior, confidence: POSTERIOR_CONFIDENCE }
    }
}

/// Free-form named trait (hobby, preferred language, raw backend description...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trait {
    pub name: String,
    pub value: String,
    pub provenance: Provenance,
    pub confidence: f64,
}

/// Attribute values without provenance, as produced by the profile-text parser.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileFields {
    pub age_range: Option<AgeRange>,
    pub gender: Option<String>,
    pub ethnicity: Option<String>,
    pub emotion: Option<String>,
    pub extra_traits: Vec<(String, String)>,
}

impl ProfileFields {
    pub fn is_empty(&self) -> bool {
        self.age_range.is_none()
            && self.gender.is_none()
            && self.ethnicity.is_none()
            && self.emotion.is_none()
            && self.extra_traits.is_empty()
    }
}

/// Structured user model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub age_range: Option<Attribute<AgeRange>>,
    pub gender: Option<Attribute<String>>,
    pub ethnicity: Option<Attribute<String>>,
    pub emotion: Option<Attribute<String>>,
    #[serde(default)]
    pub extra_traits: Vec<Trait>,
    pub revision: u64,
    pub consent_granted: bool,
    /// Agent turn that produced this revision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<TurnRef>,
}

/// Violations of [`UserProfile`] invariants.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProfileInvariant {
    #[error("age range {0} outside 0..={MAX_AGE_YEARS} or inverted")]
    AgeRange(AgeRange),
    #[error("visual attribute `{0}` present without consent")]
    VisualWithoutConsent(&'static str),
    #[error("confidence for `{0}` outside [0, 1]")]
    Confidence(String),
    #[error("empty user id")]
    EmptyUserId,
}

impl UserProfile {
    /// Profile with no attributes at revision 0.
    pub fn empty(user_id: impl Into<String>, consent_granted: bool) -> Self {
        Self {
            user_id: user_id.into(),
            age_range: None,
            gender: None,
            ethnicity: None,
            emotion: None,
            extra_traits: Vec::new(),
            revision: 0,
            consent_granted,
            origin: None,
        }
    }

    /// Builds a revision-0 profile whose populated fields are all `Prior`.
    ///
    /// Visual attributes are dropped when `consent_granted` is false.
    pub fn from_prior_fields(user_id: impl Into<String>, fields: ProfileFields, consent_granted: bool) -> Self {
        let mut profile = Self::empty(user_id, consent_granted);
        profile.merge_prior(fields);
        profile
    }

    /// Fills absent or still-`Prior` fields from parsed fields; `Posterior` fields are kept.
    ///
    /// Does not touch `revision`.
    pub fn merge_prior(&mut self, fields: ProfileFields) {
        fn fill<T>(slot: &mut Option<Attribute<T>>, value: Option<T>) {
            if let Some(value) = value {
                match slot {
                    Some(existing) if existing.provenance == Provenance::Posterior => {}
                    _ => *slot = Some(Attribute::prior(value)),
                }
            }
        }
        if self.consent_granted {
            fill(&mut self.age_range, fields.age_range.filter(AgeRange::is_valid));
            fill(&mut self.gender, fields.gender);
            fill(&mut self.ethnicity, fields.ethnicity);
            fill(&mut self.emotion, fields.emotion);
        }
        for (name, value) in fields.extra_traits {
            match self.extra_traits.iter_mut().find(|t| t.name == name) {
                Some(t) if t.provenance == Provenance::Posterior => {}
                Some(t) => t.value = value,
                None => self.extra_traits.push(Trait {
                    name,
                    value,
                    provenance: Provenance::Prior,
                    confidence: PRIOR_CONFIDENCE,
                }),
            }
        }
    }

    pub fn has_visual_fields(&self) -> bool {
        self.age_range.is_some() || self.gender.is_some() || self.ethnicity.is_some() || self.emotion.is_some()
    }

    pub fn trait_value(&self, name: &str) -> Option<&str> {
        self.extra_traits.iter().find(|t| t.name == name).map(|t| t.value.as_str())
    }

    /// Provenance of every populated field, keyed by canonical field name.
    pub fn provenances(&self) -> Vec<(String, Provenance)> {
        let mut out = Vec::new();
        if let Some(a) = &self.age_range {
            out.push(("age".to_string(), a.provenance));
        }
        if let Some(a) = &self.gender {
            out.push(("gender".to_string(), a.provenance));
        }
        if let Some(a) = &self.ethnicity {
            out.push(("ethnicity".to_string(), a.provenance));
        }
        if let Some(a) = &self.emotion {
            out.push(("emotion".to_string(), a.provenance));
        }
        for t in &self.extra_traits {
            out.push((format!("trait:{}", t.name), t.provenance));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ProfileInvariant> {
        if self.user_id.is_empty() {
            return Err(ProfileInvariant::EmptyUserId);
        }
        if let Some(age) = &self.age_range {
            if !age.value.is_valid() {
                return Err(ProfileInvariant::AgeRange(age.value));
            }
        }
        if !self.consent_granted {
            for (name, present) in [
                ("age", self.age_range.is_some()),
                ("gender", self.gender.is_some()),
                ("ethnicity", self.ethnicity.is_some()),
                ("emotion", self.emotion.is_some()),
            ] {
                if present {
                    return Err(ProfileInvariant::VisualWithoutConsent(name));
                }
            }
        }
        let confidences = [
            ("age", self.age_range.as_ref().map(|a| a.confidence)),
            ("gender", self.gender.as_ref().map(|a| a.confidence)),
            ("ethnicity", self.ethnicity.as_ref().map(|a| a.confidence)),
            ("emotion", self.emotion.as_ref().map(|a| a.confidence)),
        ];
        for (name, c) in confidences {
            if let Some(c) = c {
                if !(0.0..=1.0).contains(&c) {
                    return Err(ProfileInvariant::Confidence(name.to_string()));
                }
            }
        }
        for t in &self.extra_traits {
            if !(0.0..=1.0).contains(&t.confidence) {
                return Err(ProfileInvariant::Confidence(t.name.clone()));
            }
        }
        Ok(())
    }

    /// Canonical `name: value (provenance)` lines used in prompts.
    pub fn canonical_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        if let Some(a) = &self.age_range {
            lines.push(format!("age: {} ({})", a.value, a.provenance));
        }
        if let Some(a) = &self.gender {
            lines.push(format!("gender: {} ({})", a.value, a.provenance));
        }
        if let Some(a) = &self.ethnicity {
            lines.push(format!("ethnicity: {} ({})", a.value, a.provenance));
        }
        if let Some(a) = &self.emotion {
            lines.push(format!("emotion: {} ({})", a.value, a.provenance));
        }
        for t in &self.extra_traits {
            lines.push(format!("{}: {} ({})", t.name, t.value, t.provenance));
        }
        lines
    }

    /// Attribute values with provenance stripped.
    pub fn fields(&self) -> ProfileFields {
        ProfileFields {
            age_range: self.age_range.as_ref().map(|a| a.value),
            gender: self.gender.as_ref().map(|a| a.value.clone()),
            ethnicity: self.ethnicity.as_ref().map(|a| a.value.clone()),
            emotion: self.emotion.as_ref().map(|a| a.value.clone()),
            extra_traits: self.extra_traits.iter().map(|t| (t.name.clone(), t.value.clone())).collect(),
        }
    }
}

/// True when `next` keeps every field of `prev` at the same or a higher provenance level.
pub fn provenance_monotone(prev: &UserProfile, next: &UserProfile) -> bool {
    let after = next.provenances();
    prev.provenances().iter().all(|(name, p)| {
        match after.iter().find(|(n, _)| n == name) {
            Some((_, q)) => q >= p,
            // A field that disappears counts as a reversion only if it was Posterior.
            None => *p == Provenance::Prior,
        }
    })
}
