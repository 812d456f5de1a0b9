use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tokenize, Direction, Intensity, Split};
use crate::error::{Error, Result};

const DEFAULT_LEXICON: &str = include_str!("../../assets/lexicon.toml");
const DEFAULT_LABELS: &str = include_str!("../../assets/labels.txt");

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhraseSet {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub holdout: Vec<String>,
}

impl PhraseSet {
    pub fn for_split(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Holdout => &self.holdout,
        }
    }

    fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.holdout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionLexicon {
    pub frames: Vec<String>,
    #[serde(flatten)]
    pub phrases: PhraseSet,
}

/// Templates, synonyms and intensity modifiers of the command language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub intensity: BTreeMap<Intensity, PhraseSet>,
    pub direction: BTreeMap<Direction, DirectionLexicon>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::from_toml(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }
}

impl Lexicon {
    pub fn from_toml(text: &str) -> Result<Self> {
        let lexicon: Lexicon =
            toml::from_str(text).map_err(|e| Error::Lexicon(format!("malformed lexicon: {e}")))?;
        lexicon.validate()?;
        Ok(lexicon)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Lexicon::from_toml(&text)
    }

    pub fn direction(&self, d: Direction) -> &DirectionLexicon {
        &self.direction[&d]
    }

    pub fn intensity(&self, i: Intensity) -> &PhraseSet {
        &self.intensity[&i]
    }

    /// Intensity modifiers used for `split`. Neutral has none; an intensity
    /// without holdout modifiers falls back to its train modifiers.
    pub fn intensity_words(&self, i: Intensity, split: Split) -> Vec<&str> {
        if i == Intensity::Neutral {
            return vec![""];
        }
        let set = self.intensity(i);
        let words = match split {
            Split::Holdout if !set.holdout.is_empty() => &set.holdout,
            _ => &set.train,
        };
        words.iter().map(String::as_str).collect()
    }

    /// Number of distinct surface templates for a (direction, intensity)
    /// pair in `split`.
    pub fn template_count(&self, d: Direction, i: Intensity, split: Split) -> usize {
        let dl = self.direction(d);
        dl.frames.len() * dl.phrases.for_split(split).len() * self.intensity_words(i, split).len()
    }

    /// Every direction phrase with its direction, train and holdout alike.
    pub fn direction_phrases(&self) -> Vec<(Direction, Vec<String>)> {
        self.direction
            .iter()
            .flat_map(|(&d, dl)| dl.phrases.all().map(move |p| (d, tokenize(p))))
            .collect()
    }

    /// Every non-neutral intensity modifier with its intensity.
    pub fn intensity_phrases(&self) -> Vec<(Intensity, Vec<String>)> {
        self.intensity
            .iter()
            .flat_map(|(&i, set)| set.all().map(move |p| (i, tokenize(p))))
            .collect()
    }

    /// All tokens that can appear in text of `split` other than labels.
    pub fn tokens(&self, split: Split) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for dl in self.direction.values() {
            for f in &dl.frames {
                out.extend(tokenize(f));
            }
            for p in dl.phrases.for_split(split) {
                out.extend(tokenize(p));
            }
        }
        for &i in Intensity::ALL.iter() {
            for w in self.intensity_words(i, split) {
                out.extend(tokenize(w));
            }
        }
        out
    }

    /// Holdout phrases as token sequences.
    pub fn holdout_phrases(&self) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = self
            .direction
            .values()
            .flat_map(|dl| dl.phrases.holdout.iter().map(|p| tokenize(p)))
            .collect();
        out.extend(
            self.intensity
                .values()
                .flat_map(|s| s.holdout.iter().map(|p| tokenize(p))),
        );
        out
    }

    fn validate(&self) -> Result<()> {
        for d in Direction::ALL {
            let dl = self
                .direction
                .get(&d)
                .ok_or_else(|| Error::Lexicon(format!("missing direction {d:?}")))?;
            for f in &dl.frames {
                if !(f.contains("{int}") && f.contains("{dir}") && f.contains("{obj}")) {
                    return Err(Error::Lexicon(format!(
                        "frame {f:?} must contain {{int}}, {{dir}} and {{obj}}"
                    )));
                }
            }
        }
        for i in Intensity::ALL {
            if !self.intensity.contains_key(&i) {
                return Err(Error::Lexicon(format!("missing intensity {i:?}")));
            }
        }
        for d in Direction::ALL {
            for i in Intensity::ALL {
                let n = self.template_count(d, i, Split::Train);
                if n < 2 {
                    return Err(Error::Lexicon(format!(
                        "({d:?}, {i:?}) has {n} train templates, need at least 2"
                    )));
                }
            }
        }
        // every holdout phrase carries at least one token unseen in training text
        let train_tokens = self.tokens(Split::Train);
        for phrase in self.holdout_phrases() {
            if phrase.iter().all(|t| train_tokens.contains(t)) {
                return Err(Error::Lexicon(format!(
                    "holdout phrase {:?} has no token outside the train vocabulary",
                    phrase.join(" ")
                )));
            }
        }
        Ok(())
    }
}

/// Object-label vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    /// Builds a vocabulary; labels may not reuse any lexicon token (that
    /// would make parsing ambiguous).
    pub fn new(labels: Vec<String>, lexicon: &Lexicon) -> Result<Self> {
        let mut reserved = lexicon.tokens(Split::Train);
        reserved.extend(lexicon.tokens(Split::Holdout));
        let mut seen = BTreeSet::new();
        for label in &labels {
            let toks = tokenize(label);
            if toks.is_empty() {
                return Err(Error::Lexicon("empty label".into()));
            }
            if let Some(t) = toks.iter().find(|t| reserved.contains(*t)) {
                return Err(Error::Lexicon(format!(
                    "label {label:?} uses reserved lexicon token {t:?}"
                )));
            }
            if toks.join(" ") != *label {
                return Err(Error::Lexicon(format!(
                    "label {label:?} is not in normalized token form"
                )));
            }
            if !seen.insert(label.clone()) {
                return Err(Error::Lexicon(format!("duplicate label {label:?}")));
            }
        }
        Ok(LabelSet { labels })
    }

    pub fn parse(text: &str, lexicon: &Lexicon) -> Result<Self> {
        let labels = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_owned)
            .collect();
        LabelSet::new(labels, lexicon)
    }

    pub fn load(path: &Path, lexicon: &Lexicon) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LabelSet::parse(&text, lexicon)
    }

    pub fn default_for(lexicon: &Lexicon) -> Result<Self> {
        LabelSet::parse(DEFAULT_LABELS, lexicon)
    }

    pub fn as_slice(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        LabelSet::default_for(&Lexicon::default()).expect("bundled labels are valid")
    }
}
