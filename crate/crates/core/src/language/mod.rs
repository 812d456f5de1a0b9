//! Command language: grammar, surface generation, parsing, tokenization and
//! text encoders.

mod encoder;
mod lexicon;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use encoder::{
    cosine, similarity_vector, synthesize_synonym_embeddings, ScratchEncoder, TableEncoder,
    TextEncoder, SCRATCH_BUCKETS,
};
pub use lexicon::{DirectionLexicon, LabelSet, Lexicon, PhraseSet};

use crate::error::{Error, Result};
use crate::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Closer,
    Further,
    Left,
    Right,
    Front,
    Back,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::Closer,
        Direction::Further,
        Direction::Left,
        Direction::Right,
        Direction::Front,
        Direction::Back,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Closer => "closer",
            Direction::Further => "further",
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Front => "front",
            Direction::Back => "back",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intensity {
    Slight,
    Neutral,
    Strong,
    VeryStrong,
}

impl Intensity {
    /// Ordered from weakest to strongest.
    pub const ALL: [Intensity; 4] = [
        Intensity::Slight,
        Intensity::Neutral,
        Intensity::Strong,
        Intensity::VeryStrong,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Intensity::Slight => "slight",
            Intensity::Neutral => "neutral",
            Intensity::Strong => "strong",
            Intensity::VeryStrong => "very_strong",
        }
    }
}

/// Which synonym pool a generated sentence draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CommandAst {
    pub direction: Direction,
    pub intensity: Intensity,
    #[serde(rename = "target")]
    pub target_index: usize,
}

/// Lowercases and splits on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(|t| t.trim_matches('\'').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

impl Lexicon {
    /// Instantiates one specific template. Indices wrap around the
    /// available frames, phrases and modifiers.
    pub fn render(
        &self,
        direction: Direction,
        intensity: Intensity,
        label: &str,
        split: Split,
        variant: (usize, usize, usize),
    ) -> Result<String> {
        let dl = self.direction(direction);
        let phrases = dl.phrases.for_split(split);
        let words = self.intensity_words(intensity, split);
        if dl.frames.is_empty() || phrases.is_empty() || words.is_empty() {
            return Err(Error::Lexicon(format!(
                "no {split:?} template for ({direction:?}, {intensity:?})"
            )));
        }
        let frame = &dl.frames[variant.0 % dl.frames.len()];
        let text = frame
            .replace("{int}", words[variant.2 % words.len()])
            .replace("{dir}", &phrases[variant.1 % phrases.len()])
            .replace("{obj}", label);
        Ok(text.split_whitespace().collect::<Vec<_>>().join(" "))
    }
}

/// Deterministic surface sentence for `ast` referring to `label`.
pub fn generate_command(
    ast: &CommandAst,
    label: &str,
    lexicon: &Lexicon,
    seed: u64,
    split: Split,
) -> Result<String> {
    let mut rng = seeded_rng(seed ^ 0x6c61_6e67_7561_6765);
    let variant = (
        rng.random_range(0..1024usize),
        rng.random_range(0..1024usize),
        rng.random_range(0..1024usize),
    );
    lexicon.render(ast.direction, ast.intensity, label, split, variant)
}

/// Longest token-subsequence match among `candidates`; ties go to the
/// earliest candidate.
fn longest_match<'a, T: Copy>(tokens: &[String], candidates: &'a [(T, Vec<String>)]) -> Option<(T, &'a [String])> {
    let mut best: Option<(T, &[String])> = None;
    for (value, phrase) in candidates {
        if phrase.is_empty() || phrase.len() > tokens.len() {
            continue;
        }
        let found = tokens.windows(phrase.len()).any(|w| w == phrase.as_slice());
        if found && best.is_none_or(|(_, b)| phrase.len() > b.len()) {
            best = Some((*value, phrase));
        }
    }
    best
}

/// Parses a command against the lexicon and the labels of the current
/// scene; the returned target indexes into `labels`.
pub fn parse_command(text: &str, lexicon: &Lexicon, labels: &[&str]) -> Result<CommandAst> {
    let tokens = tokenize(text);
    let directions = lexicon.direction_phrases();
    let (direction, _) = longest_match(&tokens, &directions)
        .ok_or_else(|| Error::Parse(format!("no direction phrase in {text:?}")))?;
    let intensities = lexicon.intensity_phrases();
    let intensity = longest_match(&tokens, &intensities)
        .map(|(i, _)| i)
        .unwrap_or(Intensity::Neutral);
    let label_tokens: Vec<(usize, Vec<String>)> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (i, tokenize(l)))
        .collect();
    let (target_index, _) = longest_match(&tokens, &label_tokens)
        .ok_or_else(|| Error::Parse(format!("no known object label in {text:?}")))?;
    Ok(CommandAst {
        direction,
        intensity,
        target_index,
    })
}

/// Whether `text` contains any holdout phrase of the lexicon.
pub fn contains_holdout(text: &str, lexicon: &Lexicon) -> bool {
    let tokens = tokenize(text);
    lexicon
        .holdout_phrases()
        .iter()
        .any(|p| !p.is_empty() && tokens.windows(p.len()).any(|w| w == p.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ast(direction: Direction, intensity: Intensity, target_index: usize) -> CommandAst {
        CommandAst {
            direction,
            intensity,
            target_index,
        }
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(
            tokenize("Stay away from the wine glass"),
            ["stay", "away", "from", "the", "wine", "glass"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("glass."), tokenize("glass"));
        assert_eq!(tokenize("  much,further!"), ["much", "further"]);
    }

    #[test]
    fn canonical_templates() {
        let lex = Lexicon::default();
        let s = lex
            .render(Direction::Further, Intensity::Strong, "glass", Split::Train, (0, 0, 0))
            .unwrap();
        assert_eq!(s, "stay much further away from the glass");
        let s = lex
            .render(Direction::Closer, Intensity::Neutral, "cup", Split::Train, (0, 0, 0))
            .unwrap();
        assert_eq!(s, "go closer to the cup");
    }

    #[test]
    fn generation_is_deterministic() {
        let lex = Lexicon::default();
        let a = ast(Direction::Left, Intensity::Slight, 0);
        let x = generate_command(&a, "cup", &lex, 99, Split::Train).unwrap();
        let y = generate_command(&a, "cup", &lex, 99, Split::Train).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn parse_hand_example() {
        let lex = Lexicon::default();
        let got = parse_command("stay further away from the glass", &lex, &["phone", "glass"]).unwrap();
        assert_eq!(got, ast(Direction::Further, Intensity::Neutral, 1));
    }

    #[test]
    fn parse_prefers_longest_label() {
        let lex = Lexicon::default();
        let got = parse_command("go very much closer to the wine glass", &lex, &["glass", "wine glass"])
            .unwrap();
        assert_eq!(got, ast(Direction::Closer, Intensity::VeryStrong, 1));
    }

    #[test]
    fn parse_errors() {
        let lex = Lexicon::default();
        assert!(matches!(parse_command("hello world", &lex, &["cup"]), Err(Error::Parse(_))));
        assert!(matches!(
            parse_command("go closer to the lamp", &lex, &["cup"]),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn round_trip_over_every_train_template() {
        let lex = Lexicon::default();
        let labels = ["cup", "wine glass", "toaster"];
        for d in Direction::ALL {
            let dl = lex.direction(d);
            for i in Intensity::ALL {
                for f in 0..dl.frames.len() {
                    for p in 0..dl.phrases.train.len() {
                        for w in 0..lex.intensity_words(i, Split::Train).len() {
                            for (target, label) in labels.iter().enumerate() {
                                let text = lex.render(d, i, label, Split::Train, (f, p, w)).unwrap();
                                let parsed = parse_command(&text, &lex, &labels).unwrap();
                                assert_eq!(parsed, ast(d, i, target), "{text}");
                                assert!(!contains_holdout(&text, &lex), "{text}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn holdout_text_parses_and_is_flagged() {
        let lex = Lexicon::default();
        for d in Direction::ALL {
            for i in Intensity::ALL {
                let a = ast(d, i, 0);
                let text = generate_command(&a, "cup", &lex, 5, Split::Holdout).unwrap();
                assert_eq!(parse_command(&text, &lex, &["cup"]).unwrap(), a, "{text}");
                assert!(contains_holdout(&text, &lex), "{text}");
            }
        }
    }
}
