//! The ten color words and their canonical ab points.

use serde::{Deserialize, Serialize};

use super::vocab::words;
use crate::colorspace::{in_gamut, srgb_pixel_to_lab};
use crate::error::{Error, Result};
use crate::quantizer::QuantizerSpec;

/// Lightness at which canonical colors are rendered and checked for gamut.
pub const CANONICAL_LIGHTNESS: f64 = 60.0;

/// Named sRGB values; each one's ab stays in gamut at L* = 60.
const DEFAULT_WORDS: [(&str, [u8; 3]); 10] = [
    ("red", [220, 60, 50]),
    ("blue", [60, 110, 220]),
    ("green", [40, 160, 40]),
    ("yellow", [190, 170, 60]),
    ("orange", [240, 120, 20]),
    ("purple", [150, 50, 190]),
    ("pink", [240, 110, 170]),
    ("brown", [150, 90, 40]),
    ("black", [0, 0, 0]),
    ("white", [255, 255, 255]),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ColorWord {
    pub word: String,
    pub ab: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColorLexicon {
    entries: Vec<ColorWord>,
}

#[derive(Serialize, Deserialize)]
#[serde(transparent)]
struct LexiconFile(indexmap::IndexMap<String, [f64; 2]>);

impl Default for ColorLexicon {
    fn default() -> Self {
        let entries = DEFAULT_WORDS
            .iter()
            .map(|&(word, rgb)| {
                let ab = if word == "black" || word == "white" {
                    [0.0, 0.0]
                } else {
                    let lab = srgb_pixel_to_lab(rgb);
                    [lab[1], lab[2]]
                };
                ColorWord { word: word.to_string(), ab }
            })
            .collect();
        ColorLexicon { entries }
    }
}

/// Result of a color-word substitution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Swapped {
    pub text: String,
    /// Number of color words replaced; zero means the caption had none.
    pub replaced: usize,
}

impl Swapped {
    pub fn had_color_word(&self) -> bool {
        self.replaced > 0
    }
}

impl ColorLexicon {
    pub const SIZE: usize = 10;

    pub fn new(entries: Vec<ColorWord>) -> Result<Self> {
        if entries.len() != Self::SIZE {
            return Err(Error::InvalidInput(format!("a color lexicon has exactly {} words, got {}", Self::SIZE, entries.len())));
        }
        for e in &entries {
            if words(&e.word).collect::<Vec<_>>() != [e.word.clone()] {
                return Err(Error::InvalidInput(format!("color word {:?} must be a single lowercase word", e.word)));
            }
        }
        let lexicon = ColorLexicon { entries };
        for i in 0..lexicon.entries.len() {
            if lexicon.entries[..i].iter().any(|e| e.word == lexicon.entries[i].word) {
                return Err(Error::InvalidInput(format!("duplicate color word {:?}", lexicon.entries[i].word)));
            }
        }
        Ok(lexicon)
    }

    pub fn entries(&self) -> &[ColorWord] {
        &self.entries
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.word.as_str())
    }

    pub fn get(&self, word: &str) -> Option<&ColorWord> {
        self.entries.iter().find(|e| e.word == word)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.get(word).is_some()
    }

    /// Checks every canonical point against the quantizer grid and the sRGB gamut at L* = 60.
    pub fn validate(&self, spec: &QuantizerSpec) -> Result<()> {
        for e in &self.entries {
            if e.ab.iter().any(|&v| v < spec.ab_min || v > spec.ab_max) {
                return Err(Error::InvalidInput(format!("canonical ab of {:?} lies outside the grid", e.word)));
            }
            if !in_gamut([CANONICAL_LIGHTNESS, e.ab[0], e.ab[1]]) {
                return Err(Error::InvalidInput(format!("canonical ab of {:?} is out of gamut at L*=60", e.word)));
            }
        }
        Ok(())
    }

    /// First lexicon word in the text, if any.
    pub fn find_in(&self, text: &str) -> Option<String> {
        words(text).find(|w| self.contains(w))
    }

    pub fn to_json(&self) -> Result<String> {
        let map = self.entries.iter().map(|e| (e.word.clone(), e.ab)).collect();
        Ok(serde_json::to_string_pretty(&LexiconFile(map))?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let LexiconFile(map) = serde_json::from_str(json)?;
        Self::new(map.into_iter().map(|(word, ab)| ColorWord { word, ab }).collect())
    }
}

/// Replaces every whole-word, case-insensitive lexicon match with `target`.
pub fn swap_color_word(text: &str, target: &str, lexicon: &ColorLexicon) -> Result<Swapped> {
    if !lexicon.contains(target) {
        return Err(Error::InvalidInput(format!("{target:?} is not a color word")));
    }
    let mut out = String::with_capacity(text.len());
    let mut replaced = 0;
    let mut word_start: Option<usize> = None;
    let mut flush = |out: &mut String, word: &str| {
        if lexicon.contains(&word.to_lowercase()) {
            out.push_str(target);
            replaced += 1;
        } else {
            out.push_str(word);
        }
    };
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            word_start.get_or_insert(i);
        } else {
            if let Some(s) = word_start.take() {
                flush(&mut out, &text[s..i]);
            }
            out.push(c);
        }
    }
    if let Some(s) = word_start {
        flush(&mut out, &text[s..]);
    }
    Ok(Swapped { text: out, replaced })
}
