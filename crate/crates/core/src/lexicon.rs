//! Object lexicon used for pattern-matching objects out of free text.
//!
//! File format: plain UTF-8, one token per line, grouped under the section
//! headers `[living]`, `[nonliving]` and `[stopwords]`. Blank lines and lines
//! starting with `#` are ignored.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.txt");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("failed to read lexicon: {0}")]
    Io(#[from] std::io::Error),
    #[error("lexicon line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("tokens listed as both living and non-living: {0:?}")]
    Overlap(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectLexicon {
    living: BTreeSet<String>,
    nonliving: BTreeSet<String>,
    stopwords: BTreeSet<String>,
}

#[derive(Clone, Copy)]
enum Section {
    Living,
    Nonliving,
    Stopwords,
}

impl Default for ObjectLexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }
}

impl ObjectLexicon {
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut lexicon = Self {
            living: BTreeSet::new(),
            nonliving: BTreeSet::new(),
            stopwords: BTreeSet::new(),
        };
        let mut section = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[living]" => section = Some(Section::Living),
                "[nonliving]" => section = Some(Section::Nonliving),
                "[stopwords]" => section = Some(Section::Stopwords),
                _ if line.starts_with('[') => {
                    return Err(LexiconError::Syntax {
                        line: i + 1,
                        message: format!("unknown section {line}"),
                    })
                }
                token => {
                    if token.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                        return Err(LexiconError::Syntax {
                            line: i + 1,
                            message: format!("{token:?} is not a lowercase single token"),
                        });
                    }
                    let set = match section {
                        Some(Section::Living) => &mut lexicon.living,
                        Some(Section::Nonliving) => &mut lexicon.nonliving,
                        Some(Section::Stopwords) => &mut lexicon.stopwords,
                        None => {
                            return Err(LexiconError::Syntax {
                                line: i + 1,
                                message: "token before any section header".into(),
                            })
                        }
                    };
                    set.insert(token.to_string());
                }
            }
        }
        let overlap: Vec<String> = lexicon
            .living
            .intersection(&lexicon.nonliving)
            .cloned()
            .collect();
        if !overlap.is_empty() {
            return Err(LexiconError::Overlap(overlap));
        }
        Ok(lexicon)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    #[must_use]
    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }

    /// `Some(true)` for living objects, `Some(false)` for non-living ones.
    #[must_use]
    pub fn classify(&self, token: &str) -> Option<bool> {
        if self.is_stopword(token) {
            None
        } else if self.living.contains(token) {
            Some(true)
        } else if self.nonliving.contains(token) {
            Some(false)
        } else {
            None
        }
    }

    #[must_use]
    pub fn living(&self) -> &BTreeSet<String> {
        &self.living
    }

    #[must_use]
    pub fn nonliving(&self) -> &BTreeSet<String> {
        &self.nonliving
    }

    #[must_use]
    pub fn stopwords(&self) -> &BTreeSet<String> {
        &self.stopwords
    }
}

/// Lowercase word tokens of free text; anything that is not alphanumeric
/// separates tokens.
#[must_use]
pub fn word_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Lexicon objects mentioned in `text`, in first-occurrence order without
/// duplicates, each flagged living (`true`) or not.
#[must_use]
pub fn extract_objects(text: &str, lexicon: &ObjectLexicon) -> Vec<(String, bool)> {
    let mut found: Vec<(String, bool)> = Vec::new();
    for token in word_tokens(text) {
        if let Some(living) = lexicon.classify(&token) {
            if !found.iter().any(|(t, _)| *t == token) {
                found.push((token, living));
            }
        }
    }
    found
}
