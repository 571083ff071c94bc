//! Shared token vocabulary: reserved special ids, one control token per
//! language, then the content inventories of each language.

use serde::{Deserialize, Serialize};

use crate::error::{EcftError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const CLS: u32 = 4;
pub const NUM_RESERVED: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LangId(pub u8);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    /// language names, indexed by `LangId`
    pub languages: Vec<String>,
    /// content token inventory per language: contiguous id ranges
    pub content_ranges: Vec<(u32, u32)>,
}

impl Vocabulary {
    /// Build a vocabulary for `content_sizes.len()` languages, each with
    /// the given number of content tokens.
    pub fn new(languages: Vec<String>, content_sizes: &[usize]) -> Self {
        assert_eq!(languages.len(), content_sizes.len());
        let mut ranges = Vec::new();
        let mut next = NUM_RESERVED + languages.len() as u32;
        for &n in content_sizes {
            ranges.push((next, next + n as u32));
            next += n as u32;
        }
        Vocabulary {
            languages,
            content_ranges: ranges,
        }
    }

    pub fn size(&self) -> usize {
        self.content_ranges
            .last()
            .map(|&(_, end)| end as usize)
            .unwrap_or((NUM_RESERVED + self.languages.len() as u32) as usize)
    }

    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn control_token(&self, lang: LangId) -> u32 {
        assert!((lang.0 as usize) < self.languages.len());
        NUM_RESERVED + lang.0 as u32
    }

    pub fn lang_by_name(&self, name: &str) -> Result<LangId> {
        self.languages
            .iter()
            .position(|l| l == name)
            .map(|i| LangId(i as u8))
            .ok_or_else(|| EcftError::UnknownLanguage(name.to_string()))
    }

    pub fn content_range(&self, lang: LangId) -> (u32, u32) {
        self.content_ranges[lang.0 as usize]
    }

    pub fn content_tokens(&self, lang: LangId) -> impl Iterator<Item = u32> {
        let (s, e) = self.content_range(lang);
        s..e
    }

    pub fn is_special(&self, tok: u32) -> bool {
        tok < NUM_RESERVED + self.languages.len() as u32
    }

    pub fn in_inventory(&self, tok: u32, lang: LangId) -> bool {
        let (s, e) = self.content_range(lang);
        tok >= s && tok < e
    }

    pub fn check_in_vocab(&self, tok: u32) -> Result<()> {
        if (tok as usize) < self.size() {
            Ok(())
        } else {
            Err(EcftError::OutOfVocabulary(tok, self.size()))
        }
    }
}
