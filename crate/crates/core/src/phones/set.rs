use std::fmt;

use serde::{Deserialize, Serialize};

use super::PhoneError;

pub const SILENCE: &str = "sil";

const STANDARD_TABLE: &str = include_str!("../../data/phones.tsv");

/// Phonological categories shown in the review UI, in display order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Vowel,
    Plosive,
    Fricative,
    Affricate,
    Nasal,
    Approximant,
    Silence,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Vowel,
        Category::Plosive,
        Category::Fricative,
        Category::Affricate,
        Category::Nasal,
        Category::Approximant,
        Category::Silence,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Vowel => "vowel",
            Category::Plosive => "plosive",
            Category::Fricative => "fricative",
            Category::Affricate => "affricate",
            Category::Nasal => "nasal",
            Category::Approximant => "approximant",
            Category::Silence => "silence",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered phone inventory with a category for every phone.
#[derive(Debug, Clone, PartialEq)]
pub struct PhoneSet {
    phones: Vec<String>,
    categories: Vec<Category>,
    silence: usize,
}

impl PhoneSet {
    /// The bundled 39-phone English set plus `sil`.
    pub fn standard() -> Self {
        Self::parse(STANDARD_TABLE).expect("bundled phone table is valid")
    }

    /// Parses `phone<TAB>category` lines. Blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self, PhoneError> {
        let mut phones = Vec::new();
        let mut categories = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(phone), Some(cat), None) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(PhoneError::PhoneSet(format!(
                    "line {}: expected phone<TAB>category",
                    lineno + 1
                )));
            };
            let cat = Category::parse(cat.trim()).ok_or_else(|| {
                PhoneError::PhoneSet(format!("line {}: unknown category {cat:?}", lineno + 1))
            })?;
            let phone = phone.trim().to_string();
            if phones.contains(&phone) {
                return Err(PhoneError::PhoneSet(format!("duplicate phone {phone:?}")));
            }
            phones.push(phone);
            categories.push(cat);
        }
        let silence = phones
            .iter()
            .position(|p| p == SILENCE)
            .ok_or_else(|| PhoneError::PhoneSet("no \"sil\" phone".into()))?;
        if categories[silence] != Category::Silence {
            return Err(PhoneError::PhoneSet("\"sil\" must map to silence".into()));
        }
        for cat in Category::ALL {
            if cat != Category::Affricate && !categories.contains(&cat) {
                return Err(PhoneError::PhoneSet(format!(
                    "category {cat} has no phones"
                )));
            }
        }
        Ok(Self {
            phones,
            categories,
            silence,
        })
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    pub fn phones(&self) -> &[String] {
        &self.phones
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.phones[index]
    }

    pub fn index_of(&self, phone: &str) -> Option<usize> {
        self.phones.iter().position(|p| p == phone)
    }

    pub fn category_of(&self, index: usize) -> Category {
        self.categories[index]
    }

    pub fn category_of_symbol(&self, phone: &str) -> Option<Category> {
        self.index_of(phone).map(|i| self.categories[i])
    }

    pub fn silence_index(&self) -> usize {
        self.silence
    }

    pub fn member_count(&self, cat: Category) -> usize {
        self.categories.iter().filter(|&&c| c == cat).count()
    }

    /// Serializes back to the tab-separated table.
    pub fn to_table(&self) -> String {
        self.phones
            .iter()
            .zip(&self.categories)
            .map(|(p, c)| format!("{p}\t{c}\n"))
            .collect()
    }
}
