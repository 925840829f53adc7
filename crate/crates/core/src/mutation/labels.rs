use serde::{Deserialize, Serialize};

use super::MutationError;

/// Option label alphabets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStyle {
    Upper,
    Lower,
    Arabic,
    RomanLower,
    RomanUpper,
}

impl LabelStyle {
    pub const ALL: [LabelStyle; 5] = [
        LabelStyle::Upper,
        LabelStyle::Lower,
        LabelStyle::Arabic,
        LabelStyle::RomanLower,
        LabelStyle::RomanUpper,
    ];

    /// Largest number of labels the style can produce.
    pub fn capacity(self) -> usize {
        match self {
            LabelStyle::Upper | LabelStyle::Lower => 26,
            LabelStyle::Arabic => usize::MAX,
            LabelStyle::RomanLower | LabelStyle::RomanUpper => 3999,
        }
    }

    /// Label for the 0-based slot `slot`.
    pub fn label(self, slot: usize) -> Result<String, MutationError> {
        if slot >= self.capacity() {
            return Err(MutationError::TooManyOptions {
                style: self,
                count: slot + 1,
            });
        }
        Ok(match self {
            LabelStyle::Upper => char::from(b'A' + slot as u8).to_string(),
            LabelStyle::Lower => char::from(b'a' + slot as u8).to_string(),
            LabelStyle::Arabic => (slot + 1).to_string(),
            LabelStyle::RomanUpper => roman(slot + 1),
            LabelStyle::RomanLower => roman(slot + 1).to_lowercase(),
        })
    }

    /// Labels for `count` slots.
    pub fn labels(self, count: usize) -> Result<Vec<String>, MutationError> {
        if count > self.capacity() {
            return Err(MutationError::TooManyOptions { style: self, count });
        }
        (0..count).map(|i| self.label(i)).collect()
    }
}

fn roman(mut n: usize) -> String {
    const TABLE: [(usize, &str); 13] = [
        (1000, "M"),
        (900, "CM"),
        (500, "D"),
        (400, "CD"),
        (100, "C"),
        (90, "XC"),
        (50, "L"),
        (40, "XL"),
        (10, "X"),
        (9, "IX"),
        (5, "V"),
        (4, "IV"),
        (1, "I"),
    ];
    let mut out = String::new();
    for &(value, digits) in &TABLE {
        while n >= value {
            out.push_str(digits);
            n -= value;
        }
    }
    out
}
