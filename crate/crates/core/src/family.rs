use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 9;

/// Family names in label order; the labels table numbers them 1..=9.
pub const FAMILY_NAMES: [&str; NUM_CLASSES] = [
    "Ramnit",
    "Lollipop",
    "Kelihos_ver3",
    "Vundo",
    "Simda",
    "Tracur",
    "Kelihos_ver1",
    "Obfuscator.ACY",
    "Gatak",
];

/// One of the nine malware families, stored as a zero-based class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Family(u8);

impl Family {
    pub fn from_index(index: usize) -> Result<Self> {
        if index < NUM_CLASSES {
            Ok(Family(index as u8))
        } else {
            Err(Error::Schema(format!(
                "class index {index} outside 0..{NUM_CLASSES}"
            )))
        }
    }

    /// Maps the 1-based class number used by the labels table.
    pub fn from_label_number(number: i64) -> Result<Self> {
        if (1..=NUM_CLASSES as i64).contains(&number) {
            Ok(Family((number - 1) as u8))
        } else {
            Err(Error::Schema(format!(
                "class value {number} outside 1..={NUM_CLASSES}"
            )))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn label_number(self) -> usize {
        self.0 as usize + 1
    }

    pub fn name(self) -> &'static str {
        FAMILY_NAMES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = Family> {
        (0..NUM_CLASSES as u8).map(Family)
    }
}

impl TryFrom<usize> for Family {
    type Error = Error;

    fn try_from(value: usize) -> Result<Self> {
        Family::from_index(value)
    }
}

impl From<Family> for usize {
    fn from(f: Family) -> usize {
        f.index()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FAMILY_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(s))
            .map(|i| Family(i as u8))
            .ok_or_else(|| Error::Schema(format!("unknown family `{s}`")))
    }
}

/// Human-readable `index -> name` table printed in reports.
pub fn family_legend() -> String {
    let mut out = String::new();
    for f in Family::all() {
        out.push_str(&format!("  {} (class {}) = {}\n", f.index(), f.label_number(), f.name()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_numbers_map_to_table_order() {
        assert_eq!(Family::from_label_number(1).unwrap().name(), "Ramnit");
        assert_eq!(Family::from_label_number(5).unwrap().name(), "Simda");
        assert_eq!(Family::from_label_number(9).unwrap().name(), "Gatak");
        assert!(Family::from_label_number(0).is_err());
        assert!(Family::from_label_number(10).is_err());
    }

    #[test]
    fn names_parse_back() {
        for f in Family::all() {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
    }
}
