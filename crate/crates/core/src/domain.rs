//! Shared domain vocabulary: merchant categories, money, demographics and the
//! dataset container that flows through every stage.
//!
//! Every enum here carries its narrative surface string so the generator, the
//! CSV layer and the instruction serializer all agree on spelling.

use std::collections::HashMap;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four modeled merchant classes. Index order is fixed and used for
/// every probability vector, confusion matrix row and logit column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Grocery,
    Clothing,
    GasStations,
    Other,
}

pub const NUM_CLASSES: usize = 4;

impl Category {
    pub const ALL: [Category; NUM_CLASSES] = [
        Category::Grocery,
        Category::Clothing,
        Category::GasStations,
        Category::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Category> {
        Category::ALL.get(index).copied()
    }

    /// Spelling used inside instruction text.
    pub fn narrative(self) -> &'static str {
        match self {
            Category::Grocery => "Grocery",
            Category::Clothing => "Clothing",
            Category::GasStations => "Gas stations",
            Category::Other => "Other",
        }
    }

    /// The instruction-output sentence for this label.
    pub fn label_sentence(self) -> &'static str {
        match self {
            Category::Grocery => "Grocery.",
            Category::Clothing => "Clothing.",
            Category::GasStations => "Gas stations.",
            Category::Other => "Other.",
        }
    }

    pub fn from_label_sentence(sentence: &str) -> Option<Category> {
        Category::ALL
            .into_iter()
            .find(|c| c.label_sentence() == sentence)
    }

    /// Column heading used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            Category::Grocery => "Grocery",
            Category::Clothing => "Clothing",
            Category::GasStations => "Gas Stations",
            Category::Other => "Other",
        }
    }

    /// Identifier used in CSV files.
    pub fn code(self) -> &'static str {
        match self {
            Category::Grocery => "Grocery",
            Category::Clothing => "Clothing",
            Category::GasStations => "GasStations",
            Category::Other => "Other",
        }
    }

    pub fn from_code(code: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.code() == code)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// A transaction's merchant category before consolidation: either one of the
/// modeled classes or a raw label such as `Insurance`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Merchant {
    Known(Category),
    Raw(String),
}

impl Merchant {
    pub fn class(&self) -> Option<Category> {
        match self {
            Merchant::Known(c) => Some(*c),
            Merchant::Raw(_) => None,
        }
    }

    pub fn as_code(&self) -> &str {
        match self {
            Merchant::Known(c) => c.code(),
            Merchant::Raw(s) => s,
        }
    }

    pub fn from_code(code: &str) -> Merchant {
        match Category::from_code(code) {
            Some(c) => Merchant::Known(c),
            None => Merchant::Raw(code.to_string()),
        }
    }
}

impl From<Category> for Merchant {
    fn from(c: Category) -> Self {
        Merchant::Known(c)
    }
}

/// Currency amount held as integer cents so totals never drift.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Money(pub i64);

impl Money {
    pub fn from_cents(cents: i64) -> Money {
        Money(cents)
    }

    /// Rounds half-up to the nearest cent.
    pub fn from_dollars(dollars: f64) -> Money {
        Money((dollars * 100.0 + 0.5).floor() as i64)
    }

    pub fn cents(self) -> i64 {
        self.0
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / 100.0
    }

    /// Parses a non-negative decimal with exactly two fractional digits.
    pub fn parse(text: &str) -> Option<Money> {
        let (whole, frac) = text.split_once('.')?;
        if whole.is_empty()
            || frac.len() != 2
            || !whole.bytes().all(|b| b.is_ascii_digit())
            || !frac.bytes().all(|b| b.is_ascii_digit())
        {
            return None;
        }
        let whole: i64 = whole.parse().ok()?;
        let frac: i64 = frac.parse().ok()?;
        whole.checked_mul(100)?.checked_add(frac).map(Money)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:02}", abs / 100, abs % 100)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        Money(iter.map(|m| m.0).sum())
    }
}

macro_rules! lexicon_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn narrative(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn parse(text: &str) -> Option<$name> {
                match text { $($text => Some($name::$variant),)+ _ => None }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.narrative())
            }
        }
    };
}

lexicon_enum!(Gender { Male => "male", Female => "female" });

lexicon_enum!(MaritalStatus {
    Married => "married",
    Single => "single",
    Divorced => "divorced",
    Widowed => "widowed",
});

lexicon_enum!(Education {
    PrimarySchool => "primary school",
    SecondarySchool => "secondary school",
    HighSchool => "high school",
    University => "university",
});

lexicon_enum!(
    /// Tercile of annual income within one dataset.
    IncomeGroup { Low => "low", Middle => "middle", High => "high" }
);

/// Coarse education split used to key behavior segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EducationBucket {
    School,
    University,
}

impl Education {
    pub fn bucket(self) -> EducationBucket {
        match self {
            Education::University => EducationBucket::University,
            _ => EducationBucket::School,
        }
    }
}

impl EducationBucket {
    pub fn members(self) -> &'static [Education] {
        match self {
            EducationBucket::School => &[
                Education::PrimarySchool,
                Education::SecondarySchool,
                Education::HighSchool,
            ],
            EducationBucket::University => &[Education::University],
        }
    }
}

/// Job descriptions the generator draws from.
pub const JOBS: &[&str] = &[
    "private employee",
    "public employee",
    "self-employed professional",
    "retiree",
    "student",
    "homemaker",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustomerProfile {
    pub customer_id: u64,
    pub age: Option<u8>,
    pub gender: Option<Gender>,
    pub marital_status: Option<MaritalStatus>,
    pub education: Option<Education>,
    pub job: Option<String>,
    pub income: Option<Money>,
    /// Derived by preprocessing; never persisted to CSV.
    pub income_group: Option<IncomeGroup>,
}

impl CustomerProfile {
    /// Name of the first unset demographic field, if any.
    pub fn missing_field(&self) -> Option<&'static str> {
        if self.age.is_none() {
            Some("age")
        } else if self.gender.is_none() {
            Some("gender")
        } else if self.marital_status.is_none() {
            Some("marital_status")
        } else if self.education.is_none() {
            Some("education")
        } else if self.job.as_deref().is_none_or(str::is_empty) {
            Some("job")
        } else if self.income.is_none() {
            Some("income")
        } else {
            None
        }
    }

    pub fn is_complete(&self) -> bool {
        self.missing_field().is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub customer_id: u64,
    pub date: NaiveDate,
    pub amount: Money,
    pub category: Merchant,
}

/// Profiles plus a transaction log sorted by (customer, date, original order).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub profiles: Vec<CustomerProfile>,
    pub transactions: Vec<Transaction>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        mut profiles: Vec<CustomerProfile>,
        mut transactions: Vec<Transaction>,
    ) -> Dataset {
        profiles.sort_by_key(|p| p.customer_id);
        // Stable sort keeps the generation order as the same-day tiebreak.
        transactions.sort_by_key(|t| (t.customer_id, t.date));
        Dataset {
            name: name.into(),
            profiles,
            transactions,
        }
    }

    pub fn empty(name: impl Into<String>) -> Dataset {
        Dataset::new(name, Vec::new(), Vec::new())
    }

    /// Each profile paired with its (possibly empty) transaction slice.
    pub fn histories(&self) -> Vec<(&CustomerProfile, &[Transaction])> {
        let mut spans: HashMap<u64, (usize, usize)> = HashMap::new();
        let mut start = 0;
        while start < self.transactions.len() {
            let id = self.transactions[start].customer_id;
            let mut end = start;
            while end < self.transactions.len() && self.transactions[end].customer_id == id {
                end += 1;
            }
            spans.insert(id, (start, end));
            start = end;
        }
        self.profiles
            .iter()
            .map(|p| {
                let (s, e) = spans.get(&p.customer_id).copied().unwrap_or((0, 0));
                (p, &self.transactions[s..e])
            })
            .collect()
    }

    pub fn profile(&self, customer_id: u64) -> Option<&CustomerProfile> {
        self.profiles
            .binary_search_by_key(&customer_id, |p| p.customer_id)
            .ok()
            .map(|i| &self.profiles[i])
    }

    /// Checks that every transaction belongs to a known profile.
    pub fn validate(&self) -> Result<()> {
        for t in &self.transactions {
            if self.profile(t.customer_id).is_none() {
                return Err(Error::UnknownCustomer(t.customer_id));
            }
        }
        Ok(())
    }

    /// Class frequencies over all transactions already mapped to a modeled class.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for t in &self.transactions {
            if let Some(c) = t.category.class() {
                counts[c.index()] += 1;
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn money_formats_and_parses() {
        assert_eq!(Money(56061).to_string(), "560.61");
        assert_eq!(Money(1000).to_string(), "10.00");
        assert_eq!(Money(5).to_string(), "0.05");
        assert_eq!(Money::parse("39.90"), Some(Money(3990)));
        assert_eq!(Money::parse("39.9"), None);
        assert_eq!(Money::parse("-1.00"), None);
        assert_eq!(Money::from_dollars(0.125), Money(13));
    }

    #[test]
    fn label_sentences_round_trip() {
        for c in Category::ALL {
            assert_eq!(Category::from_label_sentence(c.label_sentence()), Some(c));
            assert_eq!(Category::from_code(c.code()), Some(c));
        }
        assert_eq!(Category::GasStations.label_sentence(), "Gas stations.");
    }

    #[test]
    fn raw_merchants_stay_raw() {
        assert_eq!(Merchant::from_code("Insurance"), Merchant::Raw("Insurance".into()));
        assert_eq!(
            Merchant::from_code("GasStations"),
            Merchant::Known(Category::GasStations)
        );
    }
}
