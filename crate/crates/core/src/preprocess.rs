//! Cleansing and consolidation: drop customers with incomplete demographics,
//! fold every category outside the kept set into `Other`, drop customers with
//! too little activity, and assign income terciles.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::domain::{Category, Dataset, IncomeGroup, Merchant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityCheck {
    /// Count distinct categories after folding into `Other` (default).
    AfterMapping,
    /// Count distinct raw categories before folding.
    BeforeMapping,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub min_transactions: usize,
    pub min_distinct_categories: usize,
    pub kept_categories: Vec<Category>,
    pub activity_check: ActivityCheck,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_transactions: 10,
            min_distinct_categories: 2,
            kept_categories: vec![Category::Grocery, Category::Clothing, Category::GasStations],
            activity_check: ActivityCheck::AfterMapping,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub users_in: usize,
    pub users_removed_incomplete: usize,
    pub users_removed_low_activity: usize,
    pub users_out: usize,
    pub categories_in: usize,
    pub transactions_out: usize,
}

fn retain_customers(dataset: &Dataset, keep: &HashSet<u64>) -> Dataset {
    Dataset {
        name: dataset.name.clone(),
        profiles: dataset
            .profiles
            .iter()
            .filter(|p| keep.contains(&p.customer_id))
            .cloned()
            .collect(),
        transactions: dataset
            .transactions
            .iter()
            .filter(|t| keep.contains(&t.customer_id))
            .cloned()
            .collect(),
    }
}

/// Keeps only customers whose every demographic field is populated.
pub fn filter_complete_demographics(dataset: &Dataset) -> Dataset {
    let keep: HashSet<u64> = dataset
        .profiles
        .iter()
        .filter(|p| p.is_complete())
        .map(|p| p.customer_id)
        .collect();
    retain_customers(dataset, &keep)
}

/// Keeps customers with at least `min_tx` transactions spread over at least
/// `min_distinct` distinct categories.
pub fn filter_min_activity(dataset: &Dataset, min_tx: usize, min_distinct: usize) -> Dataset {
    let keep: HashSet<u64> = dataset
        .histories()
        .into_iter()
        .filter(|(_, txs)| {
            let distinct: HashSet<&Merchant> = txs.iter().map(|t| &t.category).collect();
            txs.len() >= min_tx && distinct.len() >= min_distinct
        })
        .map(|(p, _)| p.customer_id)
        .collect();
    retain_customers(dataset, &keep)
}

/// Relabels every transaction whose category is not in `kept` as `Other`.
pub fn map_to_other(dataset: &Dataset, kept: &[Category]) -> Dataset {
    let mut out = dataset.clone();
    for t in &mut out.transactions {
        let stays = matches!(t.category, Merchant::Known(c) if kept.contains(&c));
        if !stays {
            t.category = Merchant::Known(Category::Other);
        }
    }
    out
}

/// Assigns income terciles over the dataset's own profiles. A customer's
/// group is `floor(3 · below / n)` where `below` counts strictly lower
/// incomes, so tied incomes share the lowest group any of them reaches.
pub fn derive_income_group(dataset: &Dataset) -> Dataset {
    let mut out = dataset.clone();
    let mut incomes: Vec<i64> = out
        .profiles
        .iter()
        .filter_map(|p| p.income.map(|m| m.cents()))
        .collect();
    incomes.sort_unstable();
    let n = incomes.len();
    for p in &mut out.profiles {
        p.income_group = p.income.map(|m| {
            let below = incomes.partition_point(|&x| x < m.cents());
            match 3 * below / n {
                0 => IncomeGroup::Low,
                1 => IncomeGroup::Middle,
                _ => IncomeGroup::High,
            }
        });
    }
    out
}

/// Runs demographics filter → `Other` mapping → activity filter → income
/// terciles (or with activity checked before mapping, per `config`).
pub fn run_pipeline(dataset: &Dataset, config: &PreprocessConfig) -> (Dataset, PreprocessReport) {
    let categories_in = dataset
        .transactions
        .iter()
        .map(|t| &t.category)
        .collect::<HashSet<_>>()
        .len();
    let users_in = dataset.profiles.len();

    let complete = filter_complete_demographics(dataset);
    let removed_incomplete = users_in - complete.profiles.len();

    let activity = |d: &Dataset| {
        filter_min_activity(d, config.min_transactions, config.min_distinct_categories)
    };
    let (active, removed_low) = match config.activity_check {
        ActivityCheck::AfterMapping => {
            let mapped = map_to_other(&complete, &config.kept_categories);
            let active = activity(&mapped);
            let removed = mapped.profiles.len() - active.profiles.len();
            (active, removed)
        }
        ActivityCheck::BeforeMapping => {
            let active = activity(&complete);
            let removed = complete.profiles.len() - active.profiles.len();
            (map_to_other(&active, &config.kept_categories), removed)
        }
    };
    let out = derive_income_group(&active);
    let report = PreprocessReport {
        users_in,
        users_removed_incomplete: removed_incomplete,
        users_removed_low_activity: removed_low,
        users_out: out.profiles.len(),
        categories_in,
        transactions_out: out.transactions.len(),
    };
    (out, report)
}

/// Distinct categories present in a dataset.
pub fn distinct_categories(dataset: &Dataset) -> BTreeSet<String> {
    dataset
        .transactions
        .iter()
        .map(|t| t.category.as_code().to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDate;

    use super::*;
    use crate::domain::{CustomerProfile, Education, Gender, MaritalStatus, Money, Transaction};

    fn profile(id: u64, income: i64) -> CustomerProfile {
        CustomerProfile {
            customer_id: id,
            age: Some(40),
            gender: Some(Gender::Female),
            marital_status: Some(MaritalStatus::Single),
            education: Some(Education::University),
            job: Some("student".into()),
            income: Some(Money(income * 100)),
            income_group: None,
        }
    }

    fn txs(id: u64, cats: &[Merchant]) -> Vec<Transaction> {
        let day = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
        cats.iter()
            .map(|c| Transaction {
                customer_id: id,
                date: day,
                amount: Money(1000),
                category: c.clone(),
            })
            .collect()
    }

    fn known(c: Category, n: usize) -> Vec<Merchant> {
        vec![Merchant::Known(c); n]
    }

    #[test]
    fn missing_education_removes_customer_and_transactions() {
        let mut p = profile(1, 10);
        p.education = None;
        let d = Dataset::new("t", vec![p, profile(2, 20)], {
            let mut t = txs(1, &known(Category::Grocery, 3));
            t.extend(txs(2, &known(Category::Other, 2)));
            t
        });
        let out = filter_complete_demographics(&d);
        assert_eq!(out.profiles.len(), 1);
        assert!(out.transactions.iter().all(|t| t.customer_id == 2));
    }

    #[test]
    fn activity_thresholds() {
        let mut nine = known(Category::Grocery, 8);
        nine.push(Merchant::Known(Category::Other));
        let mut ten = known(Category::Grocery, 9);
        ten.push(Merchant::Known(Category::Other));
        let trucker = known(Category::GasStations, 50);
        let d = Dataset::new(
            "t",
            vec![profile(1, 1), profile(2, 2), profile(3, 3)],
            [txs(1, &nine), txs(2, &ten), txs(3, &trucker)].concat(),
        );
        let out = filter_min_activity(&d, 10, 2);
        let ids: Vec<u64> = out.profiles.iter().map(|p| p.customer_id).collect();
        assert_eq!(ids, vec![2]);
    }

    #[test]
    fn raw_categories_collapse_to_four() {
        let mut cats: Vec<Merchant> = (0..294).map(|i| Merchant::Raw(format!("raw{i}"))).collect();
        cats.push(Merchant::Raw("Insurance".into()));
        cats.extend([Category::Grocery, Category::Clothing, Category::GasStations].map(Merchant::Known));
        let d = Dataset::new("t", vec![profile(1, 1)], txs(1, &cats));
        assert_eq!(distinct_categories(&d).len(), 298);
        let out = map_to_other(&d, &PreprocessConfig::default().kept_categories);
        assert_eq!(distinct_categories(&out).len(), 4);
        assert_eq!(out.transactions[294].category, Merchant::Known(Category::Other));
        assert_eq!(out.transactions[295].category, Merchant::Known(Category::Grocery));
    }

    #[test]
    fn terciles_and_ties() {
        let d = Dataset::new("t", vec![profile(1, 10), profile(2, 20), profile(3, 30)], vec![]);
        let groups: Vec<_> = derive_income_group(&d)
            .profiles
            .iter()
            .map(|p| p.income_group.unwrap())
            .collect();
        assert_eq!(groups, vec![IncomeGroup::Low, IncomeGroup::Middle, IncomeGroup::High]);

        let d = Dataset::new("t", (1..=6).map(|i| profile(i, 50)).collect(), vec![]);
        assert!(derive_income_group(&d)
            .profiles
            .iter()
            .all(|p| p.income_group == Some(IncomeGroup::Low)));

        assert_eq!(derive_income_group(&Dataset::empty("e")), Dataset::empty("e"));
    }

    #[test]
    fn clean_dataset_reports_no_removals() {
        let mut cats = known(Category::Grocery, 6);
        cats.extend(known(Category::Clothing, 6));
        let d = Dataset::new("t", vec![profile(1, 1), profile(2, 2)], [txs(1, &cats), txs(2, &cats)].concat());
        let (_, report) = run_pipeline(&d, &PreprocessConfig::default());
        assert_eq!(report.users_removed_incomplete, 0);
        assert_eq!(report.users_removed_low_activity, 0);
        assert_eq!(report.users_out, 2);
        assert_eq!(report.transactions_out, 24);
    }
}
