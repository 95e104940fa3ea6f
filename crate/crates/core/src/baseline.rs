//! Historical-frequency baseline.
//!
//! For customer `i` and category `j`,
//! `p_ij = (1/K_i) · Σ_k I(n_ijk > 0)` over `K_i` time periods, where
//! `n_ijk` counts the customer's transactions in category `j` during period
//! `k`. With [`PeriodMode::PerEvent`] every transaction is its own period, so
//! `p_ij` is the relative frequency of `j` in the window. Prediction is the
//! argmax, ties broken by a fixed priority derived from training-set
//! frequencies.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::domain::{Category, Dataset, Transaction, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::io;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodMode {
    #[default]
    PerEvent,
    /// Monday-based weeks from the first to the last transaction, inclusive.
    CalendarWeek,
}

/// Category priority for breaking argmax ties, most preferred first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieOrder(pub [Category; NUM_CLASSES]);

impl Default for TieOrder {
    /// Grocery > Other > Gas stations > Clothing.
    fn default() -> Self {
        TieOrder([
            Category::Grocery,
            Category::Other,
            Category::GasStations,
            Category::Clothing,
        ])
    }
}

impl TieOrder {
    /// Descending class frequency over a training dataset; equal counts keep
    /// the default priority.
    pub fn from_training(dataset: &Dataset) -> TieOrder {
        let counts = dataset.class_counts();
        let mut order = TieOrder::default().0;
        order.sort_by_key(|c| std::cmp::Reverse(counts[c.index()]));
        TieOrder(order)
    }

    fn rank(&self, c: Category) -> usize {
        self.0.iter().position(|x| *x == c).expect("tie order covers all classes")
    }

    /// Index of the largest score, ties resolved by this order.
    pub fn argmax(&self, scores: &[f64; NUM_CLASSES]) -> Category {
        let mut best = self.0[0];
        for &c in &self.0[1..] {
            let (s, b) = (scores[c.index()], scores[best.index()]);
            if s > b || (s == b && self.rank(c) < self.rank(best)) {
                best = c;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyModel {
    pub mode: PeriodMode,
    pub tie_order: TieOrder,
    /// `p_i` per customer, in [`Category`] order.
    pub probabilities: BTreeMap<u64, [f64; NUM_CLASSES]>,
    /// `K_i` per customer.
    pub periods: BTreeMap<u64, usize>,
}

fn week_start(d: NaiveDate) -> NaiveDate {
    d - chrono::Duration::days(d.weekday().num_days_from_monday() as i64)
}

/// `(p_i, K_i)` for one window.
pub fn window_probabilities(
    window: &[Transaction],
    mode: PeriodMode,
) -> Result<([f64; NUM_CLASSES], usize)> {
    let first = window
        .first()
        .ok_or_else(|| Error::Empty("baseline window".into()))?;
    let classes = window
        .iter()
        .map(|t| {
            t.category.class().ok_or_else(|| {
                Error::Invalid(format!("unmapped category `{}`", t.category.as_code()))
            })
        })
        .collect::<Result<Vec<_>>>()?;

    match mode {
        PeriodMode::PerEvent => {
            let k = window.len();
            let mut hits = [0usize; NUM_CLASSES];
            for c in &classes {
                hits[c.index()] += 1;
            }
            Ok((hits.map(|h| h as f64 / k as f64), k))
        }
        PeriodMode::CalendarWeek => {
            let origin = week_start(first.date);
            let last = window.iter().map(|t| t.date).max().unwrap_or(first.date);
            let k = ((week_start(last) - origin).num_days() / 7 + 1) as usize;
            // n_ijk > 0 indicators per (category, week).
            let mut seen = vec![[false; NUM_CLASSES]; k];
            for (t, c) in window.iter().zip(&classes) {
                let week = ((week_start(t.date) - origin).num_days() / 7) as usize;
                seen[week][c.index()] = true;
            }
            let mut p = [0.0; NUM_CLASSES];
            for (j, pj) in p.iter_mut().enumerate() {
                *pj = seen.iter().filter(|w| w[j]).count() as f64 / k as f64;
            }
            Ok((p, k))
        }
    }
}

impl FrequencyModel {
    pub fn fit<'a, I>(windows: I, mode: PeriodMode, tie_order: TieOrder) -> Result<FrequencyModel>
    where
        I: IntoIterator<Item = (u64, &'a [Transaction])>,
    {
        let mut probabilities = BTreeMap::new();
        let mut periods = BTreeMap::new();
        for (id, window) in windows {
            let (p, k) = window_probabilities(window, mode)?;
            probabilities.insert(id, p);
            periods.insert(id, k);
        }
        Ok(FrequencyModel {
            mode,
            tie_order,
            probabilities,
            periods,
        })
    }

    pub fn predict(&self, customer_id: u64) -> Result<Category> {
        let p = self
            .probabilities
            .get(&customer_id)
            .ok_or(Error::UnknownCustomer(customer_id))?;
        Ok(self.tie_order.argmax(&normalized(p)))
    }

    /// Writes `{customer_id: [p1, p2, p3, p4]}`.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<String, [f64; NUM_CLASSES]> = self
            .probabilities
            .iter()
            .map(|(id, p)| (id.to_string(), *p))
            .collect();
        io::write_json(&map, path)
    }

    pub fn load_json(path: &Path, mode: PeriodMode, tie_order: TieOrder) -> Result<FrequencyModel> {
        let map: BTreeMap<String, [f64; NUM_CLASSES]> = io::read_json(path)?;
        let mut probabilities = BTreeMap::new();
        for (id, p) in map {
            let id = id.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                reason: format!("bad customer id `{id}`"),
            })?;
            probabilities.insert(id, p);
        }
        Ok(FrequencyModel {
            mode,
            tie_order,
            probabilities,
            periods: BTreeMap::new(),
        })
    }
}

fn normalized(p: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let total: f64 = p.iter().sum();
    if total > 0.0 {
        p.map(|x| x / total)
    } else {
        *p
    }
}

/// Fits a single window and predicts in one step.
pub fn predict_window(window: &[Transaction], mode: PeriodMode, tie_order: &TieOrder) -> Result<Category> {
    let (p, _) = window_probabilities(window, mode)?;
    Ok(tie_order.argmax(&normalized(&p)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Merchant, Money};

    fn window(cats: &[Category]) -> Vec<Transaction> {
        cats.iter()
            .enumerate()
            .map(|(i, c)| Transaction {
                customer_id: 1,
                date: NaiveDate::from_ymd_opt(2015, 3, 2).unwrap() + chrono::Duration::days(i as i64 * 3),
                amount: Money(100),
                category: Merchant::Known(*c),
            })
            .collect()
    }

    use Category::*;

    #[test]
    fn single_category_window() {
        let (p, k) = window_probabilities(&window(&[Grocery; 9]), PeriodMode::PerEvent).unwrap();
        assert_eq!(p, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(k, 9);
    }

    #[test]
    fn worked_sequence() {
        let w = window(&[Grocery, Grocery, Grocery, Other, Clothing, Other, Clothing, Clothing, Clothing]);
        let (p, _) = window_probabilities(&w, PeriodMode::PerEvent).unwrap();
        assert_eq!(p, [3.0 / 9.0, 4.0 / 9.0, 0.0, 2.0 / 9.0]);
        assert_eq!(predict_window(&w, PeriodMode::PerEvent, &TieOrder::default()).unwrap(), Clothing);
    }

    #[test]
    fn uniform_tie_goes_to_grocery() {
        let order = TieOrder::default();
        assert_eq!(order.argmax(&[0.25; 4]), Grocery);
        assert_eq!(order.argmax(&[0.0, 0.5, 0.5, 0.0]), GasStations);
        assert_eq!(order.argmax(&[0.0, 0.5, 0.0, 0.5]), Other);
    }

    #[test]
    fn empty_window_and_unknown_customer_fail() {
        assert!(window_probabilities(&[], PeriodMode::PerEvent).is_err());
        let m = FrequencyModel::fit([(1, &window(&[Grocery])[..])], PeriodMode::PerEvent, TieOrder::default()).unwrap();
        assert_eq!(m.predict(1).unwrap(), Grocery);
        assert!(matches!(m.predict(2), Err(Error::UnknownCustomer(2))));
    }

    #[test]
    fn calendar_weeks_count_indicator_periods() {
        // Dates every 3 days from Monday 2015-03-02: weeks hold days {0,3,6}, {9,12}, {15,18}.
        let w = window(&[Grocery, Grocery, Clothing, Grocery, Grocery, Other, Other]);
        let (p, k) = window_probabilities(&w, PeriodMode::CalendarWeek).unwrap();
        assert_eq!(k, 3);
        assert_eq!(p, [2.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0]);
    }
}
