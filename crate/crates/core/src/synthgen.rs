//! Synthetic bank transaction data with a planted, demographics-conditioned
//! Markov signal.
//!
//! Each customer belongs to a segment keyed by (income group, education
//! bucket). A segment owns a 4×4 transition matrix over [`Category`]; the
//! customer's category sequence is a draw from that chain. When
//! `balance_to_targets` is set, each configured matrix is treated as a
//! *pattern* and rescaled with Sinkhorn iterations so that the target marginal
//! distribution is its stationary distribution. Chains started from that
//! distribution then reproduce the target marginals at every step while
//! keeping the pattern's transition structure.
//!
//! Every customer draws from its own ChaCha stream (`stream = customer index`),
//! so output is identical whether customers are generated serially or in
//! parallel.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    Category, CustomerProfile, Dataset, Education, EducationBucket, Gender, IncomeGroup,
    MaritalStatus, Merchant, Money, Transaction, JOBS, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::par;

pub type Matrix4 = [[f64; NUM_CLASSES]; NUM_CLASSES];

const STOCHASTIC_TOL: f64 = 1e-9;
const SINKHORN_TOL: f64 = 1e-13;
const SINKHORN_MAX_ITERS: usize = 20_000;

/// Target marginals reported for the training bank, renormalized: the four
/// published shares (31.3 / 11.2 / 11.9 / 45.5 percent) add up to 99.9.
pub fn paper_marginals() -> [f64; NUM_CLASSES] {
    let raw = [0.313, 0.112, 0.119, 0.455];
    let total: f64 = raw.iter().sum();
    raw.map(|p| p / total)
}

/// Transition-matrix patterns used by the default configurations.
pub mod patterns {
    use super::Matrix4;
    use crate::domain::NUM_CLASSES;

    fn with_targets(strength: f64, target: impl Fn(usize) -> usize) -> Matrix4 {
        let off = (1.0 - strength) / (NUM_CLASSES - 1) as f64;
        let mut m = [[off; NUM_CLASSES]; NUM_CLASSES];
        for (i, row) in m.iter_mut().enumerate() {
            row[target(i)] = strength;
        }
        m
    }

    /// Grocery ↔ Other, Clothing ↔ Gas stations.
    pub fn alternating(strength: f64) -> Matrix4 {
        with_targets(strength, |i| [3, 2, 1, 0][i])
    }

    /// Grocery → Clothing → Gas stations → Other → Grocery.
    pub fn cycle(strength: f64) -> Matrix4 {
        with_targets(strength, |i| (i + 1) % NUM_CLASSES)
    }

    /// Repeat the previous category.
    pub fn sticky(strength: f64) -> Matrix4 {
        with_targets(strength, |i| i)
    }

    pub fn uniform() -> Matrix4 {
        [[1.0 / NUM_CLASSES as f64; NUM_CLASSES]; NUM_CLASSES]
    }

    pub fn identity() -> Matrix4 {
        let mut m = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub income_group: IncomeGroup,
    pub education: EducationBucket,
    /// Relative sampling weight; normalized over all segments.
    pub weight: f64,
    /// Rows = previous category, columns = next, in [`Category`] index order.
    pub transitions: Matrix4,
    /// Distribution of the first category. Defaults to the target marginals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<[f64; NUM_CLASSES]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmountDistribution {
    /// Mean of ln(dollars).
    pub log_mean: f64,
    /// Standard deviation of ln(dollars).
    pub log_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub name: String,
    pub n_customers: usize,
    pub first_customer_id: u64,
    pub date_start: NaiveDate,
    pub date_end: NaiveDate,
    pub segments: Vec<SegmentConfig>,
    pub target_marginals: [f64; NUM_CLASSES],
    pub balance_to_targets: bool,
    /// Log-normal amount parameters per category, in [`Category`] order.
    pub amounts: [AmountDistribution; NUM_CLASSES],
    /// Annual income ranges in dollars for the low, middle and high groups.
    pub income_ranges: [[u32; 2]; 3],
    pub tx_count_min: usize,
    pub tx_count_max: usize,
    /// Probability that an organic customer loses one demographic field.
    pub missing_demographics_rate: f64,
    /// Customers deliberately generated with a missing demographic field.
    pub planted_incomplete: usize,
    /// Customers deliberately generated with too few transactions or a single category.
    pub planted_low_activity: usize,
    /// Resample organic sequences that would collapse to a single category.
    pub ensure_two_categories: bool,
    /// Raw labels scattered over `Other` transactions; empty keeps `Other` as is.
    pub raw_other_categories: Vec<String>,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Training bank: 2,000 customers, July 2014 to July 2015.
    pub fn bank_a() -> GeneratorConfig {
        use patterns::*;
        let seg = |income_group, education, transitions| SegmentConfig {
            income_group,
            education,
            weight: 1.0,
            transitions,
            initial: None,
        };
        GeneratorConfig {
            name: "bank_a".into(),
            n_customers: 2000,
            first_customer_id: 1_000_000,
            date_start: NaiveDate::from_ymd_opt(2014, 7, 1).unwrap(),
            date_end: NaiveDate::from_ymd_opt(2015, 7, 31).unwrap(),
            segments: vec![
                seg(IncomeGroup::Low, EducationBucket::School, alternating(0.8)),
                seg(IncomeGroup::Low, EducationBucket::University, alternating(0.7)),
                seg(IncomeGroup::Middle, EducationBucket::School, alternating(0.8)),
                seg(IncomeGroup::Middle, EducationBucket::University, alternating(0.7)),
                seg(IncomeGroup::High, EducationBucket::School, cycle(0.8)),
                seg(IncomeGroup::High, EducationBucket::University, sticky(0.8)),
            ],
            target_marginals: paper_marginals(),
            balance_to_targets: true,
            amounts: [
                AmountDistribution { log_mean: 3.7, log_sd: 0.6 },
                AmountDistribution { log_mean: 4.1, log_sd: 0.7 },
                AmountDistribution { log_mean: 3.8, log_sd: 0.4 },
                AmountDistribution { log_mean: 3.9, log_sd: 0.9 },
            ],
            income_ranges: [[15_000, 35_000], [35_000, 70_000], [70_000, 200_000]],
            tx_count_min: 10,
            tx_count_max: 60,
            missing_demographics_rate: 0.01,
            planted_incomplete: 0,
            planted_low_activity: 0,
            ensure_two_categories: true,
            raw_other_categories: [
                "Restaurants",
                "Insurance",
                "Pharmacies",
                "Electronics",
                "Travel",
                "Utilities",
            ]
            .map(String::from)
            .to_vec(),
            seed: 42,
        }
    }

    /// Held-out bank: same segment structure with perturbed transitions,
    /// 500 customers over three months of 2013.
    pub fn bank_b(from: &GeneratorConfig, epsilon: f64) -> GeneratorConfig {
        let mut cfg = from.perturbed(epsilon, from.seed.wrapping_add(0x5eed));
        cfg.name = "bank_b".into();
        cfg.n_customers = 500;
        cfg.first_customer_id = 5_000_000;
        cfg.date_start = NaiveDate::from_ymd_opt(2013, 1, 1).unwrap();
        cfg.date_end = NaiveDate::from_ymd_opt(2013, 3, 31).unwrap();
        cfg.seed = from.seed.wrapping_add(1);
        cfg
    }

    /// Segments whose dominant transitions are at least 0.85, no marginal
    /// balancing, uniform start.
    pub fn strong_signal() -> GeneratorConfig {
        use patterns::*;
        let mut cfg = GeneratorConfig::bank_a();
        cfg.name = "strong".into();
        cfg.balance_to_targets = false;
        let uniform_start = Some([0.25; NUM_CLASSES]);
        for seg in &mut cfg.segments {
            seg.transitions = match seg.income_group {
                IncomeGroup::Low => alternating(0.85),
                IncomeGroup::Middle => cycle(0.85),
                IncomeGroup::High => sticky(0.85),
            };
            seg.initial = uniform_start;
        }
        cfg
    }

    /// Copy with every pattern entry shifted by up to ±`epsilon` and rows
    /// renormalized.
    pub fn perturbed(&self, epsilon: f64, seed: u64) -> GeneratorConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = self.clone();
        for seg in &mut cfg.segments {
            for row in &mut seg.transitions {
                for p in row.iter_mut() {
                    *p = (*p + epsilon * rng.random_range(-1.0..=1.0)).max(1e-6);
                }
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= total);
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.date_end < self.date_start {
            return Err(Error::config("date_end", "date window is empty"));
        }
        if self.segments.is_empty() {
            return Err(Error::config("segments", "at least one segment is required"));
        }
        check_distribution("target_marginals", &self.target_marginals)?;
        for (s, seg) in self.segments.iter().enumerate() {
            if !(seg.weight.is_finite() && seg.weight > 0.0) {
                return Err(Error::config(
                    format!("segments[{s}].weight"),
                    "must be positive",
                ));
            }
            for (r, row) in seg.transitions.iter().enumerate() {
                check_distribution(&format!("segments[{s}].transitions[{r}]"), row)?;
            }
            if let Some(init) = &seg.initial {
                check_distribution(&format!("segments[{s}].initial"), init)?;
            }
        }
        if self.tx_count_min == 0 || self.tx_count_max < self.tx_count_min {
            return Err(Error::config(
                "tx_count_min",
                "need 1 <= tx_count_min <= tx_count_max",
            ));
        }
        if !(0.0..=1.0).contains(&self.missing_demographics_rate) {
            return Err(Error::config("missing_demographics_rate", "must lie in [0, 1]"));
        }
        if self.planted_incomplete + self.planted_low_activity > self.n_customers {
            return Err(Error::config(
                "planted_low_activity",
                "more planted customers than customers",
            ));
        }
        for (g, [lo, hi]) in self.income_ranges.iter().enumerate() {
            if *lo == 0 || hi < lo {
                return Err(Error::config(
                    format!("income_ranges[{g}]"),
                    "need 0 < low <= high",
                ));
            }
        }
        for (c, a) in self.amounts.iter().enumerate() {
            if !(a.log_mean.is_finite() && a.log_sd.is_finite() && a.log_sd >= 0.0) {
                return Err(Error::config(
                    format!("amounts[{c}]"),
                    "log-normal parameters must be finite with log_sd >= 0",
                ));
            }
        }
        Ok(())
    }

    /// Validates and resolves each segment into the chain actually sampled.
    pub fn compile(&self) -> Result<Vec<Chain>> {
        self.validate()?;
        let total: f64 = self.segments.iter().map(|s| s.weight).sum();
        self.segments
            .iter()
            .enumerate()
            .map(|(s, seg)| {
                let transitions = if self.balance_to_targets {
                    balance(&seg.transitions, &self.target_marginals).ok_or_else(|| {
                        Error::config(
                            format!("segments[{s}].transitions"),
                            "cannot be balanced to target_marginals",
                        )
                    })?
                } else {
                    seg.transitions
                };
                Ok(Chain {
                    weight: seg.weight / total,
                    income_group: seg.income_group,
                    education: seg.education,
                    initial: seg.initial.unwrap_or(self.target_marginals),
                    transitions,
                })
            })
            .collect()
    }
}

fn check_distribution(field: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::config(field, "entries must be finite and non-negative"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::config(field, format!("sums to {sum}, expected 1")));
    }
    Ok(())
}

/// A segment's resolved Markov chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub weight: f64,
    pub income_group: IncomeGroup,
    pub education: EducationBucket,
    pub initial: [f64; NUM_CLASSES],
    pub transitions: Matrix4,
}

impl Chain {
    /// Distribution of the category at 1-based position `t`.
    pub fn state_distribution(&self, t: usize) -> [f64; NUM_CLASSES] {
        let mut mu = self.initial;
        for _ in 1..t {
            let mut next = [0.0; NUM_CLASSES];
            for (i, &m) in mu.iter().enumerate() {
                for (j, n) in next.iter_mut().enumerate() {
                    *n += m * self.transitions[i][j];
                }
            }
            mu = next;
        }
        mu
    }
}

/// Sinkhorn rescaling of `pattern` into a chain whose stationary
/// distribution is `target`. Returns `None` when the support of `pattern`
/// does not admit such a chain.
pub fn balance(pattern: &Matrix4, target: &[f64; NUM_CLASSES]) -> Option<Matrix4> {
    // Flow matrix F = diag(u) K diag(v) with row and column sums equal to target.
    let mut u = [1.0; NUM_CLASSES];
    let mut v = [1.0; NUM_CLASSES];
    let flow = |u: &[f64; NUM_CLASSES], v: &[f64; NUM_CLASSES], i: usize, j: usize| {
        u[i] * pattern[i][j] * v[j]
    };
    let mut converged = false;
    for _ in 0..SINKHORN_MAX_ITERS {
        for i in 0..NUM_CLASSES {
            let row: f64 = (0..NUM_CLASSES).map(|j| pattern[i][j] * v[j]).sum();
            u[i] = if target[i] > 0.0 && row > 0.0 { target[i] / row } else { 0.0 };
        }
        for j in 0..NUM_CLASSES {
            let col: f64 = (0..NUM_CLASSES).map(|i| u[i] * pattern[i][j]).sum();
            v[j] = if target[j] > 0.0 && col > 0.0 { target[j] / col } else { 0.0 };
        }
        let err: f64 = (0..NUM_CLASSES)
            .map(|i| {
                let row: f64 = (0..NUM_CLASSES).map(|j| flow(&u, &v, i, j)).sum();
                (row - target[i]).abs()
            })
            .sum();
        if err < SINKHORN_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return None;
    }
    let mut out = [[0.0; NUM_CLASSES]; NUM_CLASSES];
    for i in 0..NUM_CLASSES {
        if target[i] > 0.0 {
            let row: f64 = (0..NUM_CLASSES).map(|j| flow(&u, &v, i, j)).sum();
            for j in 0..NUM_CLASSES {
                out[i][j] = flow(&u, &v, i, j) / row;
            }
        } else {
            out[i] = pattern[i];
        }
    }
    Some(out)
}

/// Accuracy of the best possible predictor of the category at position
/// `seq_len + 1` that knows each customer's segment and the category at
/// position `seq_len`.
pub fn bayes_accuracy(config: &GeneratorConfig, seq_len: usize) -> Result<f64> {
    if seq_len == 0 {
        return Err(Error::config("seq_len", "must be positive"));
    }
    let chains = config.compile()?;
    Ok(chains
        .iter()
        .map(|c| {
            let mu = c.state_distribution(seq_len);
            let hit: f64 = mu
                .iter()
                .zip(&c.transitions)
                .map(|(m, row)| m * row.iter().cloned().fold(0.0, f64::max))
                .sum();
            c.weight * hit
        })
        .sum())
}

/// Which generated customers were deliberately or randomly made ineligible.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationTruth {
    pub incomplete: Vec<u64>,
    pub low_activity: Vec<u64>,
    /// Segment index for every customer, in customer order.
    pub segments: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Organic,
    Incomplete,
    FewTransactions,
    SingleCategory,
}

struct Generated {
    profile: CustomerProfile,
    transactions: Vec<Transaction>,
    segment: usize,
    incomplete: bool,
    low_activity: bool,
}

pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    generate_with_truth(config).map(|(d, _)| d)
}

pub fn generate_with_truth(config: &GeneratorConfig) -> Result<(Dataset, GenerationTruth)> {
    let chains = config.compile()?;
    let customers = par::map_range(config.n_customers, |i| {
        generate_customer(config, &chains, i)
    });
    let mut truth = GenerationTruth::default();
    let mut profiles = Vec::with_capacity(customers.len());
    let mut transactions = Vec::new();
    for c in customers {
        if c.incomplete {
            truth.incomplete.push(c.profile.customer_id);
        }
        if c.low_activity {
            truth.low_activity.push(c.profile.customer_id);
        }
        truth.segments.push(c.segment);
        profiles.push(c.profile);
        transactions.extend(c.transactions);
    }
    Ok((Dataset::new(config.name.clone(), profiles, transactions), truth))
}

fn sample_index<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // Rounding can leave u just above zero; fall back to the last positive weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn pick<'a, T, R: Rng>(rng: &mut R, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

fn generate_customer(config: &GeneratorConfig, chains: &[Chain], index: usize) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);

    let role = if index < config.planted_incomplete {
        Role::Incomplete
    } else if index < config.planted_incomplete + config.planted_low_activity {
        if (index - config.planted_incomplete) % 2 == 0 {
            Role::FewTransactions
        } else {
            Role::SingleCategory
        }
    } else {
        Role::Organic
    };

    let weights: Vec<f64> = chains.iter().map(|c| c.weight).collect();
    let segment = sample_index(&mut rng, &weights);
    let chain = &chains[segment];

    let [lo, hi] = config.income_ranges[match chain.income_group {
        IncomeGroup::Low => 0,
        IncomeGroup::Middle => 1,
        IncomeGroup::High => 2,
    }];
    let customer_id = config.first_customer_id + index as u64;
    let mut profile = CustomerProfile {
        customer_id,
        age: Some(rng.random_range(18..=80)),
        gender: Some(*pick(&mut rng, Gender::ALL)),
        marital_status: Some(*pick(&mut rng, MaritalStatus::ALL)),
        education: Some(*pick(&mut rng, chain.education.members())),
        job: Some(pick(&mut rng, JOBS).to_string()),
        income: Some(Money::from_cents(rng.random_range(lo..=hi) as i64 * 100)),
        income_group: None,
    };

    let drop_field = match role {
        Role::Incomplete => true,
        Role::Organic => rng.random::<f64>() < config.missing_demographics_rate,
        _ => false,
    };
    if drop_field {
        match rng.random_range(0..6) {
            0 => profile.age = None,
            1 => profile.gender = None,
            2 => profile.marital_status = None,
            3 => profile.education = None,
            4 => profile.job = None,
            _ => profile.income = None,
        }
    }

    let n = match role {
        Role::FewTransactions => rng.random_range(3..=9),
        Role::SingleCategory => 50,
        _ => rng.random_range(config.tx_count_min..=config.tx_count_max),
    };

    let categories: Vec<Category> = if role == Role::SingleCategory {
        vec![Category::GasStations; n]
    } else {
        let mut seq = sample_chain(&mut rng, chain, n);
        if config.ensure_two_categories && role != Role::FewTransactions {
            for _ in 0..1000 {
                if n < 2 || seq.iter().any(|c| *c != seq[0]) {
                    break;
                }
                seq = sample_chain(&mut rng, chain, n);
            }
        }
        seq
    };

    let span = (config.date_end - config.date_start).num_days();
    let mut dates: Vec<NaiveDate> = (0..n)
        .map(|_| config.date_start + Duration::days(rng.random_range(0..=span)))
        .collect();
    dates.sort();

    let amount_dists: Vec<LogNormal<f64>> = config
        .amounts
        .iter()
        .map(|a| LogNormal::new(a.log_mean, a.log_sd).expect("validated log-normal"))
        .collect();

    let transactions = categories
        .iter()
        .zip(dates)
        .map(|(&category, date)| {
            let dollars = amount_dists[category.index()].sample(&mut rng);
            let amount = Money::from_dollars(dollars).max(Money(1));
            let merchant = if category == Category::Other && !config.raw_other_categories.is_empty()
            {
                Merchant::Raw(pick(&mut rng, &config.raw_other_categories).clone())
            } else {
                Merchant::Known(category)
            };
            Transaction {
                customer_id,
                date,
                amount,
                category: merchant,
            }
        })
        .collect();

    Generated {
        profile,
        transactions,
        segment,
        incomplete: drop_field,
        low_activity: matches!(role, Role::FewTransactions | Role::SingleCategory),
    }
}

fn sample_chain<R: Rng>(rng: &mut R, chain: &Chain, n: usize) -> Vec<Category> {
    let mut seq = Vec::with_capacity(n);
    if n == 0 {
        return seq;
    }
    let mut state = sample_index(rng, &chain.initial);
    seq.push(Category::ALL[state]);
    for _ in 1..n {
        state = sample_index(rng, &chain.transitions[state]);
        seq.push(Category::ALL[state]);
    }
    seq
}

pub const PROFILE_COLUMNS: [&str; 7] = [
    "customer_id",
    "age",
    "gender",
    "marital_status",
    "education",
    "job",
    "income",
];
pub const TRANSACTION_COLUMNS: [&str; 4] = ["customer_id", "date", "amount", "category"];

/// Writes `profiles.csv` and `transactions.csv` into `dir`.
pub fn export_csv(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join("profiles.csv");
    let mut w = csv_writer(&path)?;
    fn wrap(p: &Path) -> impl Fn(csv::Error) -> Error + '_ {
        move |e| Error::io(p, e.into())
    }
    w.write_record(PROFILE_COLUMNS).map_err(wrap(&path))?;
    for p in &dataset.profiles {
        let opt = |v: Option<String>| v.unwrap_or_default();
        w.write_record([
            p.customer_id.to_string(),
            opt(p.age.map(|a| a.to_string())),
            opt(p.gender.map(|g| g.narrative().to_string())),
            opt(p.marital_status.map(|m| m.narrative().to_string())),
            opt(p.education.map(|e| e.narrative().to_string())),
            opt(p.job.clone()),
            opt(p.income.map(|m| m.to_string())),
        ])
        .map_err(wrap(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("transactions.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(TRANSACTION_COLUMNS).map_err(wrap(&path))?;
    for t in &dataset.transactions {
        w.write_record([
            t.customer_id.to_string(),
            t.date.format("%Y-%m-%d").to_string(),
            t.amount.to_string(),
            t.category.as_code().to_string(),
        ])
        .map_err(wrap(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file)))
}

/// Reads a dataset written by [`export_csv`].
pub fn import_csv(dir: &Path, name: &str) -> Result<Dataset> {
    let path = dir.join("profiles.csv");
    let mut profiles = Vec::new();
    for (line, record) in read_records(&path, &PROFILE_COLUMNS)? {
        let bad = |field: &str| Error::Parse {
            path: path.clone(),
            line,
            reason: format!("invalid {field}"),
        };
        let cell = |i: usize| Some(&record[i]).filter(|s| !s.is_empty());
        profiles.push(CustomerProfile {
            customer_id: record[0].parse().map_err(|_| bad("customer_id"))?,
            age: cell(1)
                .map(|s| s.parse::<u8>().map_err(|_| bad("age")))
                .transpose()?,
            gender: cell(2).map(|s| Gender::parse(s).ok_or_else(|| bad("gender"))).transpose()?,
            marital_status: cell(3).map(|s| MaritalStatus::parse(s).ok_or_else(|| bad("marital_status"))).transpose()?,
            education: cell(4).map(|s| Education::parse(s).ok_or_else(|| bad("education"))).transpose()?,
            job: cell(5).map(str::to_string),
            income: cell(6)
                .map(|s| Money::parse(s).ok_or_else(|| bad("income")))
                .transpose()?,
            income_group: None,
        });
    }

    let path = dir.join("transactions.csv");
    let mut transactions = Vec::new();
    for (line, record) in read_records(&path, &TRANSACTION_COLUMNS)? {
        let bad = |field: &str| Error::Parse {
            path: path.clone(),
            line,
            reason: format!("invalid {field}"),
        };
        transactions.push(Transaction {
            customer_id: record[0].parse().map_err(|_| bad("customer_id"))?,
            date: NaiveDate::parse_from_str(&record[1], "%Y-%m-%d").map_err(|_| bad("date"))?,
            amount: Money::parse(&record[2]).ok_or_else(|| bad("amount"))?,
            category: Merchant::from_code(&record[3]),
        });
    }
    let dataset = Dataset::new(name, profiles, transactions);
    dataset.validate()?;
    Ok(dataset)
}

fn read_records(path: &Path, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let found = r.headers().map_err(|e| Error::io(path, e.into()))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("expected header {}", header.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            reason: e.to_string(),
        })?;
        out.push((i + 2, rec));
    }
    Ok(out)
}
