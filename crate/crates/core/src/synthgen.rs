//! Deterministic synthetic corpora of labeled columns.
//!
//! Every label gets its own ChaCha stream derived from `(seed, label index)`,
//! so generation order never affects the output.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::largest_remainder;
use crate::seed::rng_for;
use crate::table::{Column, ColumnSource, CorpusSplit, LabelSpace, LabeledColumn};

/// Kinds of value generators. Each draws from closed word lists or a fixed
/// format grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueKind {
    City,
    CountryCode,
    Date,
    Email,
    Price,
    PersonName,
    Phone,
    Url,
    Boolean,
    Color,
    Isbn,
    FreeText,
    Integer { min: i64, max: i64 },
    Year,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecipe {
    pub label: String,
    pub kind: ValueKind,
}

impl LabelRecipe {
    pub fn new(label: impl Into<String>, kind: ValueKind) -> Self {
        Self {
            label: label.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub label_recipes: Vec<LabelRecipe>,
    pub columns_per_label: usize,
    /// Inclusive row-count range per column.
    pub rows_per_column: (usize, usize),
    pub seed: u64,
}

/// The twelve built-in recipes.
pub fn default_recipes() -> Vec<LabelRecipe> {
    use ValueKind::*;
    vec![
        LabelRecipe::new("City", City),
        LabelRecipe::new("Country Code", CountryCode),
        LabelRecipe::new("Date", Date),
        LabelRecipe::new("Email", Email),
        LabelRecipe::new("Price", Price),
        LabelRecipe::new("Person", PersonName),
        LabelRecipe::new("Telephone", Phone),
        LabelRecipe::new("URL", Url),
        LabelRecipe::new("Boolean", Boolean),
        LabelRecipe::new("Color", Color),
        LabelRecipe::new("ISBN", Isbn),
        LabelRecipe::new("Description", FreeText),
    ]
}

impl GeneratorSpec {
    /// Twelve labels, 8 to 20 rows per column.
    pub fn standard(columns_per_label: usize, seed: u64) -> Self {
        Self {
            label_recipes: default_recipes(),
            columns_per_label,
            rows_per_column: (8, 20),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_recipes.len() < 2 {
            return Err(Error::InvalidSpec("at least two labels are required".into()));
        }
        if self.columns_per_label == 0 {
            return Err(Error::InvalidSpec("columns_per_label must be at least 1".into()));
        }
        let (lo, hi) = self.rows_per_column;
        if lo == 0 || hi < lo {
            return Err(Error::InvalidSpec(format!("bad rows_per_column range {lo}..={hi}")));
        }
        for recipe in &self.label_recipes {
            if let ValueKind::Integer { min, max } = recipe.kind {
                if max < min {
                    return Err(Error::InvalidSpec(format!("integer range {min}..={max}")));
                }
            }
        }
        LabelSpace::new(self.label_recipes.iter().map(|r| r.label.clone()))
            .map_err(|e| Error::InvalidSpec(e.to_string()))?;
        Ok(())
    }
}

/// Train/validation/test proportions.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

/// Per-label split sizes: largest remainder of 70/15/15, ties to the earlier split.
pub fn split_counts(n: usize) -> [usize; 3] {
    let quotas: Vec<f64> = SPLIT_FRACTIONS.iter().map(|f| f * n as f64).collect();
    let counts = largest_remainder(&quotas, n, &[0, 1, 2]);
    [counts[0], counts[1], counts[2]]
}

pub fn generate_corpus(spec: &GeneratorSpec) -> Result<CorpusSplit> {
    spec.validate()?;
    let label_space = LabelSpace::new(spec.label_recipes.iter().map(|r| r.label.clone()))?;
    let mut corpus = CorpusSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        label_space,
    };
    let [n_train, n_val, _] = split_counts(spec.columns_per_label);
    for (label_index, recipe) in spec.label_recipes.iter().enumerate() {
        let mut rng = rng_for(spec.seed, &["synthgen", &label_index.to_string()]);
        let mut columns: Vec<LabeledColumn> = (0..spec.columns_per_label)
            .map(|j| {
                let rows = rng.random_range(spec.rows_per_column.0..=spec.rows_per_column.1);
                let values = (0..rows).map(|_| generate_value(recipe.kind, &mut rng)).collect();
                let table = format!("tables/t{:05}.csv", label_index * spec.columns_per_label + j);
                LabeledColumn {
                    column: Column::new(values, ColumnSource::new(table, 0)),
                    label: recipe.label.clone(),
                }
            })
            .collect();
        columns.shuffle(&mut rng);
        let mut rest = columns.split_off(n_train);
        let test = rest.split_off(n_val);
        corpus.train.extend(columns);
        corpus.validation.extend(rest);
        corpus.test.extend(test);
    }
    Ok(corpus)
}

const CITIES: &[&str] = &[
    "London", "Boston", "Seattle", "Paris", "Berlin", "Madrid", "Rome", "Vienna", "Prague",
    "Lisbon", "Dublin", "Oslo", "Stockholm", "Helsinki", "Warsaw", "Athens", "Cairo", "Nairobi",
    "Lagos", "Tokyo", "Osaka", "Seoul", "Beijing", "Shanghai", "Mumbai", "Delhi", "Bangkok",
    "Jakarta", "Manila", "Sydney", "Melbourne", "Auckland", "Toronto", "Vancouver", "Montreal",
    "Chicago", "Houston", "Denver", "Atlanta", "Miami", "Lima", "Bogota", "Santiago", "Quito",
    "Rio de Janeiro", "Buenos Aires",
];

const COUNTRY_CODES: &[&str] = &[
    "GB", "US", "FR", "DE", "ES", "IT", "AT", "CZ", "PT", "IE", "NO", "SE", "FI", "PL", "GR",
    "EG", "KE", "NG", "JP", "KR", "CN", "IN", "TH", "ID", "PH", "AU", "NZ", "CA", "MX", "BR",
    "AR", "CL", "PE", "CO", "EC", "ZA", "NL", "BE", "CH", "DK",
];

const FIRST_NAMES: &[&str] = &[
    "Alice", "Bruno", "Chloe", "Daniel", "Elena", "Farid", "Grace", "Hiro", "Ingrid", "Jamal",
    "Keiko", "Liam", "Maria", "Nikolai", "Olivia", "Pedro", "Quinn", "Rosa", "Samir", "Tara",
    "Umar", "Vera", "Wei", "Ximena", "Yusuf", "Zoe", "Amara", "Boris", "Carmen", "Dmitri",
];

const LAST_NAMES: &[&str] = &[
    "Smith", "Garcia", "Chen", "Muller", "Rossi", "Novak", "Kowalski", "Silva", "Tanaka",
    "Okafor", "Haddad", "Larsen", "Dubois", "Petrov", "Nguyen", "Kim", "Patel", "Jensen",
    "Moreau", "Schmidt", "Costa", "Ivanova", "Sato", "Mensah", "Romero", "Fischer",
];

const COLORS: &[&str] = &[
    "red", "blue", "green", "yellow", "purple", "orange", "black", "white", "gray", "pink",
    "brown", "teal", "navy", "maroon", "olive", "crimson", "indigo", "violet", "beige", "ivory",
    "turquoise", "magenta", "cyan", "gold", "silver", "amber", "lavender", "coral",
];

const TEXT_WORDS: &[&str] = &[
    "the", "service", "was", "quick", "and", "friendly", "room", "very", "clean", "staff",
    "helpful", "food", "tasty", "but", "slow", "delivery", "arrived", "late", "great", "value",
    "for", "money", "would", "recommend", "this", "place", "to", "anyone", "product", "works",
    "well", "after", "update", "nice", "view", "from", "balcony", "noisy", "street", "at",
    "night", "comfortable", "bed", "small", "bathroom", "good", "location", "near", "station",
];

const DOMAINS: &[&str] = &["example.com", "mail.org", "inbox.net", "post.io", "web.de", "corp.co"];

const URL_WORDS: &[&str] = &[
    "shop", "news", "blog", "travel", "books", "music", "sports", "health", "food", "tech",
    "garden", "cars", "photo", "games", "weather",
];

const TLDS: &[&str] = &["com", "org", "net", "io", "de", "co.uk"];

const MONTHS: &[u32] = &[31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];

fn pick<'a>(rng: &mut ChaCha8Rng, list: &[&'a str]) -> &'a str {
    list[rng.random_range(0..list.len())]
}

pub fn generate_value(kind: ValueKind, rng: &mut ChaCha8Rng) -> String {
    match kind {
        ValueKind::City => pick(rng, CITIES).to_string(),
        ValueKind::CountryCode => pick(rng, COUNTRY_CODES).to_string(),
        ValueKind::Date => {
            let year = rng.random_range(1990..=2024);
            let month = rng.random_range(1..=12usize);
            let day = rng.random_range(1..=MONTHS[month - 1]);
            format!("{year:04}-{month:02}-{day:02}")
        }
        ValueKind::Email => {
            let first = pick(rng, FIRST_NAMES).to_lowercase();
            let last = pick(rng, LAST_NAMES).to_lowercase();
            format!("{first}.{last}@{}", pick(rng, DOMAINS))
        }
        ValueKind::Price => {
            let cents: u32 = rng.random_range(99..=99_999);
            format!("${}.{:02}", cents / 100, cents % 100)
        }
        ValueKind::PersonName => format!("{} {}", pick(rng, FIRST_NAMES), pick(rng, LAST_NAMES)),
        ValueKind::Phone => format!(
            "+1-{:03}-{:03}-{:04}",
            rng.random_range(200..=999),
            rng.random_range(200..=999),
            rng.random_range(0..=9999)
        ),
        ValueKind::Url => format!(
            "https://www.{}{}.{}",
            pick(rng, URL_WORDS),
            pick(rng, URL_WORDS),
            pick(rng, TLDS)
        ),
        ValueKind::Boolean => if rng.random_bool(0.5) { "true" } else { "false" }.to_string(),
        ValueKind::Color => pick(rng, COLORS).to_string(),
        ValueKind::Isbn => format!(
            "978-{}-{:03}-{:05}-{}",
            rng.random_range(0..=9),
            rng.random_range(0..=999),
            rng.random_range(0..=99_999),
            rng.random_range(0..=9)
        ),
        ValueKind::FreeText => {
            let n = rng.random_range(4..=8);
            let words: Vec<&str> = (0..n).map(|_| pick(rng, TEXT_WORDS)).collect();
            format!("{}.", words.join(" "))
        }
        ValueKind::Integer { min, max } => rng.random_range(min..=max).to_string(),
        ValueKind::Year => rng.random_range(1900..=2030).to_string(),
    }
}

/// Every word the generators can emit, for building a model vocabulary.
pub fn lexicon() -> Vec<&'static str> {
    [CITIES, COUNTRY_CODES, FIRST_NAMES, LAST_NAMES, COLORS, TEXT_WORDS, DOMAINS, URL_WORDS, TLDS]
        .concat()
}
