//! Category prototypes: loading fixed word-vector prototypes, building
//! exemplar prototypes for the few-shot setting, and category train/test
//! splits.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hypersphere::{self, normalize, slerp, UnitVector};

const PROTO_MAGIC: &str = "OXDS-PROTO";

/// Immutable map from category name to its unit-norm prototype.
///
/// Entries keep their insertion order. Names are unique, non-empty and free
/// of whitespace; no two prototypes may coincide within 1e-9.
#[derive(Debug, Clone)]
pub struct PrototypeBook {
    names: Vec<String>,
    vectors: Vec<UnitVector>,
    index: HashMap<String, usize>,
    dim: usize,
}

impl PrototypeBook {
    pub fn new(entries: Vec<(String, UnitVector)>) -> Result<Self> {
        let (first_name, first_vec) = entries.first().ok_or(Error::EmptyInput)?;
        let dim = first_vec.dim();
        let mut names = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        let _ = first_name;
        for (name, vector) in entries {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::InvalidParameter(format!(
                    "category name `{name}` is empty or contains whitespace"
                )));
            }
            if vector.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: vector.dim(),
                });
            }
            if index.insert(name.clone(), names.len()).is_some() {
                return Err(Error::DuplicateCategory(name));
            }
            names.push(name);
            vectors.push(vector);
        }
        for i in 0..vectors.len() {
            for j in (i + 1)..vectors.len() {
                let max_diff = vectors[i]
                    .as_slice()
                    .iter()
                    .zip(vectors[j].as_slice())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                if max_diff < 1e-9 {
                    return Err(Error::IndistinctPrototypes {
                        a: names[i].clone(),
                        b: names[j].clone(),
                    });
                }
            }
        }
        Ok(PrototypeBook {
            names,
            vectors,
            index,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, category: &str) -> bool {
        self.index.contains_key(category)
    }

    pub fn get(&self, category: &str) -> Option<&UnitVector> {
        self.index.get(category).map(|&i| &self.vectors[i])
    }

    pub fn position(&self, category: &str) -> Option<usize> {
        self.index.get(category).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vectors(&self) -> &[UnitVector] {
        &self.vectors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &UnitVector)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.vectors.iter())
    }

    /// New book containing only the given categories, in this book's order.
    pub fn restricted_to(&self, categories: &BTreeSet<String>) -> Result<PrototypeBook> {
        for c in categories {
            if !self.contains(c) {
                return Err(Error::UnknownCategory(c.clone()));
            }
        }
        let entries: Vec<(String, UnitVector)> = self
            .iter()
            .filter(|(name, _)| categories.contains(*name))
            .map(|(name, v)| (name.to_string(), v.clone()))
            .collect();
        PrototypeBook::new(entries)
    }

    /// FNV-1a over names and vector bit patterns; used to assert that a book
    /// is left untouched by training.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for (name, vector) in self.iter() {
            eat(name.as_bytes());
            eat(&[0]);
            for x in vector.as_slice() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        hash
    }
}

/// Reads a prototype file.
///
/// Format: `OXDS-PROTO 1 <C> <D>` followed by `C` lines of
/// `<category> <v1> ... <vD>`. Rows are L2-normalized on load; the file may
/// therefore hold raw (non-unit) word vectors.
pub fn load_prototypes(path: &Path, expected_dim: Option<usize>) -> Result<PrototypeBook> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: "missing header".into(),
    })?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != PROTO_MAGIC || fields[1] != "1" {
        return Err(parse_err(
            1,
            format!("expected `{PROTO_MAGIC} 1 <C> <D>` header"),
        ));
    }
    let count: usize = fields[2]
        .parse()
        .map_err(|_| parse_err(1, format!("bad row count `{}`", fields[2])))?;
    let dim: usize = fields[3]
        .parse()
        .map_err(|_| parse_err(1, format!("bad dimension `{}`", fields[3])))?;
    if dim < 2 {
        return Err(parse_err(1, format!("dimension {dim} below 2")));
    }
    if let Some(expected) = expected_dim {
        if dim != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: dim,
            });
        }
    }

    let mut entries = Vec::with_capacity(count);
    let mut seen = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        if seen > count {
            return Err(parse_err(line_no, format!("more than {count} rows")));
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().expect("non-empty line");
        let values = parse_floats(parts, dim, path, line_no)?;
        let vector = normalize(&values).map_err(|e| e.at(path, line_no))?;
        entries.push((name.to_string(), vector));
    }
    if seen != count {
        return Err(parse_err(0, format!("expected {count} rows, found {seen}")));
    }
    PrototypeBook::new(entries)
}

/// Writes a prototype file that `load_prototypes` reads back exactly.
pub fn save_prototypes(book: &PrototypeBook, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{PROTO_MAGIC} 1 {} {}", book.len(), book.dim())?;
    for (name, vector) in book.iter() {
        write!(out, "{name}")?;
        for x in vector.as_slice() {
            write!(out, " {}", fmt_float(*x))?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Formats a double with 17 significant digits, enough to round-trip exactly.
pub(crate) fn fmt_float(x: f64) -> impl fmt::Display {
    struct F(f64);
    impl fmt::Display for F {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            write!(f, "{:.16e}", self.0)
        }
    }
    F(x)
}

pub(crate) fn parse_floats<'a>(
    parts: impl Iterator<Item = &'a str>,
    expected: usize,
    path: &Path,
    line_no: usize,
) -> Result<Vec<f64>> {
    let mut values = Vec::with_capacity(expected);
    for part in parts {
        let v: f64 = part.parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: line_no,
            msg: format!("bad float `{part}`"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: line_no,
                msg: format!("non-finite value `{part}`"),
            });
        }
        values.push(v);
    }
    if values.len() != expected {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: line_no,
            msg: format!("expected {expected} values, found {}", values.len()),
        });
    }
    Ok(values)
}

/// Spherical mean of a support set; the n-shot class prototype.
pub fn exemplar_prototype(embeddings: &[UnitVector]) -> Result<UnitVector> {
    hypersphere::spherical_average(embeddings)
}

/// Pulls a support prototype toward the semantic prototype of its category.
pub fn refine_support(
    p0: &UnitVector,
    category: &str,
    book: &PrototypeBook,
    lambda: f64,
) -> Result<UnitVector> {
    let target = book
        .get(category)
        .ok_or_else(|| Error::UnknownCategory(category.to_string()))?;
    slerp(p0, target, lambda)
}

/// Evaluation regime for a category split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    ZeroShot,
    ManyShot,
    Generalized,
}

impl SplitMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero_shot" => Ok(SplitMode::ZeroShot),
            "many_shot" => Ok(SplitMode::ManyShot),
            "generalized" => Ok(SplitMode::Generalized),
            other => Err(Error::InvalidParameter(format!(
                "unknown mode `{other}` (expected zero_shot, many_shot or generalized)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::ZeroShot => "zero_shot",
            SplitMode::ManyShot => "many_shot",
            SplitMode::Generalized => "generalized",
        }
    }
}

/// Which categories are trained on and which are searched at test time.
///
/// `test` holds every category eligible to appear in the evaluation gallery.
/// In the generalized setting that is the unseen categories plus the seen
/// ones, while queries are still drawn from the unseen categories only.
#[derive(Debug, Clone)]
pub struct CategorySplit {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub mode: SplitMode,
}

impl CategorySplit {
    pub fn new(train: BTreeSet<String>, test: BTreeSet<String>, mode: SplitMode) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidParameter("no train categories".into()));
        }
        if test.is_empty() {
            return Err(Error::InvalidParameter("no test categories".into()));
        }
        match mode {
            SplitMode::ZeroShot => {
                if let Some(shared) = train.intersection(&test).next() {
                    return Err(Error::InvalidParameter(format!(
                        "zero_shot split has `{shared}` in both train and test"
                    )));
                }
            }
            SplitMode::ManyShot => {
                if train != test {
                    return Err(Error::InvalidParameter(
                        "many_shot split requires identical train and test categories".into(),
                    ));
                }
            }
            SplitMode::Generalized => {
                if !train.is_subset(&test) {
                    return Err(Error::InvalidParameter(
                        "generalized split requires test to cover the seen categories".into(),
                    ));
                }
                if train == test {
                    return Err(Error::InvalidParameter(
                        "generalized split has no unseen categories".into(),
                    ));
                }
            }
        }
        Ok(CategorySplit { train, test, mode })
    }

    /// Parses a split file (`<category> train|test` per line) under `mode`.
    ///
    /// Mode adjustments: many_shot treats every listed category as both train
    /// and test; generalized extends the test set with the seen categories.
    pub fn load(path: &Path, mode: SplitMode) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut train = BTreeSet::new();
        let mut test = BTreeSet::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let err = |msg: String| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg,
            };
            if fields.len() != 2 {
                return Err(err("expected `<category> train|test`".into()));
            }
            match fields[1] {
                "train" => train.insert(fields[0].to_string()),
                "test" => test.insert(fields[0].to_string()),
                other => return Err(err(format!("unknown split tag `{other}`"))),
            };
        }
        match mode {
            SplitMode::ManyShot => {
                let all: BTreeSet<String> = train.union(&test).cloned().collect();
                CategorySplit::new(all.clone(), all, mode)
            }
            SplitMode::Generalized => {
                let test_all: BTreeSet<String> = test.union(&train).cloned().collect();
                CategorySplit::new(train, test_all, mode)
            }
            SplitMode::ZeroShot => CategorySplit::new(train, test, mode),
        }
    }

    pub fn is_train_category(&self, category: &str) -> bool {
        self.train.contains(category)
    }

    /// Categories whose items serve as queries at evaluation time.
    pub fn query_categories(&self) -> BTreeSet<String> {
        match self.mode {
            SplitMode::ManyShot => self.test.clone(),
            SplitMode::ZeroShot => self.test.clone(),
            SplitMode::Generalized => self.test.difference(&self.train).cloned().collect(),
        }
    }

    /// Categories eligible for the evaluation gallery.
    pub fn gallery_categories(&self) -> &BTreeSet<String> {
        &self.test
    }
}
