//! Dataset file formats and the manifest tying them together: per-domain
//! feature files, the label manifest, the category split file and the
//! prototype file.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::prototype::{
    fmt_float, load_prototypes, parse_floats, CategorySplit, PrototypeBook, SplitMode,
};
use crate::search::ItemRecord;

const FEAT_MAGIC: &str = "OXDS-FEAT";

/// Feature rows as (item_id, values) pairs.
pub type FeatureRows = Vec<(String, Vec<f64>)>;

/// Reads a feature file: `OXDS-FEAT 1 <N> <D_in>` then `N` rows of
/// `<item_id> <f1> ... <fDin>`.
pub fn read_feature_file(path: &Path) -> Result<(usize, FeatureRows)> {
    let text = fs::read_to_string(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != FEAT_MAGIC || fields[1] != "1" {
        return Err(parse_err(
            1,
            format!("expected `{FEAT_MAGIC} 1 <N> <D_in>` header"),
        ));
    }
    let count: usize = fields[2]
        .parse()
        .map_err(|_| parse_err(1, format!("bad row count `{}`", fields[2])))?;
    let dim: usize = fields[3]
        .parse()
        .map_err(|_| parse_err(1, format!("bad dimension `{}`", fields[3])))?;
    if dim == 0 {
        return Err(parse_err(1, "zero feature dimension".into()));
    }
    let mut rows = Vec::with_capacity(count);
    let mut ids = HashSet::with_capacity(count);
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        if rows.len() == count {
            return Err(parse_err(line_no, format!("more than {count} rows")));
        }
        let mut parts = line.split_whitespace();
        let id = parts.next().expect("non-empty line");
        if !ids.insert(id.to_string()) {
            return Err(parse_err(line_no, format!("duplicate item_id `{id}`")));
        }
        let values = parse_floats(parts, dim, path, line_no)?;
        rows.push((id.to_string(), values));
    }
    if rows.len() != count {
        return Err(parse_err(
            0,
            format!("expected {count} rows, found {}", rows.len()),
        ));
    }
    Ok((dim, rows))
}

/// Writes a feature file that [`read_feature_file`] reads back exactly.
pub fn write_feature_file(path: &Path, dim: usize, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{FEAT_MAGIC} 1 {} {dim}", rows.len())?;
    for (id, values) in rows {
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: values.len(),
            });
        }
        write!(out, "{id}")?;
        for v in values {
            write!(out, " {}", fmt_float(*v))?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// One row of the label manifest.
#[derive(Debug, Clone)]
pub struct LabelRow {
    pub item_id: String,
    pub domain: String,
    pub category: String,
    /// Multi-view group id: grouped items are aggregated into one gallery
    /// entry before indexing.
    pub group: Option<String>,
}

/// Reads a label manifest: `<item_id> <domain> <category> [group]` per line.
pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: "expected `<item_id> <domain> <category> [group]`".into(),
            });
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("duplicate item_id `{}`", fields[0]),
            });
        }
        rows.push(LabelRow {
            item_id: fields[0].to_string(),
            domain: fields[1].to_string(),
            category: fields[2].to_string(),
            group: fields.get(3).map(|s| s.to_string()),
        });
    }
    Ok(rows)
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for row in rows {
        match &row.group {
            Some(g) => writeln!(out, "{} {} {} {g}", row.item_id, row.domain, row.category)?,
            None => writeln!(out, "{} {} {}", row.item_id, row.domain, row.category)?,
        }
    }
    out.flush()?;
    Ok(())
}

/// Paths of everything a dataset consists of, plus the evaluation mode.
/// The manifest file is `key=value` lines with keys `mode`, `prototypes`,
/// `labels`, `split` and one `features.<domain>` per domain; relative paths
/// resolve against the manifest's directory.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub mode: SplitMode,
    pub prototypes: PathBuf,
    pub labels: PathBuf,
    pub split: PathBuf,
    pub features: BTreeMap<String, PathBuf>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut mode = None;
        let mut prototypes = None;
        let mut labels = None;
        let mut split = None;
        let mut features = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key=value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "mode" => mode = Some(SplitMode::parse(value).map_err(|e| e.at(path, idx + 1))?),
                "prototypes" => prototypes = Some(base.join(value)),
                "labels" => labels = Some(base.join(value)),
                "split" => split = Some(base.join(value)),
                _ => match key.strip_prefix("features.") {
                    Some(domain) if !domain.is_empty() => {
                        if features
                            .insert(domain.to_string(), base.join(value))
                            .is_some()
                        {
                            return Err(err(format!("duplicate domain `{domain}`")));
                        }
                    }
                    _ => return Err(err(format!("unknown key `{key}`"))),
                },
            }
        }
        let missing = |what: &str| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: format!("missing `{what}=` entry"),
        };
        let manifest = DatasetManifest {
            mode: mode.ok_or_else(|| missing("mode"))?,
            prototypes: prototypes.ok_or_else(|| missing("prototypes"))?,
            labels: labels.ok_or_else(|| missing("labels"))?,
            split: split.ok_or_else(|| missing("split"))?,
            features,
        };
        if manifest.features.is_empty() {
            return Err(missing("features.<domain>"));
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let rel = |p: &Path| -> String { p.strip_prefix(base).unwrap_or(p).display().to_string() };
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "mode={}", self.mode.as_str())?;
        writeln!(out, "prototypes={}", rel(&self.prototypes))?;
        writeln!(out, "labels={}", rel(&self.labels))?;
        writeln!(out, "split={}", rel(&self.split))?;
        for (domain, p) in &self.features {
            writeln!(out, "features.{domain}={}", rel(p))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// A fully loaded and cross-validated dataset.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub book: PrototypeBook,
    pub split: CategorySplit,
    /// All items, grouped by domain in manifest order, file order within.
    pub items: Vec<ItemRecord>,
    /// item_id -> view-group id, for grouped items only.
    pub groups: HashMap<String, String>,
    pub feature_dims: BTreeMap<String, usize>,
}

impl Dataset {
    /// Loads every referenced file and checks the cross-file invariants:
    /// every feature row has a label of the same domain, ids are unique
    /// across the dataset, and every labeled category has a prototype.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let book = load_prototypes(&manifest.prototypes, None)?;
        let split = CategorySplit::load(&manifest.split, manifest.mode)?;
        for category in split.train.iter().chain(split.test.iter()) {
            if !book.contains(category) {
                return Err(Error::UnknownCategory(category.clone()));
            }
        }
        let label_rows = read_labels(&manifest.labels)?;
        let mut labels: HashMap<&str, &LabelRow> = HashMap::with_capacity(label_rows.len());
        for row in &label_rows {
            labels.insert(row.item_id.as_str(), row);
            if !book.contains(&row.category) {
                return Err(Error::UnknownCategory(row.category.clone()));
            }
        }

        let mut items = Vec::new();
        let mut groups = HashMap::new();
        let mut feature_dims = BTreeMap::new();
        let mut seen_ids: HashSet<String> = HashSet::new();
        for (domain, feat_path) in &manifest.features {
            let (dim, rows) = read_feature_file(feat_path)?;
            feature_dims.insert(domain.clone(), dim);
            for (item_id, feature) in rows {
                let label = labels.get(item_id.as_str()).ok_or_else(|| {
                    Error::InconsistentLabels(format!("{item_id} (no label row)"))
                })?;
                if label.domain != *domain {
                    return Err(Error::InconsistentLabels(format!(
                        "{item_id} (label says `{}`, feature file is `{domain}`)",
                        label.domain
                    )));
                }
                if !seen_ids.insert(item_id.clone()) {
                    return Err(Error::InconsistentLabels(format!(
                        "{item_id} (appears in more than one feature file)"
                    )));
                }
                if let Some(group) = &label.group {
                    groups.insert(item_id.clone(), group.clone());
                }
                items.push(ItemRecord {
                    item_id,
                    domain: domain.clone(),
                    category: label.category.clone(),
                    feature,
                });
            }
        }
        if items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Dataset {
            manifest,
            book,
            split,
            items,
            groups,
            feature_dims,
        })
    }

    pub fn domains(&self) -> BTreeSet<String> {
        self.manifest.features.keys().cloned().collect()
    }

    pub fn has_domain(&self, domain: &str) -> bool {
        self.manifest.features.contains_key(domain)
    }

    /// Items a mapper for `domain` trains on: train categories only in the
    /// zero-shot and generalized modes, everything in many-shot.
    pub fn train_items(&self, domain: &str) -> Vec<&ItemRecord> {
        self.items
            .iter()
            .filter(|i| i.domain == domain && self.split.is_train_category(&i.category))
            .collect()
    }

    /// Items of `domain` whose category is queried at evaluation time.
    pub fn query_items(&self, domain: &str) -> Vec<&ItemRecord> {
        let queries = self.split.query_categories();
        self.items
            .iter()
            .filter(|i| i.domain == domain && queries.contains(&i.category))
            .collect()
    }

    /// Seen-category items of `domain` (the pool the generalized mode
    /// reserves its gallery extras from).
    pub fn seen_items(&self, domain: &str) -> Vec<&ItemRecord> {
        self.items
            .iter()
            .filter(|i| i.domain == domain && self.split.is_train_category(&i.category))
            .collect()
    }

    pub fn item(&self, item_id: &str) -> Option<&ItemRecord> {
        self.items.iter().find(|i| i.item_id == item_id)
    }
}
