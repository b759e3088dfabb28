//! Exact cosine retrieval over embedded galleries: index construction, query
//! building from one or many source domains, slerp refinement against the
//! unlabeled top-1 neighbour, and nearest-prototype classification.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::error::{Error, Result};
use crate::hypersphere::{cosine_distance, slerp, spherical_average, UnitVector};
use crate::mapper::DomainMapper;
use crate::prototype::PrototypeBook;

/// A raw dataset row: identity, domain, category and feature vector.
#[derive(Debug, Clone)]
pub struct ItemRecord {
    pub item_id: String,
    pub domain: String,
    pub category: String,
    pub feature: Vec<f64>,
}

/// One embedded gallery member.
#[derive(Debug, Clone)]
pub struct GalleryEntry {
    pub item_id: String,
    pub domain: String,
    pub category: String,
    pub embedding: UnitVector,
}

/// Immutable embedded collection supporting exact cosine k-NN; may span one
/// domain or a union of domains.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    entries: Vec<GalleryEntry>,
    dim: usize,
}

impl GalleryIndex {
    pub fn new(entries: Vec<GalleryEntry>) -> Result<Self> {
        let first = entries.first().ok_or(Error::EmptyGallery)?;
        let dim = first.embedding.dim();
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.embedding.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: e.embedding.dim(),
                });
            }
            if !seen.insert(e.item_id.as_str()) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate item_id `{}` in gallery",
                    e.item_id
                )));
            }
        }
        // Lifetime of `seen` borrows entries; drop before moving.
        drop(seen);
        Ok(GalleryIndex { entries, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    /// Domains present in the index.
    pub fn domains(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.domain.as_str()).collect()
    }

    /// Per-domain count of gallery items of `category`.
    pub fn category_counts_by_domain(&self, category: &str) -> BTreeMap<&str, usize> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &self.entries {
            let slot = counts.entry(e.domain.as_str()).or_default();
            if e.category == category {
                *slot += 1;
            }
        }
        counts
    }
}

/// One retrieval result; `score` is the dot product with the query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedItem {
    pub item_id: String,
    pub score: f64,
    pub domain: String,
    pub category: String,
}

/// Results in descending score order, ties broken by ascending item id.
pub type RankedList = Vec<RankedItem>;

/// Embeds every item of the requested domains with its own domain's mapper.
pub fn embed_gallery(
    mappers: &BTreeMap<String, DomainMapper>,
    items: &[ItemRecord],
    domains: &BTreeSet<String>,
) -> Result<GalleryIndex> {
    if domains.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mut dim: Option<usize> = None;
    for d in domains {
        let m = mappers
            .get(d)
            .ok_or_else(|| Error::MissingMapper(d.clone()))?;
        match dim {
            None => dim = Some(m.output_dim()),
            Some(expected) if expected != m.output_dim() => {
                return Err(Error::DimensionMismatch {
                    expected,
                    actual: m.output_dim(),
                });
            }
            _ => {}
        }
    }
    let mut entries = Vec::new();
    for item in items {
        if !domains.contains(&item.domain) {
            continue;
        }
        let mapper = mappers
            .get(&item.domain)
            .ok_or_else(|| Error::MissingMapper(item.domain.clone()))?;
        entries.push(GalleryEntry {
            item_id: item.item_id.clone(),
            domain: item.domain.clone(),
            category: item.category.clone(),
            embedding: mapper.forward(&item.feature)?,
        });
    }
    GalleryIndex::new(entries)
}

/// Builds a query embedding from one or more (mapper, raw feature) sources.
/// Multiple sources are averaged on the sphere.
pub fn build_query(sources: &[(&DomainMapper, &[f64])]) -> Result<UnitVector> {
    if sources.is_empty() {
        return Err(Error::EmptyInput);
    }
    let d_out = sources[0].0.output_dim();
    for (m, _) in sources {
        if m.output_dim() != d_out {
            return Err(Error::DimensionMismatch {
                expected: d_out,
                actual: m.output_dim(),
            });
        }
    }
    if sources.len() == 1 {
        return sources[0].0.forward(sources[0].1);
    }
    let embeddings: Vec<UnitVector> = sources
        .iter()
        .map(|(m, x)| m.forward(x))
        .collect::<Result<_>>()?;
    spherical_average(&embeddings)
}

fn top1_embedding<'a>(q: &UnitVector, index: &'a GalleryIndex) -> Result<&'a GalleryEntry> {
    if q.dim() != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            actual: q.dim(),
        });
    }
    let mut best: Option<(&GalleryEntry, f64)> = None;
    for e in index.entries() {
        let score = q.dot(&e.embedding);
        let better = match best {
            None => true,
            Some((b, s)) => score > s || (score == s && e.item_id < b.item_id),
        };
        if better {
            best = Some((e, score));
        }
    }
    Ok(best.expect("gallery is nonempty").0)
}

/// Mixes the query with its unlabeled top-1 gallery neighbour by slerp.
/// `lambda = 0` returns the query unchanged.
pub fn refine_query(q: &UnitVector, index: &GalleryIndex, lambda: f64) -> Result<UnitVector> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!(
            "interpolation weight {lambda} outside [0, 1]"
        )));
    }
    if lambda == 0.0 {
        return Ok(q.clone());
    }
    let neighbour = top1_embedding(q, index)?;
    slerp(q, &neighbour.embedding, lambda)
}

/// Exact top-k (or full, for `k = None`) retrieval by descending dot
/// product; `exclude_id` omits the query's own record for within-domain
/// search.
pub fn search(
    q: &UnitVector,
    index: &GalleryIndex,
    k: Option<usize>,
    exclude_id: Option<&str>,
) -> Result<RankedList> {
    let exclusions: BTreeSet<String> = exclude_id.iter().map(|s| s.to_string()).collect();
    search_excluding(q, index, k, &exclusions)
}

/// [`search`] with a set of excluded item ids (multi-source queries own
/// several gallery records).
pub fn search_excluding(
    q: &UnitVector,
    index: &GalleryIndex,
    k: Option<usize>,
    exclude_ids: &BTreeSet<String>,
) -> Result<RankedList> {
    if q.dim() != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            actual: q.dim(),
        });
    }
    if let Some(k) = k {
        if k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
    }
    let mut scored: Vec<(f64, &GalleryEntry)> = index
        .entries()
        .iter()
        .filter(|e| !exclude_ids.contains(&e.item_id))
        .map(|e| (q.dot(&e.embedding), e))
        .collect();
    scored.sort_unstable_by(|(sa, ea), (sb, eb)| {
        sb.partial_cmp(sa)
            .expect("scores are finite")
            .then_with(|| ea.item_id.cmp(&eb.item_id))
    });
    if let Some(k) = k {
        scored.truncate(k);
    }
    Ok(scored
        .into_iter()
        .map(|(score, e)| RankedItem {
            item_id: e.item_id.clone(),
            score,
            domain: e.domain.clone(),
            category: e.category.clone(),
        })
        .collect())
}

/// Nearest-prototype category under cosine distance, ties broken by
/// lexicographic category name.
pub fn classify<'a>(q: &UnitVector, book: &'a PrototypeBook) -> Result<&'a str> {
    if book.is_empty() {
        return Err(Error::EmptyInput);
    }
    if book.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            actual: book.dim(),
        });
    }
    let mut best: Option<(&str, f64)> = None;
    for (name, proto) in book.iter() {
        let dist = cosine_distance(q, proto)?;
        let better = match best {
            None => true,
            Some((bname, bdist)) => dist < bdist || (dist == bdist && name < bname),
        };
        if better {
            best = Some((name, dist));
        }
    }
    Ok(best.expect("book is nonempty").0)
}
