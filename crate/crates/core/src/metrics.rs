//! Retrieval and classification metrics: AP/mAP, precision@K, NN, first and
//! second tier recalls, E-measure, normalized DCG, intent-aware mAP and
//! multi-class accuracy, plus per-query aggregation and the CSV report
//! format.
//!
//! Conventions (pinned so numbers are comparable across implementations):
//! binary gains; DCG discounts by log2 starting at rank 2 and normalizes by
//! the ideal ranking; mAP@all normalizes by the number of relevant gallery
//! items, mAP@K by min(relevant, K); queries without a single relevant
//! gallery item are skipped per metric and counted, never scored zero.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::search::{GalleryIndex, RankedItem};

/// Binary relevance flags in rank order, plus how many relevant items the
/// whole gallery holds (the ranked list may be truncated).
#[derive(Debug, Clone)]
pub struct RelevanceList {
    rels: Vec<bool>,
    total_relevant: usize,
}

impl RelevanceList {
    pub fn new(rels: Vec<bool>, total_relevant: usize) -> Result<Self> {
        let found = rels.iter().filter(|r| **r).count();
        if found > total_relevant {
            return Err(Error::InvalidParameter(format!(
                "{found} relevant entries listed but only {total_relevant} exist"
            )));
        }
        Ok(RelevanceList {
            rels,
            total_relevant,
        })
    }

    /// Relevance of a full (untruncated) ranked list against the query's
    /// category; the gallery total is the count of matches in the list.
    pub fn from_full_ranking(list: &[RankedItem], query_category: &str) -> Self {
        let rels: Vec<bool> = list.iter().map(|r| r.category == query_category).collect();
        let total = rels.iter().filter(|r| **r).count();
        RelevanceList {
            rels,
            total_relevant: total,
        }
    }

    pub fn len(&self) -> usize {
        self.rels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rels.is_empty()
    }

    pub fn total_relevant(&self) -> usize {
        self.total_relevant
    }

    pub fn flags(&self) -> &[bool] {
        &self.rels
    }

    fn relevant_in_first(&self, k: usize) -> usize {
        self.rels.iter().take(k).filter(|r| **r).count()
    }
}

/// Average precision, normalized by the gallery total for `cutoff = None`
/// and by `min(total, K)` for a finite cutoff.
pub fn average_precision(rel: &RelevanceList, cutoff: Option<usize>) -> Result<f64> {
    if rel.total_relevant == 0 {
        return Err(Error::NoRelevantItems);
    }
    if cutoff == Some(0) {
        return Err(Error::InvalidParameter("cutoff must be >= 1".into()));
    }
    let limit = cutoff.unwrap_or(rel.len()).min(rel.len());
    let norm = match cutoff {
        None => rel.total_relevant,
        Some(k) => rel.total_relevant.min(k),
    };
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in rel.rels.iter().take(limit).enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / norm as f64)
}

/// Fraction of the first K ranks that are relevant (denominator is K even
/// when the list is shorter).
pub fn precision_at(rel: &RelevanceList, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be >= 1".into()));
    }
    Ok(rel.relevant_in_first(k) as f64 / k as f64)
}

/// First and second tier recalls: recall at K and at 2K where K is the
/// per-class gallery count.
pub fn tier_recalls(rel: &RelevanceList) -> Result<(f64, f64)> {
    let k = rel.total_relevant;
    if k == 0 {
        return Err(Error::NoRelevantItems);
    }
    let ft = rel.relevant_in_first(k) as f64 / k as f64;
    let st = (rel.relevant_in_first(2 * k) as f64 / k as f64).min(1.0);
    Ok((ft, st))
}

/// Harmonic mean of precision@32 and recall@32; zero when both vanish.
pub fn e_measure(rel: &RelevanceList) -> Result<f64> {
    if rel.total_relevant == 0 {
        return Err(Error::NoRelevantItems);
    }
    let hits = rel.relevant_in_first(32) as f64;
    let p = hits / 32.0;
    let r = hits / rel.total_relevant as f64;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * p * r / (p + r))
}

/// Discounted cumulated gain with binary gains, log2 discount from rank 2,
/// normalized by the ideal ranking.
pub fn dcg(rel: &RelevanceList) -> Result<f64> {
    if rel.total_relevant == 0 {
        return Err(Error::NoRelevantItems);
    }
    let discounted = |i: usize| -> f64 {
        if i == 0 {
            1.0
        } else {
            1.0 / ((i + 1) as f64).log2()
        }
    };
    let actual: f64 = rel
        .rels
        .iter()
        .enumerate()
        .filter(|(_, r)| **r)
        .map(|(i, _)| discounted(i))
        .sum();
    let ideal: f64 = (0..rel.total_relevant).map(discounted).sum();
    Ok(actual / ideal)
}

/// Intent-aware average precision at K: per-domain AP@K combined with
/// weights proportional to the query category's gallery count per domain.
pub fn intent_aware_map(
    per_domain_rels: &BTreeMap<String, RelevanceList>,
    gallery_category_counts: &BTreeMap<String, usize>,
    k: usize,
) -> Result<f64> {
    let total: usize = gallery_category_counts.values().sum();
    if total == 0 {
        return Err(Error::NoRelevantItems);
    }
    let mut out = 0.0;
    for (domain, &count) in gallery_category_counts {
        if count == 0 {
            continue;
        }
        let rel = per_domain_rels
            .get(domain)
            .ok_or_else(|| Error::InconsistentLabels(domain.clone()))?;
        let w = count as f64 / total as f64;
        out += w * average_precision(rel, Some(k))?;
    }
    Ok(out)
}

/// Fraction of exactly matching (predicted, true) category pairs.
pub fn accuracy(predictions: &[(String, String)]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = predictions.iter().filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// The metrics the evaluation harness can compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MetricKind {
    MapAll,
    MapAtK,
    PrecAtK,
    Nn,
    Ft,
    St,
    EMeasure,
    Dcg,
    IaMapAtK,
}

impl MetricKind {
    pub const ALL: [MetricKind; 9] = [
        MetricKind::MapAll,
        MetricKind::MapAtK,
        MetricKind::PrecAtK,
        MetricKind::Nn,
        MetricKind::Ft,
        MetricKind::St,
        MetricKind::EMeasure,
        MetricKind::Dcg,
        MetricKind::IaMapAtK,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "map" => Ok(MetricKind::MapAll),
            "map@k" => Ok(MetricKind::MapAtK),
            "prec@k" => Ok(MetricKind::PrecAtK),
            "nn" => Ok(MetricKind::Nn),
            "ft" => Ok(MetricKind::Ft),
            "st" => Ok(MetricKind::St),
            "e" => Ok(MetricKind::EMeasure),
            "dcg" => Ok(MetricKind::Dcg),
            "ia_map@k" => Ok(MetricKind::IaMapAtK),
            other => Err(Error::UnknownMetric(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::MapAll => "map",
            MetricKind::MapAtK => "map@k",
            MetricKind::PrecAtK => "prec@k",
            MetricKind::Nn => "nn",
            MetricKind::Ft => "ft",
            MetricKind::St => "st",
            MetricKind::EMeasure => "e",
            MetricKind::Dcg => "dcg",
            MetricKind::IaMapAtK => "ia_map@k",
        }
    }

    /// Whether the `--k` cutoff participates in this metric.
    pub fn uses_k(self) -> bool {
        matches!(
            self,
            MetricKind::MapAtK | MetricKind::PrecAtK | MetricKind::IaMapAtK
        )
    }
}

/// Which metrics to compute and at what cutoff.
#[derive(Debug, Clone)]
pub struct MetricSpec {
    pub kinds: Vec<MetricKind>,
    pub k: usize,
}

impl MetricSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::InvalidParameter("no metrics requested".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean of one metric over the queries that had relevant gallery items.
#[derive(Debug, Clone, Copy)]
pub struct MetricValue {
    pub value: Option<f64>,
    pub queries: usize,
    pub skipped: usize,
}

/// Per-query metric evaluation over full ranked lists, averaged with equal
/// weight. Every ranked item's labels are cross-checked against the gallery.
pub fn evaluate(
    queries: &[(String, Vec<RankedItem>)],
    gallery: &GalleryIndex,
    spec: &MetricSpec,
) -> Result<BTreeMap<MetricKind, MetricValue>> {
    spec.validate()?;
    let labels: BTreeMap<&str, (&str, &str)> = gallery
        .entries()
        .iter()
        .map(|e| (e.item_id.as_str(), (e.domain.as_str(), e.category.as_str())))
        .collect();
    for (_, list) in queries {
        for item in list {
            match labels.get(item.item_id.as_str()) {
                Some((domain, category))
                    if *domain == item.domain && *category == item.category => {}
                _ => return Err(Error::InconsistentLabels(item.item_id.clone())),
            }
        }
    }

    let mut sums: BTreeMap<MetricKind, (f64, usize, usize)> = spec
        .kinds
        .iter()
        .map(|k| (*k, (0.0, 0usize, 0usize)))
        .collect();

    for (category, list) in queries {
        let rel = RelevanceList::from_full_ranking(list, category);
        let relevant = rel.total_relevant() > 0;
        for kind in &spec.kinds {
            let slot = sums.get_mut(kind).unwrap();
            slot.1 += 1;
            if !relevant {
                slot.2 += 1;
                continue;
            }
            let value = match kind {
                MetricKind::MapAll => average_precision(&rel, None)?,
                MetricKind::MapAtK => average_precision(&rel, Some(spec.k))?,
                MetricKind::PrecAtK => precision_at(&rel, spec.k)?,
                MetricKind::Nn => precision_at(&rel, 1)?,
                MetricKind::Ft => tier_recalls(&rel)?.0,
                MetricKind::St => tier_recalls(&rel)?.1,
                MetricKind::EMeasure => e_measure(&rel)?,
                MetricKind::Dcg => dcg(&rel)?,
                MetricKind::IaMapAtK => {
                    let mut per_domain: BTreeMap<String, Vec<RankedItem>> = BTreeMap::new();
                    for item in list {
                        per_domain
                            .entry(item.domain.clone())
                            .or_default()
                            .push(item.clone());
                    }
                    let rels: BTreeMap<String, RelevanceList> = per_domain
                        .iter()
                        .map(|(d, sub)| {
                            (d.clone(), RelevanceList::from_full_ranking(sub, category))
                        })
                        .collect();
                    let counts: BTreeMap<String, usize> = rels
                        .iter()
                        .map(|(d, r)| (d.clone(), r.total_relevant()))
                        .collect();
                    intent_aware_map(&rels, &counts, spec.k)?
                }
            };
            slot.0 += value;
        }
    }

    Ok(sums
        .into_iter()
        .map(|(kind, (sum, queries, skipped))| {
            let counted = queries - skipped;
            let value = if counted > 0 {
                Some(sum / counted as f64)
            } else {
                None
            };
            (
                kind,
                MetricValue {
                    value,
                    queries,
                    skipped,
                },
            )
        })
        .collect())
}

/// One line of the metrics report.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub metric: String,
    pub source_domains: String,
    pub target_domains: String,
    /// Cutoff as text: a number for @K metrics, `all` otherwise.
    pub k: String,
    pub value: Option<f64>,
    pub queries: usize,
    pub skipped: usize,
}

/// Serializes domain sets for report rows: `+`-joined sorted names.
pub fn domain_set_label<I, S>(domains: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut names: Vec<String> = domains
        .into_iter()
        .map(|s| s.as_ref().to_string())
        .collect();
    names.sort_unstable();
    names.join("+")
}

/// Writes the report CSV. Rows are sorted before writing so assembly order
/// never leaks into the output; `binary` prepends a `# binary=true` tag line.
pub fn write_report_csv(rows: &[ReportRow], path: &Path, binary: bool) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "{}", render_report(rows, binary))?;
    out.flush()?;
    Ok(())
}

/// Report text with rows sorted by (metric, source, target, k).
pub fn render_report(rows: &[ReportRow], binary: bool) -> String {
    let mut sorted: Vec<&ReportRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.metric, &a.source_domains, &a.target_domains, &a.k).cmp(&(
            &b.metric,
            &b.source_domains,
            &b.target_domains,
            &b.k,
        ))
    });
    let mut text = String::new();
    if binary {
        text.push_str("# binary=true\n");
    }
    text.push_str("metric,source_domains,target_domains,k,value,queries,skipped\n");
    for row in sorted {
        let value = row.value.map(|v| format!("{v:.6}")).unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.metric,
            row.source_domains,
            row.target_domains,
            row.k,
            value,
            row.queries,
            row.skipped
        ));
    }
    text
}
