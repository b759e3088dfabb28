//! End-to-end workflows over datasets and model files: training per-domain
//! mappers, any-to-any / multi-source / multi-target evaluation, few-shot
//! classification and the binary-code evaluation.
//!
//! Everything here is deterministic given the seeds in the options structs;
//! per-pair randomness is derived from the domain labels so the set of
//! requested pairs never changes an individual pair's numbers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hypersphere::{spherical_average, UnitVector};
use crate::itq::{encode, fit_itq, hamming_search, BinaryGalleryEntry};
use crate::mapper::{load_mapper, save_mapper, train, DomainMapper, TrainConfig};
use crate::metrics::{domain_set_label, evaluate, MetricKind, MetricSpec, ReportRow};
use crate::prototype::{exemplar_prototype, refine_support, PrototypeBook, SplitMode};
use crate::search::{
    refine_query, search_excluding, GalleryEntry, GalleryIndex, ItemRecord, RankedList,
};

/// Fraction of seen-class samples reserved for the gallery in the
/// generalized setting.
const GENERALIZED_RESERVE: f64 = 0.2;

fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ base.wrapping_mul(0x100000001b3);
    for part in parts {
        for b in part.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h = h.wrapping_mul(0x100000001b3) ^ 0xff;
    }
    h
}

/// Conventional location of a domain's model file.
pub fn model_path(models_dir: &Path, domain: &str) -> PathBuf {
    models_dir.join(format!("{domain}.map"))
}

/// Loads the mappers for the given domains from `models_dir`.
pub fn load_mappers<'a>(
    models_dir: &Path,
    domains: impl IntoIterator<Item = &'a str>,
) -> Result<BTreeMap<String, DomainMapper>> {
    let mut mappers = BTreeMap::new();
    for domain in domains {
        if mappers.contains_key(domain) {
            continue;
        }
        let path = model_path(models_dir, domain);
        if !path.is_file() {
            return Err(Error::MissingModel(domain.to_string()));
        }
        let mapper = load_mapper(&path)?;
        if mapper.domain() != domain {
            return Err(Error::InconsistentLabels(format!(
                "{} declares domain `{}`",
                path.display(),
                mapper.domain()
            )));
        }
        mappers.insert(domain.to_string(), mapper);
    }
    Ok(mappers)
}

/// Outcome of `cmd_train`: where the model went and the loss trace
/// (index 0 is the loss at initialization).
#[derive(Debug)]
pub struct TrainReport {
    pub domain: String,
    pub model_path: PathBuf,
    pub epoch_losses: Vec<f64>,
}

/// Trains one domain's mapper on the dataset's training split and writes its
/// model file. Only `<domain>.map` is touched, so domains can be added
/// without disturbing existing models.
pub fn cmd_train(
    manifest_path: &Path,
    domain: &str,
    models_dir: &Path,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let dataset = Dataset::load(manifest_path)?;
    if !dataset.has_domain(domain) {
        return Err(Error::MissingDomain(domain.to_string()));
    }
    let items = dataset.train_items(domain);
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let features: Vec<Vec<f64>> = items.iter().map(|i| i.feature.clone()).collect();
    let categories: Vec<String> = items.iter().map(|i| i.category.clone()).collect();
    let book = dataset.book.restricted_to(&dataset.split.train)?;
    let outcome = train(domain, &features, &categories, &book, cfg)?;
    std::fs::create_dir_all(models_dir)?;
    let path = model_path(models_dir, domain);
    save_mapper(&outcome.mapper, &path)?;
    Ok(TrainReport {
        domain: domain.to_string(),
        model_path: path,
        epoch_losses: outcome.epoch_losses,
    })
}

/// One evaluation unit: an item, or a view group aggregated into a single
/// embedding.
#[derive(Debug, Clone)]
struct EvalUnit {
    unit_id: String,
    domain: String,
    category: String,
    embedding: UnitVector,
}

/// Embeds items and collapses view groups by spherical averaging, keeping
/// first-appearance order.
fn embed_units(
    mappers: &BTreeMap<String, DomainMapper>,
    groups: &HashMap<String, String>,
    items: &[&ItemRecord],
) -> Result<Vec<EvalUnit>> {
    struct Pending {
        domain: String,
        category: String,
        members: Vec<UnitVector>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, Pending> = HashMap::new();
    for item in items {
        let mapper = mappers
            .get(&item.domain)
            .ok_or_else(|| Error::MissingMapper(item.domain.clone()))?;
        let embedding = mapper.forward(&item.feature)?;
        let key = groups
            .get(&item.item_id)
            .cloned()
            .unwrap_or_else(|| item.item_id.clone());
        match pending.get_mut(&key) {
            None => {
                order.push(key.clone());
                pending.insert(
                    key,
                    Pending {
                        domain: item.domain.clone(),
                        category: item.category.clone(),
                        members: vec![embedding],
                    },
                );
            }
            Some(p) => {
                if p.domain != item.domain || p.category != item.category {
                    return Err(Error::InconsistentLabels(format!(
                        "group `{key}` mixes domains or categories"
                    )));
                }
                p.members.push(embedding);
            }
        }
    }
    order
        .into_iter()
        .map(|key| {
            let p = pending.remove(&key).expect("collected above");
            let embedding = if p.members.len() == 1 {
                p.members.into_iter().next().unwrap()
            } else {
                spherical_average(&p.members)?
            };
            Ok(EvalUnit {
                unit_id: key,
                domain: p.domain,
                category: p.category,
                embedding,
            })
        })
        .collect()
}

/// Gallery units of one target group: evaluation items of every listed
/// domain, plus the seeded 20% seen-class reserve in the generalized mode.
fn gallery_units(
    dataset: &Dataset,
    mappers: &BTreeMap<String, DomainMapper>,
    domains: &BTreeSet<String>,
    seed: u64,
) -> Result<Vec<EvalUnit>> {
    let mut units = Vec::new();
    for domain in domains {
        if !dataset.has_domain(domain) {
            return Err(Error::MissingDomain(domain.clone()));
        }
        units.extend(embed_units(
            mappers,
            &dataset.groups,
            &dataset.query_items(domain),
        )?);
        if dataset.split.mode == SplitMode::Generalized {
            let seen = embed_units(mappers, &dataset.groups, &dataset.seen_items(domain))?;
            let reserve = ((seen.len() as f64) * GENERALIZED_RESERVE).round() as usize;
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &["reserve", domain.as_str()]));
            let mut indices: Vec<usize> = (0..seen.len()).collect();
            for i in (1..indices.len()).rev() {
                let j = rng.random_range(0..=i);
                indices.swap(i, j);
            }
            let mut chosen: Vec<usize> = indices.into_iter().take(reserve).collect();
            chosen.sort_unstable();
            for idx in chosen {
                units.push(seen[idx].clone());
            }
        }
    }
    Ok(units)
}

fn index_from_units(units: &[EvalUnit]) -> Result<GalleryIndex> {
    GalleryIndex::new(
        units
            .iter()
            .map(|u| GalleryEntry {
                item_id: u.unit_id.clone(),
                domain: u.domain.clone(),
                category: u.category.clone(),
                embedding: u.embedding.clone(),
            })
            .collect(),
    )
}

/// A query ready to search: its category, the combined embedding and the
/// gallery records it owns (excluded when source and target domains meet).
#[derive(Debug)]
struct PreparedQuery {
    category: String,
    embedding: UnitVector,
    exclusions: BTreeSet<String>,
}

/// Builds the query list for one source group. A single-domain group yields
/// one query per evaluation unit. For multi-source groups, the first listed
/// domain anchors the tuples and every further domain contributes one
/// same-category unit drawn with `rng`; the embeddings are averaged on the
/// sphere. Anchors whose category is missing in a partner domain are
/// dropped.
fn build_queries(
    dataset: &Dataset,
    mappers: &BTreeMap<String, DomainMapper>,
    source_group: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PreparedQuery>> {
    if source_group.is_empty() {
        return Err(Error::EmptyInput);
    }
    for domain in source_group {
        if !dataset.has_domain(domain) {
            return Err(Error::MissingDomain(domain.clone()));
        }
    }
    let anchor_units = embed_units(
        mappers,
        &dataset.groups,
        &dataset.query_items(&source_group[0]),
    )?;
    let mut partner_pools: Vec<BTreeMap<&str, Vec<&EvalUnit>>> = Vec::new();
    let mut partner_units: Vec<Vec<EvalUnit>> = Vec::new();
    for domain in &source_group[1..] {
        partner_units.push(embed_units(
            mappers,
            &dataset.groups,
            &dataset.query_items(domain),
        )?);
    }
    for units in &partner_units {
        let mut pool: BTreeMap<&str, Vec<&EvalUnit>> = BTreeMap::new();
        for u in units {
            pool.entry(u.category.as_str()).or_default().push(u);
        }
        partner_pools.push(pool);
    }

    let mut queries = Vec::new();
    'anchors: for anchor in &anchor_units {
        let mut members = vec![anchor];
        for pool in &partner_pools {
            let Some(candidates) = pool.get(anchor.category.as_str()) else {
                continue 'anchors;
            };
            // Same-domain pairing avoids reusing the anchor when it can.
            let eligible: Vec<&&EvalUnit> = candidates
                .iter()
                .filter(|u| u.unit_id != anchor.unit_id)
                .collect();
            let pick: &EvalUnit = if eligible.is_empty() {
                candidates[rng.random_range(0..candidates.len())]
            } else {
                eligible[rng.random_range(0..eligible.len())]
            };
            members.push(pick);
        }
        let embedding = if members.len() == 1 {
            members[0].embedding.clone()
        } else {
            let embeddings: Vec<UnitVector> = members.iter().map(|u| u.embedding.clone()).collect();
            spherical_average(&embeddings)?
        };
        queries.push(PreparedQuery {
            category: anchor.category.clone(),
            embedding,
            exclusions: members.iter().map(|u| u.unit_id.clone()).collect(),
        });
    }
    Ok(queries)
}

/// Evaluation settings shared by `cmd_eval` and `cmd_hash`.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Cutoff for the @K metrics.
    pub k: usize,
    /// Refinement mixture; `None` picks 0.7 for unseen-class modes and 0.4
    /// for many-shot.
    pub lambda: Option<f64>,
    pub refine: bool,
    pub metrics: Vec<MetricKind>,
    pub seed: u64,
    /// Softmax scale, accepted for flag parity; cosine ranking and
    /// nearest-prototype classification are invariant to it.
    pub scale_s: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k: 100,
            lambda: None,
            refine: false,
            metrics: vec![MetricKind::MapAll],
            seed: 0,
            scale_s: 20.0,
        }
    }
}

/// Mode-dependent default mixture: 0.7 on unseen classes, 0.4 on seen.
pub fn default_lambda(mode: SplitMode) -> f64 {
    match mode {
        SplitMode::ManyShot => 0.4,
        SplitMode::ZeroShot | SplitMode::Generalized => 0.7,
    }
}

fn pair_rows(
    dataset: &Dataset,
    mappers: &BTreeMap<String, DomainMapper>,
    source_group: &[String],
    target_group: &BTreeSet<String>,
    opts: &EvalOptions,
    binary: Option<&BinaryEvalContext>,
) -> Result<Vec<ReportRow>> {
    let source_label = domain_set_label(source_group.iter());
    let target_label = domain_set_label(target_group.iter());
    let units = gallery_units(dataset, mappers, target_group, opts.seed)?;
    let index = index_from_units(&units)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        opts.seed,
        &["pair", source_label.as_str(), target_label.as_str()],
    ));
    let prepared = build_queries(dataset, mappers, source_group, &mut rng)?;
    let lambda = opts.lambda.unwrap_or(default_lambda(dataset.split.mode));

    let mut ranked_queries: Vec<(String, RankedList)> = Vec::with_capacity(prepared.len());
    match binary {
        None => {
            for q in &prepared {
                let embedding = if opts.refine {
                    refine_query(&q.embedding, &index, lambda)?
                } else {
                    q.embedding.clone()
                };
                let ranked = search_excluding(&embedding, &index, None, &q.exclusions)?;
                ranked_queries.push((q.category.clone(), ranked));
            }
        }
        Some(ctx) => {
            let codes: Vec<BinaryGalleryEntry> = units
                .iter()
                .map(|u| {
                    Ok(BinaryGalleryEntry {
                        code: encode(&ctx.model, u.unit_id.clone(), &u.embedding)?,
                        domain: u.domain.clone(),
                        category: u.category.clone(),
                    })
                })
                .collect::<Result<_>>()?;
            for q in &prepared {
                // Refinement happens in the real-valued space, then the
                // refined query is quantized.
                let embedding = if opts.refine {
                    refine_query(&q.embedding, &index, lambda)?
                } else {
                    q.embedding.clone()
                };
                let code = encode(&ctx.model, "query", &embedding)?;
                let ranked = if q
                    .exclusions
                    .iter()
                    .any(|id| codes.iter().any(|c| &c.code.item_id == id))
                {
                    let filtered: Vec<BinaryGalleryEntry> = codes
                        .iter()
                        .filter(|c| !q.exclusions.contains(&c.code.item_id))
                        .cloned()
                        .collect();
                    hamming_search(&code, &filtered, None)?
                } else {
                    hamming_search(&code, &codes, None)?
                };
                ranked_queries.push((q.category.clone(), ranked));
            }
        }
    }

    let spec = MetricSpec {
        kinds: opts.metrics.clone(),
        k: opts.k,
    };
    let values = evaluate(&ranked_queries, &index, &spec)?;
    Ok(values
        .into_iter()
        .map(|(kind, v)| ReportRow {
            metric: kind.name().to_string(),
            source_domains: source_label.clone(),
            target_domains: target_label.clone(),
            k: match kind {
                _ if kind.uses_k() => opts.k.to_string(),
                MetricKind::Nn => "1".to_string(),
                _ => "all".to_string(),
            },
            value: v.value,
            queries: v.queries,
            skipped: v.skipped,
        })
        .collect())
}

struct BinaryEvalContext {
    model: crate::itq::ItqModel,
}

fn collect_domains(groups: &[Vec<String>]) -> BTreeSet<&str> {
    groups
        .iter()
        .flat_map(|g| g.iter().map(String::as_str))
        .collect()
}

/// Runs every (source group, target group) evaluation and returns the
/// report rows. Source groups are ordered domain lists (`a+b` queries pair
/// an `a` anchor with a `b` partner); target groups are domain unions.
pub fn cmd_eval(
    manifest_path: &Path,
    models_dir: &Path,
    source_groups: &[Vec<String>],
    target_groups: &[Vec<String>],
    opts: &EvalOptions,
) -> Result<Vec<ReportRow>> {
    if source_groups.is_empty() || target_groups.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(lambda) = opts.lambda {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidParameter(format!(
                "lambda {lambda} outside [0, 1]"
            )));
        }
    }
    let dataset = Dataset::load(manifest_path)?;
    let mut needed = collect_domains(source_groups);
    needed.extend(collect_domains(target_groups));
    let mappers = load_mappers(models_dir, needed)?;

    let mut rows = Vec::new();
    for source_group in source_groups {
        for target_group in target_groups {
            let targets: BTreeSet<String> = target_group.iter().cloned().collect();
            rows.extend(pair_rows(
                &dataset,
                &mappers,
                source_group,
                &targets,
                opts,
                None,
            )?);
        }
    }
    Ok(rows)
}

/// Binary-code evaluation: fits the quantizer on training-split embeddings
/// of every involved domain, then runs the same pair evaluations over
/// Hamming rankings.
pub fn cmd_hash(
    manifest_path: &Path,
    models_dir: &Path,
    source_groups: &[Vec<String>],
    target_groups: &[Vec<String>],
    bits: usize,
    iterations: usize,
    opts: &EvalOptions,
) -> Result<Vec<ReportRow>> {
    if source_groups.is_empty() || target_groups.is_empty() {
        return Err(Error::EmptyInput);
    }
    let dataset = Dataset::load(manifest_path)?;
    let mut needed = collect_domains(source_groups);
    needed.extend(collect_domains(target_groups));
    let mappers = load_mappers(models_dir, needed.clone())?;

    // Quantizer fit sees only training-split items, so held-out categories
    // never influence it.
    let mut fit_embeddings = Vec::new();
    for domain in &needed {
        let units = embed_units(&mappers, &dataset.groups, &dataset.train_items(domain))?;
        fit_embeddings.extend(units.into_iter().map(|u| u.embedding));
    }
    let fit = fit_itq(&fit_embeddings, bits, iterations, opts.seed)?;
    let ctx = BinaryEvalContext { model: fit.model };

    let mut rows = Vec::new();
    for source_group in source_groups {
        for target_group in target_groups {
            let targets: BTreeSet<String> = target_group.iter().cloned().collect();
            rows.extend(pair_rows(
                &dataset,
                &mappers,
                source_group,
                &targets,
                opts,
                Some(&ctx),
            )?);
        }
    }
    Ok(rows)
}

/// Prototype source for few-shot classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FewshotMode {
    /// Word-vector prototypes; equals zero-shot nearest-prototype
    /// classification.
    WordVectors,
    /// Exemplar prototypes from n sampled source-domain items.
    NShotSource,
    /// Exemplar prototypes from n sampled target-domain items.
    NShotTarget,
}

impl FewshotMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "w2v" => Ok(FewshotMode::WordVectors),
            "n-shot-source" => Ok(FewshotMode::NShotSource),
            "n-shot-target" => Ok(FewshotMode::NShotTarget),
            other => Err(Error::InvalidParameter(format!(
                "unknown few-shot mode `{other}` (expected w2v, n-shot-source or n-shot-target)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FewshotMode::WordVectors => "w2v",
            FewshotMode::NShotSource => "n-shot-source",
            FewshotMode::NShotTarget => "n-shot-target",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FewshotOptions {
    pub mode: FewshotMode,
    pub source_domain: String,
    pub target_domain: String,
    pub shots: usize,
    pub runs: usize,
    /// Mixture for pulling exemplar prototypes toward the word vectors;
    /// `None` uses the unseen-class default 0.7.
    pub lambda: Option<f64>,
    pub seed: u64,
}

#[derive(Debug)]
pub struct FewshotReport {
    pub mode: FewshotMode,
    pub shots: usize,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub per_run: Vec<f64>,
    pub queries: usize,
}

/// Few-shot classification of target-domain items over the unseen
/// categories, averaged over seeded support resamplings.
pub fn cmd_fewshot(
    manifest_path: &Path,
    models_dir: &Path,
    opts: &FewshotOptions,
) -> Result<FewshotReport> {
    if opts.runs == 0 {
        return Err(Error::InvalidParameter("runs must be >= 1".into()));
    }
    if opts.shots == 0 && opts.mode != FewshotMode::WordVectors {
        return Err(Error::InvalidParameter("shots must be >= 1".into()));
    }
    let dataset = Dataset::load(manifest_path)?;
    let lambda = opts.lambda.unwrap_or(0.7);
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    let support_domain = match opts.mode {
        FewshotMode::NShotSource => Some(opts.source_domain.as_str()),
        FewshotMode::NShotTarget => Some(opts.target_domain.as_str()),
        FewshotMode::WordVectors => None,
    };
    let mut needed: BTreeSet<&str> = BTreeSet::new();
    needed.insert(opts.target_domain.as_str());
    if let Some(d) = support_domain {
        needed.insert(d);
    }
    let mappers = load_mappers(models_dir, needed)?;

    let query_cats = dataset.split.query_categories();
    if query_cats.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let test_book = dataset.book.restricted_to(&query_cats)?;
    let target_units = embed_units(
        &mappers,
        &dataset.groups,
        &dataset.query_items(&opts.target_domain),
    )?;
    if target_units.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let classify_units =
        |book: &PrototypeBook, exclude: &BTreeSet<String>| -> Result<(f64, usize)> {
            let mut predictions = Vec::new();
            for unit in &target_units {
                if exclude.contains(&unit.unit_id) {
                    continue;
                }
                let predicted = crate::search::classify(&unit.embedding, book)?;
                predictions.push((predicted.to_string(), unit.category.clone()));
            }
            if predictions.is_empty() {
                return Err(Error::EmptyDataset);
            }
            Ok((crate::metrics::accuracy(&predictions)?, predictions.len()))
        };

    match opts.mode {
        FewshotMode::WordVectors => {
            // Deterministic: a single classification pass covers all runs.
            let (acc, queries) = classify_units(&test_book, &BTreeSet::new())?;
            Ok(FewshotReport {
                mode: opts.mode,
                shots: 0,
                runs: opts.runs,
                mean_accuracy: acc,
                per_run: vec![acc; opts.runs],
                queries,
            })
        }
        FewshotMode::NShotSource | FewshotMode::NShotTarget => {
            let support_units = if opts.mode == FewshotMode::NShotTarget {
                target_units.clone()
            } else {
                embed_units(
                    &mappers,
                    &dataset.groups,
                    &dataset.query_items(&opts.source_domain),
                )?
            };
            let mut pool: BTreeMap<&str, Vec<&EvalUnit>> = BTreeMap::new();
            for u in &support_units {
                pool.entry(u.category.as_str()).or_default().push(u);
            }
            for cat in &query_cats {
                let available = pool.get(cat.as_str()).map_or(0, Vec::len);
                if available < opts.shots {
                    return Err(Error::InsufficientSupport {
                        category: cat.clone(),
                        needed: opts.shots,
                        available,
                    });
                }
            }

            let mut per_run = Vec::with_capacity(opts.runs);
            let mut queries = 0usize;
            for run in 0..opts.runs {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    derive_seed(opts.seed, &["fewshot", opts.mode.as_str()])
                        .wrapping_add(run as u64),
                );
                let mut entries = Vec::new();
                let mut used: BTreeSet<String> = BTreeSet::new();
                for (cat, candidates) in &pool {
                    let mut indices: Vec<usize> = (0..candidates.len()).collect();
                    for i in (1..indices.len()).rev() {
                        let j = rng.random_range(0..=i);
                        indices.swap(i, j);
                    }
                    let chosen = &indices[..opts.shots];
                    let embeddings: Vec<UnitVector> = chosen
                        .iter()
                        .map(|&i| candidates[i].embedding.clone())
                        .collect();
                    for &i in chosen {
                        used.insert(candidates[i].unit_id.clone());
                    }
                    let proto = exemplar_prototype(&embeddings)?;
                    let refined = refine_support(&proto, cat, &test_book, lambda)?;
                    entries.push((cat.to_string(), refined));
                }
                let fewshot_book = PrototypeBook::new(entries)?;
                // Target-domain supports would classify themselves; keep
                // them out of the query set for that run.
                let exclude = if opts.mode == FewshotMode::NShotTarget {
                    used
                } else {
                    BTreeSet::new()
                };
                let (acc, n) = classify_units(&fewshot_book, &exclude)?;
                per_run.push(acc);
                queries = n;
            }
            let mean = per_run.iter().sum::<f64>() / per_run.len() as f64;
            Ok(FewshotReport {
                mode: opts.mode,
                shots: opts.shots,
                runs: opts.runs,
                mean_accuracy: mean,
                per_run,
                queries,
            })
        }
    }
}

/// Embeds all items of the given domains (view groups aggregated) and
/// writes them as a feature file in the shared space. Returns the number of
/// units written.
pub fn cmd_embed(
    manifest_path: &Path,
    models_dir: &Path,
    domains: &BTreeSet<String>,
    out_path: &Path,
) -> Result<usize> {
    let dataset = Dataset::load(manifest_path)?;
    for domain in domains {
        if !dataset.has_domain(domain) {
            return Err(Error::MissingDomain(domain.clone()));
        }
    }
    let mappers = load_mappers(models_dir, domains.iter().map(String::as_str))?;
    let items: Vec<&ItemRecord> = dataset
        .items
        .iter()
        .filter(|i| domains.contains(&i.domain))
        .collect();
    let units = embed_units(&mappers, &dataset.groups, &items)?;
    if units.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let dim = units[0].embedding.dim();
    let rows: Vec<(String, Vec<f64>)> = units
        .into_iter()
        .map(|u| (u.unit_id, u.embedding.as_slice().to_vec()))
        .collect();
    crate::dataset::write_feature_file(out_path, dim, &rows)?;
    Ok(rows.len())
}

/// Interactive single-query search: embeds the identified item (or its view
/// group), searches all items of the target domains and returns the top-k.
#[allow(clippy::too_many_arguments)]
pub fn cmd_search(
    manifest_path: &Path,
    models_dir: &Path,
    query_id: &str,
    target_domains: &BTreeSet<String>,
    k: Option<usize>,
    refine: bool,
    lambda: Option<f64>,
) -> Result<RankedList> {
    let dataset = Dataset::load(manifest_path)?;
    let query_item = dataset
        .item(query_id)
        .ok_or_else(|| Error::InvalidParameter(format!("unknown item `{query_id}`")))?;
    let mut needed: BTreeSet<&str> = target_domains.iter().map(String::as_str).collect();
    needed.insert(query_item.domain.as_str());
    let mappers = load_mappers(models_dir, needed)?;

    // The query unit is the item itself, or its whole view group.
    let query_key = dataset
        .groups
        .get(query_id)
        .cloned()
        .unwrap_or_else(|| query_id.to_string());
    let query_members: Vec<&ItemRecord> = dataset
        .items
        .iter()
        .filter(|i| {
            dataset
                .groups
                .get(&i.item_id)
                .map(|g| *g == query_key)
                .unwrap_or(i.item_id == query_key)
        })
        .collect();
    let query_units = embed_units(&mappers, &dataset.groups, &query_members)?;
    let query = &query_units[0];

    let gallery_items: Vec<&ItemRecord> = dataset
        .items
        .iter()
        .filter(|i| target_domains.contains(&i.domain))
        .collect();
    let units = embed_units(&mappers, &dataset.groups, &gallery_items)?;
    let index = index_from_units(&units)?;
    let lambda = lambda.unwrap_or(default_lambda(dataset.split.mode));
    let embedding = if refine {
        refine_query(&query.embedding, &index, lambda)?
    } else {
        query.embedding.clone()
    };
    let exclusions: BTreeSet<String> = [query.unit_id.clone()].into();
    search_excluding(&embedding, &index, k, &exclusions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use tempfile::tempdir;

    fn quick_synth(dir: &Path, frac: f64, sigma: Vec<f64>) -> PathBuf {
        let cfg = SynthConfig {
            num_categories: 5,
            num_domains: 2,
            embed_dim: 8,
            feature_dim: 12,
            samples_per_category: 6,
            noise_sigma: sigma,
            condition_number: 2.0,
            seed: 42,
            zero_shot_frac: frac,
            nonlinear: false,
        };
        generate(&cfg, dir).unwrap().manifest_path
    }

    fn quick_train(manifest: &Path, models: &Path, domains: &[&str]) {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 25,
            batch_size: 16,
            seed: 7,
            ..TrainConfig::default()
        };
        for d in domains {
            cmd_train(manifest, d, models, &cfg).unwrap();
        }
    }

    #[test]
    fn train_eval_round_trip_on_synthetic_data() {
        let dir = tempdir().unwrap();
        let manifest = quick_synth(&dir.path().join("data"), 0.0, vec![0.02]);
        let models = dir.path().join("models");
        quick_train(&manifest, &models, &["d0", "d1"]);

        let opts = EvalOptions {
            metrics: vec![MetricKind::MapAll, MetricKind::Nn],
            ..EvalOptions::default()
        };
        let rows = cmd_eval(
            &manifest,
            &models,
            &[vec!["d0".to_string()]],
            &[vec!["d1".to_string()]],
            &opts,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert_eq!(row.source_domains, "d0");
            assert_eq!(row.target_domains, "d1");
            assert_eq!(row.queries, 30);
            assert_eq!(row.skipped, 0);
            assert!(row.value.unwrap() > 0.8, "{}: {:?}", row.metric, row.value);
        }
    }

    #[test]
    fn eval_matrix_has_one_row_per_pair_per_metric() {
        let dir = tempdir().unwrap();
        let manifest = quick_synth(&dir.path().join("data"), 0.0, vec![0.02]);
        let models = dir.path().join("models");
        quick_train(&manifest, &models, &["d0", "d1"]);

        let groups = vec![vec!["d0".to_string()], vec!["d1".to_string()]];
        let rows = cmd_eval(
            &manifest,
            &models,
            &groups,
            &groups,
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 4); // 2x2 pairs, one metric
    }

    #[test]
    fn within_domain_search_excludes_self() {
        let dir = tempdir().unwrap();
        let manifest = quick_synth(&dir.path().join("data"), 0.0, vec![0.02]);
        let models = dir.path().join("models");
        quick_train(&manifest, &models, &["d0", "d1"]);

        let rows = cmd_eval(
            &manifest,
            &models,
            &[vec!["d0".to_string()]],
            &[vec!["d0".to_string()]],
            &EvalOptions::default(),
        )
        .unwrap();
        // 6 samples per category, self excluded: 5 relevant remain, so the
        // row reports 30 queries with none skipped.
        assert_eq!(rows[0].queries, 30);
        assert_eq!(rows[0].skipped, 0);
    }

    #[test]
    fn refine_lambda_zero_matches_no_refinement_bitwise() {
        let dir = tempdir().unwrap();
        let manifest = quick_synth(&dir.path().join("data"), 0.0, vec![0.3]);
        let models = dir.path().join("models");
        quick_train(&manifest, &models, &["d0", "d1"]);

        let sources = vec![vec!["d0".to_string()]];
        let targets = vec![vec!["d1".to_string()]];
        let plain = cmd_eval(
            &manifest,
            &models,
            &sources,
            &targets,
            &EvalOptions::default(),
        )
        .unwrap();
        let refined = cmd_eval(
            &manifest,
            &models,
            &sources,
            &targets,
            &EvalOptions {
                refine: true,
                lambda: Some(0.0),
                ..EvalOptions::default()
            },
        )
        .unwrap();
        assert_eq!(
            plain[0].value.unwrap().to_bits(),
            refined[0].value.unwrap().to_bits()
        );
    }

    #[test]
    fn multi_source_and_multi_target_shapes() {
        let dir = tempdir().unwrap();
        let manifest = quick_synth(&dir.path().join("data"), 0.0, vec![0.05]);
        let models = dir.path().join("models");
        quick_train(&manifest, &models, &["d0", "d1"]);

        let opts = EvalOptions {
            metrics: vec![MetricKind::MapAll, MetricKind::IaMapAtK],
            ..EvalOptions::default()
        };
        let rows = cmd_eval(
            &manifest,
            &models,
            &[vec!["d0".to_string(), "d1".to_string()]],
            &[vec!["d0".to_string(), "d1".to_string()]],
            &opts,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert_eq!(row.source_domains, "d0+d1");
            assert_eq!(row.target_domains, "d0+d1");
            assert!(row.value.unwrap() > 0.5);
        }
    }

    #[test]
    fn generalized_mode_reserves_seen_gallery() {
        let dir = tempdir().unwrap();
        let manifest = quick_synth(&dir.path().join("data"), 0.4, vec![0.02]);
        // Flip the manifest to generalized; the split file stays the same.
        let text = std::fs::read_to_string(&manifest).unwrap();
        std::fs::write(
            &manifest,
            text.replace("mode=zero_shot", "mode=generalized"),
        )
        .unwrap();

        let models = dir.path().join("models");
        quick_train(&manifest, &models, &["d0", "d1"]);

        let dataset = Dataset::load(&manifest).unwrap();
        assert_eq!(dataset.split.mode, SplitMode::Generalized);
        let mappers = load_mappers(&models, ["d0", "d1"]).unwrap();
        let targets: BTreeSet<String> = ["d1".to_string()].into();
        let units = gallery_units(&dataset, &mappers, &targets, 0).unwrap();
        // 2 unseen categories x 6 samples, plus 20% of 3 seen x 6 = 18 -> 4.
        assert_eq!(units.len(), 2 * 6 + 4);

        // Queries stay unseen-only.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let queries = build_queries(&dataset, &mappers, &["d0".to_string()], &mut rng).unwrap();
        assert_eq!(queries.len(), 12);
    }

    #[test]
    fn fewshot_target_supports_at_sigma_zero_are_perfect() {
        let dir = tempdir().unwrap();
        let manifest = quick_synth(&dir.path().join("data"), 0.4, vec![0.0]);
        let models = dir.path().join("models");
        quick_train(&manifest, &models, &["d0", "d1"]);

        let report = cmd_fewshot(
            &manifest,
            &models,
            &FewshotOptions {
                mode: FewshotMode::NShotTarget,
                source_domain: "d0".into(),
                target_domain: "d1".into(),
                shots: 1,
                runs: 3,
                lambda: Some(0.0),
                seed: 5,
            },
        )
        .unwrap();
        assert_eq!(report.mean_accuracy, 1.0);

        // Reproducible to the last digit for a fixed seed.
        let again = cmd_fewshot(
            &manifest,
            &models,
            &FewshotOptions {
                mode: FewshotMode::NShotTarget,
                source_domain: "d0".into(),
                target_domain: "d1".into(),
                shots: 1,
                runs: 3,
                lambda: Some(0.0),
                seed: 5,
            },
        )
        .unwrap();
        assert_eq!(report.per_run, again.per_run);
    }

    #[test]
    fn fewshot_w2v_equals_zero_shot_classification() {
        let dir = tempdir().unwrap();
        let manifest = quick_synth(&dir.path().join("data"), 0.4, vec![0.05]);
        let models = dir.path().join("models");
        quick_train(&manifest, &models, &["d0", "d1"]);

        let report = cmd_fewshot(
            &manifest,
            &models,
            &FewshotOptions {
                mode: FewshotMode::WordVectors,
                source_domain: "d0".into(),
                target_domain: "d1".into(),
                shots: 0,
                runs: 10,
                lambda: None,
                seed: 1,
            },
        )
        .unwrap();

        // Cross-check against direct nearest-prototype classification.
        let dataset = Dataset::load(&manifest).unwrap();
        let mappers = load_mappers(&models, ["d1"]).unwrap();
        let book = dataset
            .book
            .restricted_to(&dataset.split.query_categories())
            .unwrap();
        let units = embed_units(&mappers, &dataset.groups, &dataset.query_items("d1")).unwrap();
        let mut hits = 0;
        for u in &units {
            if crate::search::classify(&u.embedding, &book).unwrap() == u.category {
                hits += 1;
            }
        }
        let expected = hits as f64 / units.len() as f64;
        assert_eq!(report.mean_accuracy, expected);
        assert!(report.per_run.iter().all(|a| *a == expected));
    }

    #[test]
    fn fewshot_insufficient_support_is_an_error() {
        let dir = tempdir().unwrap();
        let manifest = quick_synth(&dir.path().join("data"), 0.4, vec![0.05]);
        let models = dir.path().join("models");
        quick_train(&manifest, &models, &["d0", "d1"]);

        let out = cmd_fewshot(
            &manifest,
            &models,
            &FewshotOptions {
                mode: FewshotMode::NShotTarget,
                source_domain: "d0".into(),
                target_domain: "d1".into(),
                shots: 7, // only 6 samples per category exist
                runs: 1,
                lambda: None,
                seed: 1,
            },
        );
        assert!(matches!(out, Err(Error::InsufficientSupport { .. })));
    }

    #[test]
    fn hash_rows_match_eval_shape_and_trail_real_map() {
        let dir = tempdir().unwrap();
        let manifest = quick_synth(&dir.path().join("data"), 0.0, vec![0.05]);
        let models = dir.path().join("models");
        quick_train(&manifest, &models, &["d0", "d1"]);

        let sources = vec![vec!["d0".to_string()]];
        let targets = vec![vec!["d1".to_string()]];
        let real = cmd_eval(
            &manifest,
            &models,
            &sources,
            &targets,
            &EvalOptions::default(),
        )
        .unwrap();
        let binary = cmd_hash(
            &manifest,
            &models,
            &sources,
            &targets,
            6,
            30,
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(binary.len(), real.len());
        assert!(binary[0].value.unwrap() <= real[0].value.unwrap() + 1e-12);
    }

    #[test]
    fn embed_and_search_commands() {
        let dir = tempdir().unwrap();
        let manifest = quick_synth(&dir.path().join("data"), 0.0, vec![0.02]);
        let models = dir.path().join("models");
        quick_train(&manifest, &models, &["d0", "d1"]);

        let out = dir.path().join("embedded.feat");
        let domains: BTreeSet<String> = ["d0".to_string()].into();
        let n = cmd_embed(&manifest, &models, &domains, &out).unwrap();
        assert_eq!(n, 30);
        let (dim, rows) = crate::dataset::read_feature_file(&out).unwrap();
        assert_eq!(dim, 8);
        assert_eq!(rows.len(), 30);

        let dataset = Dataset::load(&manifest).unwrap();
        let query_id = dataset.items[0].item_id.clone();
        let query_cat = dataset.items[0].category.clone();
        let targets: BTreeSet<String> = ["d1".to_string()].into();
        let ranked = cmd_search(
            &manifest,
            &models,
            &query_id,
            &targets,
            Some(5),
            false,
            None,
        )
        .unwrap();
        assert_eq!(ranked.len(), 5);
        assert_eq!(ranked[0].category, query_cat);
    }

    #[test]
    fn view_groups_aggregate_before_indexing() {
        use crate::dataset::{read_labels, write_labels};
        let dir = tempdir().unwrap();
        let manifest = quick_synth(&dir.path().join("data"), 0.0, vec![0.02]);

        // Mark three d1 items of one category as one view group.
        let dataset = Dataset::load(&manifest).unwrap();
        let group_ids: Vec<String> = dataset
            .items
            .iter()
            .filter(|i| i.domain == "d1" && i.category == dataset.book.names()[0])
            .take(3)
            .map(|i| i.item_id.clone())
            .collect();
        let labels_path = dataset.manifest.labels.clone();
        let mut rows = read_labels(&labels_path).unwrap();
        for row in &mut rows {
            if group_ids.contains(&row.item_id) {
                row.group = Some("viewgroup0".to_string());
            }
        }
        write_labels(&labels_path, &rows).unwrap();

        let models = dir.path().join("models");
        quick_train(&manifest, &models, &["d0", "d1"]);
        let dataset = Dataset::load(&manifest).unwrap();
        let mappers = load_mappers(&models, ["d0", "d1"]).unwrap();
        let targets: BTreeSet<String> = ["d1".to_string()].into();
        let units = gallery_units(&dataset, &mappers, &targets, 0).unwrap();
        // 30 items, 3 collapsed into 1 unit.
        assert_eq!(units.len(), 28);
        let group_unit = units.iter().find(|u| u.unit_id == "viewgroup0").unwrap();

        // The aggregated embedding is the spherical mean of the members.
        let members: Vec<UnitVector> = group_ids
            .iter()
            .map(|id| {
                let item = dataset.item(id).unwrap();
                mappers["d1"].forward(&item.feature).unwrap()
            })
            .collect();
        let expected = spherical_average(&members).unwrap();
        assert_eq!(group_unit.embedding, expected);
    }
}
