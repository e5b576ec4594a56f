//! Catalog, engagement log and golden-set storage, plus the seeded synthetic
//! corpus generator used by tests, benchmarks and the default pipeline.
//!
//! File formats:
//! - catalog: JSON lines, one [`Product`] per line
//! - engagement: TSV with header `query	product_id	impressions	clicks	orders`
//! - golden set: JSON lines `{"query": "...", "relevant": ["id", ...]}`

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::text::normalize_query;

/// Engagement TSV header line.
pub const ENGAGEMENT_HEADER: &str = "query\tproduct_id\timpressions\tclicks\torders";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: String,
    pub title: String,
    pub product_type: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl Product {
    fn validate(&self) -> std::result::Result<(), &'static str> {
        if self.id.trim().is_empty() {
            return Err("empty id");
        }
        if self.title.trim().is_empty() {
            return Err("empty title");
        }
        if self.product_type.trim().is_empty() {
            return Err("empty product_type");
        }
        Ok(())
    }

    pub fn attribute(&self, name: &str) -> Option<&str> {
        self.attributes.get(name).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub text: String,
    pub normalized: String,
    pub impression_count: u64,
}

impl Query {
    pub fn new(text: impl Into<String>, impression_count: u64) -> Self {
        let text = text.into();
        let normalized = normalize_query(&text);
        Self {
            text,
            normalized,
            impression_count,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub impressions: u64,
    pub clicks: u64,
    pub orders: u64,
}

impl Counts {
    pub fn new(impressions: u64, clicks: u64, orders: u64) -> Self {
        Self {
            impressions,
            clicks,
            orders,
        }
    }

    fn add(&mut self, other: Counts) {
        self.impressions += other.impressions;
        self.clicks += other.clicks;
        self.orders += other.orders;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngagementRecord {
    pub query: String,
    pub product_id: String,
    pub counts: Counts,
}

/// Immutable catalog. Products are kept sorted by id so that ordinal order
/// and id order coincide; every id-based tie-break downstream is an ordinal
/// comparison.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    products: Vec<Product>,
    by_id: HashMap<String, usize>,
}

impl Catalog {
    /// Builds a catalog, rejecting invalid and duplicate records. Returns the
    /// catalog and the number of rejected records. The first occurrence of
    /// a duplicated id wins.
    pub fn from_products(products: impl IntoIterator<Item = Product>) -> (Self, usize) {
        let mut seen = HashMap::new();
        let mut kept = Vec::new();
        let mut rejected = 0;
        for p in products {
            if let Err(why) = p.validate() {
                warn!("rejecting product {:?}: {why}", p.id);
                rejected += 1;
                continue;
            }
            if seen.contains_key(&p.id) {
                warn!("rejecting duplicate product id {:?}", p.id);
                rejected += 1;
                continue;
            }
            seen.insert(p.id.clone(), ());
            kept.push(p);
        }
        kept.sort_by(|a, b| a.id.cmp(&b.id));
        let by_id = kept
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.clone(), i))
            .collect();
        (
            Self {
                products: kept,
                by_id,
            },
            rejected,
        )
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    pub fn get(&self, ordinal: usize) -> &Product {
        &self.products[ordinal]
    }

    pub fn ordinal(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Option<&Product> {
        self.ordinal(id).map(|i| &self.products[i])
    }

    pub fn product_types(&self) -> BTreeSet<&str> {
        self.products.iter().map(|p| p.product_type.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct IngestStats {
    pub count: usize,
    pub rejected: usize,
}

pub fn ingest_catalog(path: &Path) -> Result<(Catalog, IngestStats)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut parsed = Vec::new();
    let mut malformed = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Product>(line) {
            Ok(p) => parsed.push(p),
            Err(e) => {
                warn!("{}:{}: malformed product: {e}", path.display(), lineno + 1);
                malformed += 1;
            }
        }
    }
    let (catalog, rejected) = Catalog::from_products(parsed);
    let stats = IngestStats {
        count: catalog.len(),
        rejected: rejected + malformed,
    };
    Ok((catalog, stats))
}

pub fn write_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    let mut out = String::new();
    for p in catalog.products() {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    codec::write_file(path, out.as_bytes())
}

/// Engagement counts keyed by normalized query, then product id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EngagementTable {
    rows: BTreeMap<String, BTreeMap<String, Counts>>,
}

impl EngagementTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds counts for a pair; repeated pairs are summed.
    pub fn add(&mut self, query: &str, product_id: &str, counts: Counts) {
        self.rows
            .entry(normalize_query(query))
            .or_default()
            .entry(product_id.to_string())
            .or_default()
            .add(counts);
    }

    pub fn get(&self, query: &str, product_id: &str) -> Option<Counts> {
        self.rows.get(query)?.get(product_id).copied()
    }

    pub fn rows_for(&self, query: &str) -> Option<&BTreeMap<String, Counts>> {
        self.rows.get(query)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = EngagementRecord> + '_ {
        self.rows.iter().flat_map(|(q, per)| {
            per.iter().map(move |(pid, c)| EngagementRecord {
                query: q.clone(),
                product_id: pid.clone(),
                counts: *c,
            })
        })
    }

    pub fn len(&self) -> usize {
        self.rows.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Total impressions per query: the head/tail traffic prior.
    pub fn query_impressions(&self) -> BTreeMap<String, u64> {
        self.rows
            .iter()
            .map(|(q, per)| (q.clone(), per.values().map(|c| c.impressions).sum()))
            .collect()
    }

    /// Total orders per product across all queries.
    pub fn product_orders(&self) -> HashMap<String, u64> {
        let mut out: HashMap<String, u64> = HashMap::new();
        for per in self.rows.values() {
            for (pid, c) in per {
                *out.entry(pid.clone()).or_default() += c.orders;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct EngagementStats {
    pub rows: usize,
    pub rejected: usize,
}

fn parse_count(field: &str) -> Option<u64> {
    let v: i64 = field.trim().parse().ok()?;
    u64::try_from(v).ok()
}

pub fn ingest_engagement(path: &Path) -> Result<(EngagementTable, EngagementStats)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = EngagementTable::new();
    let mut stats = EngagementStats::default();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (lineno == 0 && line.trim_end() == ENGAGEMENT_HEADER) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parsed = match fields.as_slice() {
            [q, pid, imp, clk, ord] if !q.trim().is_empty() && !pid.trim().is_empty() => {
                match (parse_count(imp), parse_count(clk), parse_count(ord)) {
                    (Some(i), Some(c), Some(o)) => Some((q, pid, Counts::new(i, c, o))),
                    _ => None,
                }
            }
            _ => None,
        };
        match parsed {
            Some((q, pid, counts)) => {
                table.add(q, pid.trim(), counts);
                stats.rows += 1;
            }
            None => {
                warn!("{}:{}: rejected engagement row", path.display(), lineno + 1);
                stats.rejected += 1;
            }
        }
    }
    Ok((table, stats))
}

pub fn write_engagement(path: &Path, table: &EngagementTable) -> Result<()> {
    let mut out = String::from(ENGAGEMENT_HEADER);
    out.push('\n');
    for r in table.iter() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.query, r.product_id, r.counts.impressions, r.counts.clicks, r.counts.orders
        );
    }
    codec::write_file(path, out.as_bytes())
}

/// Query → relevant product ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoldenSet {
    pub entries: BTreeMap<String, BTreeSet<String>>,
}

impl GoldenSet {
    pub fn get(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(query)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct GoldenStats {
    pub entries: usize,
    /// Unknown product ids dropped.
    pub warnings: usize,
    /// Entries dropped because nothing survived.
    pub dropped: usize,
}

#[derive(Serialize, Deserialize)]
struct GoldenLine {
    query: String,
    relevant: Vec<String>,
}

pub fn ingest_golden(path: &Path, catalog: &Catalog) -> Result<(GoldenSet, GoldenStats)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut stats = GoldenStats::default();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: GoldenLine = match serde_json::from_str(line) {
            Ok(g) => g,
            Err(e) => {
                warn!("{}:{}: malformed golden entry: {e}", path.display(), lineno + 1);
                stats.dropped += 1;
                continue;
            }
        };
        let set = raw.entry(normalize_query(&parsed.query)).or_default();
        for id in parsed.relevant {
            if catalog.ordinal(&id).is_some() {
                set.insert(id);
            } else {
                stats.warnings += 1;
            }
        }
    }
    let mut golden = GoldenSet::default();
    for (q, set) in raw {
        if set.is_empty() {
            warn!("golden query {q:?} has no known products; dropped");
            stats.dropped += 1;
        } else {
            golden.entries.insert(q, set);
        }
    }
    stats.entries = golden.len();
    Ok((golden, stats))
}

pub fn write_golden(path: &Path, golden: &GoldenSet) -> Result<()> {
    let mut out = String::new();
    for (q, set) in &golden.entries {
        let line = GoldenLine {
            query: q.clone(),
            relevant: set.iter().cloned().collect(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    codec::write_file(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_products: usize,
    pub n_queries: usize,
    pub n_categories: usize,
    /// Fraction of products that are cross-category distractors: their title
    /// carries another category's head noun plus an accessory word.
    pub distractor_rate: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, n_products: usize, n_queries: usize, n_categories: usize) -> Self {
        Self {
            seed,
            n_products,
            n_queries,
            n_categories,
            distractor_rate: 0.2,
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::new(7, 2000, 400, 20)
    }
}

pub struct SyntheticCorpus {
    pub catalog: Catalog,
    pub engagement: EngagementTable,
    pub golden: GoldenSet,
    /// Generating category (product type) of every query.
    pub query_categories: BTreeMap<String, String>,
}

const CATEGORIES: &[(&str, [&str; 3])] = &[
    ("shoes", ["shoe", "sneaker", "boot"]),
    ("hats", ["hat", "cap", "beanie"]),
    ("dining chairs", ["chair", "stool", "seat"]),
    ("toothpaste", ["toothpaste", "paste", "whitening"]),
    ("laptops", ["laptop", "notebook", "chromebook"]),
    ("headphones", ["headphones", "earbuds", "headset"]),
    ("coffee makers", ["coffee", "espresso", "brewer"]),
    ("backpacks", ["backpack", "daypack", "rucksack"]),
    ("watches", ["watch", "smartwatch", "chronograph"]),
    ("lamps", ["lamp", "lantern", "sconce"]),
    ("jackets", ["jacket", "parka", "coat"]),
    ("blenders", ["blender", "mixer", "juicer"]),
    ("sunglasses", ["sunglasses", "shades", "aviators"]),
    ("pillows", ["pillow", "cushion", "bolster"]),
    ("bicycles", ["bicycle", "bike", "cruiser"]),
    ("phones", ["phone", "smartphone", "handset"]),
    ("towels", ["towel", "washcloth", "bathsheet"]),
    ("tents", ["tent", "shelter", "canopy"]),
    ("mugs", ["mug", "cup", "tumbler"]),
    ("socks", ["socks", "anklets", "hosiery"]),
    ("rugs", ["rug", "carpet", "runner"]),
    ("strollers", ["stroller", "pram", "buggy"]),
    ("guitars", ["guitar", "ukulele", "bass"]),
    ("candles", ["candle", "votive", "taper"]),
];

const COLORS: &[&str] = &[
    "red", "blue", "green", "black", "white", "grey", "pink", "yellow", "brown", "purple", "orange",
    "navy",
];
const BRANDS: &[&str] = &[
    "acme", "zentro", "northway", "lumio", "brava", "koru", "velta", "orion", "pinecrest", "solara",
    "tundra", "mirra", "quill", "everly", "halden", "nuvo", "ridgeback", "sable", "tallis", "umbra",
];
const GENDERS: &[&str] = &["men", "women", "unisex", "kids"];
const MODIFIERS: &[&str] = &[
    "classic", "premium", "lightweight", "deluxe", "compact", "soft", "sturdy", "modern", "vintage",
    "essential",
];
const ACCESSORIES: &[&str] = &[
    "rack", "holder", "cleaner", "organizer", "stand", "hook", "cover", "bag",
];

fn category_spec(c: usize) -> (String, [String; 3]) {
    if c < CATEGORIES.len() {
        let (pt, nouns) = CATEGORIES[c];
        (pt.to_string(), nouns.map(str::to_string))
    } else {
        (
            format!("category {c}"),
            [format!("item{c}a"), format!("item{c}b"), format!("item{c}c")],
        )
    }
}

/// Deterministic synthetic catalog, engagement log and golden set.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    if cfg.n_products == 0 || cfg.n_queries == 0 || cfg.n_categories == 0 {
        return Err(Error::invalid("synthetic corpus sizes must all be >= 1"));
    }
    if cfg.n_categories > cfg.n_products {
        return Err(Error::invalid(format!(
            "n_categories ({}) exceeds n_products ({})",
            cfg.n_categories, cfg.n_products
        )));
    }
    if !(0.0..1.0).contains(&cfg.distractor_rate) {
        return Err(Error::invalid("distractor_rate must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cats: Vec<(String, [String; 3])> = (0..cfg.n_categories).map(category_spec).collect();

    // Products. The first n_categories products cover every category once and
    // are never distractors, so each category has at least one genuine member.
    struct Meta {
        category: usize,
        noun: Option<usize>,
        color: usize,
        brand: usize,
    }
    let mut products = Vec::with_capacity(cfg.n_products);
    let mut metas = Vec::with_capacity(cfg.n_products);
    for i in 0..cfg.n_products {
        let category = if i < cfg.n_categories {
            i
        } else {
            rng.gen_range(0..cfg.n_categories)
        };
        let brand = rng.gen_range(0..BRANDS.len());
        let color = rng.gen_range(0..COLORS.len());
        let gender = rng.gen_range(0..GENDERS.len());
        let modifier = MODIFIERS[rng.gen_range(0..MODIFIERS.len())];
        let distractor =
            i >= cfg.n_categories && cfg.n_categories > 1 && rng.gen_bool(cfg.distractor_rate);
        let (title, noun) = if distractor {
            let mut other = rng.gen_range(0..cfg.n_categories - 1);
            if other >= category {
                other += 1;
            }
            let other_noun = &cats[other].1[rng.gen_range(0..3)];
            let accessory = ACCESSORIES[rng.gen_range(0..ACCESSORIES.len())];
            (
                format!("{} {} {other_noun} {accessory}", BRANDS[brand], COLORS[color]),
                None,
            )
        } else {
            let n = rng.gen_range(0..3);
            let title = if rng.gen_bool(0.5) {
                format!("{} {} {modifier} {}", BRANDS[brand], COLORS[color], cats[category].1[n])
            } else {
                format!("{} {} {}", BRANDS[brand], COLORS[color], cats[category].1[n])
            };
            (title, Some(n))
        };
        let mut attributes = BTreeMap::new();
        attributes.insert("brand".to_string(), BRANDS[brand].to_string());
        attributes.insert("color".to_string(), COLORS[color].to_string());
        attributes.insert("gender".to_string(), GENDERS[gender].to_string());
        attributes.insert(
            "rating".to_string(),
            format!("{:.1}", 1.0 + 4.0 * rng.gen::<f64>()),
        );
        products.push(Product {
            id: format!("p{i:06}"),
            title,
            product_type: cats[category].0.clone(),
            attributes,
            description: None,
        });
        metas.push(Meta {
            category,
            noun,
            color,
            brand,
        });
    }

    // Members of each (category, noun) bucket, genuine products only.
    let mut by_cat: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_categories];
    for (i, m) in metas.iter().enumerate() {
        if m.noun.is_some() {
            by_cat[m.category].push(i);
        }
    }

    let mut engagement = EngagementTable::new();
    let mut golden = GoldenSet::default();
    let mut query_categories = BTreeMap::new();
    let mut attempts = 0usize;
    while golden.len() < cfg.n_queries && attempts < cfg.n_queries * 50 {
        attempts += 1;
        let category = rng.gen_range(0..cfg.n_categories);
        let noun = rng.gen_range(0..3);
        let color = rng.gen_bool(0.5).then(|| rng.gen_range(0..COLORS.len()));
        let brand = rng.gen_bool(0.2).then(|| rng.gen_range(0..BRANDS.len()));
        let mut text = String::new();
        if let Some(b) = brand {
            text.push_str(BRANDS[b]);
            text.push(' ');
        }
        if let Some(c) = color {
            text.push_str(COLORS[c]);
            text.push(' ');
        }
        text.push_str(&cats[category].1[noun]);
        let query = normalize_query(&text);
        if golden.entries.contains_key(&query) {
            continue;
        }

        // Relevant products: same category and matching tokens; constraints
        // are relaxed brand first, then color, then noun until non-empty.
        let members = &by_cat[category];
        let matches = |use_noun: bool, use_color: bool, use_brand: bool| -> Vec<usize> {
            members
                .iter()
                .copied()
                .filter(|&i| {
                    let m = &metas[i];
                    (!use_noun || m.noun == Some(noun))
                        && (!use_color || color.map_or(true, |c| m.color == c))
                        && (!use_brand || brand.map_or(true, |b| m.brand == b))
                })
                .collect()
        };
        let relevant = [
            (true, true, true),
            (true, true, false),
            (true, false, false),
            (false, false, false),
        ]
        .iter()
        .map(|&(n, c, b)| matches(n, c, b))
        .find(|v| !v.is_empty())
        .unwrap_or_default();
        if relevant.is_empty() {
            continue;
        }

        // Engagement: a slice of relevant products receives orders/clicks,
        // other same-category products are shown and occasionally clicked.
        let rank = golden.len() as f64;
        let traffic = (4000.0 / (1.0 + rank).powf(0.8)).max(20.0);
        let mut shown_relevant = relevant.clone();
        shown_relevant.shuffle(&mut rng);
        shown_relevant.truncate(8);
        for (j, &i) in shown_relevant.iter().enumerate() {
            let impressions = (traffic * rng.gen_range(0.02..0.08)).round() as u64 + 5;
            let clicks = ((impressions as f64) * rng.gen_range(0.05..0.3)).round() as u64;
            let orders = if j == 0 {
                1 + clicks / 4
            } else if rng.gen_bool(0.5) {
                ((clicks as f64) * rng.gen_range(0.0..0.4)).round() as u64
            } else {
                0
            };
            engagement.add(&query, &products[i].id, Counts::new(impressions, clicks.max(orders), orders));
        }
        let others: Vec<usize> = members
            .iter()
            .copied()
            .filter(|i| !relevant.contains(i))
            .collect();
        for &i in others.choose_multiple(&mut rng, 4) {
            let impressions = (traffic * rng.gen_range(0.01..0.04)).round() as u64 + 3;
            let clicks = if rng.gen_bool(0.3) { 1 } else { 0 };
            engagement.add(&query, &products[i].id, Counts::new(impressions, clicks, 0));
        }

        golden.entries.insert(
            query.clone(),
            relevant.iter().map(|&i| products[i].id.clone()).collect(),
        );
        query_categories.insert(query, cats[category].0.clone());
    }

    let (catalog, rejected) = Catalog::from_products(products);
    debug_assert_eq!(rejected, 0);
    Ok(SyntheticCorpus {
        catalog,
        engagement,
        golden,
        query_categories,
    })
}
