//! Article/user data model, MIND-format ingestion, and seeded synthetic
//! corpora with planted aspect structure.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seed_rng, Rng};

pub const SENTIMENT_LABELS: [&str; 5] = [
    "VeryNegative",
    "Negative",
    "Neutral",
    "Positive",
    "VeryPositive",
];
pub const LEANING_LABELS: [&str; 5] = ["left", "center", "right", "neutral", "nonpolitical"];
pub const FRAME_LABELS: [&str; 6] = [
    "attribution_of_responsibility",
    "conflict",
    "economic_consequences",
    "human_interest",
    "morality",
    "other",
];

pub const FALLBACK_SENTIMENT: &str = "Neutral";
pub const FALLBACK_LEANING: &str = "nonpolitical";
pub const FALLBACK_FRAME: &str = "other";

/// One aspect of article perspective: a name plus its finite label set.
/// The content aspect is unlabeled (empty label set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectDef {
    pub name: String,
    pub labels: Vec<String>,
}

/// Ordered list of the K aspects. The order is fixed at construction and
/// defines the aspect index used by every downstream module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectSchema {
    pub aspects: Vec<AspectDef>,
}

impl AspectSchema {
    /// The default five-aspect news schema: content, sentiment, category,
    /// leaning, frame. Category labels vary per corpus and are supplied by
    /// the caller.
    pub fn news(category_labels: Vec<String>) -> Self {
        let def = |name: &str, labels: &[&str]| AspectDef {
            name: name.to_string(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        };
        AspectSchema {
            aspects: vec![
                AspectDef {
                    name: "content".to_string(),
                    labels: Vec::new(),
                },
                def("sentiment", &SENTIMENT_LABELS),
                AspectDef {
                    name: "category".to_string(),
                    labels: category_labels,
                },
                def("leaning", &LEANING_LABELS),
                def("frame", &FRAME_LABELS),
            ],
        }
    }

    pub fn k(&self) -> usize {
        self.aspects.len()
    }

    pub fn aspect_index(&self, name: &str) -> Option<usize> {
        self.aspects.iter().position(|a| a.name == name)
    }

    pub fn labels(&self, aspect: usize) -> &[String] {
        &self.aspects[aspect].labels
    }

    /// Indices of the labeled (non-content) aspects.
    pub fn labeled_aspects(&self) -> impl Iterator<Item = usize> + '_ {
        self.aspects
            .iter()
            .enumerate()
            .filter(|(_, a)| !a.labels.is_empty())
            .map(|(i, _)| i)
    }

    pub fn contains_label(&self, aspect: usize, label: &str) -> bool {
        self.aspects[aspect].labels.iter().any(|l| l == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub category: String,
    pub subcategory: String,
    pub sentiment: Option<String>,
    pub leaning: Option<String>,
    pub frame: Option<String>,
}

impl Article {
    /// Label of this article under the named aspect; `None` for the
    /// unlabeled content aspect or an unset augmentation label.
    pub fn aspect_label(&self, aspect_name: &str) -> Option<&str> {
        match aspect_name {
            "sentiment" => self.sentiment.as_deref(),
            "category" => Some(self.category.as_str()),
            "leaning" => self.leaning.as_deref(),
            "frame" => self.frame.as_deref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub article_id: String,
    pub clicked: bool,
}

/// One evaluation sample: a user's chronological reading history plus the
/// logged impression list of that behaviors row, when present. Each
/// behaviors row becomes its own sample (`sample_id`) even when the user id
/// repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub sample_id: String,
    pub user_id: String,
    pub history: Vec<String>,
    pub impressions: Option<Vec<Impression>>,
}

/// Articles in stable order with O(1) id lookup. Ids are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct ArticleTable {
    articles: Vec<Article>,
    index: HashMap<String, usize>,
}

impl ArticleTable {
    pub fn new() -> Self {
        ArticleTable {
            articles: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, article: Article) -> Result<()> {
        if self.index.contains_key(&article.id) {
            return Err(Error::Schema(format!("duplicate article id {}", article.id)));
        }
        self.index.insert(article.id.clone(), self.articles.len());
        self.articles.push(article);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Article> {
        self.index.get(id).map(|&i| &self.articles[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn by_index(&self, i: usize) -> &Article {
        &self.articles[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Article> {
        self.articles.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.articles.iter().map(|a| a.id.as_str())
    }

    /// Sorted unique subcategory labels across the table.
    pub fn subcategory_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.articles.iter().map(|a| a.subcategory.clone()).collect();
        labels.sort();
        labels.dedup();
        labels
    }

    /// Sorted unique category labels across the table.
    pub fn category_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.articles.iter().map(|a| a.category.clone()).collect();
        labels.sort();
        labels.dedup();
        labels
    }
}

impl Default for ArticleTable {
    fn default() -> Self {
        Self::new()
    }
}

impl Serialize for ArticleTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.articles.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ArticleTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let articles = Vec::<Article>::deserialize(d)?;
        let mut table = ArticleTable::new();
        for a in articles {
            table
                .push(a)
                .map_err(|e| serde::de::Error::custom(e.to_string()))?;
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub aspect_schema: AspectSchema,
    pub articles: ArticleTable,
    pub users: Vec<UserHistory>,
}

impl Corpus {
    /// Check the cross-module invariants: ids resolve, labels are drawn from
    /// the schema's sets, titles are non-empty, histories are non-empty.
    pub fn validate(&self) -> Result<()> {
        for article in self.articles.iter() {
            if article.title.is_empty() {
                return Err(Error::Schema(format!("article {} has empty title", article.id)));
            }
            for k in self.aspect_schema.labeled_aspects() {
                let name = self.aspect_schema.aspects[k].name.clone();
                if let Some(label) = article.aspect_label(&name) {
                    if !self.aspect_schema.contains_label(k, label) {
                        return Err(Error::Schema(format!(
                            "article {} has label {:?} outside the declared {} set",
                            article.id, label, name
                        )));
                    }
                }
            }
        }
        for user in &self.users {
            if user.history.is_empty() {
                return Err(Error::Schema(format!(
                    "sample {} has an empty history",
                    user.sample_id
                )));
            }
            for id in &user.history {
                if self.articles.get(id).is_none() {
                    return Err(Error::Schema(format!(
                        "sample {} references unknown article {}",
                        user.sample_id, id
                    )));
                }
            }
            if let Some(imps) = &user.impressions {
                for imp in imps {
                    if self.articles.get(&imp.article_id).is_none() {
                        return Err(Error::Schema(format!(
                            "sample {} impression references unknown article {}",
                            user.sample_id, imp.article_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_json(path: &Path) -> Result<Corpus> {
        let json =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let corpus: Corpus = serde_json::from_str(&json)?;
        corpus.validate()?;
        Ok(corpus)
    }
}

/// A non-fatal per-record problem found during ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Default)]
pub struct NewsIngest {
    pub table: ArticleTable,
    pub record_errors: Vec<RecordError>,
}

/// Parse a MIND `news.tsv`: tab-separated rows of at least
/// (id, category, subcategory, title, abstract). Extra columns (url,
/// entities) are ignored. Rows with too few columns or an empty title are
/// recorded as record-level errors and skipped; a duplicate id is fatal.
pub fn load_mind_news(path: &Path) -> Result<NewsIngest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = NewsIngest::default();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 5 {
            out.record_errors.push(RecordError {
                line: lineno,
                msg: format!("expected >= 5 tab-separated columns, got {}", cols.len()),
            });
            continue;
        }
        let (id, category, subcategory, title, abstract_text) =
            (cols[0], cols[1], cols[2], cols[3], cols[4]);
        if title.is_empty() {
            out.record_errors.push(RecordError {
                line: lineno,
                msg: format!("article {id} has an empty title"),
            });
            continue;
        }
        if out.table.get(id).is_some() {
            return Err(Error::DuplicateArticleId {
                id: id.to_string(),
                line: lineno,
            });
        }
        out.table
            .push(Article {
                id: id.to_string(),
                title: title.to_string(),
                abstract_text: abstract_text.to_string(),
                category: category.to_string(),
                subcategory: subcategory.to_string(),
                sentiment: None,
                leaning: None,
                frame: None,
            })
            .expect("duplicate checked above");
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct BehaviorsIngest {
    pub users: Vec<UserHistory>,
    /// History ids that did not resolve against the article table.
    pub dropped_history_ids: usize,
    /// Rows excluded because their history was empty after resolution.
    pub empty_history_rows: usize,
    pub record_errors: Vec<RecordError>,
}

/// Parse a MIND `behaviors.tsv`: tab-separated rows of
/// (impression id, user id, time, space-separated history ids,
/// space-separated `id-click` impression tokens). Each row becomes one
/// evaluation sample; repeated users are not merged.
pub fn load_mind_behaviors(path: &Path, articles: &ArticleTable) -> Result<BehaviorsIngest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BehaviorsIngest::default();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 5 {
            out.record_errors.push(RecordError {
                line: lineno,
                msg: format!("expected 5 tab-separated columns, got {}", cols.len()),
            });
            continue;
        }
        let (sample_id, user_id, _time, history_field, impression_field) =
            (cols[0], cols[1], cols[2], cols[3], cols[4]);

        let mut history = Vec::new();
        for id in history_field.split_whitespace() {
            if articles.get(id).is_some() {
                history.push(id.to_string());
            } else {
                out.dropped_history_ids += 1;
                log::warn!("behaviors line {lineno}: dropping unknown history id {id}");
            }
        }

        let mut impressions = Vec::new();
        let mut row_ok = true;
        for token in impression_field.split_whitespace() {
            let Some((id, flag)) = token.rsplit_once('-') else {
                out.record_errors.push(RecordError {
                    line: lineno,
                    msg: format!("impression token {token:?} has no click flag"),
                });
                row_ok = false;
                break;
            };
            let clicked = match flag {
                "1" => true,
                "0" => false,
                other => {
                    out.record_errors.push(RecordError {
                        line: lineno,
                        msg: format!("unparseable click flag {other:?} in token {token:?}"),
                    });
                    row_ok = false;
                    break;
                }
            };
            impressions.push(Impression {
                article_id: id.to_string(),
                clicked,
            });
        }
        if !row_ok {
            continue;
        }

        if history.is_empty() {
            out.empty_history_rows += 1;
            continue;
        }
        out.users.push(UserHistory {
            sample_id: sample_id.to_string(),
            user_id: user_id.to_string(),
            history,
            impressions: if impressions.is_empty() {
                None
            } else {
                Some(impressions)
            },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub total_articles: usize,
    pub labeled: usize,
    pub fallbacks: usize,
}

impl CoverageReport {
    pub fn coverage(&self) -> f64 {
        if self.total_articles == 0 {
            return 1.0;
        }
        self.labeled as f64 / self.total_articles as f64
    }
}

/// Attach sentiment/leaning/frame labels from a tab-separated file of
/// `article_id \t sentiment \t leaning \t frame`. Articles without a label
/// row get the schema fallback triple; a label value outside the declared
/// set is fatal.
pub fn attach_aspect_labels(
    articles: &mut ArticleTable,
    path: &Path,
    schema: &AspectSchema,
) -> Result<CoverageReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut labels: HashMap<String, (String, String, String)> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno,
                msg: format!("expected 4 columns, got {}", cols.len()),
            });
        }
        for (aspect_name, value) in [("sentiment", cols[1]), ("leaning", cols[2]), ("frame", cols[3])]
        {
            let k = schema
                .aspect_index(aspect_name)
                .ok_or_else(|| Error::Schema(format!("schema lacks aspect {aspect_name}")))?;
            if !schema.contains_label(k, value) {
                return Err(Error::Schema(format!(
                    "label value {value:?} is not in the declared {aspect_name} set"
                )));
            }
        }
        labels.insert(
            cols[0].to_string(),
            (cols[1].to_string(), cols[2].to_string(), cols[3].to_string()),
        );
    }

    let mut report = CoverageReport {
        total_articles: articles.len(),
        labeled: 0,
        fallbacks: 0,
    };
    let ids: Vec<String> = articles.ids().map(str::to_string).collect();
    for id in ids {
        let idx = articles.position(&id).expect("id from table");
        let article = &mut articles.articles[idx];
        match labels.get(&id) {
            Some((s, l, f)) => {
                article.sentiment = Some(s.clone());
                article.leaning = Some(l.clone());
                article.frame = Some(f.clone());
                report.labeled += 1;
            }
            None => {
                article.sentiment = Some(FALLBACK_SENTIMENT.to_string());
                article.leaning = Some(FALLBACK_LEANING.to_string());
                article.frame = Some(FALLBACK_FRAME.to_string());
                report.fallbacks += 1;
                log::warn!("article {id} has no label row; assigned fallback labels");
            }
        }
    }
    Ok(report)
}

/// Synthetic corpus shape: label priors per aspect plus per-user preference
/// sharpness. `concentration[k]` controls aspect `k` of the schema
/// (content entry ignored): 0 = uniform preferences, infinity = one-hot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub articles: usize,
    pub users: usize,
    pub history_len: (usize, usize),
    pub categories: Vec<String>,
    pub category_prior: Vec<f64>,
    pub subcategories_per_category: usize,
    pub sentiment_prior: Vec<f64>,
    pub leaning_prior: Vec<f64>,
    pub frame_prior: Vec<f64>,
    pub concentration: Vec<f64>,
    /// Number of logged impressions per user (0 disables impressions).
    pub impressions_per_user: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let categories: Vec<String> = ["news", "sports", "finance", "lifestyle", "entertainment"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let n_cat = categories.len();
        SynthConfig {
            articles: 100,
            users: 20,
            history_len: (10, 20),
            categories,
            category_prior: vec![1.0; n_cat],
            subcategories_per_category: 3,
            sentiment_prior: vec![1.0; SENTIMENT_LABELS.len()],
            leaning_prior: vec![1.0; LEANING_LABELS.len()],
            frame_prior: vec![1.0; FRAME_LABELS.len()],
            concentration: vec![0.0, 2.0, 4.0, 2.0, 2.0],
            impressions_per_user: 0,
        }
    }
}

fn sample_categorical(prior: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = prior.iter().sum();
    let mut dart = rng.gen::<f64>() * total;
    for (i, &p) in prior.iter().enumerate() {
        dart -= p;
        if dart <= 0.0 {
            return i;
        }
    }
    prior.len() - 1
}

/// Preference weights over `n_labels` for a given sharpness.
fn sample_preferences(n_labels: usize, concentration: f64, rng: &mut Rng) -> Vec<f64> {
    if n_labels == 1 {
        return vec![1.0];
    }
    if concentration == 0.0 {
        return vec![1.0 / n_labels as f64; n_labels];
    }
    if concentration.is_infinite() {
        let hot = rng.gen_range(0..n_labels);
        let mut w = vec![0.0; n_labels];
        w[hot] = 1.0;
        return w;
    }
    // Dirichlet(1/concentration): sharper preferences as concentration grows.
    let alpha = 1.0 / concentration;
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut draws: Vec<f64> = (0..n_labels).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let total: f64 = draws.iter().sum();
    for d in draws.iter_mut() {
        *d /= total;
    }
    draws
}

/// Weighted sampling without replacement; falls back to uniform over the
/// remaining pool once all remaining weights are zero.
fn weighted_sample_without_replacement(
    weights: &[f64],
    count: usize,
    rng: &mut Rng,
) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count && !remaining.is_empty() {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let choice = if total > 0.0 {
            let mut dart = rng.gen::<f64>() * total;
            let mut chosen = remaining.len() - 1;
            for (pos, &i) in remaining.iter().enumerate() {
                dart -= weights[i];
                if dart <= 0.0 {
                    chosen = pos;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..remaining.len())
        };
        picked.push(remaining.swap_remove(choice));
    }
    picked
}

/// Generate a corpus with planted per-aspect preference structure. Articles
/// draw labels from the configured priors; each user draws per-aspect
/// preference weights and then samples history items proportionally to the
/// product of those weights over the article's labels. Pure function of
/// (cfg, seed).
pub fn generate_synthetic_corpus(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    if cfg.articles == 0 {
        return Err(Error::Config("synthetic corpus needs at least one article".into()));
    }
    if cfg.categories.is_empty() || cfg.subcategories_per_category == 0 {
        return Err(Error::Config("category aspect has zero label options".into()));
    }
    for (name, prior, expect) in [
        ("category", &cfg.category_prior, cfg.categories.len()),
        ("sentiment", &cfg.sentiment_prior, SENTIMENT_LABELS.len()),
        ("leaning", &cfg.leaning_prior, LEANING_LABELS.len()),
        ("frame", &cfg.frame_prior, FRAME_LABELS.len()),
    ] {
        if prior.len() != expect {
            return Err(Error::Config(format!(
                "{name} prior has {} entries, label set has {expect}",
                prior.len()
            )));
        }
        if prior.iter().any(|&p| p < 0.0) || prior.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("{name} prior must be non-negative with positive mass")));
        }
    }
    if cfg.history_len.0 == 0 || cfg.history_len.0 > cfg.history_len.1 {
        return Err(Error::Config(format!(
            "invalid history length range {:?}",
            cfg.history_len
        )));
    }

    let schema = AspectSchema::news(cfg.categories.clone());
    if cfg.concentration.len() != schema.k() {
        return Err(Error::Config(format!(
            "concentration has {} entries, schema has {} aspects",
            cfg.concentration.len(),
            schema.k()
        )));
    }

    let mut rng = seed_rng(seed);

    let mut articles = ArticleTable::new();
    for i in 0..cfg.articles {
        let cat = sample_categorical(&cfg.category_prior, &mut rng);
        let subcat = rng.gen_range(0..cfg.subcategories_per_category);
        let sentiment = sample_categorical(&cfg.sentiment_prior, &mut rng);
        let leaning = sample_categorical(&cfg.leaning_prior, &mut rng);
        let frame = sample_categorical(&cfg.frame_prior, &mut rng);
        let category = cfg.categories[cat].clone();
        articles.push(Article {
            id: format!("A{i:05}"),
            title: format!("synthetic article {i}"),
            abstract_text: format!("abstract for synthetic article {i}"),
            subcategory: format!("{category}_sub{subcat}"),
            category,
            sentiment: Some(SENTIMENT_LABELS[sentiment].to_string()),
            leaning: Some(LEANING_LABELS[leaning].to_string()),
            frame: Some(FRAME_LABELS[frame].to_string()),
        })?;
    }

    let labeled: Vec<usize> = schema.labeled_aspects().collect();
    // Per-article label indices per labeled aspect, for fast scoring.
    let label_idx: Vec<Vec<usize>> = labeled
        .iter()
        .map(|&k| {
            let name = &schema.aspects[k].name;
            articles
                .iter()
                .map(|a| {
                    let label = a.aspect_label(name).expect("synthetic labels set");
                    schema.labels(k).iter().position(|l| l == label).expect("label in set")
                })
                .collect()
        })
        .collect();

    let mut users = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let prefs: Vec<Vec<f64>> = labeled
            .iter()
            .map(|&k| sample_preferences(schema.labels(k).len(), cfg.concentration[k], &mut rng))
            .collect();
        let weights: Vec<f64> = (0..cfg.articles)
            .map(|a| {
                labeled
                    .iter()
                    .enumerate()
                    .map(|(ki, _)| prefs[ki][label_idx[ki][a]])
                    .product()
            })
            .collect();
        let want = rng.gen_range(cfg.history_len.0..=cfg.history_len.1).min(cfg.articles);
        let history: Vec<String> = weighted_sample_without_replacement(&weights, want, &mut rng)
            .into_iter()
            .map(|i| articles.by_index(i).id.clone())
            .collect();

        let impressions = if cfg.impressions_per_user > 0 {
            let count = cfg.impressions_per_user.min(cfg.articles);
            let uniform = vec![1.0; cfg.articles];
            let picked = weighted_sample_without_replacement(&uniform, count, &mut rng);
            Some(
                picked
                    .into_iter()
                    .map(|i| Impression {
                        article_id: articles.by_index(i).id.clone(),
                        clicked: rng.gen::<f64>() < 0.25,
                    })
                    .collect(),
            )
        } else {
            None
        };

        let user_id = format!("U{u:04}");
        users.push(UserHistory {
            sample_id: user_id.clone(),
            user_id,
            history,
            impressions,
        });
    }

    let corpus = Corpus {
        aspect_schema: schema,
        articles,
        users,
    };
    corpus.validate()?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn news_fixture_parses_identity() {
        let f = write_temp(
            "N1\tnews\tnews_world\tTitle one\tAbstract one\turl\te1\te2\n\
             N2\tsports\tsports_nfl\tTitle two\t\n\
             N3\tfinance\tfinance_markets\tTitle three\tAbstract three\n",
        );
        let ingest = load_mind_news(f.path()).unwrap();
        assert_eq!(ingest.table.len(), 3);
        assert!(ingest.record_errors.is_empty());
        assert_eq!(ingest.table.get("N1").unwrap().title, "Title one");
        // empty abstract column becomes the empty string
        assert_eq!(ingest.table.get("N2").unwrap().abstract_text, "");
        assert_eq!(ingest.table.get("N3").unwrap().category, "finance");
    }

    #[test]
    fn news_duplicate_id_is_fatal_with_line() {
        let f = write_temp(
            "N1\tnews\tnews_world\tTitle one\tA\n\
             N2\tsports\tsports_nfl\tTitle two\tB\n\
             N1\tnews\tnews_world\tTitle dup\tC\n",
        );
        match load_mind_news(f.path()) {
            Err(Error::DuplicateArticleId { id, line }) => {
                assert_eq!(id, "N1");
                assert_eq!(line, 3);
            }
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn news_short_row_is_record_level() {
        let f = write_temp("N1\tnews\tnews_world\tTitle one\tA\nN2\tsports\tshort\n");
        let ingest = load_mind_news(f.path()).unwrap();
        assert_eq!(ingest.table.len(), 1);
        assert_eq!(ingest.record_errors.len(), 1);
        assert_eq!(ingest.record_errors[0].line, 2);
    }

    fn tiny_table() -> ArticleTable {
        let mut t = ArticleTable::new();
        for id in ["N1", "N2", "N3", "N4"] {
            t.push(Article {
                id: id.to_string(),
                title: format!("title {id}"),
                abstract_text: String::new(),
                category: "news".to_string(),
                subcategory: "news_world".to_string(),
                sentiment: None,
                leaning: None,
                frame: None,
            })
            .unwrap();
        }
        t
    }

    #[test]
    fn behaviors_parse_history_and_impressions() {
        let t = tiny_table();
        let f = write_temp("I1\tU1\t11/11/2019 9:05:58 AM\tN1 N2\tN3-1 N4-0\n");
        let ingest = load_mind_behaviors(f.path(), &t).unwrap();
        assert_eq!(ingest.users.len(), 1);
        let u = &ingest.users[0];
        assert_eq!(u.sample_id, "I1");
        assert_eq!(u.history, vec!["N1", "N2"]);
        let imps = u.impressions.as_ref().unwrap();
        assert_eq!(imps.len(), 2);
        assert!(imps[0].clicked);
        assert!(!imps[1].clicked);
    }

    #[test]
    fn behaviors_empty_history_is_excluded_but_counted() {
        let t = tiny_table();
        let f = write_temp("I1\tU1\ttime\t\tN3-1\nI2\tU2\ttime\tN1\tN2-0\n");
        let ingest = load_mind_behaviors(f.path(), &t).unwrap();
        assert_eq!(ingest.users.len(), 1);
        assert_eq!(ingest.empty_history_rows, 1);
    }

    #[test]
    fn behaviors_unknown_history_id_dropped_with_counter() {
        let t = tiny_table();
        let f = write_temp("I1\tU1\ttime\tN1 N99 N2\tN3-1\n");
        let ingest = load_mind_behaviors(f.path(), &t).unwrap();
        assert_eq!(ingest.users[0].history, vec!["N1", "N2"]);
        assert_eq!(ingest.dropped_history_ids, 1);
    }

    #[test]
    fn behaviors_bad_click_flag_is_record_level() {
        let t = tiny_table();
        let f = write_temp("I1\tU1\ttime\tN1\tN3-x\nI2\tU2\ttime\tN2\tN3-1\n");
        let ingest = load_mind_behaviors(f.path(), &t).unwrap();
        assert_eq!(ingest.users.len(), 1);
        assert_eq!(ingest.record_errors.len(), 1);
        assert_eq!(ingest.record_errors[0].line, 1);
    }

    #[test]
    fn labels_full_coverage() {
        let mut t = tiny_table();
        let schema = AspectSchema::news(vec!["news".to_string()]);
        let f = write_temp(
            "N1\tNeutral\tleft\tconflict\nN2\tPositive\tcenter\tmorality\n\
             N3\tNegative\tright\tother\nN4\tVeryPositive\tneutral\thuman_interest\n",
        );
        let report = attach_aspect_labels(&mut t, f.path(), &schema).unwrap();
        assert_eq!(report.labeled, 4);
        assert_eq!(report.fallbacks, 0);
        assert_eq!(report.coverage(), 1.0);
        assert_eq!(t.get("N1").unwrap().sentiment.as_deref(), Some("Neutral"));
    }

    #[test]
    fn labels_missing_article_gets_fallback_triple() {
        let mut t = ArticleTable::new();
        for id in ["N1", "N2", "N3"] {
            t.push(Article {
                id: id.to_string(),
                title: "t".into(),
                abstract_text: String::new(),
                category: "news".into(),
                subcategory: "news_world".into(),
                sentiment: None,
                leaning: None,
                frame: None,
            })
            .unwrap();
        }
        let schema = AspectSchema::news(vec!["news".to_string()]);
        let f = write_temp("N1\tNeutral\tleft\tconflict\nN2\tPositive\tcenter\tmorality\n");
        let report = attach_aspect_labels(&mut t, f.path(), &schema).unwrap();
        assert_eq!(report.labeled, 2);
        assert_eq!(report.fallbacks, 1);
        let n3 = t.get("N3").unwrap();
        assert_eq!(n3.sentiment.as_deref(), Some(FALLBACK_SENTIMENT));
        assert_eq!(n3.leaning.as_deref(), Some(FALLBACK_LEANING));
        assert_eq!(n3.frame.as_deref(), Some(FALLBACK_FRAME));
    }

    #[test]
    fn labels_outside_declared_set_are_fatal() {
        let mut t = tiny_table();
        let schema = AspectSchema::news(vec!["news".to_string()]);
        let f = write_temp("N1\tEcstatic\tleft\tconflict\n");
        let err = attach_aspect_labels(&mut t, f.path(), &schema).unwrap_err();
        assert!(err.to_string().contains("Ecstatic"), "error names the value: {err}");
    }

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate_synthetic_corpus(&cfg, 7).unwrap();
        let b = generate_synthetic_corpus(&cfg, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = generate_synthetic_corpus(&cfg, 8).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn one_hot_category_preference_pins_history_category() {
        let mut cfg = SynthConfig {
            articles: 200,
            users: 10,
            history_len: (5, 10),
            ..SynthConfig::default()
        };
        let cat_aspect = 2;
        cfg.concentration = vec![0.0; 5];
        cfg.concentration[cat_aspect] = f64::INFINITY;
        let corpus = generate_synthetic_corpus(&cfg, 11).unwrap();
        for user in &corpus.users {
            let cats: Vec<&str> = user
                .history
                .iter()
                .map(|id| corpus.articles.get(id).unwrap().category.as_str())
                .collect();
            assert!(
                cats.windows(2).all(|w| w[0] == w[1]),
                "history mixes categories: {cats:?}"
            );
        }
    }

    #[test]
    fn uniform_concentration_tracks_corpus_prior() {
        // Monte-Carlo oracle: with uniform preferences, pooled history
        // category frequencies stay within total variation 0.05 of the
        // configured prior over 10 seeds.
        let mut cfg = SynthConfig {
            articles: 100,
            users: 20,
            history_len: (10, 20),
            ..SynthConfig::default()
        };
        cfg.concentration = vec![0.0; 5];
        cfg.category_prior = vec![4.0, 3.0, 1.0, 1.0, 1.0];
        let prior_total: f64 = cfg.category_prior.iter().sum();

        let mut counts = vec![0usize; cfg.categories.len()];
        let mut total = 0usize;
        for seed in 0..10 {
            let corpus = generate_synthetic_corpus(&cfg, seed).unwrap();
            for user in &corpus.users {
                for id in &user.history {
                    let cat = &corpus.articles.get(id).unwrap().category;
                    let idx = cfg.categories.iter().position(|c| c == cat).unwrap();
                    counts[idx] += 1;
                    total += 1;
                }
            }
        }
        let tv: f64 = counts
            .iter()
            .zip(&cfg.category_prior)
            .map(|(&c, &p)| (c as f64 / total as f64 - p / prior_total).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.05, "total variation {tv} exceeds 0.05");
    }

    #[test]
    fn corpus_json_round_trip() {
        let cfg = SynthConfig {
            articles: 30,
            users: 5,
            history_len: (3, 6),
            impressions_per_user: 8,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic_corpus(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.json");
        corpus.write_json(&path).unwrap();
        let back = Corpus::read_json(&path).unwrap();
        assert_eq!(corpus, back);
    }

    #[test]
    fn zero_articles_is_fatal() {
        let cfg = SynthConfig {
            articles: 0,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic_corpus(&cfg, 1).is_err());
    }
}
