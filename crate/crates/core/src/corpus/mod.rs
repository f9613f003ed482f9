//! Corpus loading: item/user interning, bundle affiliations, the user–item
//! interaction graph, and multimodal feature tables.
//!
//! On-disk layout of a corpus directory:
//!
//! | file | format |
//! |------|--------|
//! | `items.tsv` | `item_token<TAB>row` per line, rows dense `0..N` |
//! | `interactions.tsv` | `user_token<TAB>item_token` per line |
//! | `affiliations.tsv` | `bundle_token<TAB>item_token` per line |
//! | `text.bfv`, `media.bfv` | [`features`] binary tables |

pub mod features;
pub mod partial;

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use features::{FeatureRows, FeatureTable};
pub use partial::{corrupt_partial, sample_partial, seed_count, split_indices, Corruption, PartialBundleView, Split};

pub const ITEMS_FILE: &str = "items.tsv";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const AFFILIATIONS_FILE: &str = "affiliations.tsv";
pub const TEXT_FILE: &str = "text.bfv";
pub const MEDIA_FILE: &str = "media.bfv";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Integrity {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("need at least {needed} bundles, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("{0}")]
    Contract(String),
}

/// Bidirectional token ↔ dense index table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Interner {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub token: String,
    pub items: Vec<usize>,
}

/// Interned items, users and bundles.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    pub items: Interner,
    pub users: Interner,
    pub bundles: Vec<Bundle>,
}

impl Catalog {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_affiliations(&self) -> usize {
        self.bundles.iter().map(|b| b.items.len()).sum()
    }

    pub fn bundle_index(&self, token: &str) -> Option<usize> {
        self.bundles.iter().position(|b| b.token == token)
    }

    /// `true` for every item that belongs to at least one of `bundles`.
    pub fn warm_items(&self, bundles: &[usize]) -> Vec<bool> {
        let mut warm = vec![false; self.n_items()];
        for &b in bundles {
            for &i in &self.bundles[b].items {
                warm[i] = true;
            }
        }
        warm
    }
}

/// User–item bipartite graph with degree counts.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionGraph {
    pub n_users: usize,
    pub n_items: usize,
    pub edges: Vec<(usize, usize)>,
    pub user_degree: Vec<usize>,
    pub item_degree: Vec<usize>,
    user_items: Vec<Vec<usize>>,
    item_users: Vec<Vec<usize>>,
}

impl InteractionGraph {
    /// Builds the graph; returns the position of the first duplicate edge on failure.
    pub fn new(n_users: usize, n_items: usize, edges: Vec<(usize, usize)>) -> Result<Self, usize> {
        let mut user_items = vec![Vec::new(); n_users];
        let mut item_users = vec![Vec::new(); n_items];
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for (pos, &(u, i)) in edges.iter().enumerate() {
            assert!(u < n_users && i < n_items, "edge ({u}, {i}) out of range");
            if !seen.insert((u, i)) {
                return Err(pos);
            }
            user_items[u].push(i);
            item_users[i].push(u);
        }
        let user_degree = user_items.iter().map(Vec::len).collect();
        let item_degree = item_users.iter().map(Vec::len).collect();
        Ok(Self {
            n_users,
            n_items,
            edges,
            user_degree,
            item_degree,
            user_items,
            item_users,
        })
    }

    pub fn items_of(&self, user: usize) -> &[usize] {
        &self.user_items[user]
    }

    pub fn users_of(&self, item: usize) -> &[usize] {
        &self.item_users[item]
    }

    pub fn has_feedback(&self, item: usize) -> bool {
        self.item_degree[item] > 0
    }
}

/// Summary counts of a loaded corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub bundles: usize,
    pub bundle_items: usize,
    pub user_items: usize,
}

/// Everything read from a corpus directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub catalog: Catalog,
    pub features: FeatureTable,
    pub interactions: InteractionGraph,
}

/// Explicit paths of the five corpus files.
#[derive(Clone, Debug)]
pub struct CorpusPaths {
    pub interactions: PathBuf,
    pub affiliations: PathBuf,
    pub text: PathBuf,
    pub media: PathBuf,
    pub index: PathBuf,
}

impl CorpusPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            interactions: dir.join(INTERACTIONS_FILE),
            affiliations: dir.join(AFFILIATIONS_FILE),
            text: dir.join(TEXT_FILE),
            media: dir.join(MEDIA_FILE),
            index: dir.join(ITEMS_FILE),
        }
    }
}

impl Corpus {
    pub fn load_dir(dir: &Path) -> Result<Self, CorpusError> {
        Self::load(&CorpusPaths::in_dir(dir))
    }

    pub fn load(paths: &CorpusPaths) -> Result<Self, CorpusError> {
        let items = read_index(&paths.index)?;
        let n_items = items.len();

        let mut users = Interner::new();
        let mut edges = Vec::new();
        let mut edge_lines = Vec::new();
        for_each_pair(&paths.interactions, |line, user, item| {
            let i = items.get(item).ok_or_else(|| integrity(&paths.interactions, line, format!("unknown item token `{item}`")))?;
            edges.push((users.intern(user), i));
            edge_lines.push(line);
            Ok(())
        })?;
        let interactions = InteractionGraph::new(users.len(), n_items, edges).map_err(|pos| {
            integrity(&paths.interactions, edge_lines[pos], "duplicate interaction edge".into())
        })?;

        let mut bundle_ids = Interner::new();
        let mut bundles: Vec<Bundle> = Vec::new();
        let mut first_line = Vec::new();
        for_each_pair(&paths.affiliations, |line, bundle, item| {
            let i = items.get(item).ok_or_else(|| integrity(&paths.affiliations, line, format!("unknown item token `{item}`")))?;
            let b = bundle_ids.intern(bundle);
            if b == bundles.len() {
                bundles.push(Bundle {
                    token: bundle.to_owned(),
                    items: Vec::new(),
                });
                first_line.push(line);
            }
            if bundles[b].items.contains(&i) {
                return Err(integrity(&paths.affiliations, line, format!("item `{item}` repeated in bundle `{bundle}`")));
            }
            bundles[b].items.push(i);
            Ok(())
        })?;
        for (b, bundle) in bundles.iter().enumerate() {
            if bundle.items.len() < 2 {
                return Err(integrity(
                    &paths.affiliations,
                    first_line[b],
                    format!("bundle `{}` has fewer than 2 items", bundle.token),
                ));
            }
        }

        let text = read_features(&paths.text, n_items)?;
        let media = read_features(&paths.media, n_items)?;
        if text.dim() != media.dim() {
            return Err(CorpusError::Format {
                path: paths.media.clone(),
                message: format!("dimension {} differs from text dimension {}", media.dim(), text.dim()),
            });
        }

        let corpus = Self {
            catalog: Catalog {
                items,
                users,
                bundles,
            },
            features: FeatureTable { text, media },
            interactions,
        };
        let s = corpus.stats();
        log::info!(
            "loaded corpus: #U={} #I={} #B={} #B-I={} #U-I={}",
            s.users,
            s.items,
            s.bundles,
            s.bundle_items,
            s.user_items
        );
        Ok(corpus)
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            users: self.catalog.users.len(),
            items: self.catalog.n_items(),
            bundles: self.catalog.bundles.len(),
            bundle_items: self.catalog.n_affiliations(),
            user_items: self.interactions.edges.len(),
        }
    }

    /// Writes the five corpus files into `dir` (created if missing).
    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let cat = &self.catalog;
        write_lines(&dir.join(ITEMS_FILE), cat.items.tokens().iter().enumerate().map(|(i, t)| format!("{t}\t{i}")))?;
        write_lines(
            &dir.join(INTERACTIONS_FILE),
            self.interactions
                .edges
                .iter()
                .map(|&(u, i)| format!("{}\t{}", cat.users.token(u), cat.items.token(i))),
        )?;
        write_lines(
            &dir.join(AFFILIATIONS_FILE),
            cat.bundles
                .iter()
                .flat_map(|b| b.items.iter().map(move |&i| format!("{}\t{}", b.token, cat.items.token(i)))),
        )?;
        write_features(&dir.join(TEXT_FILE), &self.features.text)?;
        write_features(&dir.join(MEDIA_FILE), &self.features.media)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.to_owned(),
        source,
    }
}

fn integrity(path: &Path, line: usize, message: String) -> CorpusError {
    CorpusError::Integrity {
        path: path.to_owned(),
        line,
        message,
    }
}

/// Calls `f(line_number, left, right)` for every non-blank `left<TAB>right` line.
fn for_each_pair(path: &Path, mut f: impl FnMut(usize, &str, &str) -> Result<(), CorpusError>) -> Result<(), CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (left, right) = line
            .split_once('\t')
            .ok_or_else(|| integrity(path, n + 1, "expected two tab-separated fields".into()))?;
        f(n + 1, left, right)?;
    }
    Ok(())
}

fn read_index(path: &Path) -> Result<Interner, CorpusError> {
    let mut rows: Vec<(usize, String, usize)> = Vec::new();
    for_each_pair(path, |line, token, row| {
        let row = row
            .trim()
            .parse::<usize>()
            .map_err(|_| integrity(path, line, format!("bad row number `{row}`")))?;
        rows.push((row, token.to_owned(), line));
        Ok(())
    })?;
    rows.sort_by_key(|r| r.0);
    let mut items = Interner::new();
    for (expected, (row, token, line)) in rows.into_iter().enumerate() {
        if row != expected {
            return Err(integrity(path, line, format!("item rows must be dense 0..N, found {row} where {expected} was expected")));
        }
        if items.intern(&token) != row {
            return Err(integrity(path, line, format!("item token `{token}` listed twice")));
        }
    }
    Ok(items)
}

fn read_features(path: &Path, n_items: usize) -> Result<FeatureRows, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let rows = FeatureRows::read_from(BufReader::new(file)).map_err(|message| CorpusError::Format {
        path: path.to_owned(),
        message,
    })?;
    if rows.rows() != n_items {
        return Err(CorpusError::Format {
            path: path.to_owned(),
            message: format!("{} feature rows for {n_items} items", rows.rows()),
        });
    }
    Ok(rows)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_features(path: &Path, rows: &FeatureRows) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    rows.write_to(&mut w).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}
