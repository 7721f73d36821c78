//! Interaction-log ingestion, filtering, leave-one-out splitting, and the
//! on-disk split manifest.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DpgError, Result};

/// Reserved row of every item table used by the Mask augmentation.
pub const MASK_INDEX: usize = 0;
/// Reserved row of every item table standing in for an empty subsequence.
pub const PAD_INDEX: usize = 1;
/// First index assigned to a real item.
pub const FIRST_ITEM_INDEX: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::X, Domain::Y];

    pub fn other(self) -> Domain {
        match self {
            Domain::X => Domain::Y,
            Domain::Y => Domain::X,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Domain::X => "x",
            Domain::Y => "y",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Domain {
    type Err = DpgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Domain::X),
            "y" | "Y" => Ok(Domain::Y),
            other => Err(DpgError::Parse(format!("bad domain tag {other:?}"))),
        }
    }
}

/// Maps the raw domain strings found in a log onto the two domains.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainLabels {
    pub x: String,
    pub y: String,
}

impl Default for DomainLabels {
    fn default() -> Self {
        DomainLabels {
            x: "x".into(),
            y: "y".into(),
        }
    }
}

impl DomainLabels {
    pub fn resolve(&self, label: &str) -> Option<Domain> {
        if label.eq_ignore_ascii_case(&self.x) {
            Some(Domain::X)
        } else if label.eq_ignore_ascii_case(&self.y) {
            Some(Domain::Y)
        } else {
            None
        }
    }

    pub fn label(&self, d: Domain) -> &str {
        match d {
            Domain::X => &self.x,
            Domain::Y => &self.y,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionEvent {
    pub user_id: String,
    pub item_id: String,
    pub domain: Domain,
    pub timestamp: u64,
}

/// An item reference into the vocabulary of its domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token {
    pub item: usize,
    pub domain: Domain,
}

impl Token {
    pub fn new(item: usize, domain: Domain) -> Self {
        Token { item, domain }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.domain, self.item)
    }
}

impl FromStr for Token {
    type Err = DpgError;

    fn from_str(s: &str) -> Result<Self> {
        let (d, i) = s
            .split_once(':')
            .ok_or_else(|| DpgError::Parse(format!("bad token {s:?}")))?;
        let item = i
            .parse()
            .map_err(|_| DpgError::Parse(format!("bad item index in {s:?}")))?;
        Ok(Token::new(item, d.parse()?))
    }
}

/// Time-ordered cross-domain sequence of one user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user_index: usize,
    pub items: Vec<Token>,
}

impl UserSequence {
    pub fn new(user_index: usize, items: Vec<Token>) -> Self {
        UserSequence { user_index, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// A held-out prediction case: the observed prefix and the item that follows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeldOut {
    pub seq: UserSequence,
    pub target: Token,
}

/// Item-id table of one domain. Rows [`MASK_INDEX`] and [`PAD_INDEX`] are
/// reserved and have no item id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_ids(ids: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocab::default();
        for id in ids {
            v.insert(id);
        }
        v
    }

    fn insert(&mut self, id: String) -> usize {
        if let Some(&i) = self.index.get(&id) {
            return i;
        }
        let i = FIRST_ITEM_INDEX + self.ids.len();
        self.index.insert(id.clone(), i);
        self.ids.push(id);
        i
    }

    /// Number of real items.
    pub fn n_items(&self) -> usize {
        self.ids.len()
    }

    /// Rows in the embedding table, including the reserved ones.
    pub fn table_size(&self) -> usize {
        self.ids.len() + FIRST_ITEM_INDEX
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id_of(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(FIRST_ITEM_INDEX)
            .and_then(|i| self.ids.get(i))
            .map(String::as_str)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<UserSequence>,
    pub validation: Vec<HeldOut>,
    pub test: Vec<HeldOut>,
    pub vocab_x: Vocab,
    pub vocab_y: Vocab,
    /// Original user id per user index.
    pub users: Vec<String>,
}

impl DatasetSplit {
    pub fn vocab(&self, d: Domain) -> &Vocab {
        match d {
            Domain::X => &self.vocab_x,
            Domain::Y => &self.vocab_y,
        }
    }

    pub fn table_sizes(&self) -> TableSizes {
        TableSizes {
            x: self.vocab_x.table_size(),
            y: self.vocab_y.table_size(),
        }
    }

    /// The truncated full sequence of every user (train prefix plus both
    /// held-out targets).
    pub fn full_sequences(&self) -> Vec<UserSequence> {
        self.test
            .iter()
            .map(|h| {
                let mut items = h.seq.items.clone();
                items.push(h.target);
                UserSequence::new(h.seq.user_index, items)
            })
            .collect()
    }

    pub fn stats(&self) -> SplitStats {
        let full = self.full_sequences();
        let interactions: usize = full.iter().map(UserSequence::len).sum();
        let count = |d: Domain| {
            full.iter()
                .flat_map(|s| &s.items)
                .filter(|t| t.domain == d)
                .count()
        };
        SplitStats {
            users: full.len(),
            items_x: self.vocab_x.n_items(),
            items_y: self.vocab_y.n_items(),
            interactions_x: count(Domain::X),
            interactions_y: count(Domain::Y),
            avg_length: if full.is_empty() {
                0.0
            } else {
                interactions as f64 / full.len() as f64
            },
        }
    }
}

/// Embedding table sizes (reserved rows included) for both domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSizes {
    pub x: usize,
    pub y: usize,
}

impl TableSizes {
    pub fn get(&self, d: Domain) -> usize {
        match d {
            Domain::X => self.x,
            Domain::Y => self.y,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitStats {
    pub users: usize,
    pub items_x: usize,
    pub items_y: usize,
    pub interactions_x: usize,
    pub interactions_y: usize,
    pub avg_length: f64,
}

impl fmt::Display for SplitStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24}{:>12}", "#Users", self.users)?;
        writeln!(f, "{:<24}{:>12}", "#Items (X)", self.items_x)?;
        writeln!(f, "{:<24}{:>12}", "#Items (Y)", self.items_y)?;
        writeln!(f, "{:<24}{:>12}", "#Interactions (X)", self.interactions_x)?;
        writeln!(f, "{:<24}{:>12}", "#Interactions (Y)", self.interactions_y)?;
        write!(f, "{:<24}{:>12.2}", "Avg. length", self.avg_length)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogFormat {
    Tsv,
    Csv,
}

impl LogFormat {
    fn delimiter(self) -> u8 {
        match self {
            LogFormat::Tsv => b'\t',
            LogFormat::Csv => b',',
        }
    }
}

impl FromStr for LogFormat {
    type Err = DpgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(LogFormat::Tsv),
            "csv" => Ok(LogFormat::Csv),
            other => Err(DpgError::InvalidArgument(format!("unknown log format {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct IngestReport {
    pub events: Vec<InteractionEvent>,
    pub errors: Vec<RowError>,
}

const HEADER: [&str; 4] = ["user_id", "item_id", "domain", "timestamp"];

/// Parses a delimited interaction log. Malformed rows are collected in
/// [`IngestReport::errors`] with their 1-based line numbers; an unknown
/// domain label aborts the whole ingest.
pub fn ingest_log(path: &Path, format: LogFormat, labels: &DomainLabels) -> Result<IngestReport> {
    let file = fs::File::open(path).map_err(|e| DpgError::io(path, e))?;
    let reader = BufReader::new(file);
    let delim = format.delimiter() as char;

    let mut report = IngestReport::default();
    let mut saw_content = false;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DpgError::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
        if !saw_content {
            saw_content = true;
            if fields.len() == 4 && fields.iter().zip(HEADER).all(|(f, h)| f.eq_ignore_ascii_case(h)) {
                continue;
            }
        }
        if fields.len() != 4 {
            report.errors.push(RowError {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
            continue;
        }
        let domain = labels.resolve(fields[2]).ok_or_else(|| DpgError::UnknownDomain {
            line: line_no,
            label: fields[2].to_string(),
        })?;
        let timestamp = match fields[3].parse::<u64>() {
            Ok(t) => t,
            Err(_) => {
                report.errors.push(RowError {
                    line: line_no,
                    message: format!("invalid timestamp {:?}", fields[3]),
                });
                continue;
            }
        };
        if fields[0].is_empty() || fields[1].is_empty() {
            report.errors.push(RowError {
                line: line_no,
                message: "empty user or item id".into(),
            });
            continue;
        }
        report.events.push(InteractionEvent {
            user_id: fields[0].to_string(),
            item_id: fields[1].to_string(),
            domain,
            timestamp,
        });
    }
    if !saw_content {
        return Err(DpgError::EmptyFile { path: path.into() });
    }
    Ok(report)
}

/// Writes events in the log format accepted by [`ingest_log`].
pub fn write_log(path: &Path, events: &[InteractionEvent], format: LogFormat, labels: &DomainLabels) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| DpgError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let d = format.delimiter() as char;
    let io = |e| DpgError::io(path, e);
    writeln!(w, "{}", HEADER.join(&d.to_string())).map_err(io)?;
    for e in events {
        writeln!(
            w,
            "{}{d}{}{d}{}{d}{}",
            e.user_id,
            e.item_id,
            labels.label(e.domain),
            e.timestamp
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterConfig {
    pub min_user_interactions: usize,
    pub min_per_domain: usize,
    pub max_seq_len: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_user_interactions: 10,
            min_per_domain: 3,
            max_seq_len: 15,
        }
    }
}

/// Groups events by user in first-appearance order, each group sorted by
/// timestamp with ties kept in input order.
fn group_by_user(events: &[InteractionEvent]) -> Vec<(String, Vec<&InteractionEvent>)> {
    let mut order: Vec<(String, Vec<&InteractionEvent>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for e in events {
        let i = *slot.entry(e.user_id.as_str()).or_insert_with(|| {
            order.push((e.user_id.clone(), Vec::new()));
            order.len() - 1
        });
        order[i].1.push(e);
    }
    for (_, evs) in &mut order {
        evs.sort_by_key(|e| e.timestamp);
    }
    order
}

fn passes(evs: &[&InteractionEvent], cfg: &FilterConfig) -> bool {
    let nx = evs.iter().filter(|e| e.domain == Domain::X).count();
    let ny = evs.len() - nx;
    evs.len() >= cfg.min_user_interactions && nx >= cfg.min_per_domain && ny >= cfg.min_per_domain
}

/// Events of the users that pass both thresholds, in input order.
pub fn surviving_events(events: &[InteractionEvent], cfg: &FilterConfig) -> Vec<InteractionEvent> {
    let keep: std::collections::HashSet<String> = group_by_user(events)
        .into_iter()
        .filter(|(_, evs)| passes(evs, cfg))
        .map(|(u, _)| u)
        .collect();
    events.iter().filter(|e| keep.contains(&e.user_id)).cloned().collect()
}

/// Applies the user filters, truncates each sequence to its most recent
/// `max_seq_len` events, and performs the leave-one-out split.
pub fn filter_and_split(events: &[InteractionEvent], cfg: &FilterConfig) -> Result<DatasetSplit> {
    if events.is_empty() {
        return Err(DpgError::InvalidArgument("no events to split".into()));
    }
    if cfg.max_seq_len < 3 {
        return Err(DpgError::InvalidArgument(
            "max_seq_len must be at least 3 for a leave-one-out split".into(),
        ));
    }
    let groups = group_by_user(events);
    let n_users = groups.len();
    let enough_total = groups
        .iter()
        .filter(|(_, e)| e.len() >= cfg.min_user_interactions)
        .count();
    let survivors: Vec<_> = groups.into_iter().filter(|(_, evs)| passes(evs, cfg)).collect();
    if survivors.is_empty() {
        let binding = if enough_total == 0 {
            format!(
                "min_user_interactions={} removed all {n_users} users",
                cfg.min_user_interactions
            )
        } else {
            format!(
                "min_per_domain={} removed the {enough_total} users with enough interactions",
                cfg.min_per_domain
            )
        };
        return Err(DpgError::NoSurvivors(binding));
    }

    let truncated: Vec<(String, Vec<&InteractionEvent>)> = survivors
        .into_iter()
        .map(|(u, evs)| {
            let start = evs.len().saturating_sub(cfg.max_seq_len);
            (u, evs[start..].to_vec())
        })
        .collect();

    let ids = |d: Domain| {
        let mut v: Vec<String> = truncated
            .iter()
            .flat_map(|(_, evs)| evs.iter())
            .filter(|e| e.domain == d)
            .map(|e| e.item_id.clone())
            .collect();
        v.sort();
        v.dedup();
        v
    };
    let vocab_x = Vocab::from_ids(ids(Domain::X));
    let vocab_y = Vocab::from_ids(ids(Domain::Y));

    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        vocab_x,
        vocab_y,
        users: Vec::new(),
    };
    for (user_index, (user, evs)) in truncated.into_iter().enumerate() {
        let tokens: Vec<Token> = evs
            .iter()
            .map(|e| {
                let vocab = split.vocab(e.domain);
                Token::new(vocab.index_of(&e.item_id).expect("vocab built from these events"), e.domain)
            })
            .collect();
        let n = tokens.len();
        split.train.push(UserSequence::new(user_index, tokens[..n - 2].to_vec()));
        split.validation.push(HeldOut {
            seq: UserSequence::new(user_index, tokens[..n - 2].to_vec()),
            target: tokens[n - 2],
        });
        split.test.push(HeldOut {
            seq: UserSequence::new(user_index, tokens[..n - 1].to_vec()),
            target: tokens[n - 1],
        });
        split.users.push(user);
    }
    Ok(split)
}

/// Per-domain subsequences of a cross-domain sequence, with the position of
/// each element in the original sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainViews {
    pub x: Vec<Token>,
    pub y: Vec<Token>,
    pub x_pos: Vec<usize>,
    pub y_pos: Vec<usize>,
}

impl DomainViews {
    pub fn get(&self, d: Domain) -> (&[Token], &[usize]) {
        match d {
            Domain::X => (&self.x, &self.x_pos),
            Domain::Y => (&self.y, &self.y_pos),
        }
    }

    /// Reassembles the cross-domain sequence from the two views.
    pub fn interleave(&self) -> Vec<Token> {
        let n = self.x.len() + self.y.len();
        let mut out = vec![None; n];
        for (t, &p) in self.x.iter().zip(&self.x_pos).chain(self.y.iter().zip(&self.y_pos)) {
            out[p] = Some(*t);
        }
        out.into_iter().map(|t| t.expect("positions cover the sequence")).collect()
    }
}

pub fn split_domain_views(items: &[Token]) -> DomainViews {
    let mut v = DomainViews {
        x: Vec::new(),
        y: Vec::new(),
        x_pos: Vec::new(),
        y_pos: Vec::new(),
    };
    for (i, t) in items.iter().enumerate() {
        match t.domain {
            Domain::X => {
                v.x.push(*t);
                v.x_pos.push(i);
            }
            Domain::Y => {
                v.y.push(*t);
                v.y_pos.push(i);
            }
        }
    }
    v
}

/// Order-preserving per-domain subsequences `(s_x, s_y)`.
pub fn split_domains(seq: &UserSequence) -> (UserSequence, UserSequence) {
    let v = split_domain_views(&seq.items);
    (
        UserSequence::new(seq.user_index, v.x),
        UserSequence::new(seq.user_index, v.y),
    )
}

// ---------------------------------------------------------------------------
// Split manifest

fn tokens_to_string(tokens: &[Token]) -> String {
    tokens.iter().map(Token::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_tokens(s: &str) -> Result<Vec<Token>> {
    s.split_whitespace().map(str::parse).collect()
}

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| DpgError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| DpgError::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for l in lines {
        writeln!(w, "{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| DpgError::io(path, e))?;
    Ok(text.lines().skip(1).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn field<'a>(parts: &[&'a str], i: usize, path: &Path) -> Result<&'a str> {
    parts
        .get(i)
        .copied()
        .ok_or_else(|| DpgError::Parse(format!("{}: missing field {i}", path.display())))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| DpgError::Parse(format!("bad integer {s:?}")))
}

/// Writes `vocab.tsv`, `users.tsv`, `train.tsv`, `valid.tsv`, `test.tsv`.
pub fn write_split(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DpgError::io(dir, e))?;
    let vocab_lines = Domain::BOTH.into_iter().flat_map(|d| {
        split
            .vocab(d)
            .ids()
            .iter()
            .enumerate()
            .map(move |(i, id)| format!("{d}\t{}\t{id}", i + FIRST_ITEM_INDEX))
    });
    write_lines(&dir.join("vocab.tsv"), "domain\tindex\titem_id", vocab_lines)?;
    write_lines(
        &dir.join("users.tsv"),
        "user_index\tuser_id",
        split.users.iter().enumerate().map(|(i, u)| format!("{i}\t{u}")),
    )?;
    write_lines(
        &dir.join("train.tsv"),
        "user_index\titems",
        split
            .train
            .iter()
            .map(|s| format!("{}\t{}", s.user_index, tokens_to_string(&s.items))),
    )?;
    for (name, part) in [("valid.tsv", &split.validation), ("test.tsv", &split.test)] {
        write_lines(
            &dir.join(name),
            "user_index\titems\ttarget",
            part.iter().map(|h| {
                format!("{}\t{}\t{}", h.seq.user_index, tokens_to_string(&h.seq.items), h.target)
            }),
        )?;
    }
    Ok(())
}

pub fn read_split(dir: &Path) -> Result<DatasetSplit> {
    let vocab_path = dir.join("vocab.tsv");
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for line in read_lines(&vocab_path)? {
        let parts: Vec<&str> = line.split('\t').collect();
        let d: Domain = field(&parts, 0, &vocab_path)?.parse()?;
        let idx = parse_usize(field(&parts, 1, &vocab_path)?)?;
        let id = field(&parts, 2, &vocab_path)?.to_string();
        let list = if d == Domain::X { &mut xs } else { &mut ys };
        if idx != list.len() + FIRST_ITEM_INDEX {
            return Err(DpgError::Parse(format!("vocab index {idx} out of sequence")));
        }
        list.push(id);
    }
    let users_path = dir.join("users.tsv");
    let users = read_lines(&users_path)?
        .iter()
        .map(|l| {
            let parts: Vec<&str> = l.split('\t').collect();
            field(&parts, 1, &users_path).map(String::from)
        })
        .collect::<Result<Vec<_>>>()?;

    let train_path = dir.join("train.tsv");
    let train = read_lines(&train_path)?
        .iter()
        .map(|l| {
            let parts: Vec<&str> = l.split('\t').collect();
            Ok(UserSequence::new(
                parse_usize(field(&parts, 0, &train_path)?)?,
                parse_tokens(parts.get(1).copied().unwrap_or(""))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let held = |name: &str| -> Result<Vec<HeldOut>> {
        let path = dir.join(name);
        read_lines(&path)?
            .iter()
            .map(|l| {
                let parts: Vec<&str> = l.split('\t').collect();
                Ok(HeldOut {
                    seq: UserSequence::new(
                        parse_usize(field(&parts, 0, &path)?)?,
                        parse_tokens(field(&parts, 1, &path)?)?,
                    ),
                    target: field(&parts, 2, &path)?.parse()?,
                })
            })
            .collect()
    };
    let split = DatasetSplit {
        train,
        validation: held("valid.tsv")?,
        test: held("test.tsv")?,
        vocab_x: Vocab::from_ids(xs),
        vocab_y: Vocab::from_ids(ys),
        users,
    };
    let sizes = split.table_sizes();
    for t in split
        .train
        .iter()
        .flat_map(|s| &s.items)
        .chain(split.test.iter().flat_map(|h| h.seq.items.iter().chain(Some(&h.target))))
    {
        if t.item < FIRST_ITEM_INDEX || t.item >= sizes.get(t.domain) {
            return Err(DpgError::IndexOutOfRange {
                what: "split item",
                index: t.item,
                size: sizes.get(t.domain),
            });
        }
    }
    Ok(split)
}
