//! Interaction logs to leave-one-out splits and training batches.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::ItemSequence;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

impl InteractionRecord {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        InteractionRecord {
            user: user.into(),
            item: item.into(),
            timestamp,
        }
    }
}

/// How to read an interaction file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InputFormat {
    /// `::`-separated files without a header are read as MovieLens dumps,
    /// anything else as delimited text with a header.
    #[default]
    Auto,
    /// Header row naming the user, item and timestamp columns; tab or comma
    /// chosen from the header.
    Delimited,
    /// `user::item::rating::timestamp`, no header.
    MovieLens,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadedInteractions {
    pub records: Vec<InteractionRecord>,
    /// 1-based line numbers of skipped rows.
    pub skipped_lines: Vec<usize>,
}

impl LoadedInteractions {
    pub fn skipped(&self) -> usize {
        self.skipped_lines.len()
    }
}

const USER_COLUMNS: &[&str] = &["user_id", "userid", "user", "uid"];
const ITEM_COLUMNS: &[&str] = &["item_id", "itemid", "item", "movie_id", "movieid", "iid"];
const TIME_COLUMNS: &[&str] = &["timestamp", "time", "ts", "datetime"];

fn find_column(header: &[&str], names: &[&str]) -> Option<usize> {
    header.iter().position(|h| {
        let h = h.trim().trim_matches('"').to_ascii_lowercase();
        let h = h.split(':').next().unwrap_or("");
        names.contains(&h)
    })
}

fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim().trim_matches('"');
    s.parse::<i64>()
        .ok()
        .or_else(|| s.parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| v as i64))
}

pub fn load_interactions(path: &Path, format: InputFormat) -> Result<LoadedInteractions> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let loaded = read_interactions(BufReader::new(file), format).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })?;
    if loaded.records.is_empty() {
        log::warn!("{}: no interactions found", path.display());
    }
    if loaded.skipped() > 0 {
        log::warn!("{}: skipped {} malformed rows", path.display(), loaded.skipped());
    }
    Ok(loaded)
}

pub fn read_interactions<R: BufRead>(reader: R, format: InputFormat) -> Result<LoadedInteractions> {
    let mut lines = reader.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(l) if l.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });
    let Some((first_no, first)) = lines.next() else {
        return Ok(LoadedInteractions::default());
    };
    let first = first.map_err(|e| Error::Format(format!("line {first_no}: {e}")))?;
    let first = first.trim_start_matches('\u{feff}').to_string();
    let format = match format {
        InputFormat::Auto if first.contains("::") => InputFormat::MovieLens,
        InputFormat::Auto => InputFormat::Delimited,
        f => f,
    };

    let mut out = LoadedInteractions::default();
    let (sep, cols): (&str, [usize; 3]) = match format {
        InputFormat::MovieLens => ("::", [0, 1, 3]),
        _ => {
            let sep = if first.contains('\t') { "\t" } else if first.contains(',') { "," } else {
                return Err(Error::Format(format!("line {first_no}: header has neither tabs nor commas: {first:?}")));
            };
            let header: Vec<&str> = first.split(sep).collect();
            let cols = [USER_COLUMNS, ITEM_COLUMNS, TIME_COLUMNS].map(|names| find_column(&header, names));
            match cols {
                [Some(u), Some(i), Some(t)] => (sep, [u, i, t]),
                _ => {
                    return Err(Error::Format(format!(
                        "line {first_no}: header must name user, item and timestamp columns, got {first:?}"
                    )))
                }
            }
        }
    };

    let mut parse = |no: usize, line: &str| {
        let fields: Vec<&str> = line.split(sep).collect();
        let get = |c: usize| fields.get(c).map(|f| f.trim().trim_matches('"')).filter(|f| !f.is_empty());
        match (get(cols[0]), get(cols[1]), get(cols[2]).and_then(parse_timestamp)) {
            (Some(u), Some(i), Some(t)) => out.records.push(InteractionRecord::new(u, i, t)),
            _ => out.skipped_lines.push(no),
        }
    };
    if format == InputFormat::MovieLens {
        parse(first_no, &first);
    }
    for (no, line) in lines {
        match line {
            Ok(line) => parse(no, line.trim_end_matches('\r')),
            Err(_) => parse(no, ""),
        }
    }
    Ok(out)
}

/// Drops users and items with fewer than `k` interactions until every
/// survivor has at least `k`.
pub fn k_core_filter(records: Vec<InteractionRecord>, k: usize) -> Result<Vec<InteractionRecord>> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    let mut current = records;
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &current {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let keep: Vec<bool> = current.iter().map(|r| users[r.user.as_str()] >= k && items[r.item.as_str()] >= k).collect();
        if keep.iter().all(|&b| b) {
            break;
        }
        let mut flags = keep.into_iter();
        current.retain(|_| flags.next().unwrap());
    }
    if current.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(current)
}

/// Dense ids in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_raw(raw: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(raw.len());
        for (i, r) in raw.iter().enumerate() {
            if index.insert(r.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {r:?}")));
            }
        }
        Ok(Vocab { raw, index })
    }

    fn intern(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.raw.len();
        self.raw.push(raw.to_string());
        self.index.insert(raw.to_string(), i);
        i
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn id(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, id: usize) -> Option<&str> {
        self.raw.get(id).map(String::as_str)
    }

    pub fn raw_ids(&self) -> &[String] {
        &self.raw
    }
}

/// One user's chronological history split into train items and two held-out
/// targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub user: usize,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl UserSplit {
    pub fn interactions(&self) -> usize {
        self.train.len() + 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_len: f64,
    pub max_len: usize,
    /// `1 − interactions / (users · items)`
    pub sparsity: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "users\titems\tinteractions\tavg_len\tmax_len\tsparsity")?;
        write!(
            f,
            "{}\t{}\t{}\t{:.1}\t{}\t{:.2}%",
            self.users,
            self.items,
            self.interactions,
            self.avg_len,
            self.max_len,
            self.sparsity * 100.0
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub users: Vec<UserSplit>,
    pub user_vocab: Vocab,
    pub item_vocab: Vocab,
}

impl DatasetSplits {
    pub fn num_items(&self) -> usize {
        self.item_vocab.len()
    }

    pub fn stats(&self) -> DatasetStats {
        let users = self.users.len();
        let items = self.item_vocab.len();
        let interactions: usize = self.users.iter().map(UserSplit::interactions).sum();
        let cells = (users * items) as f64;
        DatasetStats {
            users,
            items,
            interactions,
            avg_len: if users == 0 { 0.0 } else { interactions as f64 / users as f64 },
            max_len: self.users.iter().map(UserSplit::interactions).max().unwrap_or(0),
            sparsity: if cells == 0.0 { 0.0 } else { 1.0 - interactions as f64 / cells },
        }
    }
}

/// Chronological leave-one-out split. Ties in timestamp keep input order.
pub fn leave_one_out_split(records: &[InteractionRecord]) -> Result<DatasetSplits> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut user_vocab = Vocab::default();
    let mut item_vocab = Vocab::default();
    let mut per_user: Vec<Vec<(i64, usize)>> = Vec::new();
    for r in records {
        let u = user_vocab.intern(&r.user);
        let i = item_vocab.intern(&r.item);
        if u == per_user.len() {
            per_user.push(Vec::new());
        }
        per_user[u].push((r.timestamp, i));
    }
    let mut users = Vec::with_capacity(per_user.len());
    for (u, mut hist) in per_user.into_iter().enumerate() {
        if hist.len() < 3 {
            return Err(Error::Split {
                user: user_vocab.raw(u).unwrap_or_default().to_string(),
                count: hist.len(),
            });
        }
        hist.sort_by_key(|&(t, _)| t);
        let items: Vec<usize> = hist.into_iter().map(|(_, i)| i).collect();
        let n = items.len();
        users.push(UserSplit {
            user: u,
            train: items[..n - 2].to_vec(),
            valid: items[n - 2],
            test: items[n - 1],
        });
    }
    Ok(DatasetSplits {
        users,
        user_vocab,
        item_vocab,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Train,
    Valid,
    Test,
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitMode::Train),
            "valid" | "validation" => Ok(SplitMode::Valid),
            "test" => Ok(SplitMode::Test),
            other => Err(Error::Config(format!("unknown split mode {other:?}"))),
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Train => "train",
            SplitMode::Valid => "valid",
            SplitMode::Test => "test",
        })
    }
}

/// Input items followed by the item to predict.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub sequence: ItemSequence,
    pub target: usize,
}

/// Most recent `cap` items of `items`.
fn recent(items: &[usize], cap: usize) -> Vec<usize> {
    items[items.len().saturating_sub(cap)..].to_vec()
}

/// The sample of one user for a split. `max_len` counts the target, so at
/// most `max_len − 1` input items are kept. `None` in train mode when the
/// train list is too short to hold an input and a target.
pub fn user_sample(split: &UserSplit, max_len: usize, mode: SplitMode) -> Option<Sample> {
    let cap = max_len.saturating_sub(1).max(1);
    let (input, target) = match mode {
        SplitMode::Train => {
            let (&target, rest) = split.train.split_last()?;
            if rest.is_empty() {
                return None;
            }
            (recent(rest, cap), target)
        }
        SplitMode::Valid => (recent(&split.train, cap), split.valid),
        SplitMode::Test => {
            let mut all = split.train.clone();
            all.push(split.valid);
            (recent(&all, cap), split.test)
        }
    };
    Some(Sample {
        sequence: ItemSequence::new(split.user, input),
        target,
    })
}

/// Groups of at most `batch_size` samples. Train mode shuffles users with
/// `seed`; evaluation modes keep user order.
pub fn make_batches(
    splits: &DatasetSplits,
    batch_size: usize,
    max_len: usize,
    mode: SplitMode,
    seed: u64,
) -> Result<Vec<Vec<Sample>>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let mut samples: Vec<Sample> = splits.users.iter().filter_map(|u| user_sample(u, max_len, mode)).collect();
    if mode == SplitMode::Train {
        samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(samples.chunks(batch_size).map(<[Sample]>::to_vec).collect())
}

const DATASET_MAGIC: &[u8; 8] = b"SSDRECDS";
pub const DATASET_VERSION: u32 = 1;

fn put_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    put_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

/// Binary archive:
///
/// ```text
/// magic "SSDRECDS", version u32 LE
/// user vocab, item vocab: count u64, then (len u64, UTF-8 bytes) each
/// per user (in user-vocab order): train_len u64, train ids u64…, valid u64, test u64
/// ```
pub fn write_dataset<W: Write>(mut w: W, splits: &DatasetSplits) -> std::io::Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    for vocab in [&splits.user_vocab, &splits.item_vocab] {
        put_u64(&mut w, vocab.len() as u64)?;
        for s in vocab.raw_ids() {
            put_str(&mut w, s)?;
        }
    }
    for u in &splits.users {
        put_u64(&mut w, u.train.len() as u64)?;
        for &i in &u.train {
            put_u64(&mut w, i as u64)?;
        }
        put_u64(&mut w, u.valid as u64)?;
        put_u64(&mut w, u.test as u64)?;
    }
    w.flush()
}

fn get_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("dataset archive: truncated {what}: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn get_len<R: Read>(r: &mut R, what: &str, limit: u64) -> Result<usize> {
    let n = get_u64(r, what)?;
    if n > limit {
        return Err(Error::Format(format!("dataset archive: {what} {n} is implausible")));
    }
    Ok(n as usize)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<DatasetSplits> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("dataset archive: truncated header: {e}")))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset archive (bad magic)".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)
        .map_err(|e| Error::Format(format!("dataset archive: truncated version: {e}")))?;
    let version = u32::from_le_bytes(v);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset archive version {version}, expected {DATASET_VERSION}"
        )));
    }
    let mut vocabs = Vec::with_capacity(2);
    for what in ["user vocabulary", "item vocabulary"] {
        let n = get_len(&mut r, what, u32::MAX as u64)?;
        let mut raw = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = get_len(&mut r, "identifier length", 1 << 16)?;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Format(format!("dataset archive: truncated identifier: {e}")))?;
            raw.push(String::from_utf8(buf).map_err(|_| Error::Format("dataset archive: identifier is not UTF-8".into()))?);
        }
        vocabs.push(Vocab::from_raw(raw)?);
    }
    let item_vocab = vocabs.pop().unwrap();
    let user_vocab = vocabs.pop().unwrap();
    let items = item_vocab.len();
    let check = |i: u64| -> Result<usize> {
        if (i as usize) < items {
            Ok(i as usize)
        } else {
            Err(Error::Format(format!("dataset archive: item id {i} outside vocabulary of {items}")))
        }
    };
    let mut users = Vec::with_capacity(user_vocab.len());
    for u in 0..user_vocab.len() {
        let n = get_len(&mut r, "train length", u32::MAX as u64)?;
        let train = (0..n).map(|_| check(get_u64(&mut r, "train item")?)).collect::<Result<Vec<_>>>()?;
        let valid = check(get_u64(&mut r, "validation item")?)?;
        let test = check(get_u64(&mut r, "test item")?)?;
        users.push(UserSplit { user: u, train, valid, test });
    }
    Ok(DatasetSplits {
        users,
        user_vocab,
        item_vocab,
    })
}

pub fn save_dataset(path: &Path, splits: &DatasetSplits) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(BufWriter::new(file), splits).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<DatasetSplits> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file))
}

/// Deterministic next-item log over a random cyclic permutation `f` of
/// `vocab` items: every user walks `x, f(x), f(f(x)), …` for a length drawn
/// from `lengths` (at least 4).
///
/// Walks are placed so that the last training input of user `u` is the
/// `u mod vocab`-th item of the cycle. With at least `vocab` users, every
/// transition then appears as some user's training target, which is what
/// makes the held-out transitions learnable under one target per user.
pub fn synthetic_next_item(
    users: usize,
    vocab: usize,
    lengths: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Vec<InteractionRecord> {
    assert!(*lengths.start() >= 4, "walks need room for input, train target, valid and test");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..vocab).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::new();
    for u in 0..users {
        let len = rng.gen_range(lengths.clone());
        let start = (u % vocab + vocab * len - (len - 4)) % vocab;
        for t in 0..len {
            let item = order[(start + t) % vocab];
            out.push(InteractionRecord::new(format!("u{u}"), format!("i{item}"), t as i64));
        }
    }
    out
}

/// Per-user and per-item interaction counts.
pub fn interaction_counts(records: &[InteractionRecord]) -> (BTreeMap<&str, usize>, BTreeMap<&str, usize>) {
    let mut users = BTreeMap::new();
    let mut items = BTreeMap::new();
    for r in records {
        *users.entry(r.user.as_str()).or_default() += 1;
        *items.entry(r.item.as_str()).or_default() += 1;
    }
    (users, items)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn read(text: &str) -> Result<LoadedInteractions> {
        read_interactions(text.as_bytes(), InputFormat::Auto)
    }

    #[test]
    fn reads_delimited_and_movielens() {
        let l = read("user_id,item_id,rating,timestamp\n1,10,5,100\n1,11,3,101\n2,10,4,99\n").unwrap();
        assert_eq!(l.records.len(), 3);
        assert_eq!(l.records[2], InteractionRecord::new("2", "10", 99));
        let l = read("ts\titem\tuser\n5\ta\tx\n").unwrap();
        assert_eq!(l.records, vec![InteractionRecord::new("x", "a", 5)]);
        let l = read("1::1193::5::978300760\n1::661::3::978302109\n").unwrap();
        assert_eq!(l.records[1], InteractionRecord::new("1", "661", 978302109));
        let l = read("user_id:token\titem_id:token\ttimestamp:float\n1\t2\t3.0\n").unwrap();
        assert_eq!(l.records, vec![InteractionRecord::new("1", "2", 3)]);
    }

    #[test]
    fn empty_and_malformed() {
        assert!(read("").unwrap().records.is_empty());
        let l = read("user_id,item_id,timestamp\n1,2,3\n1,,4\n1,2,3\n").unwrap();
        assert_eq!((l.records.len(), l.skipped_lines.clone()), (2, vec![3]));
        let l = read("user_id,item_id,timestamp\n1,2,x\n").unwrap();
        assert_eq!(l.skipped(), 1);
        assert!(matches!(read("a,b,c\n1,2,3\n"), Err(Error::Format(_))));
        assert!(matches!(read("just one column\n"), Err(Error::Format(_))));
        let err = load_interactions(Path::new("/nonexistent/file.csv"), InputFormat::Auto);
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    fn rec(u: &str, i: &str, t: i64) -> InteractionRecord {
        InteractionRecord::new(u, i, t)
    }

    #[test]
    fn k_core_identity_and_cascade() {
        // u0..u4 each rate items a..e: already a 5-core.
        let mut base = Vec::new();
        for u in 0..5 {
            for i in ["a", "b", "c", "d", "e"] {
                base.push(rec(&format!("u{u}"), i, 0));
            }
        }
        assert_eq!(k_core_filter(base.clone(), 5).unwrap(), base);

        // x rates a..d and f; f is rated only by x and 4 others once x is gone.
        let mut c = base.clone();
        for i in ["a", "b", "c", "d", "f"] {
            c.push(rec("x", i, 0));
        }
        for u in 0..4 {
            c.push(rec(&format!("u{u}"), "f", 0));
        }
        // x has 5, f has 5: still a core.
        assert_eq!(k_core_filter(c.clone(), 5).unwrap().len(), c.len());
        // drop one of x's ratings: x falls to 4, then f falls to 4, then stops.
        c.retain(|r| !(r.user == "x" && r.item == "a"));
        let out = k_core_filter(c, 5).unwrap();
        assert_eq!(out, base);

        assert!(matches!(k_core_filter(vec![rec("u", "i", 0)], 5), Err(Error::EmptyDataset)));
        assert!(k_core_filter(base, 0).is_err());
    }

    #[test]
    fn split_examples() {
        let recs: Vec<_> = ["a", "b", "c", "d", "e"].iter().enumerate().map(|(t, i)| rec("u", i, t as i64)).rev().collect();
        let s = leave_one_out_split(&recs).unwrap();
        let u = &s.users[0];
        let name = |i: usize| s.item_vocab.raw(i).unwrap().to_string();
        assert_eq!(u.train.iter().map(|&i| name(i)).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!((name(u.valid), name(u.test)), ("d".into(), "e".into()));

        let ties = vec![rec("u", "p", 1), rec("u", "q", 1), rec("u", "r", 1), rec("u", "s", 0)];
        let s = leave_one_out_split(&ties).unwrap();
        let u = &s.users[0];
        assert_eq!(s.item_vocab.raw(u.train[0]), Some("s"));
        assert_eq!((s.item_vocab.raw(u.valid), s.item_vocab.raw(u.test)), (Some("q"), Some("r")));

        let err = leave_one_out_split(&[rec("short", "a", 0), rec("short", "b", 1)]).unwrap_err();
        assert!(matches!(err, Error::Split { ref user, count: 2 } if user == "short"));
    }

    fn splits_with(train_lens: &[usize]) -> DatasetSplits {
        let mut recs = Vec::new();
        for (u, &n) in train_lens.iter().enumerate() {
            for t in 0..n + 2 {
                recs.push(rec(&format!("u{u}"), &format!("i{}", t % 50), t as i64));
            }
        }
        leave_one_out_split(&recs).unwrap()
    }

    #[test]
    fn sample_construction() {
        let s = splits_with(&[3, 298]);
        let short = user_sample(&s.users[0], 200, SplitMode::Train).unwrap();
        assert_eq!(short.sequence.item_ids, s.users[0].train[..2]);
        assert_eq!(short.target, s.users[0].train[2]);
        // 300 interactions: test input is the 199 items before the target.
        let long = user_sample(&s.users[1], 200, SplitMode::Test).unwrap();
        assert_eq!(long.sequence.len(), 199);
        assert_eq!(long.target, s.users[1].test);
        assert_eq!(*long.sequence.item_ids.last().unwrap(), s.users[1].valid);
        let valid = user_sample(&s.users[1], 200, SplitMode::Valid).unwrap();
        assert_eq!(valid.sequence.item_ids, s.users[1].train[298 - 199..]);
        assert_eq!(user_sample(&splits_with(&[1]).users[0], 200, SplitMode::Train), None);
    }

    #[test]
    fn batches_cover_users_once_and_are_seeded() {
        let s = splits_with(&[3, 4, 5, 6, 7, 8, 9]);
        let b = make_batches(&s, 3, 50, SplitMode::Train, 1).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [3, 3, 1]);
        let mut seen: Vec<usize> = b.iter().flatten().map(|x| x.sequence.user_id).collect();
        assert_eq!(b, make_batches(&s, 3, 50, SplitMode::Train, 1).unwrap());
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        let e = make_batches(&s, 4, 50, SplitMode::Test, 1).unwrap();
        assert_eq!(e[0][0].sequence.user_id, 0);
        assert!(make_batches(&s, 0, 50, SplitMode::Train, 1).is_err());
    }

    #[test]
    fn archive_round_trip() {
        let s = splits_with(&[3, 5, 1]);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &s).unwrap();
        assert_eq!(read_dataset(&buf[..]).unwrap(), s);
        let mut again = Vec::new();
        write_dataset(&mut again, &s).unwrap();
        assert_eq!(buf, again);
        assert!(read_dataset(&buf[..buf.len() - 3]).is_err());
        buf[8] = 7;
        assert!(read_dataset(&buf[..]).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn stats_and_sparsity() {
        let s = splits_with(&[3, 8]);
        let st = s.stats();
        assert_eq!((st.users, st.interactions, st.max_len), (2, 15, 10));
        assert!((st.avg_len - 7.5).abs() < 1e-12);
        assert!((st.sparsity - (1.0 - 15.0 / (2.0 * st.items as f64))).abs() < 1e-12);
    }

    #[test]
    fn synthetic_log_follows_a_cycle() {
        let recs = synthetic_next_item(20, 30, 5..=12, 3);
        let s = leave_one_out_split(&recs).unwrap();
        let mut succ: HashMap<usize, usize> = HashMap::new();
        for u in &s.users {
            let mut all = u.train.clone();
            all.extend([u.valid, u.test]);
            for w in all.windows(2) {
                assert_eq!(*succ.entry(w[0]).or_insert(w[1]), w[1]);
            }
        }
        assert_eq!(recs, synthetic_next_item(20, 30, 5..=12, 3));

        // with users >= vocab every successor is some user's training target
        let s = leave_one_out_split(&synthetic_next_item(30, 30, 5..=12, 4)).unwrap();
        let mut inputs: Vec<usize> = s.users.iter().map(|u| u.train[u.train.len() - 2]).collect();
        inputs.sort_unstable();
        inputs.dedup();
        assert_eq!(inputs.len(), 30);
    }

    fn random_log() -> impl Strategy<Value = Vec<InteractionRecord>> {
        prop::collection::vec((0u8..12, 0u8..15, 0i64..20), 0..400)
            .prop_map(|v| v.into_iter().map(|(u, i, t)| rec(&format!("u{u}"), &format!("i{i}"), t)).collect())
    }

    proptest! {
        #[test]
        fn k_core_is_a_fixpoint(log in random_log(), k in 1usize..6) {
            match k_core_filter(log, k) {
                Ok(out) => {
                    let (users, items) = interaction_counts(&out);
                    prop_assert!(users.values().chain(items.values()).all(|&c| c >= k));
                    prop_assert_eq!(k_core_filter(out.clone(), k).unwrap(), out);
                }
                Err(e) => prop_assert!(matches!(e, Error::EmptyDataset)),
            }
        }

        #[test]
        fn split_orders_by_time(log in random_log()) {
            let Ok(core) = k_core_filter(log, 3) else { return Ok(()) };
            let s = leave_one_out_split(&core).unwrap();
            for u in &s.users {
                let raw = s.user_vocab.raw(u.user).unwrap();
                let times: Vec<i64> = core.iter().filter(|r| r.user == raw).map(|r| r.timestamp).collect();
                let max = *times.iter().max().unwrap();
                let test_raw = s.item_vocab.raw(u.test).unwrap();
                prop_assert!(core.iter().any(|r| r.user == raw && r.item == test_raw && r.timestamp == max));
                let tr = user_sample(u, 1000, SplitMode::Train);
                if let Some(tr) = tr {
                    prop_assert!(tr.target == *u.train.last().unwrap());
                }
            }
            for (i, raw) in s.item_vocab.raw_ids().iter().enumerate() {
                prop_assert_eq!(s.item_vocab.id(raw), Some(i));
            }
        }
    }
}
