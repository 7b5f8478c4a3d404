//! Dataset ingestion (MovieLens-1M style ratings, binarized play counts) and
//! the canonical on-disk dataset format.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::types::{GroupAssignment, Label, ObservationMask, RatingDataset, RatingMatrix, ValueDomain};

/// How users and items are mapped to sensitive groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupSpec {
    /// User column holding the sensitive attribute: gender, age or occupation.
    pub user_attribute: String,
    /// Attribute value (case-insensitive) to group label. Other values are ungrouped.
    pub user_labels: BTreeMap<String, u32>,
    /// Genre tags of item group 0 and item group 1 (case-insensitive).
    pub item_tags: [Vec<String>; 2],
}

impl Default for GroupSpec {
    fn default() -> Self {
        let tags = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        GroupSpec {
            user_attribute: "gender".into(),
            user_labels: [("m".to_string(), 0), ("f".to_string(), 1)].into_iter().collect(),
            item_tags: [
                tags(&["action", "crime", "film-noir", "war"]),
                tags(&["children's", "fantasy", "musical", "romance"]),
            ],
        }
    }
}

impl GroupSpec {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.item_tags.clone().map(|v| v.into_iter().map(|t| t.to_lowercase()).collect::<BTreeSet<_>>());
        if let Some(t) = a.intersection(&b).next() {
            return Err(Error::invalid(format!("tag {t:?} is in both item groups")));
        }
        if self.user_labels.is_empty() {
            return Err(Error::invalid("no user labels"));
        }
        self.user_column()?;
        Ok(())
    }

    fn user_column(&self) -> Result<usize> {
        match self.user_attribute.to_lowercase().as_str() {
            "gender" => Ok(1),
            "age" => Ok(2),
            "occupation" => Ok(3),
            other => Err(Error::invalid(format!("unknown user attribute {other:?}"))),
        }
    }

    fn user_alphabet(&self) -> u32 {
        self.user_labels.values().max().map_or(0, |m| m + 1)
    }

    fn user_label(&self, value: &str) -> Label {
        let v = value.trim().to_lowercase();
        self.user_labels.iter().find(|(k, _)| k.to_lowercase() == v).map(|(_, &l)| l)
    }

    /// Group 0 or 1 if the tags hit exactly one side, otherwise ungrouped.
    pub fn item_label<'a>(&self, tags: impl IntoIterator<Item = &'a str>) -> Label {
        let mut hit = [false; 2];
        for t in tags {
            let t = t.trim().to_lowercase();
            for (g, set) in self.item_tags.iter().enumerate() {
                if set.iter().any(|s| s.to_lowercase() == t) {
                    hit[g] = true;
                }
            }
        }
        match hit {
            [true, false] => Some(0),
            [false, true] => Some(1),
            _ => None,
        }
    }
}

/// One observed rating as it appears in a source file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRating {
    pub user_id: String,
    pub item_id: String,
    pub value: f64,
    pub timestamp: i64,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, message: message.into() }
}

/// Bytes decoded as Latin-1, which is what the MovieLens 1M files use.
fn read_latin1(path: &Path) -> Result<String> {
    Ok(std::fs::read(path)?.into_iter().map(char::from).collect())
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// `UserID::MovieID::Rating::Timestamp`.
pub fn parse_rating_line(line: &str) -> std::result::Result<RawRating, String> {
    let f: Vec<&str> = line.split("::").collect();
    if f.len() != 4 {
        return Err(format!("expected 4 '::'-separated fields, found {}", f.len()));
    }
    let value: f64 = f[2].trim().parse().map_err(|_| format!("bad rating {:?}", f[2]))?;
    if !ValueDomain::Stars.contains(value) {
        return Err(format!("rating {value} outside 1..5"));
    }
    let timestamp = f[3].trim().parse().map_err(|_| format!("bad timestamp {:?}", f[3]))?;
    Ok(RawRating { user_id: f[0].trim().to_string(), item_id: f[1].trim().to_string(), value, timestamp })
}

/// Sorted ids: numerically when every id is an integer, lexically otherwise.
fn sorted_ids(ids: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut v: Vec<String> = ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    if v.iter().all(|s| s.parse::<u64>().is_ok()) {
        v.sort_by_key(|s| s.parse::<u64>().unwrap_or(0));
    }
    v
}

fn index_of(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect()
}

/// Observations of `(user, item, value)` triples; later duplicates overwrite.
struct Triples {
    users: Vec<String>,
    items: Vec<String>,
    values: Array2<f64>,
    entries: Vec<(u32, u32)>,
}

fn assemble(raw: &[(String, String, f64)], what: &str) -> Triples {
    let users = sorted_ids(raw.iter().map(|r| r.0.clone()));
    let items = sorted_ids(raw.iter().map(|r| r.1.clone()));
    let (ui, ii) = (index_of(&users), index_of(&items));
    let mut values = Array2::from_elem((users.len(), items.len()), f64::NAN);
    let mut duplicates = 0usize;
    for (u, i, v) in raw {
        let cell = &mut values[[ui[u.as_str()], ii[i.as_str()]]];
        if !cell.is_nan() {
            duplicates += 1;
        }
        *cell = *v;
    }
    if duplicates > 0 {
        log::warn!("{duplicates} duplicate {what} overwritten by later occurrences");
    }
    let entries = values
        .indexed_iter()
        .filter(|(_, v)| !v.is_nan())
        .map(|((i, j), _)| (i as u32, j as u32))
        .collect();
    Triples { users, items, values, entries }
}

/// MovieLens-1M `ratings.dat`, `users.dat` and `movies.dat`.
///
/// The matrix covers the users and movies that occur in the ratings file,
/// ordered by id.
pub fn load_movielens(
    ratings_path: &Path,
    users_path: &Path,
    movies_path: &Path,
    spec: &GroupSpec,
) -> Result<(RatingDataset, GroupAssignment)> {
    spec.validate()?;
    let column = spec.user_column()?;
    let mut user_attr = HashMap::new();
    for (line, text) in lines(&read_latin1(users_path)?) {
        let f: Vec<&str> = text.split("::").collect();
        if f.len() != 5 {
            return Err(parse_err(users_path, line, format!("expected 5 '::'-separated fields, found {}", f.len())));
        }
        user_attr.insert(f[0].trim().to_string(), spec.user_label(f[column]));
    }
    let mut movie_group = HashMap::new();
    for (line, text) in lines(&read_latin1(movies_path)?) {
        // Titles may themselves contain "::"; the id is first and genres last.
        let (Some((id, rest)), true) = (text.split_once("::"), text.matches("::").count() >= 2) else {
            return Err(parse_err(movies_path, line, "expected MovieID::Title::Genres"));
        };
        let genres = rest.rsplit_once("::").map_or("", |(_, g)| g);
        movie_group.insert(id.trim().to_string(), spec.item_label(genres.split('|')));
    }
    let mut raw = Vec::new();
    for (line, text) in lines(&read_latin1(ratings_path)?) {
        let r = parse_rating_line(text).map_err(|m| parse_err(ratings_path, line, m))?;
        if !user_attr.contains_key(&r.user_id) {
            return Err(Error::Consistency(format!("{}:{line}: unknown user {}", ratings_path.display(), r.user_id)));
        }
        if !movie_group.contains_key(&r.item_id) {
            return Err(Error::Consistency(format!("{}:{line}: unknown movie {}", ratings_path.display(), r.item_id)));
        }
        raw.push((r.user_id, r.item_id, r.value));
    }
    if raw.is_empty() {
        return Err(Error::invalid(format!("{} holds no ratings", ratings_path.display())));
    }
    let t = assemble(&raw, "ratings");
    let user_group = t.users.iter().map(|u| user_attr[u]).collect();
    let item_group = t.items.iter().map(|i| movie_group[i]).collect();
    let groups = GroupAssignment::new(user_group, item_group, spec.user_alphabet(), 2)?;
    let (n, m) = t.values.dim();
    let dataset = RatingDataset::new(RatingMatrix::new(t.values, ValueDomain::Stars)?, ObservationMask::new(n, m, t.entries)?)?;
    log::info!("loaded {n} users x {m} movies, {} ratings", dataset.observed().len());
    Ok((dataset, groups))
}

/// What a play count is compared against when binarizing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountThreshold {
    /// Mean over every count in the file.
    #[default]
    GlobalMean,
    /// Mean over the user's own counts.
    PerUserMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlaycountOptions {
    pub threshold: CountThreshold,
    /// Users kept per user group; `None` keeps everyone.
    pub users_per_group: Option<usize>,
    pub seed: u64,
}

impl Default for PlaycountOptions {
    fn default() -> Self {
        PlaycountOptions { threshold: CountThreshold::GlobalMean, users_per_group: Some(5000), seed: 0 }
    }
}

/// `+1` if `count > threshold`, else `-1`.
pub fn binarize(count: f64, threshold: f64) -> f64 {
    if count > threshold { 1.0 } else { -1.0 }
}

fn tsv_fields<'a>(path: &Path, line: usize, text: &'a str, min: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = text.split('\t').map(str::trim).collect();
    if f.len() < min {
        return Err(parse_err(path, line, format!("expected at least {min} tab-separated fields, found {}", f.len())));
    }
    Ok(f)
}

/// Play counts `user<TAB>item<TAB>count`, users `user<TAB>gender[<TAB>...]` and
/// item groups `item<TAB>group`, binarized against the mean count.
///
/// Only items listed in the group file are kept. Thresholds are computed over
/// the whole counts file before any filtering or subsampling.
pub fn load_binary_playcounts(
    counts_path: &Path,
    users_path: &Path,
    item_groups_path: &Path,
    spec: &GroupSpec,
    opts: &PlaycountOptions,
) -> Result<(RatingDataset, GroupAssignment)> {
    spec.validate()?;
    let mut user_label = HashMap::new();
    for (line, text) in lines(&std::fs::read_to_string(users_path)?) {
        let f = tsv_fields(users_path, line, text, 2)?;
        user_label.insert(f[0].to_string(), spec.user_label(f[1]));
    }
    let mut item_label: HashMap<String, u32> = HashMap::new();
    for (line, text) in lines(&std::fs::read_to_string(item_groups_path)?) {
        let f = tsv_fields(item_groups_path, line, text, 2)?;
        let g: u32 = f[1].parse().map_err(|_| parse_err(item_groups_path, line, format!("bad group {:?}", f[1])))?;
        if g > 1 {
            return Err(parse_err(item_groups_path, line, format!("group {g} is not 0 or 1")));
        }
        item_label.insert(f[0].to_string(), g);
    }
    let mut rows = Vec::new();
    for (line, text) in lines(&std::fs::read_to_string(counts_path)?) {
        let f = tsv_fields(counts_path, line, text, 3)?;
        let count: f64 = f[2].parse().map_err(|_| parse_err(counts_path, line, format!("bad count {:?}", f[2])))?;
        if !(count >= 0.0 && count.is_finite()) {
            return Err(parse_err(counts_path, line, format!("count {count} is negative or not finite")));
        }
        if !user_label.contains_key(f[0]) {
            return Err(Error::Consistency(format!("{}:{line}: unknown user {}", counts_path.display(), f[0])));
        }
        rows.push((f[0].to_string(), f[1].to_string(), count));
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("{} holds no counts", counts_path.display())));
    }
    let global = rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64;
    let mut per_user: HashMap<&str, (f64, usize)> = HashMap::new();
    for (u, _, c) in &rows {
        let e = per_user.entry(u.as_str()).or_default();
        e.0 += c;
        e.1 += 1;
    }
    let threshold = |u: &str| match opts.threshold {
        CountThreshold::GlobalMean => global,
        CountThreshold::PerUserMean => per_user[u].0 / per_user[u].1 as f64,
    };
    let keep_users = subsample_users(&rows, &user_label, spec, opts)?;
    let raw: Vec<(String, String, f64)> = rows
        .iter()
        .filter(|(u, i, _)| keep_users.contains(u.as_str()) && item_label.contains_key(i))
        .map(|(u, i, c)| (u.clone(), i.clone(), binarize(*c, threshold(u))))
        .collect();
    if raw.is_empty() {
        return Err(Error::invalid("no counts left after filtering to labelled items and sampled users"));
    }
    let t = assemble(&raw, "play counts");
    let user_group = t.users.iter().map(|u| user_label[u]).collect();
    let item_group = t.items.iter().map(|i| Some(item_label[i])).collect();
    let groups = GroupAssignment::new(user_group, item_group, spec.user_alphabet(), 2)?;
    let (n, m) = t.values.dim();
    let dataset = RatingDataset::new(RatingMatrix::new(t.values, ValueDomain::Binary)?, ObservationMask::new(n, m, t.entries)?)?;
    log::info!("loaded {n} users x {m} items, {} binarized counts (mean count {global:.3})", dataset.observed().len());
    Ok((dataset, groups))
}

fn subsample_users<'a>(
    rows: &'a [(String, String, f64)],
    user_label: &HashMap<String, Label>,
    spec: &GroupSpec,
    opts: &PlaycountOptions,
) -> Result<BTreeSet<&'a str>> {
    let present: BTreeSet<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    let Some(per_group) = opts.users_per_group else {
        return Ok(present);
    };
    let mut rng = rng::stream(opts.seed, Stream::Subsample);
    let mut keep = BTreeSet::new();
    for g in 0..spec.user_alphabet() {
        let mut members: Vec<&str> = sorted_ids(present.iter().filter(|u| user_label[**u] == Some(g)).map(|u| u.to_string()))
            .iter()
            .map(|u| *present.get(u.as_str()).expect("present"))
            .collect();
        if members.len() < per_group {
            log::warn!("user group {g} has {} users, fewer than the {per_group} requested", members.len());
        }
        members.shuffle(&mut rng);
        keep.extend(members.into_iter().take(per_group));
    }
    Ok(keep)
}

const MAGIC: &[u8; 4] = b"FMDS";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    n: usize,
    m: usize,
    domain: ValueDomain,
    user_groups: Vec<Label>,
    item_groups: Vec<Label>,
    user_alphabet: u32,
    item_alphabet: u32,
}

/// Canonical encoding: magic, version, JSON header, ratings, observations.
pub fn encode_dataset(dataset: &RatingDataset, groups: &GroupAssignment) -> Result<Vec<u8>> {
    let (n, m) = dataset.dim();
    groups.check_dims(n, m)?;
    let header = serde_json::to_vec(&Header {
        n,
        m,
        domain: dataset.domain(),
        user_groups: groups.user_groups().to_vec(),
        item_groups: groups.item_groups().to_vec(),
        user_alphabet: groups.user_alphabet() as u32,
        item_alphabet: groups.item_alphabet() as u32,
    })?;
    let obs = dataset.observed().entries();
    let mut out = Vec::with_capacity(16 + header.len() + 8 * n * m + 8 + 8 * obs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in dataset.ratings().values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(obs.len() as u64).to_le_bytes());
    for &(i, j) in obs {
        out.extend_from_slice(&i.to_le_bytes());
        out.extend_from_slice(&j.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.0.len() < len {
            return Err(Error::Format("truncated dataset file".into()));
        }
        let (head, tail) = self.0.split_at(len);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format("length overflows".into()))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(RatingDataset, GroupAssignment)> {
    let mut c = Cursor(bytes);
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("dataset format version {version}, expected {VERSION}")));
    }
    let header_len = c.u64()?;
    let header: Header =
        serde_json::from_slice(c.take(header_len)?).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let cells = header.n.checked_mul(header.m).filter(|&k| k.checked_mul(8).is_some());
    let cells = cells.ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    let block = c.take(cells * 8)?;
    let values: Vec<f64> = block.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    let count = c.u64()?;
    let pairs = c.take(count.checked_mul(8).ok_or_else(|| Error::Format("count overflows".into()))?)?;
    if !c.0.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", c.0.len())));
    }
    let entries = pairs
        .chunks_exact(8)
        .map(|b| {
            let i = u32::from_le_bytes(b[..4].try_into().expect("4 bytes"));
            let j = u32::from_le_bytes(b[4..].try_into().expect("4 bytes"));
            (i, j)
        })
        .collect();
    let fmt = |e: Error| Error::Format(e.to_string());
    let values = Array2::from_shape_vec((header.n, header.m), values).map_err(|e| Error::Format(e.to_string()))?;
    let ratings = RatingMatrix::new(values, header.domain).map_err(fmt)?;
    let mask = ObservationMask::new(header.n, header.m, entries).map_err(fmt)?;
    let dataset = RatingDataset::new(ratings, mask).map_err(fmt)?;
    let groups = GroupAssignment::new(header.user_groups, header.item_groups, header.user_alphabet, header.item_alphabet)
        .map_err(fmt)?;
    groups.check_dims(header.n, header.m).map_err(fmt)?;
    Ok((dataset, groups))
}

/// Write the canonical file via a temporary sibling, so a crash never leaves a partial file.
pub fn save_dataset(path: &Path, dataset: &RatingDataset, groups: &GroupAssignment) -> Result<()> {
    let bytes = encode_dataset(dataset, groups)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(RatingDataset, GroupAssignment)> {
    decode_dataset(&std::fs::read(path)?)
}
