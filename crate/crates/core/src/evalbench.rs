//! Verification benchmarks: group assignment by consensus, pair protocols,
//! pair scoring, accuracy / ROC / TPR@FPR, and per-group reports.
//!
//! Scores are cosine similarities; a pair is predicted positive when its
//! score is at or above the threshold.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::groups::GroupClassifier;
use crate::seeding::{self, Rng};

pub const MIN_PHOTOS: usize = 14;
pub const MAX_VOTERS: usize = 20;

/// Group of a person whose photos mostly agree, or `None`. People with fewer
/// than [`MIN_PHOTOS`] photos are undecided; otherwise up to [`MAX_VOTERS`]
/// photos are classified and a group needs at least 80% of the votes.
///
/// Voters are the photos with the smallest keys drawn in photo order, so
/// appending photos can only displace earlier voters, never reshuffle them.
pub fn consensus_group<T>(photos: &[T], classifier: &dyn GroupClassifier<T>, rng: &mut Rng) -> Option<u32> {
    if photos.len() < MIN_PHOTOS {
        return None;
    }
    let k = photos.len().min(MAX_VOTERS);
    let keys: Vec<f64> = photos.iter().map(|_| rng.random::<f64>()).collect();
    let mut order: Vec<usize> = (0..photos.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    let mut votes = BTreeMap::new();
    for &i in &order[..k] {
        *votes.entry(classifier.classify(&photos[i])).or_insert(0usize) += 1;
    }
    votes.into_iter().find(|&(_, v)| v * 5 >= k * 4).map(|(g, _)| g)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Person {
    pub id: String,
    pub images: Vec<String>,
}

pub type GroupedPeople = BTreeMap<u32, Vec<Person>>;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub a: String,
    pub b: String,
    pub group: u32,
}

/// Every cross-person pair of one representative image per person.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplicitNegatives {
    pub group_id: u32,
    pub representative_images: Vec<String>,
    pub seed: u64,
}

impl ImplicitNegatives {
    pub fn count(&self) -> u64 {
        let n = self.representative_images.len() as u64;
        n * n.saturating_sub(1) / 2
    }

    /// Pairs `(i, j)`, `i < j`, in row-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.representative_images.len();
        (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairProtocol {
    pub positives: Vec<Pair>,
    pub negatives: Vec<Pair>,
    pub implicit_negatives: Vec<ImplicitNegatives>,
    pub seed: u64,
}

impl PairProtocol {
    pub fn groups(&self) -> BTreeSet<u32> {
        let mut g: BTreeSet<u32> = self.positives.iter().chain(&self.negatives).map(|p| p.group).collect();
        g.extend(self.implicit_negatives.iter().map(|d| d.group_id));
        g
    }

    pub fn negative_count(&self, group: u32) -> u64 {
        self.negatives.iter().filter(|p| p.group == group).count() as u64
            + self.implicit_negatives.iter().filter(|d| d.group_id == group).map(|d| d.count()).sum::<u64>()
    }

    /// Every image referenced, in first-seen order.
    pub fn images(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let explicit = self.positives.iter().chain(&self.negatives).flat_map(|p| [&p.a, &p.b]);
        for id in explicit.chain(self.implicit_negatives.iter().flat_map(|d| &d.representative_images)) {
            if seen.insert(id.clone()) {
                out.push(id.clone());
            }
        }
        out
    }

    /// Explicit pairs go to `<stem>.tsv`, one `a<TAB>b<TAB>label<TAB>group`
    /// per line; each implicit set to `<stem>.neg<group>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.tsv")))?);
        for (pairs, label) in [(&self.positives, 1), (&self.negatives, 0)] {
            for p in pairs {
                writeln!(f, "{}\t{}\t{label}\t{}", p.a, p.b, p.group)?;
            }
        }
        f.flush()?;
        for d in &self.implicit_negatives {
            std::fs::write(dir.join(format!("{stem}.neg{}.json", d.group_id)), serde_json::to_string_pretty(d)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.tsv"));
        let bad = |line: usize, m: &str| Error::Format { path: format!("{}:{line}", path.display()), message: m.to_string() };
        let mut proto = PairProtocol::default();
        for (i, line) in BufReader::new(std::fs::File::open(&path)?).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(i + 1, "expected four tab-separated columns"));
            }
            let group = cols[3].parse().map_err(|_| bad(i + 1, "bad group id"))?;
            let pair = Pair { a: cols[0].into(), b: cols[1].into(), group };
            match cols[2] {
                "1" => proto.positives.push(pair),
                "0" => proto.negatives.push(pair),
                _ => return Err(bad(i + 1, "label must be 0 or 1")),
            }
        }
        let prefix = format!("{stem}.neg");
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(&prefix) && n.ends_with(".json")))
            .collect();
        files.sort();
        for f in files {
            proto.implicit_negatives.push(serde_json::from_str(&std::fs::read_to_string(&f)?)?);
        }
        proto.seed = proto.implicit_negatives.first().map_or(0, |d| d.seed);
        Ok(proto)
    }
}

fn unordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// `pos` distinct pairs from one person's images. The first element walks a
/// shuffled order, so no image leads two pairs until every image has led one.
fn person_positives(p: &Person, pos: usize, group: u32, rng: &mut Rng) -> Vec<Pair> {
    let mut order: Vec<&String> = p.images.iter().collect();
    order.shuffle(rng);
    let mut used = BTreeSet::new();
    let mut out = Vec::with_capacity(pos);
    let k = order.len();
    let mut r = 0;
    while out.len() < pos {
        let a = order[r % k];
        r += 1;
        let mut partners: Vec<&String> = order.iter().copied().filter(|b| *b != a && !used.contains(&unordered(a, b))).collect();
        if partners.is_empty() {
            continue;
        }
        partners.sort();
        let b = partners[rng.random_range(0..partners.len())];
        used.insert(unordered(a, b));
        out.push(Pair { a: a.clone(), b: b.clone(), group });
    }
    out
}

/// Per group: `n_people` people, `pos_per_person` distinct positive pairs
/// each, and every cross-person pair of one random image per person as the
/// implicit negative set.
pub fn build_rbweb_protocol(grouped: &GroupedPeople, n_people: usize, pos_per_person: usize, seed: u64) -> Result<PairProtocol> {
    let mut proto = PairProtocol { seed, ..Default::default() };
    for (&g, people) in grouped {
        let mut rng = seeding::rng_for(seed, &format!("rbweb-group-{g}"));
        let eligible: Vec<&Person> = people
            .iter()
            .filter(|p| {
                let k = p.images.len();
                k >= 2 && k * (k - 1) / 2 >= pos_per_person
            })
            .collect();
        if eligible.len() < n_people {
            return Err(Error::Protocol {
                group: g,
                message: format!("{} people with enough images, {n_people} required", eligible.len()),
            });
        }
        let chosen: Vec<&Person> = index::sample(&mut rng, eligible.len(), n_people).into_iter().map(|i| eligible[i]).collect();
        let mut reps = Vec::with_capacity(n_people);
        for p in &chosen {
            proto.positives.extend(person_positives(p, pos_per_person, g, &mut rng));
            reps.push(p.images[rng.random_range(0..p.images.len())].clone());
        }
        proto.implicit_negatives.push(ImplicitNegatives { group_id: g, representative_images: reps, seed });
    }
    Ok(proto)
}

/// Per group: `n_pairs` random positive pairs and the `n_pairs` most similar
/// cross-person pairs among `candidate_factor * n_pairs` random candidates.
pub fn build_rfw_style_protocol(
    grouped: &GroupedPeople,
    n_pairs: usize,
    candidate_factor: usize,
    similarity: &dyn Fn(&str, &str) -> f64,
    seed: u64,
) -> Result<PairProtocol> {
    let mut proto = PairProtocol { seed, ..Default::default() };
    for (&g, people) in grouped {
        let mut rng = seeding::rng_for(seed, &format!("rfw-group-{g}"));
        let err = |m: String| Error::Protocol { group: g, message: m };
        let multi: Vec<&Person> = people.iter().filter(|p| p.images.len() >= 2).collect();
        let capacity: usize = multi.iter().map(|p| p.images.len() * (p.images.len() - 1) / 2).sum();
        if capacity < n_pairs {
            return Err(err(format!("only {capacity} distinct positive pairs available, {n_pairs} required")));
        }
        let mut seen = BTreeSet::new();
        while seen.len() < n_pairs {
            let p = multi[rng.random_range(0..multi.len())];
            let i = index::sample(&mut rng, p.images.len(), 2);
            let (a, b) = unordered(&p.images[i.index(0)], &p.images[i.index(1)]);
            if seen.insert((a.clone(), b.clone())) {
                proto.positives.push(Pair { a, b, group: g });
            }
        }
        let total_images: usize = people.iter().map(|p| p.images.len()).sum();
        let same: usize = people.iter().map(|p| p.images.len() * p.images.len().saturating_sub(1) / 2).sum();
        let cross = total_images * total_images.saturating_sub(1) / 2 - same;
        if cross < n_pairs {
            return Err(err(format!("only {cross} cross-person pairs available, {n_pairs} required")));
        }
        let want = (n_pairs * candidate_factor.max(1)).min(cross);
        let mut cands: Vec<(String, String)> = Vec::with_capacity(want);
        let mut cand_seen = BTreeSet::new();
        while cands.len() < want {
            let i = index::sample(&mut rng, people.len(), 2);
            let (p, q) = (&people[i.index(0)], &people[i.index(1)]);
            if p.images.is_empty() || q.images.is_empty() {
                continue;
            }
            let a = &p.images[rng.random_range(0..p.images.len())];
            let b = &q.images[rng.random_range(0..q.images.len())];
            let key = unordered(a, b);
            if cand_seen.insert(key.clone()) {
                cands.push(key);
            }
        }
        let mut scored: Vec<(f64, usize)> = cands.iter().enumerate().map(|(i, (a, b))| (similarity(a, b), i)).collect();
        scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        for &(_, i) in scored.iter().take(n_pairs) {
            let (a, b) = cands[i].clone();
            proto.negatives.push(Pair { a, b, group: g });
        }
    }
    Ok(proto)
}

/// Unit-normalised embeddings keyed by image id.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    pub ids: Vec<String>,
    pub rows: Array2<f64>,
    index: HashMap<String, usize>,
    pub failed: BTreeMap<String, String>,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, rows: Array2<f64>) -> Self {
        let mut rows = rows;
        for mut r in rows.rows_mut() {
            let n = r.dot(&r).sqrt();
            if n > 0.0 {
                r.mapv_inplace(|v| v / n);
            }
        }
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        EmbeddingTable { ids, rows, index, failed: BTreeMap::new() }
    }

    /// Embeds every image of `ids` once; images that fail to load are
    /// remembered so scoring can name the affected pair.
    pub fn build(ids: &[String], load: &dyn Fn(&str) -> Result<image::RgbImage>, embed: &dyn Fn(&[image::RgbImage]) -> Array2<f64>, chunk: usize) -> Self {
        let mut ok_ids = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        let mut dim = 0;
        let mut failed = BTreeMap::new();
        for part in ids.chunks(chunk.max(1)) {
            let mut imgs = Vec::new();
            for id in part {
                match load(id) {
                    Ok(im) => {
                        imgs.push(im);
                        ok_ids.push(id.clone());
                    }
                    Err(e) => {
                        failed.insert(id.clone(), e.to_string());
                    }
                }
            }
            if !imgs.is_empty() {
                let e = embed(&imgs);
                dim = e.ncols();
                rows.extend(e.iter());
            }
        }
        let n = ok_ids.len();
        let mut t = Self::new(ok_ids, Array2::from_shape_vec((n, dim), rows).unwrap());
        t.failed = failed;
        t
    }

    pub fn get(&self, id: &str) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.index.get(id).map(|&i| self.rows.row(i))
    }

    pub fn score(&self, a: &str, b: &str) -> Result<f64> {
        match (self.get(a), self.get(b)) {
            (Some(x), Some(y)) => Ok(x.dot(&y).clamp(-1.0, 1.0)),
            _ => {
                let missing = if self.get(a).is_none() { a } else { b };
                let why = self.failed.get(missing).cloned().unwrap_or_else(|| format!("no embedding for {missing}"));
                Err(Error::Scoring { a: a.to_string(), b: b.to_string(), message: why })
            }
        }
    }

    /// `EMB1` cache: 16-byte header (magic, count, dim, reserved), f32
    /// rows, then NUL-terminated ids.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (n, d) = self.rows.dim();
        let mut b = Vec::with_capacity(16 + n * d * 4);
        b.extend_from_slice(b"EMB1");
        b.extend_from_slice(&(n as u32).to_le_bytes());
        b.extend_from_slice(&(d as u32).to_le_bytes());
        b.extend_from_slice(&0u32.to_le_bytes());
        for v in self.rows.iter() {
            b.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for id in &self.ids {
            b.extend_from_slice(id.as_bytes());
            b.push(0);
        }
        crate::checkpoint::write_atomic(path, &b)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::Format { path: path.display().to_string(), message: m.to_string() };
        if bytes.len() < 16 || &bytes[..4] != b"EMB1" {
            return Err(bad("not an EMB1 cache"));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (n, d) = (u(4), u(8));
        let end = 16 + n * d * 4;
        if bytes.len() < end {
            return Err(bad("truncated"));
        }
        let rows: Vec<f64> = bytes[16..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let ids: Vec<String> = bytes[end..]
            .split(|&c| c == 0)
            .take(n)
            .map(|s| String::from_utf8(s.to_vec()).map_err(|_| bad("id is not UTF-8")))
            .collect::<Result<_>>()?;
        if ids.len() != n {
            return Err(bad("missing ids"));
        }
        Ok(Self::new(ids, Array2::from_shape_vec((n, d), rows).unwrap()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

/// Streams the scores of an implicit negative set in chunks of `chunk` pairs.
pub fn stream_implicit(table: &EmbeddingTable, d: &ImplicitNegatives, chunk: usize, sink: &mut dyn FnMut(&[f64])) -> Result<()> {
    let reps = &d.representative_images;
    let mut buf = Vec::with_capacity(chunk.clamp(1, 1 << 16));
    for (i, j) in d.pairs() {
        buf.push(table.score(&reps[i], &reps[j])?);
        if buf.len() == chunk.max(1) {
            sink(&buf);
            buf.clear();
        }
    }
    if !buf.is_empty() {
        sink(&buf);
    }
    Ok(())
}

/// Cosine similarity of every pair, grouped. Implicit negatives are expanded
/// through [`stream_implicit`].
pub fn score_pairs(table: &EmbeddingTable, protocol: &PairProtocol, chunk: usize) -> Result<BTreeMap<u32, GroupScores>> {
    if chunk == 0 {
        return Err(arg("chunk size must be at least 1"));
    }
    let mut out: BTreeMap<u32, GroupScores> = protocol.groups().into_iter().map(|g| (g, GroupScores::default())).collect();
    for p in &protocol.positives {
        let s = table.score(&p.a, &p.b)?;
        out.get_mut(&p.group).unwrap().positives.push(s);
    }
    for p in &protocol.negatives {
        let s = table.score(&p.a, &p.b)?;
        out.get_mut(&p.group).unwrap().negatives.push(s);
    }
    for d in &protocol.implicit_negatives {
        let neg = &mut out.get_mut(&d.group_id).unwrap().negatives;
        stream_implicit(table, d, chunk, &mut |c| neg.extend_from_slice(c))?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LfwAccuracy {
    /// Mean held-out accuracy over the folds, percent.
    pub cross_validated: f64,
    /// Accuracy of the single best threshold on all pairs, percent.
    pub best_threshold: f64,
}

/// Best threshold and direction on `(score, is_positive)` items; returns
/// `(threshold, positive_above, correct)`.
fn fit_threshold(items: &mut [(f64, bool)]) -> (f64, bool, usize) {
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = items.len();
    let total_pos = items.iter().filter(|i| i.1).count();
    // Threshold below everything: all predicted positive (above) / negative.
    let mut best = (f64::NEG_INFINITY, true, total_pos);
    if n - total_pos > best.2 {
        best = (f64::NEG_INFINITY, false, n - total_pos);
    }
    let (mut neg_below, mut pos_below) = (0usize, 0usize);
    for i in 0..n {
        if items[i].1 {
            pos_below += 1;
        } else {
            neg_below += 1;
        }
        if i + 1 < n && items[i + 1].0 == items[i].0 {
            continue;
        }
        let t = if i + 1 < n { 0.5 * (items[i].0 + items[i + 1].0) } else { f64::INFINITY };
        let above = neg_below + (total_pos - pos_below);
        let below = pos_below + (n - total_pos - neg_below);
        if above > best.2 {
            best = (t, true, above);
        }
        if below > best.2 {
            best = (t, false, below);
        }
    }
    best
}

fn predict(score: f64, t: f64, above: bool) -> bool {
    if above {
        score >= t
    } else {
        score < t
    }
}

/// LFW-style accuracy: seeded shuffle, contiguous folds, threshold (and
/// direction) fitted on the other folds and applied to the held-out one.
pub fn lfw_accuracy(pos: &[f64], neg: &[f64], folds: usize, seed: u64) -> Result<LfwAccuracy> {
    if pos.is_empty() || neg.is_empty() {
        return Err(arg("accuracy needs positive and negative scores"));
    }
    if folds < 2 {
        return Err(arg("at least two folds are required"));
    }
    let mut items: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    let n = items.len();
    let best = fit_threshold(&mut items.clone()).2 as f64 / n as f64 * 100.0;
    items.shuffle(&mut seeding::rng_for(seed, "lfw-folds"));
    let folds = folds.min(n);
    let mut accs = Vec::with_capacity(folds);
    for f in 0..folds {
        let (lo, hi) = (f * n / folds, (f + 1) * n / folds);
        let mut train: Vec<(f64, bool)> = items[..lo].iter().chain(&items[hi..]).copied().collect();
        let (t, above, _) = fit_threshold(&mut train);
        let test = &items[lo..hi];
        let correct = test.iter().filter(|(s, y)| predict(*s, t, above) == *y).count();
        accs.push(correct as f64 / test.len().max(1) as f64 * 100.0);
    }
    Ok(LfwAccuracy { cross_validated: accs.iter().sum::<f64>() / folds as f64, best_threshold: best })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Fraction of `sorted_scores` at or above `t`.
fn frac_at_or_above(sorted_scores: &[f64], t: f64) -> f64 {
    let below = sorted_scores.partition_point(|&s| s < t);
    (sorted_scores.len() - below) as f64 / sorted_scores.len() as f64
}

/// `steps` evenly spaced thresholds in `[lo, hi]`.
pub fn roc_sweep(pos: &[f64], neg: &[f64], lo: f64, hi: f64, steps: usize) -> Result<RocCurve> {
    if pos.is_empty() || neg.is_empty() {
        return Err(arg("ROC needs positive and negative scores"));
    }
    if !(lo < hi) || steps < 2 {
        return Err(arg("ROC sweep needs lo < hi and at least two steps"));
    }
    let (p, n) = (sorted(pos), sorted(neg));
    let thresholds: Vec<f64> = (0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect();
    Ok(RocCurve {
        tpr: thresholds.iter().map(|&t| frac_at_or_above(&p, t)).collect(),
        fpr: thresholds.iter().map(|&t| frac_at_or_above(&n, t)).collect(),
        thresholds,
    })
}

/// One point per distinct score, ascending thresholds.
pub fn exact_roc(pos: &[f64], neg: &[f64]) -> Result<RocCurve> {
    if pos.is_empty() || neg.is_empty() {
        return Err(arg("ROC needs positive and negative scores"));
    }
    let (p, n) = (sorted(pos), sorted(neg));
    let mut thresholds: Vec<f64> = p.iter().chain(&n).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    Ok(RocCurve {
        tpr: thresholds.iter().map(|&t| frac_at_or_above(&p, t)).collect(),
        fpr: thresholds.iter().map(|&t| frac_at_or_above(&n, t)).collect(),
        thresholds,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TprMode {
    Exact,
    Sweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TprAtFpr {
    /// Percent.
    pub tpr: f64,
    pub mode: TprMode,
    /// Fewer negatives than `1 / target`: the target is below the ROC's
    /// resolution.
    pub below_resolution: bool,
}

fn check_target(target: f64) -> Result<()> {
    if !(target > 0.0 && target < 1.0) {
        return Err(arg("FPR target must lie in (0, 1)"));
    }
    Ok(())
}

/// Number of negatives allowed above the threshold at `target`.
fn allowed_false_positives(target: f64, n_neg: u64) -> u64 {
    (target * n_neg as f64 + 1e-9).floor() as u64
}

/// TPR given the `(k+1)`-th largest negative (`None` when fewer exist).
fn tpr_given_cut(pos: &[f64], cut: Option<f64>) -> f64 {
    let hits = match cut {
        Some(c) => pos.iter().filter(|&&s| s > c).count(),
        None => pos.len(),
    };
    hits as f64 / pos.len() as f64 * 100.0
}

/// Exact sort-based TPR at the smallest threshold whose FPR stays within
/// `target`: with `k = floor(target * negatives)`, positives scoring strictly
/// above the `(k+1)`-th largest negative count as hits.
pub fn tpr_at_fpr(pos: &[f64], neg: &[f64], target: f64) -> Result<TprAtFpr> {
    check_target(target)?;
    if pos.is_empty() || neg.is_empty() {
        return Err(arg("TPR@FPR needs positive and negative scores"));
    }
    let k = allowed_false_positives(target, neg.len() as u64) as usize;
    let mut n = neg.to_vec();
    let cut = if k < n.len() {
        let (_, kth, _) = n.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
        Some(*kth)
    } else {
        None
    };
    Ok(TprAtFpr { tpr: tpr_given_cut(pos, cut), mode: TprMode::Exact, below_resolution: (neg.len() as f64) < 1.0 / target })
}

/// The same rule restricted to a swept curve's thresholds.
pub fn tpr_at_fpr_sweep(curve: &RocCurve, target: f64, n_neg: u64) -> Result<TprAtFpr> {
    check_target(target)?;
    let tpr = curve
        .thresholds
        .iter()
        .enumerate()
        .filter(|&(i, _)| curve.fpr[i] <= target)
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0.0, |(i, _)| curve.tpr[i] * 100.0);
    Ok(TprAtFpr { tpr, mode: TprMode::Sweep, below_resolution: (n_neg as f64) < 1.0 / target })
}

#[derive(Clone, Copy, PartialEq)]
struct Score(f64);

impl Eq for Score {}

impl PartialOrd for Score {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Score {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&o.0)
    }
}

/// Keeps the largest negatives of a stream, enough to answer exact TPR@FPR
/// queries up to `max_target` without storing every score.
pub struct NegativeTail {
    keep: usize,
    heap: BinaryHeap<Reverse<Score>>,
    pub count: u64,
}

impl NegativeTail {
    pub fn new(expected_count: u64, max_target: f64) -> Self {
        NegativeTail { keep: allowed_false_positives(max_target, expected_count) as usize + 1, heap: BinaryHeap::new(), count: 0 }
    }

    pub fn push(&mut self, scores: &[f64]) {
        for &s in scores {
            self.count += 1;
            if self.heap.len() < self.keep {
                self.heap.push(Reverse(Score(s)));
            } else if s > self.heap.peek().unwrap().0 .0 {
                self.heap.pop();
                self.heap.push(Reverse(Score(s)));
            }
        }
    }

    pub fn tpr_at_fpr(&self, pos: &[f64], target: f64) -> Result<TprAtFpr> {
        check_target(target)?;
        let k = allowed_false_positives(target, self.count) as usize;
        if k >= self.keep && (self.count as usize) > self.keep {
            return Err(arg("target above the retained tail"));
        }
        let mut desc: Vec<f64> = self.heap.iter().map(|r| r.0 .0).collect();
        desc.sort_by(|a, b| b.total_cmp(a));
        Ok(TprAtFpr { tpr: tpr_given_cut(pos, desc.get(k).copied()), mode: TprMode::Exact, below_resolution: (self.count as f64) < 1.0 / target })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Cross-validated accuracy, percent.
    pub accuracy: Option<f64>,
    pub best_threshold_accuracy: Option<f64>,
    /// Keyed by the FPR target as written, e.g. `"1e-3"`.
    pub tpr_at_fpr: BTreeMap<String, TprAtFpr>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub per_group: BTreeMap<u32, GroupMetrics>,
    pub avg: Option<f64>,
    /// Sample standard deviation (n - 1) of the per-group accuracies.
    pub std: Option<f64>,
}

/// Mean and sample (n - 1) standard deviation; zero spread for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn report(per_group: BTreeMap<u32, GroupMetrics>) -> Result<VerificationReport> {
    if per_group.is_empty() {
        return Err(arg("a report needs at least one group"));
    }
    let accs: Vec<f64> = per_group.values().filter_map(|m| m.accuracy).collect();
    let (avg, std) = if accs.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&accs);
        (Some(m), Some(s))
    };
    Ok(VerificationReport { per_group, avg, std })
}

impl VerificationReport {
    /// Rows `group,metric,value,mode`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["group", "metric", "value", "mode"])?;
        for (g, m) in &self.per_group {
            let g = g.to_string();
            if let Some(a) = m.accuracy {
                w.write_record([g.as_str(), "accuracy", &a.to_string(), "cross_validated"])?;
            }
            if let Some(a) = m.best_threshold_accuracy {
                w.write_record([g.as_str(), "accuracy", &a.to_string(), "best_threshold"])?;
            }
            for (k, t) in &m.tpr_at_fpr {
                let mode = match t.mode {
                    TprMode::Exact => "exact",
                    TprMode::Sweep => "sweep",
                };
                let mode = if t.below_resolution { format!("{mode};below_resolution") } else { mode.to_string() };
                w.write_record([g.as_str(), &format!("tpr@fpr={k}"), &t.tpr.to_string(), &mode])?;
            }
        }
        if let (Some(a), Some(s)) = (self.avg, self.std) {
            w.write_record(["all", "avg", &a.to_string(), "cross_validated"])?;
            w.write_record(["all", "std", &s.to_string(), "cross_validated"])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).unwrap())
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        crate::checkpoint::write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv()?.as_bytes())?;
        crate::checkpoint::write_atomic(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Accuracy plus TPR at each target for every group of `scores`.
pub fn evaluate_scores(scores: &BTreeMap<u32, GroupScores>, targets: &[f64], folds: usize, seed: u64) -> Result<VerificationReport> {
    let mut per = BTreeMap::new();
    for (&g, s) in scores {
        let acc = lfw_accuracy(&s.positives, &s.negatives, folds, seed)?;
        let mut m = GroupMetrics { accuracy: Some(acc.cross_validated), best_threshold_accuracy: Some(acc.best_threshold), ..Default::default() };
        for &t in targets {
            m.tpr_at_fpr.insert(format!("{t:e}"), tpr_at_fpr(&s.positives, &s.negatives, t)?);
        }
        per.insert(g, m);
    }
    report(per)
}

/// Exact TPR at each target without materializing the negatives: they are
/// streamed through a [`NegativeTail`]. Accuracy needs every score and is
/// left empty.
pub fn evaluate_streaming(table: &EmbeddingTable, protocol: &PairProtocol, targets: &[f64], chunk: usize) -> Result<VerificationReport> {
    let max_target = targets.iter().copied().fold(0.0, f64::max);
    let mut per = BTreeMap::new();
    for g in protocol.groups() {
        let pos = protocol.positives.iter().filter(|p| p.group == g).map(|p| table.score(&p.a, &p.b)).collect::<Result<Vec<_>>>()?;
        let mut tail = NegativeTail::new(protocol.negative_count(g), max_target);
        for p in protocol.negatives.iter().filter(|p| p.group == g) {
            tail.push(&[table.score(&p.a, &p.b)?]);
        }
        for d in protocol.implicit_negatives.iter().filter(|d| d.group_id == g) {
            stream_implicit(table, d, chunk, &mut |c| tail.push(c))?;
        }
        let mut m = GroupMetrics::default();
        for &t in targets {
            m.tpr_at_fpr.insert(format!("{t:e}"), tail.tpr_at_fpr(&pos, t)?);
        }
        per.insert(g, m);
    }
    report(per)
}

#[cfg(test)]
mod tests;
