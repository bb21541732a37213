//! Dataset model, file formats, splits and episodic task sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tapegrad::Tensor;

use crate::config::Mode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Sketch,
    Photo,
}

/// One feature vector. A sketch's `pair_id` names its true-match photo; a
/// photo's `pair_id` is its own pairing key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: u64,
    pub domain: Domain,
    pub category: String,
    #[serde(default)]
    pub user: Option<String>,
    pub pair_id: u64,
    pub features: Vec<f64>,
}

/// A photo and the sketches drawn from it (by one unit's users).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub pair_id: u64,
    pub photo: usize,
    pub sketches: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    items: Vec<Item>,
    by_id: HashMap<u64, usize>,
    photo_by_pair: HashMap<u64, usize>,
}

impl Dataset {
    /// Checks ids are unique, features share one finite width, and every
    /// sketch's pair id resolves to exactly one photo of the same category.
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(items.len());
        let mut photo_by_pair = HashMap::new();
        let width = items.first().map(|i| i.features.len());
        for (idx, item) in items.iter().enumerate() {
            if by_id.insert(item.id, idx).is_some() {
                return Err(Error::Integrity(format!("duplicate item id {}", item.id)));
            }
            if Some(item.features.len()) != width || item.features.is_empty() {
                return Err(Error::Integrity(format!(
                    "item {} has {} features, expected {}",
                    item.id,
                    item.features.len(),
                    width.unwrap_or(0)
                )));
            }
            if item.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integrity(format!(
                    "item {} has non-finite features",
                    item.id
                )));
            }
            if item.domain == Domain::Photo && photo_by_pair.insert(item.pair_id, idx).is_some() {
                return Err(Error::Integrity(format!(
                    "pair_id {} is shared by more than one photo",
                    item.pair_id
                )));
            }
        }
        for item in items.iter().filter(|i| i.domain == Domain::Sketch) {
            match photo_by_pair.get(&item.pair_id) {
                None => {
                    return Err(Error::Integrity(format!(
                        "sketch {} has dangling pair_id {}",
                        item.id, item.pair_id
                    )))
                }
                Some(&p) if items[p].category != item.category => {
                    return Err(Error::Integrity(format!(
                        "sketch {} (category {}) pairs with photo {} of category {}",
                        item.id, item.category, items[p].id, items[p].category
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Self {
            items,
            by_id,
            photo_by_pair,
        })
    }

    pub fn empty() -> Self {
        Self {
            items: Vec::new(),
            by_id: HashMap::new(),
            photo_by_pair: HashMap::new(),
        }
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, idx: usize) -> &Item {
        &self.items[idx]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    pub fn photo_for_pair(&self, pair_id: u64) -> Option<usize> {
        self.photo_by_pair.get(&pair_id).copied()
    }

    pub fn feature_dim(&self) -> usize {
        self.items.first().map_or(0, |i| i.features.len())
    }

    pub fn categories(&self) -> BTreeSet<String> {
        self.items.iter().map(|i| i.category.clone()).collect()
    }

    /// Stacks the feature vectors of the given items into `[n, D_in]`.
    pub fn features(&self, idxs: &[usize]) -> Tensor {
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(idxs.len() * d);
        for &i in idxs {
            data.extend_from_slice(&self.items[i].features);
        }
        Tensor::new([idxs.len(), d], data).expect("rows share one width")
    }

    /// Pairs grouped by task unit (category or sketching user), in pair-id order.
    pub fn units(&self, mode: Mode) -> BTreeMap<String, Vec<Pair>> {
        let mut grouped: BTreeMap<String, BTreeMap<u64, Vec<usize>>> = BTreeMap::new();
        for (idx, item) in self.items.iter().enumerate() {
            if item.domain != Domain::Sketch {
                continue;
            }
            let unit = match mode {
                Mode::Category => item.category.clone(),
                Mode::User => match &item.user {
                    Some(u) => u.clone(),
                    None => continue,
                },
            };
            grouped
                .entry(unit)
                .or_default()
                .entry(item.pair_id)
                .or_default()
                .push(idx);
        }
        grouped
            .into_iter()
            .map(|(unit, pairs)| {
                let pairs = pairs
                    .into_iter()
                    .map(|(pair_id, sketches)| Pair {
                        pair_id,
                        photo: self.photo_by_pair[&pair_id],
                        sketches,
                    })
                    .collect();
                (unit, pairs)
            })
            .collect()
    }

    /// Reads line-delimited JSON items; blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut items = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let item: Item = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })?;
            items.push(item);
        }
        Self::new(items)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_lines(path, self.items.iter())
    }
}

fn write_lines<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(&row).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SemanticRow {
    category: String,
    vector: Vec<f64>,
}

/// Category -> semantic vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SemanticTable {
    vectors: BTreeMap<String, Vec<f64>>,
}

impl SemanticTable {
    pub fn new(vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let dim = vectors.values().next().map_or(0, Vec::len);
        for (cat, v) in &vectors {
            if v.len() != dim || dim == 0 {
                return Err(Error::Integrity(format!(
                    "semantic vector for {cat} has {} entries, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().all(|&x| x == 0.0) || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Integrity(format!(
                    "semantic vector for {cat} is zero or non-finite"
                )));
            }
        }
        Ok(Self { vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.values().next().map_or(0, Vec::len)
    }

    pub fn get(&self, category: &str) -> Option<&[f64]> {
        self.vectors.get(category).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Errors unless every category of `data` has a vector.
    pub fn check_covers(&self, data: &Dataset) -> Result<()> {
        for cat in data.categories() {
            if !self.vectors.contains_key(&cat) {
                return Err(Error::Integrity(format!(
                    "semantic table has no vector for category {cat}"
                )));
            }
        }
        Ok(())
    }

    /// Stacks the vectors of the given categories.
    pub fn rows<'a>(&self, categories: impl IntoIterator<Item = &'a str>) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut n = 0;
        for c in categories {
            let v = self.get(c).ok_or_else(|| {
                Error::Integrity(format!("semantic table has no vector for category {c}"))
            })?;
            data.extend_from_slice(v);
            n += 1;
        }
        Ok(Tensor::new([n, self.dim()], data)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vectors = BTreeMap::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: SemanticRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })?;
            if vectors.insert(row.category.clone(), row.vector).is_some() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: format!("duplicate category {}", row.category),
                });
            }
        }
        Self::new(vectors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_lines(
            path,
            self.vectors.iter().map(|(c, v)| SemanticRow {
                category: c.clone(),
                vector: v.clone(),
            }),
        )
    }
}

/// Training and testing units plus, per test unit, the adaptation pairs and
/// the held-out evaluation pairs (both as photo pair ids).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub mode: Mode,
    pub train_units: Vec<String>,
    pub test_units: Vec<String>,
    pub finetune: BTreeMap<String, Vec<u64>>,
    pub evaluation: BTreeMap<String, Vec<u64>>,
}

impl Split {
    pub fn new(
        mode: Mode,
        train_units: Vec<String>,
        test_units: Vec<String>,
        finetune: BTreeMap<String, Vec<u64>>,
        evaluation: BTreeMap<String, Vec<u64>>,
    ) -> Result<Self> {
        let s = Self {
            mode,
            train_units,
            test_units,
            finetune,
            evaluation,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<&String> = self.train_units.iter().collect();
        if let Some(u) = self.test_units.iter().find(|u| train.contains(u)) {
            return Err(Error::Integrity(format!(
                "unit {u} is both a training and a testing unit"
            )));
        }
        for u in &self.test_units {
            let ft: BTreeSet<u64> = self
                .finetune
                .get(u)
                .into_iter()
                .flatten()
                .copied()
                .collect();
            if let Some(p) = self
                .evaluation
                .get(u)
                .into_iter()
                .flatten()
                .find(|p| ft.contains(p))
            {
                return Err(Error::Integrity(format!(
                    "pair {p} of unit {u} is in both the adaptation and evaluation sets"
                )));
            }
        }
        for u in self.finetune.keys().chain(self.evaluation.keys()) {
            if !self.test_units.contains(u) {
                return Err(Error::Integrity(format!(
                    "held-out sets listed for non-test unit {u}"
                )));
            }
        }
        Ok(())
    }

    /// Checks every listed unit and pair exists in `data` under this split's mode.
    pub fn check_against(&self, data: &Dataset) -> Result<()> {
        let units = data.units(self.mode);
        for u in self.train_units.iter().chain(&self.test_units) {
            if !units.contains_key(u) {
                return Err(Error::Integrity(format!(
                    "split unit {u} has no pairs in the dataset"
                )));
            }
        }
        for (u, ids) in self.finetune.iter().chain(&self.evaluation) {
            let known: BTreeSet<u64> = units[u].iter().map(|p| p.pair_id).collect();
            if let Some(p) = ids.iter().find(|p| !known.contains(p)) {
                return Err(Error::Integrity(format!(
                    "split lists pair {p} not found in unit {u}"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Split = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Index of each training category, for the classification head.
    pub fn class_index(&self) -> BTreeMap<String, usize> {
        let mut units = self.train_units.clone();
        units.sort();
        units.into_iter().enumerate().map(|(i, u)| (u, i)).collect()
    }
}

/// Item indices of one triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// A sketch-photo pair drawn from a different user than the episode's.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StylePair {
    pub sketch: usize,
    pub photo: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskEpisode {
    pub unit: String,
    pub support: Vec<Triplet>,
    pub validation: Vec<Triplet>,
    /// User mode only: pairs of other users for the style triplets.
    pub style_negatives: Vec<StylePair>,
}

/// Draws training episodes from the training units of a split.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    mode: Mode,
    units: Vec<(String, Vec<Pair>)>,
}

/// How many times an undersized unit is redrawn before giving up.
pub const MAX_SAMPLING_ATTEMPTS: usize = 64;

impl TaskSampler {
    pub fn new(data: &Dataset, split: &Split) -> Result<Self> {
        let mut all = data.units(split.mode);
        let mut units = Vec::with_capacity(split.train_units.len());
        for u in &split.train_units {
            let pairs = all
                .remove(u)
                .ok_or_else(|| Error::Integrity(format!("training unit {u} has no pairs")))?;
            units.push((u.clone(), pairs));
        }
        if units.is_empty() {
            return Err(Error::Sampling("split has no training units".into()));
        }
        Ok(Self {
            mode: split.mode,
            units,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn unit_names(&self) -> Vec<&str> {
        self.units.iter().map(|(u, _)| u.as_str()).collect()
    }

    /// One episode with `k` support and `k` validation triplets.
    ///
    /// Units with fewer than `2k` pairs are redrawn up to
    /// [`MAX_SAMPLING_ATTEMPTS`] times.
    pub fn sample(&self, k: usize, rng: &mut impl Rng) -> Result<TaskEpisode> {
        if k == 0 {
            return Err(Error::Sampling("episode size must be at least 1".into()));
        }
        for _ in 0..MAX_SAMPLING_ATTEMPTS {
            let u = rng.gen_range(0..self.units.len());
            let (name, pairs) = &self.units[u];
            if pairs.len() < 2 * k || pairs.len() < k + 1 {
                continue;
            }
            let chosen: Vec<&Pair> = pairs.choose_multiple(rng, 2 * k).collect();
            let triplets: Vec<Triplet> = chosen
                .iter()
                .map(|p| triplet_for(p, pairs, rng))
                .collect::<Result<_>>()?;
            let validation = triplets[k..].to_vec();
            let support = triplets[..k].to_vec();
            let style_negatives = match self.mode {
                Mode::Category => Vec::new(),
                Mode::User => self.style_negatives(u, k, rng)?,
            };
            return Ok(TaskEpisode {
                unit: name.clone(),
                support,
                validation,
                style_negatives,
            });
        }
        let best = self.units.iter().map(|(_, p)| p.len()).max().unwrap_or(0);
        Err(Error::Sampling(format!(
            "no training unit has the {} pairs needed for K = {k} (largest has {best}) after {MAX_SAMPLING_ATTEMPTS} draws",
            2 * k
        )))
    }

    fn style_negatives(
        &self,
        own: usize,
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<StylePair>> {
        if self.units.len() < 2 {
            return Err(Error::Sampling(
                "style triplets need at least two training users".into(),
            ));
        }
        (0..count)
            .map(|_| {
                let mut other = rng.gen_range(0..self.units.len() - 1);
                if other >= own {
                    other += 1;
                }
                let pairs = &self.units[other].1;
                let pair = pairs.choose(rng).ok_or_else(|| {
                    Error::Sampling(format!("user {} has no pairs", self.units[other].0))
                })?;
                Ok(StylePair {
                    sketch: *pair.sketches.choose(rng).expect("pairs have sketches"),
                    photo: pair.photo,
                })
            })
            .collect()
    }
}

/// A sketch of `pair`, its photo, and a photo of a different pair of the same unit.
fn triplet_for(pair: &Pair, unit: &[Pair], rng: &mut impl Rng) -> Result<Triplet> {
    if unit.len() < 2 {
        return Err(Error::Sampling(format!(
            "pair {} has no other photo in its unit to use as a negative",
            pair.pair_id
        )));
    }
    let anchor = *pair
        .sketches
        .choose(rng)
        .ok_or_else(|| Error::Sampling(format!("pair {} has no sketch", pair.pair_id)))?;
    let mut j = rng.gen_range(0..unit.len() - 1);
    let own = unit
        .iter()
        .position(|p| p.pair_id == pair.pair_id)
        .ok_or_else(|| Error::Invalid(format!("pair {} is not in its unit", pair.pair_id)))?;
    if j >= own {
        j += 1;
    }
    Ok(Triplet {
        anchor,
        positive: pair.photo,
        negative: unit[j].photo,
    })
}

/// The `k` adaptation triplets of a test unit for a given seed. Negatives are
/// other photos of the same adaptation set. The result depends only on
/// `(data, split, unit, k, seed)`, never on the method being evaluated.
pub fn adaptation_set(
    data: &Dataset,
    split: &Split,
    unit: &str,
    k: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    use rand::SeedableRng;
    if k == 0 {
        return Err(Error::Invalid("adaptation needs at least one pair".into()));
    }
    let ids = split
        .finetune
        .get(unit)
        .ok_or_else(|| Error::Invalid(format!("unit {unit} has no adaptation set")))?;
    if ids.is_empty() {
        return Err(Error::Invalid(format!(
            "unit {unit} has an empty adaptation set"
        )));
    }
    if k > ids.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds the {} adaptation pairs of unit {unit}",
            ids.len()
        )));
    }
    let units = data.units(split.mode);
    let all = units
        .get(unit)
        .ok_or_else(|| Error::Integrity(format!("unit {unit} has no pairs")))?;
    let ft: Vec<Pair> = ids
        .iter()
        .map(|id| {
            all.iter()
                .find(|p| p.pair_id == *id)
                .cloned()
                .ok_or_else(|| {
                    Error::Integrity(format!("adaptation pair {id} missing from unit {unit}"))
                })
        })
        .collect::<Result<_>>()?;
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stable_hash(unit), k as u64]));
    let chosen: Vec<&Pair> = ft.choose_multiple(&mut rng, k).collect();
    chosen
        .into_iter()
        .map(|p| triplet_for(p, &ft, &mut rng))
        .collect()
}

/// Queries (sketches) and gallery (photos) of a test unit's evaluation pairs.
pub fn evaluation_set(
    data: &Dataset,
    split: &Split,
    unit: &str,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let ids: BTreeSet<u64> = split
        .evaluation
        .get(unit)
        .ok_or_else(|| Error::Invalid(format!("unit {unit} has no evaluation set")))?
        .iter()
        .copied()
        .collect();
    let units = data.units(split.mode);
    let pairs = units
        .get(unit)
        .ok_or_else(|| Error::Integrity(format!("unit {unit} has no pairs")))?;
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for p in pairs.iter().filter(|p| ids.contains(&p.pair_id)) {
        gallery.push(p.photo);
        queries.extend_from_slice(&p.sketches);
    }
    if gallery.is_empty() {
        return Err(Error::Invalid(format!("unit {unit} has an empty gallery")));
    }
    Ok((queries, gallery))
}

/// SplitMix64-style mixing of a base seed with a stream of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// FNV-1a of a string, stable across platforms and runs.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
