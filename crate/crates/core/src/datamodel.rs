//! Scenes, object instances, class vocabulary and the source/target split.
//!
//! Region descriptors are precomputed vectors; nothing here touches pixels.
//! A [`ZslInstance`] is the unit a model scores: one focus object plus every
//! other object of its scene as context. Context objects from the target
//! domain expose their features but not their class through the
//! model-facing accessors.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};

pub const DEFAULT_MIN_COUNT: usize = 10;
pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.70, 0.10, 0.20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<usize>,
    source_mask: Vec<bool>,
}

impl ClassVocab {
    /// All classes start in the source domain with zero counts.
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate class label `{label}`")));
            }
        }
        let n = labels.len();
        Ok(ClassVocab {
            labels,
            index,
            counts: vec![0; n],
            source_mask: vec![true; n],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, class: usize) -> &str {
        &self.labels[class]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Per-class instance counts in the training split.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn set_counts(&mut self, counts: Vec<usize>) -> Result<()> {
        if counts.len() != self.len() {
            return Err(Error::dim("class counts", self.len(), counts.len()));
        }
        self.counts = counts;
        Ok(())
    }

    pub fn source_mask(&self) -> &[bool] {
        &self.source_mask
    }

    pub fn set_source_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.len() {
            return Err(Error::dim("source mask", self.len(), mask.len()));
        }
        self.source_mask = mask;
        Ok(())
    }

    pub fn domain(&self, class: usize) -> Domain {
        if self.source_mask[class] {
            Domain::Source
        } else {
            Domain::Target
        }
    }

    pub fn is_source(&self, class: usize) -> bool {
        self.source_mask[class]
    }

    pub fn source_classes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.source_mask[c]).collect()
    }

    pub fn target_classes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&c| !self.source_mask[c]).collect()
    }

    pub fn p_sup(&self) -> f64 {
        self.source_classes().len() as f64 / self.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectInstance {
    pub object_id: String,
    pub class_idx: usize,
    /// `(x, y, w, h)` in pixels.
    pub bbox: [f64; 4],
    pub feature: Vec<f64>,
    /// Scene descriptor with this object's region masked out, when available.
    pub masked_scene_feature: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: String,
    pub objects: Vec<ObjectInstance>,
    pub masked_scene_feature: Option<Vec<f64>>,
}

impl Scene {
    fn validate(&self, d_visual: usize) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::InvalidArgument(format!("scene `{}` has no objects", self.image_id)));
        }
        let mut seen = HashSet::new();
        for o in &self.objects {
            if !seen.insert(o.object_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate object id `{}` in scene `{}`",
                    o.object_id, self.image_id
                )));
            }
            if !(o.bbox[2] > 0.0 && o.bbox[3] > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "object `{}` has a degenerate bounding box",
                    o.object_id
                )));
            }
            if o.feature.len() != d_visual {
                return Err(Error::dim(format!("feature of `{}`", o.object_id), d_visual, o.feature.len()));
            }
            if let Some(m) = &o.masked_scene_feature {
                if m.len() != d_visual {
                    return Err(Error::dim("masked scene feature", d_visual, m.len()));
                }
            }
        }
        if let Some(m) = &self.masked_scene_feature {
            if m.len() != d_visual {
                return Err(Error::dim("masked scene feature", d_visual, m.len()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

/// Scene indices per split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    pub fn all_train(n: usize) -> Self {
        Partition {
            train: (0..n).collect(),
            ..Default::default()
        }
    }

    pub fn get(&self, part: Part) -> &[usize] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalDomain {
    Target,
    Source,
    Generalized,
}

impl RetrievalDomain {
    pub fn admits(self, vocab: &ClassVocab, class: usize) -> bool {
        match self {
            RetrievalDomain::Target => !vocab.is_source(class),
            RetrievalDomain::Source => vocab.is_source(class),
            RetrievalDomain::Generalized => true,
        }
    }

    pub fn candidates(self, vocab: &ClassVocab) -> Vec<usize> {
        (0..vocab.len()).filter(|&c| self.admits(vocab, c)).collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalDomain::Target => "target",
            RetrievalDomain::Source => "source",
            RetrievalDomain::Generalized => "generalized",
        }
    }
}

impl std::str::FromStr for RetrievalDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(RetrievalDomain::Target),
            "source" => Ok(RetrievalDomain::Source),
            "generalized" => Ok(RetrievalDomain::Generalized),
            other => Err(Error::InvalidArgument(format!("unknown retrieval mode `{other}`"))),
        }
    }
}

#[derive(Debug)]
pub struct SceneDataset {
    scenes: Vec<Scene>,
    vocab: ClassVocab,
    d_visual: usize,
    partition: Partition,
    target_labels_poisoned: AtomicBool,
}

impl Clone for SceneDataset {
    fn clone(&self) -> Self {
        SceneDataset {
            scenes: self.scenes.clone(),
            vocab: self.vocab.clone(),
            d_visual: self.d_visual,
            partition: self.partition.clone(),
            target_labels_poisoned: AtomicBool::new(self.target_labels_poisoned.load(Ordering::SeqCst)),
        }
    }
}

impl PartialEq for SceneDataset {
    fn eq(&self, other: &Self) -> bool {
        self.scenes == other.scenes
            && self.vocab == other.vocab
            && self.d_visual == other.d_visual
            && self.partition == other.partition
    }
}

impl SceneDataset {
    /// Validates scenes and recomputes the vocabulary's counts over the train split.
    pub fn new(scenes: Vec<Scene>, mut vocab: ClassVocab, d_visual: usize, partition: Partition) -> Result<Self> {
        for s in &scenes {
            s.validate(d_visual)?;
            for o in &s.objects {
                if o.class_idx >= vocab.len() {
                    return Err(Error::InvalidArgument(format!(
                        "object `{}` has class index {} outside vocabulary",
                        o.object_id, o.class_idx
                    )));
                }
            }
        }
        let mut seen = vec![false; scenes.len()];
        for &i in partition.train.iter().chain(&partition.val).chain(&partition.test) {
            if i >= scenes.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!("partition index {i} invalid or repeated")));
            }
        }
        let mut counts = vec![0; vocab.len()];
        for &i in &partition.train {
            for o in &scenes[i].objects {
                counts[o.class_idx] += 1;
            }
        }
        vocab.set_counts(counts)?;
        Ok(SceneDataset {
            scenes,
            vocab,
            d_visual,
            partition,
            target_labels_poisoned: AtomicBool::new(false),
        })
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    pub fn vocab(&self) -> &ClassVocab {
        &self.vocab
    }

    pub fn d_visual(&self) -> usize {
        self.d_visual
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn p_sup(&self) -> f64 {
        self.vocab.p_sup()
    }

    pub fn with_partition(self, partition: Partition) -> Result<Self> {
        SceneDataset::new(self.scenes, self.vocab, self.d_visual, partition)
    }

    pub fn with_source_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        self.vocab.set_source_mask(mask)?;
        Ok(self)
    }

    /// After this call any oracle read of target-domain labels panics.
    /// Used to prove that non-oracle code paths never reach them.
    pub fn poison_target_labels(&self) {
        self.target_labels_poisoned.store(true, Ordering::SeqCst);
    }

    /// Instance counts over all splits and domains.
    pub fn full_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vocab.len()];
        for s in &self.scenes {
            for o in &s.objects {
                counts[o.class_idx] += 1;
            }
        }
        counts
    }

    pub fn image_ids(&self, part: Part) -> Vec<&str> {
        self.partition
            .get(part)
            .iter()
            .map(|&i| self.scenes[i].image_id.as_str())
            .collect()
    }

    /// Oracle-only view of every class label in a scene, target domain included.
    pub fn oracle_scene_classes(&self, scene: usize, _access: OracleAccess) -> Vec<usize> {
        self.check_oracle_allowed();
        self.scenes[scene].objects.iter().map(|o| o.class_idx).collect()
    }

    fn check_oracle_allowed(&self) {
        assert!(
            !self.target_labels_poisoned.load(Ordering::SeqCst),
            "target-domain labels read through the oracle accessor of a poisoned dataset"
        );
    }
}

/// Capability required to read target-domain labels. Only oracle code
/// constructs one.
#[derive(Debug, Clone, Copy)]
pub struct OracleAccess(());

impl OracleAccess {
    pub fn grant() -> Self {
        OracleAccess(())
    }
}

/// A context object as seen by a model.
#[derive(Debug, Clone, Copy)]
pub struct ContextObject<'a> {
    pub feature: &'a [f64],
    pub domain: Domain,
    /// Present only for source-domain objects.
    pub source_class: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct ZslInstance<'a> {
    dataset: &'a SceneDataset,
    scene: usize,
    focus: usize,
}

impl<'a> ZslInstance<'a> {
    pub fn new(dataset: &'a SceneDataset, scene: usize, focus: usize) -> Self {
        assert!(focus < dataset.scenes[scene].objects.len());
        ZslInstance { dataset, scene, focus }
    }

    pub fn dataset(&self) -> &'a SceneDataset {
        self.dataset
    }

    pub fn scene_index(&self) -> usize {
        self.scene
    }

    pub fn focus_index(&self) -> usize {
        self.focus
    }

    fn scene(&self) -> &'a Scene {
        &self.dataset.scenes[self.scene]
    }

    fn focus_object(&self) -> &'a ObjectInstance {
        &self.scene().objects[self.focus]
    }

    pub fn id(&self) -> String {
        format!("{}/{}", self.scene().image_id, self.focus_object().object_id)
    }

    /// Ground-truth class of the focus object; used for supervision and scoring
    /// of rankings, never as a model input.
    pub fn focus_class(&self) -> usize {
        self.focus_object().class_idx
    }

    pub fn focus_feature(&self) -> &'a [f64] {
        &self.focus_object().feature
    }

    pub fn masked_scene_feature(&self) -> Option<&'a [f64]> {
        self.focus_object()
            .masked_scene_feature
            .as_deref()
            .or(self.scene().masked_scene_feature.as_deref())
    }

    pub fn context_len(&self) -> usize {
        self.scene().objects.len() - 1
    }

    pub fn context(&self) -> impl Iterator<Item = ContextObject<'a>> + 'a {
        let vocab = &self.dataset.vocab;
        let focus = self.focus;
        self.scene()
            .objects
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != focus)
            .map(move |(_, o)| {
                let domain = vocab.domain(o.class_idx);
                ContextObject {
                    feature: &o.feature,
                    domain,
                    source_class: (domain == Domain::Source).then_some(o.class_idx),
                }
            })
    }

    /// Classes of all context objects, target domain included.
    pub fn oracle_context_classes(&self, _access: OracleAccess) -> Vec<usize> {
        self.dataset.check_oracle_allowed();
        self.scene()
            .objects
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.focus)
            .map(|(_, o)| o.class_idx)
            .collect()
    }

    /// Target-domain context classes, in context order.
    pub fn oracle_target_context_classes(&self, access: OracleAccess) -> Vec<usize> {
        let vocab = &self.dataset.vocab;
        self.oracle_context_classes(access)
            .into_iter()
            .filter(|&c| !vocab.is_source(c))
            .collect()
    }
}

/// One instance per object of the given split whose class lies in the
/// retrieval domain.
pub fn make_instances(dataset: &SceneDataset, part: Part, mode: RetrievalDomain) -> Vec<ZslInstance<'_>> {
    let mut out = Vec::new();
    for &s in dataset.partition.get(part) {
        for (f, o) in dataset.scenes[s].objects.iter().enumerate() {
            if mode.admits(&dataset.vocab, o.class_idx) {
                out.push(ZslInstance::new(dataset, s, f));
            }
        }
    }
    out
}

/// Rounds `p_sup · |O|` half up and draws the source domain. Forced classes
/// (e.g. classes seen while pretraining the feature extractor) always land in S.
pub fn split_domains(vocab: &ClassVocab, p_sup: f64, seed: u64, forced_source: &[String]) -> Result<ClassVocab> {
    if !(p_sup > 0.0 && p_sup <= 1.0) {
        return Err(Error::InvalidArgument(format!("p_sup must lie in (0, 1], got {p_sup}")));
    }
    let n = vocab.len();
    let budget = (p_sup * n as f64 + 0.5).floor() as usize;
    let budget = budget.min(n);
    let mut mask = vec![false; n];
    let mut forced = 0;
    for label in forced_source {
        if let Some(i) = vocab.index_of(label) {
            if !mask[i] {
                mask[i] = true;
                forced += 1;
            }
        }
    }
    if forced > budget {
        return Err(Error::InvalidArgument(format!(
            "{forced} forced source classes exceed the source budget of {budget}"
        )));
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    for &i in rest.iter().take(budget - forced) {
        mask[i] = true;
    }
    let mut out = vocab.clone();
    out.set_source_mask(mask)?;
    Ok(out)
}

/// Split sizes: floors of the exact fractions, remainder handed out by
/// largest fractional part (ties to the larger ratio, then train/val/test order).
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<[usize; 3]> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| !(x > 0.0)) || ((r[0] + r[1] + r[2]) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let exact: Vec<f64> = r.iter().map(|x| x * n as f64).collect();
    let mut sizes = [0usize; 3];
    for k in 0..3 {
        sizes[k] = exact[k].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa)
            .unwrap()
            .then(r[b].partial_cmp(&r[a]).unwrap())
            .then(a.cmp(&b))
    });
    let mut remainder = n - sizes.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if remainder == 0 {
            break;
        }
        sizes[k] += 1;
        remainder -= 1;
    }
    Ok(sizes)
}

pub fn split_images(n_scenes: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Partition> {
    if n_scenes == 0 {
        return Err(Error::Empty("dataset has no scenes"));
    }
    let [n_train, n_val, _] = split_sizes(n_scenes, ratios)?;
    let mut idx: Vec<usize> = (0..n_scenes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Partition { train, val, test })
}

// ---------------------------------------------------------------------------
// Scene file

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawObject {
    object_id: String,
    class: String,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    masked_scene_feature: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawScene {
    image_id: String,
    objects: Vec<RawObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    masked_scene_feature: Option<Vec<f64>>,
}

/// Output of scene ingestion, before any split is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub scenes: Vec<Scene>,
    pub vocab: ClassVocab,
    pub d_visual: usize,
    /// Instance count per raw label, before filtering.
    pub raw_counts: BTreeMap<String, usize>,
    pub dropped_classes: Vec<String>,
    pub dropped_scenes: usize,
}

impl Ingested {
    pub fn into_dataset(self, partition: Partition) -> Result<SceneDataset> {
        SceneDataset::new(self.scenes, self.vocab, self.d_visual, partition)
    }
}

/// Reads a line-delimited scene file. Classes seen fewer than `min_count`
/// times, or without an embedding when a table is given, are dropped with
/// their instances; scenes left empty are dropped too. The vocabulary is the
/// sorted set of retained labels.
pub fn ingest_scenes(
    scene_file: &Path,
    feature_bank: Option<&FeatureBank>,
    embeddings: Option<&EmbeddingTable>,
    min_count: usize,
) -> Result<Ingested> {
    let file = fs::File::open(scene_file).map_err(|e| Error::io(scene_file, e))?;
    let mut raw = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(scene_file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawScene =
            serde_json::from_str(&line).map_err(|e| Error::parse(scene_file, i + 1, e.to_string()))?;
        raw.push((i + 1, rec));
    }

    let mut d_visual: Option<usize> = feature_bank.map(FeatureBank::dim);
    let mut resolved: Vec<Vec<(RawObject, Vec<f64>)>> = Vec::with_capacity(raw.len());
    let mut raw_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut masked: Vec<Option<Vec<f64>>> = Vec::with_capacity(raw.len());
    for (lineno, rec) in raw.iter_mut() {
        let lineno = *lineno;
        let mut objs = Vec::with_capacity(rec.objects.len());
        for o in rec.objects.drain(..) {
            let feature = match (&o.feature, &o.feature_ref, feature_bank) {
                (Some(f), _, _) => f.clone(),
                (None, Some(r), Some(bank)) => bank
                    .get(r)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::DanglingFeature(r.clone()))?,
                (None, Some(r), None) => return Err(Error::DanglingFeature(r.clone())),
                (None, None, _) => {
                    return Err(Error::parse(
                        scene_file,
                        lineno,
                        format!("object `{}` has neither feature nor feature_ref", o.object_id),
                    ))
                }
            };
            let dim = *d_visual.get_or_insert(feature.len());
            if feature.len() != dim {
                return Err(Error::parse(
                    scene_file,
                    lineno,
                    format!("feature of `{}` has dimension {}, expected {dim}", o.object_id, feature.len()),
                ));
            }
            *raw_counts.entry(o.class.clone()).or_default() += 1;
            objs.push((o, feature));
        }
        masked.push(rec.masked_scene_feature.take());
        resolved.push(objs);
    }
    let d_visual = d_visual.ok_or(Error::Empty("scene file has no objects"))?;

    let mut kept: Vec<String> = Vec::new();
    let mut dropped_classes = Vec::new();
    for (label, &count) in &raw_counts {
        let has_embedding = embeddings.is_none_or(|t| t.contains(label));
        if count >= min_count && has_embedding {
            kept.push(label.clone());
        } else {
            dropped_classes.push(label.clone());
        }
    }
    let vocab = ClassVocab::new(kept)?;

    let mut scenes = Vec::new();
    let mut dropped_scenes = 0;
    for (((lineno, rec), objs), masked) in raw.into_iter().zip(resolved).zip(masked) {
        let objects: Vec<ObjectInstance> = objs
            .into_iter()
            .filter_map(|(o, feature)| {
                vocab.index_of(&o.class).map(|class_idx| ObjectInstance {
                    object_id: o.object_id,
                    class_idx,
                    bbox: o.bbox,
                    feature,
                    masked_scene_feature: o.masked_scene_feature,
                })
            })
            .collect();
        if objects.is_empty() {
            dropped_scenes += 1;
            continue;
        }
        let scene = Scene {
            image_id: rec.image_id,
            objects,
            masked_scene_feature: masked,
        };
        scene
            .validate(d_visual)
            .map_err(|e| Error::parse(scene_file, lineno, e.to_string()))?;
        scenes.push(scene);
    }

    Ok(Ingested {
        scenes,
        vocab,
        d_visual,
        raw_counts,
        dropped_classes,
        dropped_scenes,
    })
}

/// Writes scenes with inline features.
pub fn write_scenes(path: &Path, scenes: &[Scene], vocab: &ClassVocab) -> Result<()> {
    let mut out = Vec::new();
    for s in scenes {
        let rec = RawScene {
            image_id: s.image_id.clone(),
            objects: s
                .objects
                .iter()
                .map(|o| RawObject {
                    object_id: o.object_id.clone(),
                    class: vocab.label(o.class_idx).to_string(),
                    bbox: o.bbox,
                    feature: Some(o.feature.clone()),
                    feature_ref: None,
                    masked_scene_feature: o.masked_scene_feature.clone(),
                })
                .collect(),
            masked_scene_feature: s.masked_scene_feature.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Feature bank

const BANK_MAGIC: &[u8; 5] = b"CZFB1";

/// Binary feature rows (`CZFB1`, u32 rows, u32 dim, LE f32 payload) plus an
/// `id<TAB>row` sidecar index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    rows: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl FeatureBank {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, object_id: &str) -> Option<&[f64]> {
        self.index.get(object_id).map(|&r| self.rows[r].as_slice())
    }

    pub fn from_rows(dim: usize, entries: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let mut rows = Vec::with_capacity(entries.len());
        let mut index = HashMap::new();
        for (id, row) in entries {
            if row.len() != dim {
                return Err(Error::dim("feature bank row", dim, row.len()));
            }
            index.insert(id, rows.len());
            rows.push(row.into_iter().map(f64::from).collect());
        }
        Ok(FeatureBank { dim, rows, index })
    }

    pub fn load(bank: &Path, index: &Path) -> Result<Self> {
        let bytes = fs::read(bank).map_err(|e| Error::io(bank, e))?;
        let bad = |msg: &str| Error::Format {
            path: bank.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 13 || &bytes[..5] != BANK_MAGIC {
            return Err(bad("missing CZFB1 header"));
        }
        let n_rows = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let payload = &bytes[13..];
        if payload.len() != n_rows * dim * 4 {
            return Err(bad("payload size does not match row count and dimension"));
        }
        let rows: Vec<Vec<f64>> = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect::<Vec<_>>()
            .chunks(dim.max(1))
            .map(<[f64]>::to_vec)
            .collect();
        let text = fs::read_to_string(index).map_err(|e| Error::io(index, e))?;
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, row) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(index, i + 1, "expected `id<TAB>row`"))?;
            let row: usize = row
                .trim()
                .parse()
                .map_err(|_| Error::parse(index, i + 1, "row is not an integer"))?;
            if row >= n_rows {
                return Err(Error::parse(index, i + 1, format!("row {row} out of range")));
            }
            map.insert(id.to_string(), row);
        }
        Ok(FeatureBank {
            dim,
            rows: if dim == 0 { Vec::new() } else { rows },
            index: map,
        })
    }

    /// Rows are written in `ids` order.
    pub fn write(&self, bank: &Path, index: &Path) -> Result<()> {
        let mut ids: Vec<(&String, &usize)> = self.index.iter().collect();
        ids.sort_by_key(|(_, &r)| r);
        let mut out = Vec::with_capacity(13 + self.rows.len() * self.dim * 4);
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for row in &self.rows {
            for &v in row {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(bank, out).map_err(|e| Error::io(bank, e))?;
        let mut idx = fs::File::create(index).map_err(|e| Error::io(index, e))?;
        for (id, row) in ids {
            writeln!(idx, "{id}\t{row}").map_err(|e| Error::io(index, e))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Split file

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitFile {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitFile {
    pub fn from_dataset(ds: &SceneDataset) -> Self {
        let vocab = ds.vocab();
        let label = |c: usize| vocab.label(c).to_string();
        let ids = |p| ds.image_ids(p).into_iter().map(str::to_string).collect();
        SplitFile {
            source: vocab.source_classes().into_iter().map(label).collect(),
            target: vocab.target_classes().into_iter().map(label).collect(),
            train: ids(Part::Train),
            val: ids(Part::Val),
            test: ids(Part::Test),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut out = SplitFile::default();
        let mut current: Option<&mut Vec<String>> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "source:" => current = Some(&mut out.source),
                "target:" => current = Some(&mut out.target),
                "train:" => current = Some(&mut out.train),
                "val:" => current = Some(&mut out.val),
                "test:" => current = Some(&mut out.test),
                item => match current.as_deref_mut() {
                    Some(list) => list.push(item.to_string()),
                    None => return Err(Error::parse(path, i + 1, "item before any section header")),
                },
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (name, items) in [
            ("source", &self.source),
            ("target", &self.target),
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            out.push_str(name);
            out.push_str(":\n");
            for item in items {
                out.push_str(item);
                out.push('\n');
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Applies domain and image splits to ingested scenes.
    pub fn apply(&self, ingested: Ingested) -> Result<SceneDataset> {
        let mut vocab = ingested.vocab;
        let mut mask = vec![true; vocab.len()];
        for label in &self.target {
            let c = vocab
                .index_of(label)
                .ok_or_else(|| Error::InvalidArgument(format!("split names unknown class `{label}`")))?;
            mask[c] = false;
        }
        for label in &self.source {
            if vocab.index_of(label).is_none() {
                return Err(Error::InvalidArgument(format!("split names unknown class `{label}`")));
            }
        }
        vocab.set_source_mask(mask)?;
        let by_id: HashMap<&str, usize> = ingested
            .scenes
            .iter()
            .enumerate()
            .map(|(i, s)| (s.image_id.as_str(), i))
            .collect();
        let lookup = |ids: &[String]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::InvalidArgument(format!("split names unknown image `{id}`")))
                })
                .collect()
        };
        let partition = Partition {
            train: lookup(&self.train)?,
            val: lookup(&self.val)?,
            test: lookup(&self.test)?,
        };
        SceneDataset::new(ingested.scenes, vocab, ingested.d_visual, partition)
    }
}

/// Standard file names inside a data directory.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDir { root: root.into() }
    }

    pub fn scenes(&self) -> PathBuf {
        self.root.join("scenes.jsonl")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.txt")
    }

    pub fn splits(&self) -> PathBuf {
        self.root.join("splits.txt")
    }

    pub fn world_truth(&self) -> PathBuf {
        self.root.join("world_truth.json")
    }

    pub fn save(&self, dataset: &SceneDataset, embeddings: &EmbeddingTable) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        write_scenes(&self.scenes(), dataset.scenes(), dataset.vocab())?;
        embeddings.write(self.embeddings())?;
        SplitFile::from_dataset(dataset).write(&self.splits())
    }

    /// Loads a split dataset. Classes are not re-filtered, and a label
    /// without an embedding is an error.
    pub fn load(&self) -> Result<(SceneDataset, EmbeddingTable)> {
        let embeddings = EmbeddingTable::load(self.embeddings())?;
        let ingested = ingest_scenes(&self.scenes(), None, None, 0)?;
        embeddings.align(&ingested.vocab)?;
        let splits = SplitFile::load(&self.splits())?;
        Ok((splits.apply(ingested)?, embeddings))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(id: &str, class: &str, f: f64) -> String {
        format!(r#"{{"object_id":"{id}","class":"{class}","bbox":[0,0,4,5],"feature":[{f},1.5]}}"#)
    }

    fn scene_line(id: &str, objs: &[String]) -> String {
        format!(r#"{{"image_id":"{id}","objects":[{}]}}"#, objs.join(","))
    }

    fn write(dir: &Path, name: &str, lines: &[String]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn min_count_threshold_keeps_and_drops() {
        let dir = tempfile::tempdir().unwrap();
        let mut lines = Vec::new();
        // "apple": 12 instances over 3 scenes; "kiwi": 9 instances.
        for s in 0..3 {
            let mut objs: Vec<String> = (0..4).map(|k| obj(&format!("a{s}{k}"), "apple", 0.5)).collect();
            objs.extend((0..3).map(|k| obj(&format!("k{s}{k}"), "kiwi", 0.25)));
            lines.push(scene_line(&format!("img{s}"), &objs));
        }
        let p = write(dir.path(), "s.jsonl", &lines);
        let ing = ingest_scenes(&p, None, None, 10).unwrap();
        assert_eq!(ing.vocab.labels(), &["apple".to_string()]);
        assert_eq!(ing.raw_counts["apple"], 12);
        assert_eq!(ing.raw_counts["kiwi"], 9);
        assert_eq!(ing.dropped_classes, vec!["kiwi".to_string()]);
        assert!(ing.scenes.iter().all(|s| s.objects.len() == 4));
    }

    #[test]
    fn emptied_scene_is_dropped() {
        // scene A: {x, y}; scene B: {y}. x appears once, y twice.
        let dir = tempfile::tempdir().unwrap();
        let lines = vec![
            scene_line("A", &[obj("1", "x", 0.1), obj("2", "y", 0.2)]),
            scene_line("B", &[obj("3", "x", 0.3)]),
        ];
        let p = write(dir.path(), "s.jsonl", &lines);
        // x: 2 instances, y: 1 instance -> min_count 2 drops y only; no scene emptied.
        let ing = ingest_scenes(&p, None, None, 2).unwrap();
        assert_eq!(ing.dropped_scenes, 0);
        // min_count 3 drops both -> both scenes removed.
        let ing = ingest_scenes(&p, None, None, 3).unwrap();
        assert_eq!(ing.dropped_scenes, 2);
        assert!(ing.scenes.is_empty());
        // Only y kept when x lacks an embedding: scene B is emptied.
        let mut emb = EmbeddingTable::new(1);
        emb.insert("y", vec![1.0]).unwrap();
        let ing = ingest_scenes(&p, None, Some(&emb), 1).unwrap();
        assert_eq!(ing.dropped_scenes, 1);
        assert_eq!(ing.scenes.len(), 1);
        assert_eq!(ing.scenes[0].image_id, "A");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let lines = vec![scene_line("A", &[obj("1", "x", 0.1)]), "{not json".to_string()];
        let p = write(dir.path(), "s.jsonl", &lines);
        match ingest_scenes(&p, None, None, 1).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn feature_dimension_mismatch_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let bad = r#"{"object_id":"2","class":"x","bbox":[0,0,1,1],"feature":[1,2,3]}"#.to_string();
        let lines = vec![scene_line("A", &[obj("1", "x", 0.1), bad])];
        let p = write(dir.path(), "s.jsonl", &lines);
        assert!(matches!(ingest_scenes(&p, None, None, 1), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn feature_bank_references() {
        let dir = tempfile::tempdir().unwrap();
        let bank = FeatureBank::from_rows(2, vec![("o1".into(), vec![0.5, -1.0]), ("o2".into(), vec![2.0, 3.0])])
            .unwrap();
        let (bp, ip) = (dir.path().join("f.czfb"), dir.path().join("f.idx"));
        bank.write(&bp, &ip).unwrap();
        let raw = fs::read(&bp).unwrap();
        assert_eq!(&raw[..5], b"CZFB1");
        assert_eq!(u32::from_le_bytes(raw[5..9].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(raw[9..13].try_into().unwrap()), 2);
        let bank = FeatureBank::load(&bp, &ip).unwrap();
        assert_eq!(bank.get("o2").unwrap(), &[2.0, 3.0]);

        let ok = r#"{"image_id":"A","objects":[{"object_id":"o1","class":"x","bbox":[0,0,1,1],"feature_ref":"o1"}]}"#;
        let p = write(dir.path(), "s.jsonl", &[ok.to_string()]);
        let ing = ingest_scenes(&p, Some(&bank), None, 1).unwrap();
        assert_eq!(ing.scenes[0].objects[0].feature, vec![0.5, -1.0]);

        let dangling = ok.replace("\"feature_ref\":\"o1\"", "\"feature_ref\":\"zz\"");
        let p = write(dir.path(), "s2.jsonl", &[dangling]);
        assert!(matches!(ingest_scenes(&p, Some(&bank), None, 1), Err(Error::DanglingFeature(_))));
    }

    fn vocab(n: usize) -> ClassVocab {
        ClassVocab::new((0..n).map(|i| format!("c{i:04}")).collect()).unwrap()
    }

    #[test]
    fn split_domains_sizes() {
        let v = split_domains(&vocab(4842), 0.5, 3, &[]).unwrap();
        assert_eq!(v.source_classes().len(), 2421);
        assert_eq!(v.target_classes().len(), 2421);
        let all = split_domains(&vocab(10), 1.0, 3, &[]).unwrap();
        assert!(all.target_classes().is_empty());
        // half up: 0.25 * 10 = 2.5 -> 3
        assert_eq!(split_domains(&vocab(10), 0.25, 1, &[]).unwrap().source_classes().len(), 3);
    }

    #[test]
    fn split_domains_deterministic_and_forced() {
        let v = vocab(50);
        let a = split_domains(&v, 0.3, 9, &[]).unwrap();
        let b = split_domains(&v, 0.3, 9, &[]).unwrap();
        assert_eq!(a.source_mask(), b.source_mask());
        let forced = vec!["c0007".to_string(), "c0042".to_string()];
        let f = split_domains(&v, 0.3, 9, &forced).unwrap();
        assert!(f.is_source(7) && f.is_source(42));
        assert_eq!(f.source_classes().len(), 15);
        assert!(split_domains(&v, 0.02, 9, &forced).is_err());
        assert!(split_domains(&v, 0.0, 9, &[]).is_err());
        assert!(split_domains(&v, 1.5, 9, &[]).is_err());
    }

    #[test]
    fn split_images_sizes() {
        let p = split_images(100, DEFAULT_RATIOS, 1).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (70, 10, 20));
        let one = split_images(1, DEFAULT_RATIOS, 1).unwrap();
        assert_eq!(one.train, vec![0]);
        let a = split_images(10, DEFAULT_RATIOS, 1).unwrap();
        let b = split_images(10, DEFAULT_RATIOS, 2).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (7, 1, 2));
        assert_eq!((b.train.len(), b.val.len(), b.test.len()), (7, 1, 2));
        assert_ne!(a, b);
        assert_eq!(a, split_images(10, DEFAULT_RATIOS, 1).unwrap());
        assert!(split_images(0, DEFAULT_RATIOS, 1).is_err());
        assert!(split_images(5, (0.5, 0.5, 0.1), 1).is_err());
    }

    #[test]
    fn split_images_partition_is_exact_cover() {
        for n in 1..60 {
            let p = split_images(n, DEFAULT_RATIOS, n as u64).unwrap();
            let mut all: Vec<usize> = p.train.iter().chain(&p.val).chain(&p.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            for (len, r) in [(p.train.len(), 0.7), (p.val.len(), 0.1), (p.test.len(), 0.2)] {
                assert!((len as f64 - r * n as f64).abs() <= 1.0);
            }
        }
    }

    fn three_object_dataset() -> SceneDataset {
        let mut v = vocab(3);
        v.set_source_mask(vec![true, false, false]).unwrap();
        let o = |id: &str, c: usize| ObjectInstance {
            object_id: id.into(),
            class_idx: c,
            bbox: [0.0, 0.0, 1.0, 1.0],
            feature: vec![c as f64, 1.0],
            masked_scene_feature: None,
        };
        let scenes = vec![
            Scene {
                image_id: "s0".into(),
                objects: vec![o("a", 0), o("b", 1), o("c", 2)],
                masked_scene_feature: None,
            },
            Scene {
                image_id: "s1".into(),
                objects: vec![o("d", 1)],
                masked_scene_feature: None,
            },
        ];
        SceneDataset::new(scenes, v, 2, Partition::all_train(2)).unwrap()
    }

    #[test]
    fn instances_per_mode() {
        let ds = three_object_dataset();
        let target = make_instances(&ds, Part::Train, RetrievalDomain::Target);
        assert_eq!(target.len(), 3);
        let in_s0: Vec<_> = target.iter().filter(|i| i.scene_index() == 0).collect();
        assert_eq!(in_s0.len(), 2);
        assert!(in_s0.iter().all(|i| i.context_len() == 2));
        let single = target.iter().find(|i| i.scene_index() == 1).unwrap();
        assert_eq!(single.context().count(), 0);
        assert_eq!(make_instances(&ds, Part::Train, RetrievalDomain::Generalized).len(), 4);
        assert_eq!(make_instances(&ds, Part::Train, RetrievalDomain::Source).len(), 1);
    }

    #[test]
    fn context_hides_target_labels() {
        let ds = three_object_dataset();
        let inst = ZslInstance::new(&ds, 0, 1);
        let ctx: Vec<_> = inst.context().collect();
        assert_eq!(ctx.len(), 2);
        assert_eq!(ctx[0].source_class, Some(0));
        assert_eq!(ctx[1].domain, Domain::Target);
        assert_eq!(ctx[1].source_class, None);
        assert_eq!(inst.oracle_context_classes(OracleAccess::grant()), vec![0, 2]);
        assert_eq!(inst.oracle_target_context_classes(OracleAccess::grant()), vec![2]);
    }

    #[test]
    #[should_panic(expected = "poisoned")]
    fn poisoned_dataset_rejects_oracle_reads() {
        let ds = three_object_dataset();
        ds.poison_target_labels();
        let inst = ZslInstance::new(&ds, 0, 1);
        let _ = inst.context().count();
        inst.oracle_context_classes(OracleAccess::grant());
    }

    #[test]
    fn counts_track_train_split() {
        let ds = three_object_dataset();
        assert_eq!(ds.vocab().counts(), &[1, 2, 1]);
        let ds = ds
            .with_partition(Partition {
                train: vec![1],
                val: vec![],
                test: vec![0],
            })
            .unwrap();
        assert_eq!(ds.vocab().counts(), &[0, 1, 0]);
        assert_eq!(ds.full_counts(), vec![1, 2, 1]);
    }

    #[test]
    fn data_dir_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = three_object_dataset();
        // awkward floats
        let mut scenes = ds.scenes().to_vec();
        scenes[0].objects[0].feature = vec![0.1 + 0.2, -1.0e-310];
        scenes[1].objects[0].feature = vec![std::f64::consts::PI, 1.0 / 3.0];
        ds = SceneDataset::new(scenes, ds.vocab().clone(), 2, Partition {
            train: vec![0],
            val: vec![],
            test: vec![1],
        })
        .unwrap();
        let mut emb = EmbeddingTable::new(1);
        for l in ds.vocab().labels() {
            emb.insert(l.clone(), vec![1.0]).unwrap();
        }
        let dd = DataDir::new(dir.path());
        dd.save(&ds, &emb).unwrap();
        let (back, _) = dd.load().unwrap();
        assert_eq!(back, ds);
        // second round trip produces identical bytes
        let first = fs::read(dd.scenes()).unwrap();
        let dd2 = DataDir::new(dir.path().join("again"));
        dd2.save(&back, &emb).unwrap();
        assert_eq!(first, fs::read(dd2.scenes()).unwrap());
    }
}
