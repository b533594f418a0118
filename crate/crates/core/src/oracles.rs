//! Count-based oracles that read ground-truth labels: True Prior, and the
//! naive-Bayes co-occurrence models over image presence (Visual Bayes) or
//! text windows (Textual Bayes).

use std::collections::BTreeMap;
use std::path::Path;

use crate::components::{ScoreTriple, VisualScorer};
use crate::datamodel::{ClassVocab, OracleAccess, SceneDataset, ZslInstance};
use crate::embeddings::ClassEmbeddings;
use crate::error::{Error, Result};

pub const DEFAULT_SMOOTHING: f64 = 1e-9;
pub const DEFAULT_TEXT_WINDOW: usize = 8;

const MAGIC: &[u8; 5] = b"CZCT1";

/// Symmetric co-occurrence counts over `m` units (images or text windows).
/// `#(i,i)` counts units holding at least two occurrences of `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceTable {
    m: u64,
    marginals: Vec<u64>,
    pairs: BTreeMap<(u32, u32), u64>,
}

fn key(a: usize, b: usize) -> (u32, u32) {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    (lo as u32, hi as u32)
}

impl CooccurrenceTable {
    pub fn new(n_classes: usize) -> Self {
        CooccurrenceTable {
            m: 0,
            marginals: vec![0; n_classes],
            pairs: BTreeMap::new(),
        }
    }

    /// Adds one unit given its per-class occurrence counts.
    pub fn add_unit(&mut self, occurrences: &BTreeMap<usize, u64>) {
        self.m += 1;
        let present: Vec<usize> = occurrences.iter().filter(|(_, &n)| n > 0).map(|(&c, _)| c).collect();
        for (i, &a) in present.iter().enumerate() {
            if occurrences[&a] >= 2 {
                *self.pairs.entry(key(a, a)).or_default() += 1;
            }
            for &b in &present[i + 1..] {
                *self.pairs.entry(key(a, b)).or_default() += 1;
            }
        }
    }

    /// Rescales exact presence probabilities to integer counts over `m` units.
    /// `pair(i, j)` must be symmetric; `pair(i, i)` is the probability of two
    /// or more occurrences.
    pub fn from_probabilities(single: &[f64], pair: impl Fn(usize, usize) -> f64, m: u64) -> Self {
        let scale = m as f64;
        let count = |p: f64| (p * scale).round().max(0.0) as u64;
        let n = single.len();
        let mut t = CooccurrenceTable::new(n);
        t.m = m;
        t.marginals = single.iter().map(|&p| count(p)).collect();
        for i in 0..n {
            for j in i..n {
                let c = count(pair(i, j));
                if c > 0 {
                    t.pairs.insert(key(i, j), c);
                }
            }
        }
        t
    }

    pub fn n_classes(&self) -> usize {
        self.marginals.len()
    }

    pub fn units(&self) -> u64 {
        self.m
    }

    pub fn count(&self, class: usize) -> u64 {
        self.marginals[class]
    }

    pub fn pair_count(&self, a: usize, b: usize) -> u64 {
        self.pairs.get(&key(a, b)).copied().unwrap_or(0)
    }

    /// Lift ratio `#(c,i)·M / (#c·#i)`.
    pub fn p_cooc(&self, c: usize, i: usize) -> Result<f64> {
        let (nc, ni) = (self.count(c), self.count(i));
        if nc == 0 || ni == 0 {
            return Err(Error::InvalidArgument(format!(
                "co-occurrence undefined: class {} has zero count",
                if nc == 0 { c } else { i }
            )));
        }
        Ok(self.pair_count(c, i) as f64 * self.m as f64 / (nc as f64 * ni as f64))
    }

    /// `log((#i + ε) / (M + ε·|O|))`.
    pub fn true_prior_logscore(&self, i: usize, eps: f64) -> f64 {
        let n = self.n_classes() as f64;
        ((self.count(i) as f64 + eps) / (self.m as f64 + eps * n)).ln()
    }

    /// `Σ_{c∈C} log(P_co-oc(c|i) + ε)` over the given context classes.
    pub fn context_logscore(&self, context: &[usize], i: usize, eps: f64) -> Result<f64> {
        if self.count(i) == 0 {
            return Err(Error::InvalidArgument(format!("class {i} unseen in co-occurrence table")));
        }
        context.iter().map(|&c| Ok((self.p_cooc(c, i)? + eps).ln())).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 12 + 8 * self.marginals.len() + 16 * self.pairs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.marginals.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.m.to_le_bytes());
        for &c in &self.marginals {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for (&(a, b), &n) in &self.pairs {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
            out.extend_from_slice(&n.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 17 || &bytes[..5] != MAGIC {
            return Err(bad("missing CZCT1 header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let n = u32_at(5) as usize;
        let m = u64_at(9);
        let mut off = 17;
        if bytes.len() < off + 8 * n {
            return Err(bad("truncated marginals"));
        }
        let marginals = (0..n).map(|k| u64_at(off + 8 * k)).collect();
        off += 8 * n;
        if !(bytes.len() - off).is_multiple_of(16) {
            return Err(bad("truncated pair record"));
        }
        let mut pairs = BTreeMap::new();
        while off < bytes.len() {
            let (a, b, c) = (u32_at(off), u32_at(off + 4), u64_at(off + 8));
            if a > b || b as usize >= n {
                return Err(bad("pair index out of range or not canonical"));
            }
            pairs.insert((a, b), c);
            off += 16;
        }
        Ok(CooccurrenceTable { m, marginals, pairs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Presence-based image co-occurrence over every scene of the dataset,
/// all domains and splits included.
pub fn build_image_cooc(dataset: &SceneDataset, access: OracleAccess) -> CooccurrenceTable {
    let mut t = CooccurrenceTable::new(dataset.vocab().len());
    for s in 0..dataset.scenes().len() {
        let mut occ: BTreeMap<usize, u64> = BTreeMap::new();
        for c in dataset.oracle_scene_classes(s, access) {
            *occ.entry(c).or_default() += 1;
        }
        for &c in occ.keys() {
            t.marginals[c] += 1;
        }
        t.add_unit(&occ);
    }
    t
}

/// Sliding windows (step 1) of `window` tokens over a whitespace-tokenized
/// stream. Tokens outside the vocabulary are ignored.
pub fn build_text_cooc_str(text: &str, window: usize, vocab: &ClassVocab) -> Result<CooccurrenceTable> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    let tokens: Vec<Option<usize>> = text.split_whitespace().map(|t| vocab.index_of(t)).collect();
    let mut t = CooccurrenceTable::new(vocab.len());
    if tokens.is_empty() {
        return Ok(t);
    }
    let n_windows = if tokens.len() <= window { 1 } else { tokens.len() - window + 1 };
    for start in 0..n_windows {
        let end = (start + window).min(tokens.len());
        let mut occ: BTreeMap<usize, u64> = BTreeMap::new();
        for c in tokens[start..end].iter().flatten() {
            *occ.entry(*c).or_default() += 1;
        }
        for (&c, &n) in &occ {
            t.marginals[c] += n;
        }
        t.add_unit(&occ);
    }
    Ok(t)
}

pub fn build_text_cooc(path: &Path, window: usize, vocab: &ClassVocab) -> Result<CooccurrenceTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    build_text_cooc_str(&text, window, vocab)
}

/// Score tables for the True Prior oracle: only the prior slot is filled.
pub fn true_prior_triples(table: &CooccurrenceTable, candidates: &[usize], eps: f64) -> Vec<ScoreTriple> {
    candidates
        .iter()
        .map(|&class| ScoreTriple {
            class,
            context: 0.0,
            visual: 0.0,
            prior: table.true_prior_logscore(class, eps),
        })
        .collect()
}

/// Bayes-oracle score slots: context = `Σ_c log(P_co-oc(c|i)+ε)` over all
/// ground-truth context labels, visual = the trained visual scorer (0 when
/// absent), prior = `log P*(i)` from the same table.
pub fn bayes_triples(
    table: &CooccurrenceTable,
    instance: &ZslInstance<'_>,
    candidates: &[usize],
    visual: Option<(&VisualScorer, &ClassEmbeddings)>,
    eps: f64,
    access: OracleAccess,
) -> Result<Vec<ScoreTriple>> {
    let context = instance.oracle_context_classes(access);
    let projected = match visual {
        Some((v, _)) => Some(v.project(instance.focus_feature())?),
        None => None,
    };
    candidates
        .iter()
        .map(|&class| {
            let visual_score = match (&projected, visual) {
                (Some(p), Some((v, emb))) => v.score_projected(p, emb.get(class))?,
                _ => 0.0,
            };
            Ok(ScoreTriple {
                class,
                context: table.context_logscore(&context, class, eps)?,
                visual: visual_score,
                prior: table.true_prior_logscore(class, eps),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{ObjectInstance, Partition, Scene};
    use proptest::prelude::*;

    fn vocab(labels: &[&str]) -> ClassVocab {
        ClassVocab::new(labels.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn dataset(scenes: &[&[usize]], n: usize) -> SceneDataset {
        let labels: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let v = ClassVocab::new(labels).unwrap();
        let scenes = scenes
            .iter()
            .enumerate()
            .map(|(s, classes)| Scene {
                image_id: format!("img{s}"),
                objects: classes
                    .iter()
                    .enumerate()
                    .map(|(k, &c)| ObjectInstance {
                        object_id: format!("o{k}"),
                        class_idx: c,
                        bbox: [0.0, 0.0, 1.0, 1.0],
                        feature: vec![0.0],
                        masked_scene_feature: None,
                    })
                    .collect(),
                masked_scene_feature: None,
            })
            .collect::<Vec<_>>();
        let n_scenes = scenes.len();
        SceneDataset::new(scenes, v, 1, Partition::all_train(n_scenes)).unwrap()
    }

    #[test]
    fn image_counts_by_hand() {
        // {a,b} and {a}
        let ds = dataset(&[&[0, 1], &[0]], 3);
        let t = build_image_cooc(&ds, OracleAccess::grant());
        assert_eq!((t.count(0), t.count(1), t.pair_count(0, 1), t.units()), (2, 1, 1, 2));
        assert_eq!(t.pair_count(2, 1), 0);
        assert_eq!(t.pair_count(1, 0), t.pair_count(0, 1));
        // presence, not multiplicity; same-class pair needs two instances
        let ds = dataset(&[&[0, 0, 1], &[0, 1, 1, 1]], 2);
        let t = build_image_cooc(&ds, OracleAccess::grant());
        assert_eq!((t.count(0), t.count(1)), (2, 2));
        assert_eq!((t.pair_count(0, 0), t.pair_count(1, 1), t.pair_count(0, 1)), (1, 1, 2));
    }

    #[test]
    fn lift_examples() {
        let mut t = CooccurrenceTable::new(3);
        t.m = 10;
        t.marginals = vec![4, 5, 3];
        t.pairs.insert((0, 1), 2);
        t.pairs.insert((0, 2), 3);
        assert_eq!(t.p_cooc(0, 1).unwrap(), 1.0);
        assert_eq!(t.p_cooc(1, 2).unwrap(), 0.0);
        // c=2 always appears with 0: #(c,i) = #c gives M/#i
        assert_eq!(t.p_cooc(2, 0).unwrap(), 10.0 / 4.0);
        t.marginals[2] = 0;
        assert!(t.p_cooc(2, 0).is_err());
    }

    #[test]
    fn true_prior_examples() {
        let mut t = CooccurrenceTable::new(3);
        t.m = 10;
        t.marginals = vec![5, 0, 2];
        assert_eq!(t.true_prior_logscore(0, 0.0), 0.5f64.ln());
        assert!(t.true_prior_logscore(1, 1e-9).is_finite());
        assert_eq!(t.true_prior_logscore(1, 0.0), f64::NEG_INFINITY);
        assert!(t.true_prior_logscore(0, 1e-9) > t.true_prior_logscore(2, 1e-9));
    }

    #[test]
    fn text_windows() {
        let v = vocab(&["a", "b", "c"]);
        let t = build_text_cooc_str("a b a", 2, &v).unwrap();
        assert_eq!((t.pair_count(0, 1), t.units()), (2, 2));
        assert_eq!((t.count(0), t.count(1)), (2, 2));
        let t = build_text_cooc_str("a b zzz c", 10, &v).unwrap();
        assert_eq!(t.units(), 1);
        assert_eq!((t.pair_count(0, 2), t.pair_count(1, 2)), (1, 1));
        // out-of-vocabulary token separates nothing but is never counted
        let t = build_text_cooc_str("a zzz b", 2, &v).unwrap();
        assert_eq!((t.units(), t.pair_count(0, 1)), (2, 0));
        assert!(build_text_cooc_str("a", 0, &v).is_err());
    }

    #[test]
    fn empty_context_is_prior_plus_visual() {
        let ds = dataset(&[&[0], &[1, 0], &[2, 1]], 3);
        let t = build_image_cooc(&ds, OracleAccess::grant());
        let inst = ZslInstance::new(&ds, 0, 0);
        let rows = bayes_triples(&t, &inst, &[0, 1, 2], None, 1e-9, OracleAccess::grant()).unwrap();
        for r in rows {
            assert_eq!(r.context, 0.0);
            assert_eq!(r.prior, t.true_prior_logscore(r.class, 1e-9));
        }
        // zero co-occurrence without smoothing is −∞
        let inst = ZslInstance::new(&ds, 2, 0);
        let rows = bayes_triples(&t, &inst, &[0, 1], None, 0.0, OracleAccess::grant()).unwrap();
        assert_eq!(rows[1].context, f64::NEG_INFINITY);
    }

    #[test]
    fn serialization_round_trip() {
        let ds = dataset(&[&[0, 1, 1], &[2, 1], &[0, 2]], 4);
        let t = build_image_cooc(&ds, OracleAccess::grant());
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..5], b"CZCT1");
        assert_eq!(CooccurrenceTable::from_bytes(&bytes, Path::new("x")).unwrap(), t);
        assert!(CooccurrenceTable::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
    }

    #[test]
    #[should_panic(expected = "poisoned")]
    fn image_table_respects_poisoning() {
        let ds = dataset(&[&[0, 1]], 2);
        ds.poison_target_labels();
        build_image_cooc(&ds, OracleAccess::grant());
    }

    proptest! {
        #[test]
        fn table_invariants(scenes in proptest::collection::vec(proptest::collection::vec(0usize..5, 1..6), 1..30)) {
            let refs: Vec<&[usize]> = scenes.iter().map(|s| s.as_slice()).collect();
            let ds = dataset(&refs, 5);
            let t = build_image_cooc(&ds, OracleAccess::grant());
            for a in 0..5 {
                for b in 0..5 {
                    prop_assert_eq!(t.pair_count(a, b), t.pair_count(b, a));
                    prop_assert!(t.pair_count(a, b) <= t.count(a).min(t.count(b)));
                    if t.count(a) > 0 && t.count(b) > 0 {
                        // recovering the pair count from the lift is exact
                        let back = t.p_cooc(a, b).unwrap() * t.count(a) as f64 * t.count(b) as f64 / t.units() as f64;
                        prop_assert!((back - t.pair_count(a, b) as f64).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
