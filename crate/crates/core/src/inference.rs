//! Combining component log-scores, ranking candidates and tuning the
//! combination exponents.
//!
//! The combined score is `α_C·log P̃_context + α_V·log P̃_visual + α_P·log P̃_prior`,
//! the log of the product of powered component probabilities. Rankings are by
//! descending combined score, ties broken by ascending class index.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::{score_all_classes, ScoreTriple, ScorerSet, Selection, VisualSlot};
use crate::datamodel::ZslInstance;
use crate::embeddings::ClassEmbeddings;
use crate::error::{Error, Result};
use crate::metrics::{self, RankingReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationWeights {
    pub alpha_c: f64,
    pub alpha_v: f64,
    pub alpha_p: f64,
}

impl CalibrationWeights {
    pub fn new(alpha_c: f64, alpha_v: f64, alpha_p: f64) -> Self {
        CalibrationWeights { alpha_c, alpha_v, alpha_p }
    }

    /// Zeroes the exponent of every slot the selection leaves inactive.
    pub fn masked(self, selection: Selection) -> Self {
        CalibrationWeights {
            alpha_c: if selection.context { self.alpha_c } else { 0.0 },
            alpha_v: if selection.visual != VisualSlot::None { self.alpha_v } else { 0.0 },
            alpha_p: if selection.prior { self.alpha_p } else { 0.0 },
        }
    }

    pub fn scaled(self, lambda: f64) -> Self {
        CalibrationWeights::new(self.alpha_c * lambda, self.alpha_v * lambda, self.alpha_p * lambda)
    }

    fn key(&self) -> [f64; 3] {
        [self.alpha_c, self.alpha_v, self.alpha_p]
    }
}

pub fn combined_logscore(t: &ScoreTriple, a: &CalibrationWeights) -> f64 {
    // An inactive exponent must not turn a −∞ score into NaN.
    let term = |alpha: f64, s: f64| if alpha == 0.0 { 0.0 } else { alpha * s };
    term(a.alpha_c, t.context) + term(a.alpha_v, t.visual) + term(a.alpha_p, t.prior)
}

/// Orders `(class, score)` pairs: descending score, then ascending class.
/// NaN scores sort last.
pub fn order_scores(scored: &mut [(usize, f64)]) {
    scored.sort_by(|a, b| {
        let ord = match (a.1.is_nan(), b.1.is_nan()) {
            (true, true) => Ordering::Equal,
            (true, false) => Ordering::Greater,
            (false, true) => Ordering::Less,
            (false, false) => b.1.partial_cmp(&a.1).unwrap(),
        };
        ord.then(a.0.cmp(&b.0))
    });
}

/// Ranked class list and the 1-based rank of `truth` (None if absent).
pub fn rank(table: &[ScoreTriple], weights: &CalibrationWeights, truth: usize) -> (Vec<usize>, Option<usize>) {
    let mut scored: Vec<(usize, f64)> = table.iter().map(|t| (t.class, combined_logscore(t, weights))).collect();
    order_scores(&mut scored);
    let order: Vec<usize> = scored.iter().map(|s| s.0).collect();
    let r = order.iter().position(|&c| c == truth).map(|p| p + 1);
    (order, r)
}

/// Rank of the truth without materializing the order.
pub fn rank_of_truth(table: &[ScoreTriple], weights: &CalibrationWeights, truth: usize) -> Option<usize> {
    let t = table.iter().find(|t| t.class == truth)?;
    let st = combined_logscore(t, weights);
    let better = table
        .iter()
        .filter(|o| {
            let so = combined_logscore(o, weights);
            if st.is_nan() {
                !so.is_nan() || o.class < truth
            } else {
                so > st || (so == st && o.class < truth)
            }
        })
        .count();
    Some(better + 1)
}

/// Number of worker threads for evaluation: `CZSL_THREADS` if set.
pub fn eval_threads() -> Option<usize> {
    std::env::var("CZSL_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0)
}

pub(crate) fn with_eval_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match eval_threads() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// Per-instance score tables over a fixed candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSet {
    pub candidates: Vec<usize>,
    pub ids: Vec<String>,
    pub truth: Vec<usize>,
    pub tables: Vec<Vec<ScoreTriple>>,
}

impl EvaluationSet {
    /// Scores every instance with `score`, in parallel; output order follows input.
    pub fn build<F>(instances: &[ZslInstance<'_>], candidates: &[usize], score: F) -> Result<Self>
    where
        F: Fn(&ZslInstance<'_>, &[usize]) -> Result<Vec<ScoreTriple>> + Sync,
    {
        if candidates.is_empty() {
            return Err(Error::Empty("candidate set"));
        }
        let tables = with_eval_pool(|| {
            instances
                .par_iter()
                .map(|inst| score(inst, candidates))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(EvaluationSet {
            candidates: candidates.to_vec(),
            ids: instances.iter().map(ZslInstance::id).collect(),
            truth: instances.iter().map(ZslInstance::focus_class).collect(),
            tables,
        })
    }

    pub fn from_scorers(
        scorers: &ScorerSet,
        selection: Selection,
        instances: &[ZslInstance<'_>],
        candidates: &[usize],
        embeddings: &ClassEmbeddings,
    ) -> Result<Self> {
        Self::build(instances, candidates, |inst, cands| {
            score_all_classes(scorers, selection, inst, cands, embeddings)
        })
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    pub fn ranks(&self, weights: &CalibrationWeights) -> Result<Vec<usize>> {
        self.tables
            .iter()
            .zip(&self.truth)
            .zip(&self.ids)
            .map(|((t, &truth), id)| {
                rank_of_truth(t, weights, truth)
                    .ok_or_else(|| Error::InvalidArgument(format!("true class of {id} is not a candidate")))
            })
            .collect()
    }

    pub fn mfr(&self, weights: &CalibrationWeights) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let n = self.n();
        let ranks = self.ranks(weights)?;
        let total = ranks
            .iter()
            .map(|&r| metrics::first_relevant(r, n))
            .sum::<Result<f64>>()?;
        Ok(total / ranks.len() as f64)
    }

    pub fn report(&self, weights: &CalibrationWeights, ks: &[usize]) -> Result<RankingReport> {
        metrics::aggregate(&self.ranks(weights)?, self.n(), ks)
    }

    /// Keeps only the listed candidates (and instances whose truth is among them).
    pub fn restrict(&self, candidates: &[usize]) -> Self {
        let keep = |c: usize| candidates.contains(&c);
        let mut out = EvaluationSet {
            candidates: self.candidates.iter().copied().filter(|&c| keep(c)).collect(),
            ids: Vec::new(),
            truth: Vec::new(),
            tables: Vec::new(),
        };
        for ((id, &truth), table) in self.ids.iter().zip(&self.truth).zip(&self.tables) {
            if keep(truth) {
                out.ids.push(id.clone());
                out.truth.push(truth);
                out.tables.push(table.iter().copied().filter(|t| keep(t.class)).collect());
            }
        }
        out
    }
}

/// Candidate exponent values per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    pub context: Vec<f64>,
    pub visual: Vec<f64>,
    pub prior: Vec<f64>,
}

pub const DEFAULT_ALPHA_VALUES: [f64; 6] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];

impl Default for AlphaGrid {
    fn default() -> Self {
        AlphaGrid::uniform(&DEFAULT_ALPHA_VALUES)
    }
}

impl AlphaGrid {
    pub fn uniform(values: &[f64]) -> Self {
        AlphaGrid {
            context: values.to_vec(),
            visual: values.to_vec(),
            prior: values.to_vec(),
        }
    }

    /// Grid points in lexicographic order; inactive slots collapse to {0}.
    pub fn points(&self, selection: Selection) -> Result<Vec<CalibrationWeights>> {
        let axis = |values: &[f64], active: bool, name: &str| -> Result<Vec<f64>> {
            if !active {
                return Ok(vec![0.0]);
            }
            if !values.contains(&0.0) || !values.iter().any(|&v| v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "alpha grid for {name} must contain 0 and a positive value"
                )));
            }
            if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("alpha grid for {name} has invalid values")));
            }
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            v.dedup();
            Ok(v)
        };
        let cs = axis(&self.context, selection.context, "context")?;
        let vs = axis(&self.visual, selection.visual != VisualSlot::None, "visual")?;
        let ps = axis(&self.prior, selection.prior, "prior")?;
        let mut out = Vec::with_capacity(cs.len() * vs.len() * ps.len());
        for &c in &cs {
            for &v in &vs {
                for &p in &ps {
                    out.push(CalibrationWeights::new(c, v, p));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub weights: CalibrationWeights,
    pub validation_mfr: f64,
    pub evaluated: usize,
}

/// Exhaustive grid search for the exponents minimizing validation MFR.
/// Ties go to the lexicographically smallest `(α_C, α_V, α_P)`.
pub fn calibrate(validation: &EvaluationSet, grid: &AlphaGrid, selection: Selection) -> Result<CalibrationResult> {
    if validation.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let points = grid.points(selection)?;
    let mfrs = with_eval_pool(|| points.par_iter().map(|w| validation.mfr(w)).collect::<Result<Vec<_>>>())?;
    let mut best = 0;
    for i in 1..points.len() {
        let better = mfrs[i] < mfrs[best]
            || (mfrs[i] == mfrs[best]
                && points[i].key().partial_cmp(&points[best].key()) == Some(Ordering::Less));
        if better {
            best = i;
        }
    }
    Ok(CalibrationResult {
        weights: points[best],
        validation_mfr: mfrs[best],
        evaluated: points.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub instance_id: String,
    pub positive: bool,
    pub log_visual: f64,
    pub log_context: f64,
    pub log_prior: f64,
}

/// One positive row per instance plus `negatives` rows for distinct random
/// wrong classes drawn from `candidates`.
pub fn export_component_scores(
    scorers: &ScorerSet,
    instances: &[ZslInstance<'_>],
    candidates: &[usize],
    embeddings: &ClassEmbeddings,
    negatives: usize,
    seed: u64,
) -> Result<Vec<ScoreRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(instances.len() * (negatives + 1));
    for inst in instances {
        let truth = inst.focus_class();
        let wrong: Vec<usize> = candidates.iter().copied().filter(|&c| c != truth).collect();
        let mut classes = vec![truth];
        classes.extend(wrong.choose_multiple(&mut rng, negatives.min(wrong.len())).copied());
        let table = score_all_classes(scorers, Selection::FULL, inst, &classes, embeddings)?;
        for t in table {
            rows.push(ScoreRow {
                instance_id: inst.id(),
                positive: t.class == truth,
                log_visual: t.visual,
                log_context: t.context,
                log_prior: t.prior,
            });
        }
    }
    Ok(rows)
}

pub fn write_score_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut out = String::from("instance_id,label,log_visual,log_context,log_prior\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.instance_id,
            if r.positive { "pos" } else { "neg" },
            r.log_visual,
            r.log_context,
            r.log_prior
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
