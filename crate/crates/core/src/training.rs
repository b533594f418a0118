//! Negative sampling, the ranking objectives of the three components (plus
//! the fused baseline), Adam and the per-component training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::components::{component_seed, Component, ContextScorer, JointScorer, PriorScorer, ScorerSet, VisualScorer};
use crate::datamodel::{make_instances, Part, RetrievalDomain, SceneDataset, ZslInstance};
use crate::diffprims::{hinge, Parameterized, Probe};
use crate::embeddings::ClassEmbeddings;
use crate::error::{Error, Result};

/// `P*(i)`: class frequencies over the source-domain train split.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPrior {
    classes: Vec<usize>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl EmpiricalPrior {
    /// Classes with a zero count are left out of the support.
    pub fn from_counts(counts: &[(usize, usize)]) -> Result<Self> {
        let kept: Vec<(usize, usize)> = counts.iter().copied().filter(|&(_, n)| n > 0).collect();
        let total: usize = kept.iter().map(|&(_, n)| n).sum();
        if total == 0 {
            return Err(Error::Empty("empirical prior support"));
        }
        let classes = kept.iter().map(|&(c, _)| c).collect();
        let probs: Vec<f64> = kept.iter().map(|&(_, n)| n as f64 / total as f64).collect();
        let mut acc = 0usize;
        let cumulative = kept
            .iter()
            .map(|&(_, n)| {
                acc += n;
                acc as f64 / total as f64
            })
            .collect();
        Ok(EmpiricalPrior {
            classes,
            probs,
            cumulative,
        })
    }

    pub fn from_dataset(dataset: &SceneDataset) -> Result<Self> {
        let vocab = dataset.vocab();
        let counts: Vec<(usize, usize)> = vocab
            .source_classes()
            .into_iter()
            .map(|c| (c, vocab.counts()[c]))
            .collect();
        Self::from_counts(&counts)
    }

    pub fn support(&self) -> &[usize] {
        &self.classes
    }

    pub fn prob(&self, class: usize) -> f64 {
        self.classes
            .iter()
            .position(|&c| c == class)
            .map_or(0.0, |i| self.probs[i])
    }

    pub fn probs(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.classes.iter().copied().zip(self.probs.iter().copied())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let i = self.cumulative.partition_point(|&c| c <= u).min(self.classes.len() - 1);
        self.classes[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeDist {
    /// Uniform over the prior's support.
    Uniform,
    /// Proportional to `P*`.
    Empirical,
}

/// `k` negatives, none equal to `positive` (resampled on collision).
pub fn sample_negatives<R: Rng + ?Sized>(
    dist: NegativeDist,
    prior: &EmpiricalPrior,
    positive: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let support = prior.support();
    if support.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "negative sampling needs at least 2 classes, support has {}",
            support.len()
        )));
    }
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let c = match dist {
            NegativeDist::Uniform => support[rng.random_range(0..support.len())],
            NegativeDist::Empirical => prior.sample(rng),
        };
        if c != positive {
            out.push(c);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Adam {
            config,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        model.visit_mut("", &mut |_, t| {
            for (x, &g) in t.data.iter_mut().zip(&t.grad) {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                *x -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                i += 1;
            }
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin_prior: f64,
    pub margin_visual: f64,
    pub margin_context: f64,
    pub negatives: usize,
    pub adam: AdamConfig,
    pub l2_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Uniform negatives for the visual and fused objectives.
    pub devise: bool,
    /// Train the fused baseline with `h(C)` forced to zero.
    pub joint_strip_context: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin_prior: 0.1,
            margin_visual: 0.1,
            margin_context: 0.1,
            negatives: 5,
            adam: AdamConfig::default(),
            l2_weight: 0.0,
            epochs: 10,
            batch_size: 256,
            seed: 0,
            devise: false,
            joint_strip_context: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Applies one `key = value` setting. Returns `false` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "margin" => {
                let m: f64 = parse_value(key, value)?;
                self.margin_prior = m;
                self.margin_visual = m;
                self.margin_context = m;
            }
            "margin_prior" => self.margin_prior = parse_value(key, value)?,
            "margin_visual" => self.margin_visual = parse_value(key, value)?,
            "margin_context" => self.margin_context = parse_value(key, value)?,
            "negatives" => self.negatives = parse_value(key, value)?,
            "lr" => self.adam.lr = parse_value(key, value)?,
            "beta1" => self.adam.beta1 = parse_value(key, value)?,
            "beta2" => self.adam.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam.eps = parse_value(key, value)?,
            "l2_weight" => self.l2_weight = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "devise" => self.devise = parse_value(key, value)?,
            "joint_strip_context" => self.joint_strip_context = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.negatives == 0 {
            return Err(Error::InvalidArgument("negatives per positive must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        for (name, m) in [
            ("margin_prior", self.margin_prior),
            ("margin_visual", self.margin_visual),
            ("margin_context", self.margin_context),
        ] {
            if !(m >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be nonnegative")));
            }
        }
        if !(self.l2_weight >= 0.0) || !(self.adam.lr > 0.0) {
            return Err(Error::InvalidArgument("l2_weight must be >= 0 and lr > 0".into()));
        }
        Ok(())
    }

    fn negative_dist(&self, component: Component) -> NegativeDist {
        match component {
            Component::Prior => NegativeDist::Uniform,
            Component::Visual | Component::Joint if self.devise => NegativeDist::Uniform,
            _ => NegativeDist::Empirical,
        }
    }
}

/// Parses flat `key = value` text. Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, i + 1, "expected `key = value`"))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::parse(path, i + 1, "empty key"));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Objectives

/// Mean hinge over a batch of (positive, negative) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct HingeBatch {
    pub loss: f64,
    pub pairs: usize,
    pub active: Vec<bool>,
    pub kink_gap: f64,
}

impl HingeBatch {
    fn new() -> Self {
        HingeBatch {
            loss: 0.0,
            pairs: 0,
            active: Vec::new(),
            kink_gap: f64::INFINITY,
        }
    }

    /// Records one pair and returns its `(∂/∂s_pos, ∂/∂s_neg)` before averaging.
    fn push(&mut self, margin: f64, s_pos: f64, s_neg: f64) -> (f64, f64) {
        let (l, g) = hinge(margin, s_pos, s_neg);
        self.loss += l;
        self.pairs += 1;
        self.active.push(l > 0.0);
        self.kink_gap = self.kink_gap.min((margin - s_pos + s_neg).abs());
        g
    }

    fn finish(mut self) -> Self {
        if self.pairs > 0 {
            self.loss /= self.pairs as f64;
        }
        self
    }

    pub fn probe(&self) -> Probe {
        Probe {
            value: self.loss,
            active_set: self.active.clone(),
            kink_gap: self.kink_gap,
        }
    }
}

/// A positive example with its sampled negatives.
#[derive(Debug, Clone)]
pub struct Sampled<'a> {
    pub instance: ZslInstance<'a>,
    pub negatives: Vec<usize>,
}

/// Upstream gradients for `[pos, neg_1, …]` scores of one example, scaled by
/// `1/total_pairs`.
fn example_upstream(batch: &mut HingeBatch, margin: f64, scores: &[f64], total_pairs: usize) -> Vec<f64> {
    let scale = 1.0 / total_pairs as f64;
    let mut up = vec![0.0; scores.len()];
    for k in 1..scores.len() {
        let (gp, gn) = batch.push(margin, scores[0], scores[k]);
        up[0] += gp * scale;
        up[k] += gn * scale;
    }
    up
}

fn total_pairs(examples: &[Sampled<'_>]) -> usize {
    examples.iter().map(|e| e.negatives.len()).sum::<usize>().max(1)
}

fn class_ws<'e>(emb: &'e ClassEmbeddings, positive: usize, negatives: &[usize]) -> Vec<&'e [f64]> {
    std::iter::once(positive)
        .chain(negatives.iter().copied())
        .map(|c| emb.get(c))
        .collect()
}

/// Prior objective over `(positive, negatives)` pairs; gradients accumulate
/// into `scorer`.
pub fn loss_prior(
    scorer: &mut PriorScorer,
    emb: &ClassEmbeddings,
    examples: &[(usize, Vec<usize>)],
    margin: f64,
) -> Result<HingeBatch> {
    let n = examples.iter().map(|e| e.1.len()).sum::<usize>().max(1);
    let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
    for (p, negs) in examples {
        for &c in std::iter::once(p).chain(negs) {
            if let std::collections::btree_map::Entry::Vacant(e) = scores.entry(c) {
                e.insert(scorer.logscore(emb.get(c))?);
            }
        }
    }
    let mut batch = HingeBatch::new();
    let mut upstream: BTreeMap<usize, f64> = BTreeMap::new();
    for (p, negs) in examples {
        let s: Vec<f64> = std::iter::once(p).chain(negs).map(|c| scores[c]).collect();
        let up = example_upstream(&mut batch, margin, &s, n);
        for (&c, u) in std::iter::once(p).chain(negs).zip(up) {
            *upstream.entry(c).or_default() += u;
        }
    }
    for (c, u) in upstream {
        if u != 0.0 {
            scorer.score_with_grad(emb.get(c), u)?;
        }
    }
    Ok(batch.finish())
}

pub fn loss_visual(scorer: &mut VisualScorer, emb: &ClassEmbeddings, examples: &[Sampled<'_>], margin: f64) -> Result<HingeBatch> {
    let n = total_pairs(examples);
    let mut batch = HingeBatch::new();
    for ex in examples {
        let ws = class_ws(emb, ex.instance.focus_class(), &ex.negatives);
        let p = scorer.project(ex.instance.focus_feature())?;
        let scores = ws.iter().map(|w| scorer.score_projected(&p, w)).collect::<Result<Vec<_>>>()?;
        let up = example_upstream(&mut batch, margin, &scores, n);
        if up.iter().any(|&u| u != 0.0) {
            scorer.scores_with_grad(ex.instance.focus_feature(), &ws, &up)?;
        }
    }
    Ok(batch.finish())
}

pub fn loss_context(scorer: &mut ContextScorer, emb: &ClassEmbeddings, examples: &[Sampled<'_>], margin: f64) -> Result<HingeBatch> {
    let n = total_pairs(examples);
    let mut batch = HingeBatch::new();
    for ex in examples {
        let ws = class_ws(emb, ex.instance.focus_class(), &ex.negatives);
        let agg = scorer.aggregate(&ex.instance, emb)?;
        let scores = ws.iter().map(|w| scorer.score_aggregate(&agg, w)).collect::<Result<Vec<_>>>()?;
        let up = example_upstream(&mut batch, margin, &scores, n);
        if up.iter().any(|&u| u != 0.0) {
            scorer.scores_with_grad(&agg, &ws, &up)?;
        }
    }
    Ok(batch.finish())
}

pub fn loss_joint(
    scorer: &mut JointScorer,
    emb: &ClassEmbeddings,
    examples: &[Sampled<'_>],
    margin: f64,
    strip_context: bool,
) -> Result<HingeBatch> {
    let n = total_pairs(examples);
    let mut batch = HingeBatch::new();
    for ex in examples {
        let ws = class_ws(emb, ex.instance.focus_class(), &ex.negatives);
        let fused = scorer.project(&ex.instance, emb, strip_context)?;
        let scores: Vec<f64> = ws.iter().map(|w| scorer.score_projected(&fused, w)).collect();
        let up = example_upstream(&mut batch, margin, &scores, n);
        if up.iter().any(|&u| u != 0.0) {
            scorer.scores_with_grad(&ex.instance, emb, &ws, &up, strip_context)?;
        }
    }
    Ok(batch.finish())
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub component: Component,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub curves: Vec<LossRecord>,
    /// Component and 1-based epoch at which a non-finite value appeared. That
    /// component holds its parameters from the end of the previous epoch.
    pub divergence: Option<(Component, usize)>,
}

impl TrainReport {
    pub fn curve(&self, component: Component) -> Vec<f64> {
        self.curves
            .iter()
            .filter(|r| r.component == component)
            .map(|r| r.loss)
            .collect()
    }
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("epoch,component,loss\n");
    for r in records {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.component.name(), r.loss);
    }
    out
}

fn all_finite<M: Parameterized + ?Sized>(model: &M) -> bool {
    let mut ok = true;
    model.visit("", &mut |_, t| ok &= t.data.iter().all(|v| v.is_finite()));
    ok
}

struct Fit {
    curve: Vec<f64>,
    diverged_at: Option<usize>,
}

/// Generic epoch/batch loop. `batch_loss` fills gradients for the given
/// positive indices and returns the mean hinge.
fn fit<M, F>(model: &mut M, n_positives: usize, config: &TrainConfig, rng: &mut ChaCha8Rng, mut batch_loss: F) -> Result<Fit>
where
    M: Parameterized + ?Sized,
    F: FnMut(&mut M, &[usize], &mut ChaCha8Rng) -> Result<f64>,
{
    let mut adam = Adam::new(config.adam, model.n_params());
    let mut order: Vec<usize> = (0..n_positives).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let snapshot = model.flat_params();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut diverged = false;
        for chunk in order.chunks(config.batch_size) {
            model.zero_grad();
            let loss = batch_loss(model, chunk, rng)?;
            let penalty = model.add_l2_penalty(config.l2_weight);
            let objective = loss + penalty;
            if !objective.is_finite() {
                diverged = true;
                break;
            }
            adam.step(model);
            total += objective * chunk.len() as f64;
        }
        if diverged || !all_finite(model) || !total.is_finite() {
            model.set_flat_params(&snapshot);
            model.zero_grad();
            return Ok(Fit {
                curve,
                diverged_at: Some(epoch),
            });
        }
        curve.push(total / n_positives.max(1) as f64);
    }
    model.zero_grad();
    Ok(Fit { curve, diverged_at: None })
}

fn sample_batch<'a>(
    positives: &[ZslInstance<'a>],
    chunk: &[usize],
    dist: NegativeDist,
    prior: &EmpiricalPrior,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sampled<'a>>> {
    chunk
        .iter()
        .map(|&i| {
            let instance = positives[i];
            Ok(Sampled {
                negatives: sample_negatives(dist, prior, instance.focus_class(), k, rng)?,
                instance,
            })
        })
        .collect()
}

fn train_one(
    scorers: ComponentRef<'_>,
    dataset: &SceneDataset,
    emb: &ClassEmbeddings,
    prior: &EmpiricalPrior,
    config: &TrainConfig,
) -> Result<Fit> {
    let component = scorers.component();
    let mut rng = ChaCha8Rng::seed_from_u64(component_seed(config.seed, &format!("train/{}", component.name())));
    let positives = make_instances(dataset, Part::Train, RetrievalDomain::Source);
    let dist = config.negative_dist(component);
    let k = config.negatives;
    let n = positives.len();
    match scorers {
        ComponentRef::Prior(s) => fit(s, n, config, &mut rng, |m, chunk, rng| {
            let examples = chunk
                .iter()
                .map(|&i| {
                    let p = positives[i].focus_class();
                    Ok((p, sample_negatives(dist, prior, p, k, rng)?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(loss_prior(m, emb, &examples, config.margin_prior)?.loss)
        }),
        ComponentRef::Visual(s) => fit(s, n, config, &mut rng, |m, chunk, rng| {
            let examples = sample_batch(&positives, chunk, dist, prior, k, rng)?;
            Ok(loss_visual(m, emb, &examples, config.margin_visual)?.loss)
        }),
        ComponentRef::Context(s) => fit(s, n, config, &mut rng, |m, chunk, rng| {
            let examples = sample_batch(&positives, chunk, dist, prior, k, rng)?;
            Ok(loss_context(m, emb, &examples, config.margin_context)?.loss)
        }),
        ComponentRef::Joint(s) => fit(s, n, config, &mut rng, |m, chunk, rng| {
            let examples = sample_batch(&positives, chunk, dist, prior, k, rng)?;
            Ok(loss_joint(m, emb, &examples, config.margin_visual, config.joint_strip_context)?.loss)
        }),
    }
}

enum ComponentRef<'a> {
    Prior(&'a mut PriorScorer),
    Visual(&'a mut VisualScorer),
    Context(&'a mut ContextScorer),
    Joint(&'a mut JointScorer),
}

impl ComponentRef<'_> {
    fn component(&self) -> Component {
        match self {
            ComponentRef::Prior(_) => Component::Prior,
            ComponentRef::Visual(_) => Component::Visual,
            ComponentRef::Context(_) => Component::Context,
            ComponentRef::Joint(_) => Component::Joint,
        }
    }
}

/// Trains each selected component on its own objective. Components share no
/// parameters, so they run on separate threads; each draws from its own
/// seeded generator, so results do not depend on scheduling.
pub fn train(
    scorers: &mut ScorerSet,
    components: &[Component],
    dataset: &SceneDataset,
    embeddings: &ClassEmbeddings,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if embeddings.len() != dataset.vocab().len() {
        return Err(Error::dim("class embeddings", dataset.vocab().len(), embeddings.len()));
    }
    let prior = EmpiricalPrior::from_dataset(dataset)?;
    if prior.support().len() < 2 {
        return Err(Error::InvalidArgument(
            "training needs at least 2 source classes in the train split".into(),
        ));
    }
    let ScorerSet {
        visual,
        context,
        prior: prior_scorer,
        joint,
        config: model_config,
    } = scorers;
    let mut jobs = Vec::new();
    if components.contains(&Component::Prior) {
        jobs.push(ComponentRef::Prior(prior_scorer));
    }
    if components.contains(&Component::Visual) {
        jobs.push(ComponentRef::Visual(visual));
    }
    if components.contains(&Component::Context) {
        jobs.push(ComponentRef::Context(context));
    }
    if components.contains(&Component::Joint) {
        jobs.push(ComponentRef::Joint(joint));
    }
    let prior = &prior;
    let results: Vec<(Component, Result<Fit>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|job| {
                let c = job.component();
                (c, scope.spawn(move || train_one(job, dataset, embeddings, prior, config)))
            })
            .collect();
        handles
            .into_iter()
            .map(|(c, h)| (c, h.join().expect("training thread panicked")))
            .collect()
    });
    let mut report = TrainReport {
        curves: Vec::new(),
        divergence: None,
    };
    for (component, result) in results {
        let fit = result?;
        for (i, &loss) in fit.curve.iter().enumerate() {
            report.curves.push(LossRecord {
                epoch: i + 1,
                component,
                loss,
            });
        }
        match fit.diverged_at {
            Some(epoch) => {
                if report.divergence.is_none() {
                    report.divergence = Some((component, epoch));
                }
            }
            None => {
                model_config.trained.insert(component);
            }
        }
    }
    Ok(report)
}
