//! The three energy functions and the joint baseline.
//!
//! Each scorer returns an unnormalized log-probability for a class given its
//! embedding `w`:
//!
//! * [`VisualScorer`]: `cos(W_V·x + b_V, w)` for a region descriptor `x`.
//! * [`ContextScorer`]: an MLP over `[h(C); w]` where `h` averages context
//!   member vectors selected by a [`ContextModel`].
//! * [`PriorScorer`]: an MLP over `w` alone.
//! * [`JointScorer`]: the non-factorized baseline, cosine between
//!   `MLP([h(C); W·x + b])` and `w`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Domain, OracleAccess, ZslInstance};
use crate::diffprims::{cosine_grad_wrt_first, join, Activation, AffineParams, Checkpoint, Mlp2Params, Parameterized, Tensor};
use crate::embeddings::{dot, norm, ClassEmbeddings};
use crate::error::{Error, Result};

/// Which context objects contribute to `h(C)`, and how.
///
/// `S`/`T`: source/target domain; `H`: label embedding (high level);
/// `L`: projected region feature (low level). `image` replaces all of them by
/// a learned map of the masked whole-scene descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ContextModel {
    pub sh: bool,
    pub sl: bool,
    pub tl: bool,
    pub th: bool,
    pub image: bool,
}

impl ContextModel {
    pub const SH: ContextModel = ContextModel {
        sh: true,
        sl: false,
        tl: false,
        th: false,
        image: false,
    };
    pub const IMAGE: ContextModel = ContextModel {
        sh: false,
        sl: false,
        tl: false,
        th: false,
        image: true,
    };

    pub fn needs_oracle(&self) -> bool {
        self.th
    }

    fn validate(&self) -> Result<()> {
        let any_set = self.sh || self.sl || self.tl || self.th;
        if self.image && any_set {
            return Err(Error::InvalidArgument("context model `i` cannot be combined".into()));
        }
        if !self.image && !any_set {
            return Err(Error::InvalidArgument("empty context model".into()));
        }
        Ok(())
    }
}

impl fmt::Display for ContextModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.image {
            return f.write_str("i");
        }
        let parts: Vec<&str> = [(self.sh, "sh"), (self.sl, "sl"), (self.tl, "tl"), (self.th, "th")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for ContextModel {
    type Err = Error;

    /// `sh`, `sl`, `tl`, `th`, `i`, or `+`-joined unions such as `sh+tl`.
    /// `th-union` is shorthand for the oracle model `sh+th`.
    fn from_str(s: &str) -> Result<Self> {
        let mut m = ContextModel::default();
        if s == "th-union" {
            m.sh = true;
            m.th = true;
            return Ok(m);
        }
        for part in s.split(['+', ',']) {
            match part.trim() {
                "sh" => m.sh = true,
                "sl" => m.sl = true,
                "tl" => m.tl = true,
                "th" => m.th = true,
                "i" => m.image = true,
                other => return Err(Error::InvalidArgument(format!("unknown context model part `{other}`"))),
            }
        }
        m.validate()?;
        Ok(m)
    }
}

impl Serialize for ContextModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ContextModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualScoring {
    /// Cosine of projection and embedding.
    #[default]
    Cosine,
    /// Raw dot product `f(V)ᵀw`.
    Dot,
}

/// `h(C)` together with what its backward pass needs.
#[derive(Debug, Clone)]
pub struct ContextAggregate<'a> {
    pub vector: Vec<f64>,
    low_level: Vec<&'a [f64]>,
    masked: Option<&'a [f64]>,
    members: usize,
}

impl ContextAggregate<'_> {
    pub fn members(&self) -> usize {
        self.members
    }
}

/// Context representation `h_θ²(C)`: parameters `W_C, b_C` for low-level
/// members and `g_θI` for the whole-image model.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextAggregator {
    pub model: ContextModel,
    pub ctx_proj: AffineParams,
    pub masked_proj: Option<AffineParams>,
    oracle: bool,
}

impl ContextAggregator {
    pub fn new(model: ContextModel, d_visual: usize, d: usize, oracle: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        model.validate()?;
        if model.needs_oracle() && !oracle {
            return Err(Error::OracleRequired(format!("context model `{model}` reads target-domain labels")));
        }
        let ctx_proj = AffineParams::init(d_visual, d, rng);
        let masked_proj = model.image.then(|| AffineParams::init(d_visual, d, rng));
        Ok(ContextAggregator {
            model,
            ctx_proj,
            masked_proj,
            oracle,
        })
    }

    pub fn dim(&self) -> usize {
        self.ctx_proj.output_dim()
    }

    /// Mean over the pooled member multiset (one shared denominator);
    /// the zero vector when no member is present.
    pub fn aggregate<'a>(&self, instance: &ZslInstance<'a>, embeddings: &ClassEmbeddings) -> Result<ContextAggregate<'a>> {
        let d = self.dim();
        if self.model.image {
            let masked = instance.masked_scene_feature().ok_or_else(|| {
                Error::InvalidArgument(format!("instance {} has no masked scene feature", instance.id()))
            })?;
            let proj = self.masked_proj.as_ref().expect("image model has masked_proj");
            return Ok(ContextAggregate {
                vector: proj.forward(masked)?,
                low_level: Vec::new(),
                masked: Some(masked),
                members: 1,
            });
        }
        let mut sum = vec![0.0; d];
        let mut members = 0usize;
        let mut low_level = Vec::new();
        for obj in instance.context() {
            match obj.domain {
                Domain::Source => {
                    if self.model.sh {
                        let class = obj.source_class.expect("source objects carry their class");
                        add_into(&mut sum, embeddings.get(class));
                        members += 1;
                    }
                    if self.model.sl {
                        add_into(&mut sum, &self.ctx_proj.forward(obj.feature)?);
                        low_level.push(obj.feature);
                        members += 1;
                    }
                }
                Domain::Target => {
                    if self.model.tl {
                        add_into(&mut sum, &self.ctx_proj.forward(obj.feature)?);
                        low_level.push(obj.feature);
                        members += 1;
                    }
                }
            }
        }
        if self.model.th {
            if !self.oracle {
                return Err(Error::OracleRequired("T_H context members".into()));
            }
            for class in instance.oracle_target_context_classes(OracleAccess::grant()) {
                add_into(&mut sum, embeddings.get(class));
                members += 1;
            }
        }
        if members > 0 {
            let inv = 1.0 / members as f64;
            sum.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(ContextAggregate {
            vector: sum,
            low_level,
            masked: None,
            members,
        })
    }

    /// Propagates `∂L/∂h` into the projection parameters.
    pub fn backward(&mut self, agg: &ContextAggregate<'_>, dh: &[f64]) -> Result<()> {
        if let Some(masked) = agg.masked {
            self.masked_proj
                .as_mut()
                .expect("image model has masked_proj")
                .backward(masked, dh)?;
            return Ok(());
        }
        if agg.members == 0 || agg.low_level.is_empty() {
            return Ok(());
        }
        let inv = 1.0 / agg.members as f64;
        let scaled: Vec<f64> = dh.iter().map(|g| g * inv).collect();
        for x in &agg.low_level {
            self.ctx_proj.backward(x, &scaled)?;
        }
        Ok(())
    }
}

impl Parameterized for ContextAggregator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.ctx_proj.visit(&join(prefix, "ctx_proj"), f);
        if let Some(m) = &self.masked_proj {
            m.visit(&join(prefix, "masked_proj"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ctx_proj.visit_mut(&join(prefix, "ctx_proj"), f);
        if let Some(m) = &mut self.masked_proj {
            m.visit_mut(&join(prefix, "masked_proj"), f);
        }
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

/// Score of a projection against a class embedding, and its gradient with
/// respect to the projection.
fn projection_score(scoring: VisualScoring, p: &[f64], w: &[f64]) -> Option<(f64, Vec<f64>)> {
    match scoring {
        VisualScoring::Cosine => cosine_grad_wrt_first(p, w),
        VisualScoring::Dot => Some((dot(p, w), w.to_vec())),
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct VisualScorer {
    pub proj: AffineParams,
    pub scoring: VisualScoring,
    degenerate: AtomicUsize,
}

impl Clone for VisualScorer {
    fn clone(&self) -> Self {
        VisualScorer {
            proj: self.proj.clone(),
            scoring: self.scoring,
            degenerate: AtomicUsize::new(self.degenerate.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for VisualScorer {
    fn eq(&self, other: &Self) -> bool {
        self.proj == other.proj && self.scoring == other.scoring
    }
}

impl VisualScorer {
    pub fn new(proj: AffineParams, scoring: VisualScoring) -> Self {
        VisualScorer {
            proj,
            scoring,
            degenerate: AtomicUsize::new(0),
        }
    }

    pub fn init(d_visual: usize, d: usize, scoring: VisualScoring, rng: &mut ChaCha8Rng) -> Self {
        Self::new(AffineParams::init(d_visual, d, rng), scoring)
    }

    pub fn project(&self, feature: &[f64]) -> Result<Vec<f64>> {
        self.proj.forward(feature)
    }

    /// Score of an already projected region. A zero-norm projection under
    /// cosine scoring yields −1 and bumps [`Self::degenerate_count`].
    pub fn score_projected(&self, projected: &[f64], w: &[f64]) -> Result<f64> {
        if projected.len() != w.len() {
            return Err(Error::dim("visual score", projected.len(), w.len()));
        }
        match self.scoring {
            VisualScoring::Cosine => {
                let (np, nw) = (norm(projected), norm(w));
                if np == 0.0 || nw == 0.0 {
                    self.degenerate.fetch_add(1, Ordering::Relaxed);
                    return Ok(-1.0);
                }
                Ok((dot(projected, w) / (np * nw)).clamp(-1.0, 1.0))
            }
            VisualScoring::Dot => Ok(dot(projected, w)),
        }
    }

    pub fn logscore(&self, feature: &[f64], w: &[f64]) -> Result<f64> {
        self.score_projected(&self.project(feature)?, w)
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.load(Ordering::Relaxed)
    }

    /// Scores for one region against several embeddings, accumulating
    /// `Σ upstream_k · ∂score_k/∂θ`. Degenerate projections contribute no gradient.
    pub fn scores_with_grad(&mut self, feature: &[f64], ws: &[&[f64]], upstream: &[f64]) -> Result<Vec<f64>> {
        let p = self.project(feature)?;
        let mut dp = vec![0.0; p.len()];
        let mut scores = Vec::with_capacity(ws.len());
        for (w, &u) in ws.iter().zip(upstream) {
            match projection_score(self.scoring, &p, w) {
                Some((s, g)) => {
                    scores.push(s);
                    if u != 0.0 {
                        for (a, b) in dp.iter_mut().zip(g) {
                            *a += u * b;
                        }
                    }
                }
                None => scores.push(-1.0),
            }
        }
        self.proj.backward(feature, &dp)?;
        Ok(scores)
    }
}

impl Parameterized for VisualScorer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextScorer {
    pub aggregator: ContextAggregator,
    pub scorer: Mlp2Params,
}

impl ContextScorer {
    pub fn init(
        model: ContextModel,
        dims: Dims,
        activation: Activation,
        oracle: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let aggregator = ContextAggregator::new(model, dims.d_visual, dims.d, oracle, rng)?;
        let scorer = Mlp2Params::init(2 * dims.d, dims.hidden, 1, activation, rng);
        Ok(ContextScorer { aggregator, scorer })
    }

    pub fn model(&self) -> ContextModel {
        self.aggregator.model
    }

    pub fn aggregate<'a>(&self, instance: &ZslInstance<'a>, embeddings: &ClassEmbeddings) -> Result<ContextAggregate<'a>> {
        self.aggregator.aggregate(instance, embeddings)
    }

    pub fn score_aggregate(&self, agg: &ContextAggregate<'_>, w: &[f64]) -> Result<f64> {
        if w.len() != agg.vector.len() {
            return Err(Error::dim("context score", agg.vector.len(), w.len()));
        }
        Ok(self.scorer.forward(&concat(&agg.vector, w))?[0])
    }

    pub fn logscore(&self, instance: &ZslInstance<'_>, embeddings: &ClassEmbeddings, w: &[f64]) -> Result<f64> {
        self.score_aggregate(&self.aggregate(instance, embeddings)?, w)
    }

    /// Scores against several embeddings, accumulating `Σ upstream_k ∂s_k/∂θ`
    /// into the scorer and the aggregator.
    pub fn scores_with_grad(&mut self, agg: &ContextAggregate<'_>, ws: &[&[f64]], upstream: &[f64]) -> Result<Vec<f64>> {
        let d = agg.vector.len();
        let mut dh = vec![0.0; d];
        let mut scores = Vec::with_capacity(ws.len());
        for (w, &u) in ws.iter().zip(upstream) {
            let cache = self.scorer.forward_cached(&concat(&agg.vector, w))?;
            scores.push(cache.output[0]);
            if u != 0.0 {
                let dx = self.scorer.backward(&cache, &[u])?;
                add_into(&mut dh, &dx[..d]);
            }
        }
        self.aggregator.backward(agg, &dh)?;
        Ok(scores)
    }
}

impl Parameterized for ContextScorer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.aggregator.visit(prefix, f);
        self.scorer.visit(&join(prefix, "scorer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.aggregator.visit_mut(prefix, f);
        self.scorer.visit_mut(&join(prefix, "scorer"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorScorer {
    pub net: Mlp2Params,
}

impl PriorScorer {
    pub fn init(d: usize, hidden: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        PriorScorer {
            net: Mlp2Params::init(d, hidden, 1, activation, rng),
        }
    }

    pub fn logscore(&self, w: &[f64]) -> Result<f64> {
        Ok(self.net.forward(w)?[0])
    }

    pub fn score_with_grad(&mut self, w: &[f64], upstream: f64) -> Result<f64> {
        let cache = self.net.forward_cached(w)?;
        if upstream != 0.0 {
            self.net.backward(&cache, &[upstream])?;
        }
        Ok(cache.output[0])
    }
}

impl Parameterized for PriorScorer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.net.visit(&join(prefix, "net"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.net.visit_mut(&join(prefix, "net"), f);
    }
}

/// Non-factorized baseline: region and context fused before the comparison
/// with `w`. Owns its own projections so it never shares parameters with the
/// factorized components.
#[derive(Debug, Clone, PartialEq)]
pub struct JointScorer {
    pub visual_proj: AffineParams,
    pub aggregator: ContextAggregator,
    pub fuse: Mlp2Params,
    pub scoring: VisualScoring,
}

impl JointScorer {
    pub fn init(
        model: ContextModel,
        dims: Dims,
        activation: Activation,
        scoring: VisualScoring,
        oracle: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let visual_proj = AffineParams::init(dims.d_visual, dims.d, rng);
        let aggregator = ContextAggregator::new(model, dims.d_visual, dims.d, oracle, rng)?;
        let fuse = Mlp2Params::init(2 * dims.d, dims.hidden, dims.d, activation, rng);
        Ok(JointScorer {
            visual_proj,
            aggregator,
            fuse,
            scoring,
        })
    }

    /// Fused projection `MLP([h(C); W·x + b])` for an instance.
    pub fn project(&self, instance: &ZslInstance<'_>, embeddings: &ClassEmbeddings, strip_context: bool) -> Result<Vec<f64>> {
        let mut agg = self.aggregator.aggregate(instance, embeddings)?;
        if strip_context {
            agg.vector.iter_mut().for_each(|v| *v = 0.0);
        }
        let p = self.visual_proj.forward(instance.focus_feature())?;
        self.fuse.forward(&concat(&agg.vector, &p))
    }

    pub fn score_projected(&self, fused: &[f64], w: &[f64]) -> f64 {
        projection_score(self.scoring, fused, w).map_or(-1.0, |(s, _)| s)
    }

    pub fn logscore(&self, instance: &ZslInstance<'_>, embeddings: &ClassEmbeddings, w: &[f64]) -> Result<f64> {
        Ok(self.score_projected(&self.project(instance, embeddings, false)?, w))
    }

    /// With `strip_context`, `h(C)` is forced to zero and receives no gradient.
    pub fn scores_with_grad(
        &mut self,
        instance: &ZslInstance<'_>,
        embeddings: &ClassEmbeddings,
        ws: &[&[f64]],
        upstream: &[f64],
        strip_context: bool,
    ) -> Result<Vec<f64>> {
        let mut agg = self.aggregator.aggregate(instance, embeddings)?;
        if strip_context {
            agg.vector.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = instance.focus_feature();
        let p = self.visual_proj.forward(x)?;
        let cache = self.fuse.forward_cached(&concat(&agg.vector, &p))?;
        let fused = &cache.output;
        let mut dfused = vec![0.0; fused.len()];
        let mut scores = Vec::with_capacity(ws.len());
        for (w, &u) in ws.iter().zip(upstream) {
            match projection_score(self.scoring, fused, w) {
                Some((s, g)) => {
                    scores.push(s);
                    for (a, b) in dfused.iter_mut().zip(g) {
                        *a += u * b;
                    }
                }
                None => scores.push(-1.0),
            }
        }
        let dinput = self.fuse.backward(&cache, &dfused)?;
        let d = agg.vector.len();
        self.visual_proj.backward(x, &dinput[d..])?;
        if !strip_context {
            self.aggregator.backward(&agg, &dinput[..d])?;
        }
        Ok(scores)
    }
}

impl Parameterized for JointScorer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.visual_proj.visit(&join(prefix, "visual_proj"), f);
        self.aggregator.visit(prefix, f);
        self.fuse.visit(&join(prefix, "fuse"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.visual_proj.visit_mut(&join(prefix, "visual_proj"), f);
        self.aggregator.visit_mut(prefix, f);
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
    }
}

// ---------------------------------------------------------------------------
// Model assembly

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Prior,
    Visual,
    Context,
    Joint,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Prior, Component::Visual, Component::Context, Component::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Component::Prior => "prior",
            Component::Visual => "visual",
            Component::Context => "context",
            Component::Joint => "joint",
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(Component::Prior),
            "visual" => Ok(Component::Visual),
            "context" => Ok(Component::Context),
            "joint" => Ok(Component::Joint),
            _ => Err(Error::InvalidArgument(format!("unknown component `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub d_visual: usize,
    pub hidden: usize,
}

/// Everything needed to rebuild a [`ScorerSet`] around a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: Dims,
    pub activation: Activation,
    pub context_model: ContextModel,
    pub visual_scoring: VisualScoring,
    pub oracle: bool,
    pub devise: bool,
    pub seed: u64,
    pub trained: BTreeSet<Component>,
}

impl ModelConfig {
    pub fn new(dims: Dims, context_model: ContextModel, seed: u64) -> Self {
        ModelConfig {
            dims,
            activation: Activation::Tanh,
            context_model,
            visual_scoring: VisualScoring::Cosine,
            oracle: false,
            devise: false,
            seed,
            trained: BTreeSet::new(),
        }
    }
}

/// FNV-1a of a component name, mixed into the run seed so each component's
/// initialization is independent of which others exist.
pub fn component_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h
}

/// All four scorers of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerSet {
    pub config: ModelConfig,
    pub visual: VisualScorer,
    pub context: ContextScorer,
    pub prior: PriorScorer,
    pub joint: JointScorer,
}

impl ScorerSet {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let dims = config.dims;
        let rng = |name: &str| ChaCha8Rng::seed_from_u64(component_seed(config.seed, &format!("init/{name}")));
        let visual = VisualScorer::init(dims.d_visual, dims.d, config.visual_scoring, &mut rng("visual"));
        let context = ContextScorer::init(config.context_model, dims, config.activation, config.oracle, &mut rng("context"))?;
        let prior = PriorScorer::init(dims.d, dims.hidden, config.activation, &mut rng("prior"));
        let joint = JointScorer::init(
            config.context_model,
            dims,
            config.activation,
            config.visual_scoring,
            config.oracle,
            &mut rng("joint"),
        )?;
        Ok(ScorerSet {
            config,
            visual,
            context,
            prior,
            joint,
        })
    }

    pub fn component(&self, c: Component) -> &dyn Parameterized {
        match c {
            Component::Prior => &self.prior,
            Component::Visual => &self.visual,
            Component::Context => &self.context,
            Component::Joint => &self.joint,
        }
    }

    pub fn component_mut(&mut self, c: Component) -> &mut dyn Parameterized {
        match c {
            Component::Prior => &mut self.prior,
            Component::Visual => &mut self.visual,
            Component::Context => &mut self.context,
            Component::Joint => &mut self.joint,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for c in Component::ALL {
            ck.absorb(self.component(c), c.name());
        }
        ck
    }

    pub fn from_checkpoint(config: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut set = ScorerSet::init(config)?;
        for c in Component::ALL {
            ck.restore(set.component_mut(c), c.name())?;
        }
        Ok(set)
    }

    /// Rounds every parameter to f32, matching what a checkpoint stores.
    pub fn quantize(&mut self) {
        for c in Component::ALL {
            self.component_mut(c)
                .visit_mut("", &mut |_, t| t.data.iter_mut().for_each(|v| *v = f64::from(*v as f32)));
        }
    }
}

/// Which scorers feed the three slots of a combined score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub context: bool,
    pub visual: VisualSlot,
    pub prior: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualSlot {
    None,
    Visual,
    Joint,
}

impl Selection {
    /// `M(∅)`: prior only.
    pub const PRIOR: Selection = Selection {
        context: false,
        visual: VisualSlot::None,
        prior: true,
    };
    /// `M(V)`.
    pub const VISUAL: Selection = Selection {
        context: false,
        visual: VisualSlot::Visual,
        prior: true,
    };
    /// `M(C)`.
    pub const CONTEXT: Selection = Selection {
        context: true,
        visual: VisualSlot::None,
        prior: true,
    };
    /// `M(C, V)`.
    pub const FULL: Selection = Selection {
        context: true,
        visual: VisualSlot::Visual,
        prior: true,
    };
    /// `M(C ⊕ V)`.
    pub const JOINT: Selection = Selection {
        context: false,
        visual: VisualSlot::Joint,
        prior: true,
    };

    /// DeViSE-style models have no learned prior.
    pub fn without_prior(mut self) -> Self {
        self.prior = false;
        self
    }
}

impl FromStr for Selection {
    type Err = Error;

    /// Comma-separated subset of `context`, `visual`, `joint`, `prior`.
    fn from_str(s: &str) -> Result<Self> {
        let mut sel = Selection {
            context: false,
            visual: VisualSlot::None,
            prior: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "context" => sel.context = true,
                "prior" => sel.prior = true,
                "visual" | "joint" if sel.visual != VisualSlot::None => {
                    return Err(Error::InvalidArgument("visual and joint share one slot".into()))
                }
                "visual" => sel.visual = VisualSlot::Visual,
                "joint" => sel.visual = VisualSlot::Joint,
                other => return Err(Error::InvalidArgument(format!("unknown component `{other}`"))),
            }
        }
        if !sel.context && !sel.prior && sel.visual == VisualSlot::None {
            return Err(Error::InvalidArgument("empty component selection".into()));
        }
        Ok(sel)
    }
}

/// Unnormalized log-scores of one candidate; inactive slots hold 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub class: usize,
    pub context: f64,
    pub visual: f64,
    pub prior: f64,
}

/// Scores every candidate. The context aggregate and region projection are
/// computed once per instance.
pub fn score_all_classes(
    scorers: &ScorerSet,
    selection: Selection,
    instance: &ZslInstance<'_>,
    candidates: &[usize],
    embeddings: &ClassEmbeddings,
) -> Result<Vec<ScoreTriple>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    let agg = if selection.context {
        Some(scorers.context.aggregate(instance, embeddings)?)
    } else {
        None
    };
    let projected = match selection.visual {
        VisualSlot::None => None,
        VisualSlot::Visual => Some(scorers.visual.project(instance.focus_feature())?),
        VisualSlot::Joint => Some(scorers.joint.project(instance, embeddings, false)?),
    };
    candidates
        .iter()
        .map(|&class| {
            let w = embeddings.get(class);
            let context = match &agg {
                Some(a) => scorers.context.score_aggregate(a, w)?,
                None => 0.0,
            };
            let visual = match (&projected, selection.visual) {
                (Some(p), VisualSlot::Visual) => scorers.visual.score_projected(p, w)?,
                (Some(p), VisualSlot::Joint) => scorers.joint.score_projected(p, w),
                _ => 0.0,
            };
            let prior = if selection.prior {
                scorers.prior.logscore(w)?
            } else {
                0.0
            };
            Ok(ScoreTriple {
                class,
                context,
                visual,
                prior,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{ClassVocab, ObjectInstance, Partition, Scene, SceneDataset};
    use crate::diffprims::{grad_check, Probe};
    use rand::Rng;

    const DIMS: Dims = Dims {
        d: 3,
        d_visual: 4,
        hidden: 5,
    };

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Classes 0,1 source; 2,3 target. Scene 0 has four objects, scene 1 one.
    fn fixture() -> (SceneDataset, ClassEmbeddings) {
        let mut vocab = ClassVocab::new(vec!["a".into(), "b".into(), "c".into(), "d".into()]).unwrap();
        vocab.set_source_mask(vec![true, true, false, false]).unwrap();
        let mut r = rng(99);
        let mut o = |id: &str, c: usize| ObjectInstance {
            object_id: id.into(),
            class_idx: c,
            bbox: [0.0, 0.0, 2.0, 2.0],
            feature: (0..4).map(|_| r.random_range(-1.0..1.0)).collect(),
            masked_scene_feature: Some(vec![0.5, -0.25, 0.1, 0.9]),
        };
        let scenes = vec![
            Scene {
                image_id: "s0".into(),
                objects: vec![o("x0", 2), o("x1", 0), o("x2", 3), o("x3", 3)],
                masked_scene_feature: None,
            },
            Scene {
                image_id: "s1".into(),
                objects: vec![o("y0", 2)],
                masked_scene_feature: None,
            },
        ];
        let ds = SceneDataset::new(scenes, vocab, 4, Partition::all_train(2)).unwrap();
        let emb = ClassEmbeddings::from_vectors(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.3, 0.2, 1.0],
            vec![-0.5, 0.4, 0.2],
        ])
        .unwrap();
        (ds, emb)
    }

    #[test]
    fn visual_alignment_and_orthogonality() {
        let proj = AffineParams::from_parts(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap();
        let v = VisualScorer::new(proj, VisualScoring::Cosine);
        assert!((v.logscore(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(v.logscore(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert_eq!(v.logscore(&[0.0, 0.0], &[0.0, 2.0]).unwrap(), -1.0);
        assert_eq!(v.degenerate_count(), 1);
    }

    #[test]
    fn visual_matches_direct_formula() {
        let mut r = rng(4);
        let v = VisualScorer::init(6, 3, VisualScoring::Cosine, &mut r);
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let w = [0.2, -0.9, 0.4];
        // independent recomputation of cos(W x + b, w)
        let wt = &v.proj.weight.data;
        let p: Vec<f64> = (0..3)
            .map(|o| v.proj.bias.data[o] + (0..6).map(|i| wt[o * 6 + i] * x[i]).sum::<f64>())
            .collect();
        let expected = p.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
            / (p.iter().map(|a| a * a).sum::<f64>().sqrt() * w.iter().map(|a| a * a).sum::<f64>().sqrt());
        assert!((v.logscore(&x, &w).unwrap() - expected).abs() < 1e-9);
        // rescaling w leaves the cosine unchanged
        let w3: Vec<f64> = w.iter().map(|a| a * 3.7).collect();
        assert!((v.logscore(&x, &w3).unwrap() - expected).abs() < 1e-12);
    }

    fn aggregator(model: &str, oracle: bool) -> Result<ContextAggregator> {
        ContextAggregator::new(model.parse()?, 4, 3, oracle, &mut rng(1))
    }

    #[test]
    fn sh_mean_of_two_labels() {
        let mut vocab = ClassVocab::new(vec!["f".into(), "p".into(), "q".into()]).unwrap();
        vocab.set_source_mask(vec![false, true, true]).unwrap();
        let o = |id: &str, c| ObjectInstance {
            object_id: id.into(),
            class_idx: c,
            bbox: [0.0, 0.0, 1.0, 1.0],
            feature: vec![1.0, 1.0, 1.0, 1.0],
            masked_scene_feature: None,
        };
        let ds = SceneDataset::new(
            vec![Scene {
                image_id: "s".into(),
                objects: vec![o("0", 0), o("1", 1), o("2", 2)],
                masked_scene_feature: None,
            }],
            vocab,
            4,
            Partition::all_train(1),
        )
        .unwrap();
        let emb = ClassEmbeddings::from_vectors(vec![vec![9.0, 9.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let agg = ContextAggregator::new(ContextModel::SH, 4, 2, false, &mut rng(0)).unwrap();
        let h = agg.aggregate(&ZslInstance::new(&ds, 0, 0), &emb).unwrap();
        assert_eq!(h.vector, vec![0.5, 0.5]);
    }

    #[test]
    fn union_uses_pooled_denominator() {
        let (ds, emb) = fixture();
        let agg = aggregator("sh+tl", false).unwrap();
        // focus x0 (class 2): context = x1 (source, class 0), x2 and x3 (target).
        let inst = ZslInstance::new(&ds, 0, 0);
        let h = agg.aggregate(&inst, &emb).unwrap();
        let objs = &ds.scenes()[0].objects;
        let p1 = agg.ctx_proj.forward(&objs[2].feature).unwrap();
        let p2 = agg.ctx_proj.forward(&objs[3].feature).unwrap();
        for k in 0..3 {
            let expected = (emb.get(0)[k] + p1[k] + p2[k]) / 3.0;
            assert!((h.vector[k] - expected).abs() < 1e-12);
        }
        assert_eq!(h.members(), 3);
    }

    #[test]
    fn empty_context_gives_zero_vector() {
        let (ds, emb) = fixture();
        let agg = aggregator("sh+sl+tl", false).unwrap();
        let h = agg.aggregate(&ZslInstance::new(&ds, 1, 0), &emb).unwrap();
        assert_eq!(h.vector, vec![0.0; 3]);
        let mut r = rng(2);
        let scorer = ContextScorer::init("sh".parse().unwrap(), DIMS, Activation::Tanh, false, &mut r).unwrap();
        assert!(scorer.logscore(&ZslInstance::new(&ds, 1, 0), &emb, emb.get(2)).unwrap().is_finite());
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let (ds, emb) = fixture();
        let agg = aggregator("sh+sl+tl", false).unwrap();
        let h1 = agg.aggregate(&ZslInstance::new(&ds, 0, 0), &emb).unwrap().vector;
        let mut scenes = ds.scenes().to_vec();
        scenes[0].objects[1..].reverse();
        let ds2 = SceneDataset::new(scenes, ds.vocab().clone(), 4, Partition::all_train(2)).unwrap();
        let h2 = agg.aggregate(&ZslInstance::new(&ds2, 0, 0), &emb).unwrap().vector;
        for (a, b) in h1.iter().zip(&h2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn th_requires_oracle() {
        assert!(matches!(aggregator("sh+th", false), Err(Error::OracleRequired(_))));
        let (ds, emb) = fixture();
        let agg = aggregator("th-union", true).unwrap();
        let h = agg.aggregate(&ZslInstance::new(&ds, 0, 0), &emb).unwrap();
        // members: w_a (source), w_d twice (target, oracle)
        for k in 0..3 {
            let expected = (emb.get(0)[k] + 2.0 * emb.get(3)[k]) / 3.0;
            assert!((h.vector[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn non_oracle_models_never_read_target_labels() {
        let (ds, emb) = fixture();
        ds.poison_target_labels();
        for model in ["sh", "sl", "tl", "sl+tl", "sh+tl", "sh+sl", "sh+sl+tl", "i"] {
            let agg = aggregator(model, false).unwrap();
            for f in 0..4 {
                agg.aggregate(&ZslInstance::new(&ds, 0, f), &emb).unwrap();
            }
        }
    }

    #[test]
    fn image_model_uses_masked_feature() {
        let (ds, emb) = fixture();
        let mut r = rng(8);
        let mut s = ContextScorer::init(ContextModel::IMAGE, DIMS, Activation::Tanh, false, &mut r).unwrap();
        s.scorer.layer1.bias.data = vec![0.1, -0.2, 0.3, 0.0, 0.05];
        let inst = ZslInstance::new(&ds, 0, 1);
        let g = s.aggregator.masked_proj.as_ref().unwrap().forward(&[0.5, -0.25, 0.1, 0.9]).unwrap();
        let w = emb.get(3);
        let expected = s.scorer.forward(&concat(&g, w)).unwrap()[0];
        assert_eq!(s.logscore(&inst, &emb, w).unwrap(), expected);
    }

    #[test]
    fn context_score_hand_computed() {
        // d = 1, hidden = 1: score = w2 * tanh(w1·[h; w] + b1) + b2
        let (ds, _) = fixture();
        let emb = ClassEmbeddings::from_vectors(vec![vec![0.5], vec![1.0], vec![-1.0], vec![2.0]]).unwrap();
        let dims = Dims {
            d: 1,
            d_visual: 4,
            hidden: 1,
        };
        let mut s = ContextScorer::init(ContextModel::SH, dims, Activation::Tanh, false, &mut rng(0)).unwrap();
        s.scorer.layer1.weight.data = vec![0.3, -0.7];
        s.scorer.layer1.bias.data = vec![0.1];
        s.scorer.layer2.weight.data = vec![1.5];
        s.scorer.layer2.bias.data = vec![-0.2];
        // focus x0: source context = {x1: class 0}, h = 0.5
        let inst = ZslInstance::new(&ds, 0, 0);
        let got = s.logscore(&inst, &emb, emb.get(2)).unwrap();
        let expected = 1.5 * (0.3 * 0.5 - -0.7 + 0.1f64).tanh() - 0.2;
        assert!((got - expected).abs() < 1e-9);
        // zero scorer weights -> bias regardless of input
        let mut z = s.clone();
        z.scorer = Mlp2Params::zeros(2, 1, 1, Activation::Tanh);
        z.scorer.layer2.bias.data = vec![0.75];
        assert_eq!(z.logscore(&inst, &emb, emb.get(1)).unwrap(), 0.75);
    }

    #[test]
    fn prior_hand_computed() {
        let mut p = PriorScorer::init(2, 1, Activation::Tanh, &mut rng(0));
        p.net.layer1.weight.data = vec![0.5, -1.0];
        p.net.layer1.bias.data = vec![0.2];
        p.net.layer2.weight.data = vec![2.0];
        p.net.layer2.bias.data = vec![0.3];
        let expected = 2.0 * (0.5 * 0.4 - 1.0 * 0.1 + 0.2f64).tanh() + 0.3;
        assert!((p.logscore(&[0.4, 0.1]).unwrap() - expected).abs() < 1e-9);
        p.net = Mlp2Params::zeros(2, 1, 1, Activation::Tanh);
        p.net.layer2.bias.data = vec![-0.4];
        assert_eq!(p.logscore(&[0.4, 0.1]).unwrap(), -0.4);
        assert_eq!(p.logscore(&[9.0, 1.0]).unwrap(), -0.4);
    }

    #[test]
    fn context_gradients_check() {
        let (ds, emb) = fixture();
        for model in ["sh", "sl+tl", "sh+sl+tl", "i"] {
            let mut s = ContextScorer::init(model.parse().unwrap(), DIMS, Activation::Tanh, false, &mut rng(3)).unwrap();
            let inst = ZslInstance::new(&ds, 0, 0);
            let ws = [emb.get(2), emb.get(3)];
            let report = grad_check(
                &mut s,
                |m| {
                    let agg = m.aggregate(&inst, &emb).unwrap();
                    let sc = m.scores_with_grad(&agg, &ws, &[1.0, -0.5]).unwrap();
                    Probe::smooth(sc[0] - 0.5 * sc[1])
                },
                1e-5,
                1e-5,
            )
            .unwrap();
            assert!(report.passed(), "{model}: {report:?}");
        }
    }

    #[test]
    fn joint_gradients_check() {
        let (ds, emb) = fixture();
        let mut j = JointScorer::init("sh+tl".parse().unwrap(), DIMS, Activation::Tanh, VisualScoring::Cosine, false, &mut rng(5))
            .unwrap();
        let inst = ZslInstance::new(&ds, 0, 0);
        let ws = [emb.get(2), emb.get(3)];
        let report = grad_check(
            &mut j,
            |m| {
                let sc = m.scores_with_grad(&inst, &emb, &ws, &[1.0, -1.0], false).unwrap();
                Probe::smooth(sc[0] - sc[1])
            },
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn score_all_matches_single_calls_and_order() {
        let (ds, emb) = fixture();
        let config = ModelConfig::new(DIMS, "sh+tl".parse().unwrap(), 7);
        let set = ScorerSet::init(config).unwrap();
        let inst = ZslInstance::new(&ds, 0, 0);
        let table = score_all_classes(&set, Selection::FULL, &inst, &[2, 3, 0], &emb).unwrap();
        assert_eq!(table.len(), 3);
        for t in &table {
            let w = emb.get(t.class);
            assert_eq!(t.context, set.context.logscore(&inst, &emb, w).unwrap());
            assert_eq!(t.visual, set.visual.logscore(inst.focus_feature(), w).unwrap());
            assert_eq!(t.prior, set.prior.logscore(w).unwrap());
        }
        let permuted = score_all_classes(&set, Selection::FULL, &inst, &[0, 3, 2], &emb).unwrap();
        for t in &table {
            assert_eq!(Some(t), permuted.iter().find(|p| p.class == t.class));
        }
        let joint = score_all_classes(&set, Selection::JOINT, &inst, &[2], &emb).unwrap();
        assert_eq!(joint[0].visual, set.joint.logscore(&inst, &emb, emb.get(2)).unwrap());
        assert_eq!(joint[0].context, 0.0);
        assert!(score_all_classes(&set, Selection::FULL, &inst, &[], &emb).is_err());
    }

    #[test]
    fn checkpoint_names_and_restore() {
        let mut config = ModelConfig::new(DIMS, "i".parse().unwrap(), 3);
        config.trained.insert(Component::Visual);
        let set = ScorerSet::init(config.clone()).unwrap();
        let ck = set.to_checkpoint();
        for name in [
            "visual.proj.weight",
            "context.ctx_proj.bias",
            "context.masked_proj.weight",
            "context.scorer.layer2.bias",
            "prior.net.layer1.weight",
            "joint.fuse.layer1.weight",
            "joint.visual_proj.weight",
        ] {
            assert!(ck.tensors.contains_key(name), "{name}");
        }
        let mut q = set.clone();
        q.quantize();
        assert_eq!(ScorerSet::from_checkpoint(config, &ck).unwrap(), q);
    }

    #[test]
    fn context_model_names() {
        for s in ["sh", "sl", "tl", "sl+tl", "sh+tl", "sh+sl", "sh+sl+tl", "sh+th", "i"] {
            let m: ContextModel = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert_eq!("th-union".parse::<ContextModel>().unwrap().to_string(), "sh+th");
        assert!("i+sh".parse::<ContextModel>().is_err());
        assert!("xx".parse::<ContextModel>().is_err());
    }
}
