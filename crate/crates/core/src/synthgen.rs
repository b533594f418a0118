//! Deterministic synthetic worlds with a known class prior, theme-driven
//! co-occurrence and controllable visual ambiguity.
//!
//! Generative story: class prior `∝ rank^(−s)` with ranks assigned to classes
//! by a seeded shuffle; each class has a home theme
//! (`class mod n_themes`) and the joint `P(theme, class) = prior(class)·q(theme|class)`
//! puts `concentration` times more mass on the home theme, so the object
//! marginal equals the prior. A scene draws a theme, then `K = min(2 + Poisson(mean − 2), max)`
//! classes i.i.d. from `P(class | theme)`.
//!
//! Latent vectors mix a theme centre, a class offset and a frequency
//! direction; region features are `G·v + noise` and embeddings `u + noise`.
//! Planted ambiguity pairs share their class offset, so they differ only by
//! theme, and one visual latent `v = (u_a + u_b)/2`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::components::component_seed;
use crate::datamodel::{split_domains, split_images, ClassVocab, ObjectInstance, Scene, SceneDataset, DEFAULT_RATIOS};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_classes: usize,
    pub zipf_exponent: f64,
    pub d: usize,
    pub d_visual: usize,
    pub n_themes: usize,
    pub theme_concentration: f64,
    pub visual_noise_sigma: f64,
    pub embedding_noise_sigma: f64,
    pub objects_per_scene_mean: f64,
    pub max_objects_per_scene: usize,
    pub n_scenes: usize,
    pub seed: u64,
    /// Weight of the theme centre in each latent vector.
    pub theme_weight: f64,
    /// Weight of the standardized log-prior direction in each latent vector.
    pub frequency_signal: f64,
    pub p_sup: f64,
    pub ambiguity_pairs: Vec<(usize, usize)>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_classes: 50,
            zipf_exponent: 1.1,
            d: 16,
            d_visual: 24,
            n_themes: 5,
            theme_concentration: 20.0,
            visual_noise_sigma: 0.3,
            embedding_noise_sigma: 0.1,
            objects_per_scene_mean: 4.0,
            max_objects_per_scene: 8,
            n_scenes: 2000,
            seed: 0,
            theme_weight: 1.0,
            frequency_signal: 1.0,
            p_sup: 0.5,
            ambiguity_pairs: Vec::new(),
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("world spec: {m}")));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.d == 0 || self.d_visual == 0 || self.n_scenes == 0 {
            return bad("dimensions and scene count must be positive");
        }
        if self.n_themes == 0 || self.n_themes > self.n_classes {
            return bad("n_themes must lie in 1..=n_classes");
        }
        if !(self.zipf_exponent >= 0.0) || !(self.theme_concentration > 0.0) {
            return bad("zipf_exponent must be >= 0 and theme_concentration > 0");
        }
        if !(self.visual_noise_sigma >= 0.0) || !(self.embedding_noise_sigma >= 0.0) {
            return bad("noise levels must be nonnegative");
        }
        if !(self.objects_per_scene_mean >= 2.0) || self.max_objects_per_scene < 2 {
            return bad("scenes hold at least 2 objects: mean >= 2 and max >= 2");
        }
        if !(self.p_sup > 0.0 && self.p_sup <= 1.0) {
            return bad("p_sup must lie in (0, 1]");
        }
        if !self.theme_weight.is_finite() || !self.frequency_signal.is_finite() {
            return bad("latent weights must be finite");
        }
        let mut used = vec![false; self.n_classes];
        for &(a, b) in &self.ambiguity_pairs {
            if a >= self.n_classes || b >= self.n_classes || a == b {
                return bad("ambiguity pair names an invalid class");
            }
            if used[a] || used[b] {
                return bad("a class belongs to more than one ambiguity pair");
            }
            used[a] = true;
            used[b] = true;
            if self.home_theme(a) == self.home_theme(b) {
                return Err(Error::InvalidArgument(format!(
                    "ambiguity pair ({a}, {b}) shares theme {}",
                    self.home_theme(a)
                )));
            }
        }
        Ok(())
    }

    pub fn home_theme(&self, class: usize) -> usize {
        class % self.n_themes
    }

    pub fn label(class: usize) -> String {
        format!("c{class:04}")
    }

    fn vocab(&self) -> Result<ClassVocab> {
        ClassVocab::new((0..self.n_classes).map(Self::label).collect())
    }

    /// Class prior `∝ rank^(−s)`; ranks are a seeded shuffle of the classes
    /// so the class index carries no frequency information.
    pub fn class_prior(&self) -> Vec<f64> {
        let zipf = zipf_prior(self.n_classes, self.zipf_exponent);
        let mut rank_of: Vec<usize> = (0..self.n_classes).collect();
        rank_of.shuffle(&mut ChaCha8Rng::seed_from_u64(component_seed(self.seed, "ranks")));
        rank_of.iter().map(|&r| zipf[r]).collect()
    }

    /// Source-domain mask the generator will use.
    pub fn source_mask(&self) -> Result<Vec<bool>> {
        let v = split_domains(&self.vocab()?, self.p_sup, component_seed(self.seed, "domains"), &[])?;
        Ok(v.source_mask().to_vec())
    }
}

/// Up to `n` target-domain pairs with different home themes. Classes are
/// taken from most to least frequent and each is paired with the next free
/// class of another theme, so pair members have similar frequencies.
pub fn choose_ambiguity_pairs(spec: &WorldSpec, n: usize) -> Result<Vec<(usize, usize)>> {
    let mask = spec.source_mask()?;
    let prior = spec.class_prior();
    let mut free: Vec<usize> = (0..spec.n_classes).filter(|&c| !mask[c]).collect();
    free.sort_by(|&a, &b| prior[b].total_cmp(&prior[a]).then(a.cmp(&b)));
    let mut pairs = Vec::new();
    while pairs.len() < n {
        let Some(&a) = free.first() else { break };
        let Some(pos) = free.iter().position(|&b| spec.home_theme(b) != spec.home_theme(a)) else {
            break;
        };
        let b = free[pos];
        free.remove(pos);
        free.remove(0);
        pairs.push((a, b));
    }
    Ok(pairs)
}

/// Everything needed to recompute exact probabilities for generated scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTruth {
    pub spec: WorldSpec,
    pub labels: Vec<String>,
    pub prior: Vec<f64>,
    pub theme_probs: Vec<f64>,
    /// `class_given_theme[t][c] = P(c | t)`.
    pub class_given_theme: Vec<Vec<f64>>,
    /// `objects_pmf[k] = P(K = k)`.
    pub objects_pmf: Vec<f64>,
    pub latents: Vec<Vec<f64>>,
    pub visual_latents: Vec<Vec<f64>>,
    /// `d_visual × d`, row-major.
    pub visual_map: Vec<Vec<f64>>,
    pub source_mask: Vec<bool>,
    pub scene_themes: Vec<usize>,
}

/// Exact presence probabilities of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PresenceProbabilities {
    /// P(class present in a scene).
    pub single: Vec<f64>,
    /// `pair[a][b]`: both present (a ≠ b) or at least two of `a` (a = b).
    pub pair: Vec<Vec<f64>>,
}

impl WorldTruth {
    pub fn n_classes(&self) -> usize {
        self.prior.len()
    }

    /// Closed-form presence probabilities under K i.i.d. draws per theme.
    pub fn presence_probabilities(&self) -> PresenceProbabilities {
        let n = self.n_classes();
        let mut single = vec![0.0; n];
        let mut pair = vec![vec![0.0; n]; n];
        for (t, &pt) in self.theme_probs.iter().enumerate() {
            let q = &self.class_given_theme[t];
            for (k, &pk) in self.objects_pmf.iter().enumerate() {
                if pk == 0.0 {
                    continue;
                }
                let w = pt * pk;
                let kk = k as i32;
                for a in 0..n {
                    let absent_a = (1.0 - q[a]).powi(kk);
                    single[a] += w * (1.0 - absent_a);
                    let at_most_one = absent_a + if k >= 1 { k as f64 * q[a] * (1.0 - q[a]).powi(kk - 1) } else { 0.0 };
                    pair[a][a] += w * (1.0 - at_most_one);
                    for b in a + 1..n {
                        let absent_b = (1.0 - q[b]).powi(kk);
                        let neither = (1.0 - q[a] - q[b]).max(0.0).powi(kk);
                        let both = 1.0 - absent_a - absent_b + neither;
                        pair[a][b] += w * both;
                        pair[b][a] += w * both;
                    }
                }
            }
        }
        PresenceProbabilities { single, pair }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub dataset: SceneDataset,
    pub embeddings: EmbeddingTable,
    pub truth: WorldTruth,
}

pub fn zipf_prior(n: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / z).collect()
}

fn objects_pmf(mean: f64, max: usize) -> Vec<f64> {
    let lambda = mean - 2.0;
    let mut pmf = vec![0.0; max + 1];
    let mut term = (-lambda).exp();
    let mut acc = 0.0;
    for (j, slot) in pmf.iter_mut().enumerate().take(max).skip(2) {
        *slot = term;
        acc += term;
        term *= lambda / (j - 1) as f64;
    }
    pmf[max] = (1.0 - acc).max(0.0);
    pmf
}

/// Values survive the 9-significant-digit embedding file format unchanged.
fn to_file_precision(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Generates a world. Equivalent to [`planted_context_world`] with the
/// spec's own ambiguity pairs (possibly none).
pub fn generate(spec: &WorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let n = spec.n_classes;
    let t_count = spec.n_themes;
    let rng = |name: &str| ChaCha8Rng::seed_from_u64(component_seed(spec.seed, name));

    let prior = spec.class_prior();
    let denom = spec.theme_concentration + (t_count - 1) as f64;
    let mut joint = vec![vec![0.0; n]; t_count];
    for c in 0..n {
        for (t, row) in joint.iter_mut().enumerate() {
            let q = if t == spec.home_theme(c) { spec.theme_concentration } else { 1.0 } / denom;
            row[c] = prior[c] * q;
        }
    }
    let theme_probs: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let class_given_theme: Vec<Vec<f64>> = joint
        .iter()
        .zip(&theme_probs)
        .map(|(r, &pt)| r.iter().map(|p| p / pt).collect())
        .collect();
    let pmf = objects_pmf(spec.objects_per_scene_mean, spec.max_objects_per_scene);

    // latent geometry
    let mut geo = rng("latents");
    let centers: Vec<Vec<f64>> = (0..t_count).map(|_| gaussian_vec(&mut geo, spec.d, 1.0)).collect();
    let freq_dir = gaussian_vec(&mut geo, spec.d, 1.0);
    let logp: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
    let mean_lp = logp.iter().sum::<f64>() / n as f64;
    let sd_lp = (logp.iter().map(|l| (l - mean_lp).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut offsets: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut geo, spec.d, 1.0)).collect();
    for &(a, b) in &spec.ambiguity_pairs {
        offsets[b] = offsets[a].clone();
    }
    let latents: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let z = if sd_lp > 0.0 { (logp[c] - mean_lp) / sd_lp } else { 0.0 };
            let offset = &offsets[c];
            (0..spec.d)
                .map(|k| spec.theme_weight * centers[spec.home_theme(c)][k] + offset[k] + spec.frequency_signal * z * freq_dir[k])
                .collect()
        })
        .collect();
    let mut visual_latents = latents.clone();
    for &(a, b) in &spec.ambiguity_pairs {
        let shared: Vec<f64> = latents[a].iter().zip(&latents[b]).map(|(x, y)| 0.5 * (x + y)).collect();
        visual_latents[a] = shared.clone();
        visual_latents[b] = shared;
    }
    let scale = 1.0 / (spec.d as f64).sqrt();
    let visual_map: Vec<Vec<f64>> = (0..spec.d_visual).map(|_| gaussian_vec(&mut geo, spec.d, scale)).collect();
    let class_features: Vec<Vec<f64>> = visual_latents
        .iter()
        .map(|v| visual_map.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect())
        .collect();

    let mut emb_rng = rng("embeddings");
    let mut embeddings = EmbeddingTable::new(spec.d);
    for (c, u) in latents.iter().enumerate() {
        let noise = gaussian_vec(&mut emb_rng, spec.d, spec.embedding_noise_sigma);
        let w: Vec<f64> = u.iter().zip(&noise).map(|(a, b)| to_file_precision(a + b)).collect();
        embeddings.insert(WorldSpec::label(c), w)?;
    }

    // scenes
    let mut srng = rng("scenes");
    let poisson = if spec.objects_per_scene_mean > 2.0 {
        Some(Poisson::new(spec.objects_per_scene_mean - 2.0).expect("positive rate"))
    } else {
        None
    };
    let cumulative = |probs: &[f64]| -> Vec<f64> {
        let mut acc = 0.0;
        probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect()
    };
    let theme_cdf = cumulative(&theme_probs);
    let class_cdfs: Vec<Vec<f64>> = class_given_theme.iter().map(|r| cumulative(r)).collect();
    let draw = |cdf: &[f64], rng: &mut ChaCha8Rng| -> usize {
        let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
        cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
    };
    let mut scenes = Vec::with_capacity(spec.n_scenes);
    let mut scene_themes = Vec::with_capacity(spec.n_scenes);
    for s in 0..spec.n_scenes {
        let theme = draw(&theme_cdf, &mut srng);
        let extra = poisson.map_or(0.0, |p| p.sample(&mut srng)) as usize;
        let k = (2 + extra).min(spec.max_objects_per_scene);
        let mut objects: Vec<ObjectInstance> = (0..k)
            .map(|o| {
                let class = draw(&class_cdfs[theme], &mut srng);
                let noise = gaussian_vec(&mut srng, spec.d_visual, spec.visual_noise_sigma);
                let feature = class_features[class].iter().zip(&noise).map(|(a, b)| a + b).collect();
                let bbox = [
                    srng.random_range(0.0..400.0_f64).round(),
                    srng.random_range(0.0..400.0_f64).round(),
                    srng.random_range(8.0..200.0_f64).round(),
                    srng.random_range(8.0..200.0_f64).round(),
                ];
                ObjectInstance {
                    object_id: format!("o{o}"),
                    class_idx: class,
                    bbox,
                    feature,
                    masked_scene_feature: None,
                }
            })
            .collect();
        // whole scene with the focus region removed: mean of the other regions
        let sums: Vec<f64> = (0..spec.d_visual)
            .map(|j| objects.iter().map(|o| o.feature[j]).sum())
            .collect();
        for o in objects.iter_mut() {
            let m = (k - 1) as f64;
            o.masked_scene_feature = Some(sums.iter().zip(&o.feature).map(|(s, f)| (s - f) / m).collect());
        }
        scenes.push(Scene {
            image_id: format!("img{s:06}"),
            objects,
            masked_scene_feature: None,
        });
        scene_themes.push(theme);
    }

    let source_mask = spec.source_mask()?;
    let mut vocab = spec.vocab()?;
    vocab.set_source_mask(source_mask.clone())?;
    let partition = split_images(spec.n_scenes, DEFAULT_RATIOS, component_seed(spec.seed, "images"))?;
    let dataset = SceneDataset::new(scenes, vocab, spec.d_visual, partition)?;
    let truth = WorldTruth {
        spec: spec.clone(),
        labels: (0..n).map(WorldSpec::label).collect(),
        prior,
        theme_probs,
        class_given_theme,
        objects_pmf: pmf,
        latents,
        visual_latents,
        visual_map,
        source_mask,
        scene_themes,
    };
    Ok(SyntheticWorld {
        dataset,
        embeddings,
        truth,
    })
}

/// A world whose `pairs` share one visual latent while living in different
/// themes, so only context tells them apart.
pub fn planted_context_world(spec: &WorldSpec, pairs: &[(usize, usize)]) -> Result<SyntheticWorld> {
    let mut s = spec.clone();
    s.ambiguity_pairs = pairs.to_vec();
    generate(&s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::DataDir;

    fn small() -> WorldSpec {
        WorldSpec {
            n_classes: 12,
            n_themes: 3,
            d: 6,
            d_visual: 8,
            n_scenes: 300,
            seed: 5,
            ..Default::default()
        }
    }

    fn object_frequencies(ds: &SceneDataset, n: usize) -> Vec<f64> {
        let mut f = vec![0.0; n];
        let mut total = 0.0;
        for s in ds.scenes() {
            for o in &s.objects {
                f[o.class_idx] += 1.0;
                total += 1.0;
            }
        }
        f.iter_mut().for_each(|v| *v /= total);
        f
    }

    fn tv(a: &[f64], b: &[f64]) -> f64 {
        0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
    }

    #[test]
    fn zipf_and_pmf_normalized() {
        let p = zipf_prior(50, 1.1);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.windows(2).all(|w| w[0] > w[1]));
        let pmf = objects_pmf(3.0, 4);
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(pmf[..2], [0.0, 0.0]);
        assert!((pmf[2] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(objects_pmf(2.0, 5), vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn theme_tables_marginalize_to_prior() {
        let w = generate(&small()).unwrap();
        let t = &w.truth;
        for c in 0..12 {
            let m: f64 = (0..3).map(|k| t.theme_probs[k] * t.class_given_theme[k][c]).sum();
            assert!((m - t.prior[c]).abs() < 1e-12);
        }
        for row in &t.class_given_theme {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_prior_converges_to_zipf() {
        let spec = WorldSpec {
            n_scenes: 2500,
            ..small()
        };
        let w = generate(&spec).unwrap();
        let n_obj: usize = w.dataset.scenes().iter().map(|s| s.objects.len()).sum();
        assert!(n_obj >= 10_000, "{n_obj}");
        let f = object_frequencies(&w.dataset, 12);
        assert!(tv(&f, &w.truth.prior) < 0.03, "{}", tv(&f, &w.truth.prior));
    }

    #[test]
    fn zero_exponent_is_uniform() {
        let spec = WorldSpec {
            zipf_exponent: 0.0,
            n_scenes: 2500,
            ..small()
        };
        let w = generate(&spec).unwrap();
        let f = object_frequencies(&w.dataset, 12);
        assert!(tv(&f, &[1.0 / 12.0; 12]) < 0.03);
    }

    #[test]
    fn theme_conditional_counts_pass_chi_square() {
        let spec = WorldSpec {
            n_scenes: 1000,
            ..small()
        };
        let w = generate(&spec).unwrap();
        let t = &w.truth;
        // per theme, class counts against P(c | t); 11 dof, 1% critical value 24.725
        for theme in 0..3 {
            let mut counts = [0.0; 12];
            for (s, &st) in w.dataset.scenes().iter().zip(&t.scene_themes) {
                if st == theme {
                    for o in &s.objects {
                        counts[o.class_idx] += 1.0;
                    }
                }
            }
            let total: f64 = counts.iter().sum();
            // pool cells with small expectation into one
            let mut stat = 0.0;
            let mut cells = 0;
            let (mut pooled_o, mut pooled_e) = (0.0, 0.0);
            for c in 0..12 {
                let e = total * t.class_given_theme[theme][c];
                if e < 5.0 {
                    pooled_o += counts[c];
                    pooled_e += e;
                } else {
                    stat += (counts[c] - e).powi(2) / e;
                    cells += 1;
                }
            }
            if pooled_e > 0.0 {
                stat += (pooled_o - pooled_e).powi(2) / pooled_e;
                cells += 1;
            }
            // chi-square 1% critical values for 1..=11 degrees of freedom
            let crit = [6.635, 9.210, 11.345, 13.277, 15.086, 16.812, 18.475, 20.090, 21.666, 23.209, 24.725];
            assert!(stat < crit[cells - 2], "theme {theme}: {stat} with {cells} cells");
        }
    }

    #[test]
    fn deterministic_and_file_identical() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.truth, b.truth);
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        for (w, d) in [(&a, &da), (&b, &db)] {
            DataDir::new(d.path()).save(&w.dataset, &w.embeddings).unwrap();
        }
        for f in ["scenes.jsonl", "embeddings.txt", "splits.txt"] {
            assert_eq!(
                std::fs::read(da.path().join(f)).unwrap(),
                std::fs::read(db.path().join(f)).unwrap()
            );
        }
        let (loaded, emb) = DataDir::new(da.path()).load().unwrap();
        assert_eq!(loaded, a.dataset);
        assert_eq!(emb, a.embeddings);
        let other = generate(&WorldSpec { seed: 6, ..small() }).unwrap();
        assert_ne!(other.dataset, a.dataset);
    }

    #[test]
    fn scenes_hold_at_least_two_objects() {
        let w = generate(&small()).unwrap();
        for s in w.dataset.scenes() {
            assert!((2..=8).contains(&s.objects.len()));
            for o in &s.objects {
                assert!(o.bbox[2] > 0.0 && o.bbox[3] > 0.0);
            }
        }
    }

    #[test]
    fn ambiguity_pairs_share_visual_latent() {
        let spec = small();
        let pairs = choose_ambiguity_pairs(&spec, 2).unwrap();
        assert_eq!(pairs.len(), 2);
        let mask = spec.source_mask().unwrap();
        let w = planted_context_world(&spec, &pairs).unwrap();
        for &(a, b) in &pairs {
            assert!(!mask[a] && !mask[b]);
            assert_ne!(spec.home_theme(a), spec.home_theme(b));
            assert_eq!(w.truth.visual_latents[a], w.truth.visual_latents[b]);
            assert_ne!(w.truth.latents[a], w.truth.latents[b]);
        }
        // no pairs: same as generate
        assert_eq!(planted_context_world(&spec, &[]).unwrap().dataset, generate(&spec).unwrap().dataset);
        // same theme is refused (classes 0 and 3 share theme 0 of 3)
        assert!(planted_context_world(&spec, &[(0, 3)]).is_err());
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            WorldSpec { n_classes: 0, ..small() },
            WorldSpec { n_themes: 13, ..small() },
            WorldSpec { objects_per_scene_mean: 1.0, ..small() },
            WorldSpec { p_sup: 0.0, ..small() },
        ] {
            assert!(generate(&spec).is_err());
        }
    }

    #[test]
    fn presence_probabilities_match_simulation() {
        let spec = WorldSpec {
            n_classes: 5,
            n_themes: 2,
            max_objects_per_scene: 4,
            objects_per_scene_mean: 3.0,
            n_scenes: 4000,
            ..small()
        };
        let w = generate(&spec).unwrap();
        let p = w.truth.presence_probabilities();
        let m = w.dataset.scenes().len() as f64;
        for a in 0..5 {
            let hit = w
                .dataset
                .scenes()
                .iter()
                .filter(|s| s.objects.iter().any(|o| o.class_idx == a))
                .count() as f64;
            assert!((hit / m - p.single[a]).abs() < 0.03);
        }
        let json = tempfile::NamedTempFile::new().unwrap();
        w.truth.save(json.path()).unwrap();
        assert_eq!(WorldTruth::load(json.path()).unwrap(), w.truth);
    }
}
