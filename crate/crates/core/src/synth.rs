//! Deterministic synthetic essays for training and testing without real
//! corpora or transformer models.
//!
//! Each essay gets a latent vector `z` in `R^d`. Token embeddings are `z`
//! plus Gaussian noise, the essay vector is their mean plus a little more
//! noise, and the gold scores are `intercept + A z` on the rubric grid.
//! Latents are nudged (minimal-norm) so that the affine map lands exactly on
//! the grid, which keeps the scores a noiseless function of the latents.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    discretize_score, write_jsonl, EmbeddingBundle, EssayRecord, TraitScores, EMBEDDINGS_FILE, ESSAYS_FILE,
    ROOT_HEAD, TRAIT_COUNT,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tgeb;

pub const META_FILE: &str = "synth_meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_essays: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub dim: usize,
    pub seed: u64,
    pub min_sentence: usize,
    pub max_sentence: usize,
    /// Standard deviation of token embeddings around the latent.
    pub token_noise: f64,
    /// Standard deviation added to the mean token embedding.
    pub essay_noise: f64,
    /// Norm of each trait's coefficient row.
    pub gain: f64,
    pub intercept: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_essays: 64,
            min_tokens: 10,
            max_tokens: 30,
            dim: 16,
            seed: 0,
            min_sentence: 3,
            max_sentence: 8,
            token_noise: 0.3,
            essay_noise: 0.05,
            gain: 0.8,
            intercept: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(Error::arg(format!("synthetic width {} must be at least 4", self.dim)));
        }
        if self.min_tokens < 2 || self.max_tokens < self.min_tokens {
            return Err(Error::arg(format!(
                "token range {}..={} must start at 2 or more",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.min_sentence == 0 || self.max_sentence < self.min_sentence {
            return Err(Error::arg("sentence length range is empty"));
        }
        if [self.token_noise, self.essay_noise, self.gain, self.intercept]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::arg("noise, gain and intercept must be finite and non-negative"));
        }
        Ok(())
    }
}

/// How the scores were planted, written next to the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub config: SynthConfig,
    pub intercept: f64,
    /// `TRAIT_COUNT x dim`, row-major by trait.
    pub coefficients: Vec<Vec<f64>>,
    /// One latent per essay, in record order.
    pub latents: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub records: Vec<EssayRecord>,
    pub bundles: Vec<EmbeddingBundle>,
    pub meta: SynthMeta,
}

impl SynthDataset {
    /// Writes `essays.jsonl`, `embeddings.tgeb` and `synth_meta.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut jsonl = Vec::new();
        write_jsonl(&mut jsonl, &self.records)?;
        fs::write(dir.join(ESSAYS_FILE), jsonl)?;
        tgeb::write_file(&dir.join(EMBEDDINGS_FILE), &self.bundles)?;
        let mut meta = serde_json::to_string_pretty(&self.meta)?;
        meta.push('\n');
        fs::write(dir.join(META_FILE), meta)?;
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `k` orthonormal vectors in `R^d` from Gram-Schmidt on Gaussian draws.
fn orthonormal(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = gaussian(rng, d, 1.0);
        for q in &basis {
            let c = dot(&v, q);
            v.iter_mut().zip(q).for_each(|(x, qi)| *x -= c * qi);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Sentence spans tiling `n` tokens.
fn sentence_spans(rng: &mut ChaCha8Rng, n: usize, config: &SynthConfig) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    while start < n {
        let len = rng.random_range(config.min_sentence..=config.max_sentence).min(n - start);
        spans.push((start, start + len));
        start += len;
    }
    spans
}

/// Uniform random recursive tree over a shuffled sentence: the first token in
/// shuffled order is the root, every later one attaches to an earlier one.
fn sentence_tree(rng: &mut ChaCha8Rng, start: usize, end: usize, deps: &mut Vec<(i64, i64)>) {
    let mut order: Vec<usize> = (start..end).collect();
    order.shuffle(rng);
    deps.push((ROOT_HEAD, order[0] as i64));
    for k in 1..order.len() {
        let head = order[rng.random_range(0..k)];
        deps.push((head as i64, order[k] as i64));
    }
}

pub fn gen_synthetic(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let d = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // trait t uses direction t mod r; with d < TRAIT_COUNT some traits share one
    let r = d.min(TRAIT_COUNT);
    let basis = orthonormal(&mut rng, r, d);
    let coefficients: Vec<Vec<f64>> = (0..TRAIT_COUNT)
        .map(|t| basis[t % r].iter().map(|v| config.gain * v).collect())
        .collect();

    let width = (config.num_essays.max(1) - 1).to_string().len();
    let mut records = Vec::with_capacity(config.num_essays);
    let mut bundles = Vec::with_capacity(config.num_essays);
    let mut latents = Vec::with_capacity(config.num_essays);
    for e in 0..config.num_essays {
        let id = format!("synth-{e:0width$}");
        let mut z = gaussian(&mut rng, d, 1.0);

        let mut targets = vec![0.0; r];
        for (k, q) in basis.iter().enumerate() {
            let raw = config.intercept + config.gain * dot(q, &z);
            targets[k] = discretize_score(raw)?;
        }
        for (k, q) in basis.iter().enumerate() {
            let shift = ((targets[k] - config.intercept) / config.gain) - dot(q, &z);
            z.iter_mut().zip(q).for_each(|(x, qi)| *x += shift * qi);
        }
        let mut scores = [0.0; TRAIT_COUNT];
        for (t, s) in scores.iter_mut().enumerate() {
            *s = targets[t % r];
        }

        let n = rng.random_range(config.min_tokens..=config.max_tokens);
        let spans = sentence_spans(&mut rng, n, config);
        let mut deps = Vec::with_capacity(n);
        for &(s, t) in &spans {
            sentence_tree(&mut rng, s, t, &mut deps);
        }
        let tokens: Vec<String> = (0..n).map(|_| format!("w{}", rng.random_range(0..500u32))).collect();

        let mut matrix = Vec::with_capacity(n * d);
        let mut mean = vec![0.0; d];
        for _ in 0..n {
            let row: Vec<f64> = gaussian(&mut rng, d, config.token_noise)
                .into_iter()
                .zip(&z)
                .map(|(eps, zi)| zi + eps)
                .collect();
            mean.iter_mut().zip(&row).for_each(|(m, x)| *m += x / n as f64);
            matrix.extend(row);
        }
        let essay_vec: Vec<f64> = gaussian(&mut rng, d, config.essay_noise)
            .into_iter()
            .zip(&mean)
            .map(|(eps, m)| m + eps)
            .collect();

        records.push(EssayRecord {
            id: id.clone(),
            tokens,
            sentence_spans: spans,
            deps,
            gold: Some(TraitScores(scores)),
        });
        bundles.push(EmbeddingBundle {
            essay_id: id,
            essay_vec,
            token_matrix: Tensor::matrix(n, d, matrix)?,
        });
        latents.push(z);
    }
    Ok(SynthDataset {
        records,
        bundles,
        meta: SynthMeta {
            config: config.clone(),
            intercept: config.intercept,
            coefficients,
            latents,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_record;

    fn small() -> SynthConfig {
        SynthConfig {
            num_essays: 20,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn records_validate() {
        let ds = gen_synthetic(&small()).unwrap();
        assert_eq!(ds.records.len(), 20);
        for (r, b) in ds.records.iter().zip(&ds.bundles) {
            let v = validate_record(r, b);
            assert!(v.is_ok(), "{}: {:?}", r.id, v.messages());
            assert!((10..=30).contains(&r.tokens.len()));
            assert_eq!(b.dim(), 16);
        }
    }

    #[test]
    fn each_sentence_is_a_tree() {
        let ds = gen_synthetic(&small()).unwrap();
        for r in &ds.records {
            for &(s, e) in &r.sentence_spans {
                let inside: Vec<(i64, i64)> = r
                    .deps
                    .iter()
                    .copied()
                    .filter(|&(_, dep)| (s as i64..e as i64).contains(&dep))
                    .collect();
                assert_eq!(inside.len(), e - s);
                assert_eq!(inside.iter().filter(|(h, _)| *h == ROOT_HEAD).count(), 1);
                // every token reaches the root without cycles
                let head_of = |t: i64| inside.iter().find(|(_, d)| *d == t).unwrap().0;
                for t in s..e {
                    let mut cur = t as i64;
                    let mut steps = 0;
                    while cur != ROOT_HEAD {
                        cur = head_of(cur);
                        steps += 1;
                        assert!(steps <= e - s);
                    }
                }
            }
        }
    }

    #[test]
    fn scores_are_exactly_affine_in_latents() {
        let ds = gen_synthetic(&small()).unwrap();
        let m = &ds.meta;
        for (r, z) in ds.records.iter().zip(&m.latents) {
            let gold = r.gold.unwrap();
            for t in 0..TRAIT_COUNT {
                let y = m.intercept + dot(&m.coefficients[t], z);
                assert!((y - gold.0[t]).abs() < 1e-9);
                assert_eq!(discretize_score(gold.0[t]).unwrap(), gold.0[t]);
            }
        }
    }

    #[test]
    fn narrow_width_shares_directions() {
        let ds = gen_synthetic(&SynthConfig {
            dim: 4,
            num_essays: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        for r in &ds.records {
            let g = r.gold.unwrap().0;
            assert_eq!(g[0], g[4]);
            assert_eq!(g[1], g[5]);
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(gen_synthetic(&SynthConfig { dim: 3, ..SynthConfig::default() }).is_err());
        assert!(gen_synthetic(&SynthConfig { min_tokens: 1, ..SynthConfig::default() }).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_synthetic(&small()).unwrap().write_dir(a.path()).unwrap();
        gen_synthetic(&small()).unwrap().write_dir(b.path()).unwrap();
        for f in [ESSAYS_FILE, EMBEDDINGS_FILE, META_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let other = gen_synthetic(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(other.records, gen_synthetic(&small()).unwrap().records);
    }
}
