//! Seeded synthetic cross-domain CTR benchmark.
//!
//! Ground truth is a second-order (pairwise) model over latent feature
//! embeddings: every feature value of every field carries a latent vector
//! and a bias per domain, and an instance's logit is the sum of pairwise
//! latent dot products plus first-order biases. Labels are Bernoulli
//! draws of the sigmoid-squashed standardized score. Second-order truth
//! is deliberate: with purely first-order signal the cross network and
//! the routing policies would have nothing to find.
//!
//! Two knobs control the transfer problem:
//! - `divergence` (delta in 0..=1): target-domain latents are a spherical
//!   interpolation `cos(delta*pi/2) * source + sin(delta*pi/2) * fresh`,
//!   so 0 means identical generative weights and 1 means independent ones.
//! - `item_overlap`: fraction of the target item pool shared with the
//!   source pool; non-shared target items are new feature strings.
//!
//! Fields: `item` (one-hot), `genres` (multi-hot, derived per item),
//! `ctx_a`, `ctx_b` (one-hot context), all sharing vocabulary across
//! domains. Each domain is split 8:1:1 into train/validation/test.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FieldSchema, Schema};
use crate::numerics::{dot, sigmoid, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_items: usize,
    pub num_genres: usize,
    /// Vocabulary size of each one-hot context field; the field count is
    /// the length, so the schema has `2 + len` fields in total.
    pub ctx_vocab_sizes: Vec<usize>,
    /// Latent dimension of the generative model.
    pub latent_dim: usize,
    pub source_count: usize,
    pub target_count: usize,
    /// Domain divergence delta in 0..=1.
    pub divergence: f64,
    /// Fraction of the target item pool shared with the source pool.
    pub item_overlap: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    /// The reference benchmark: delta = 0.5, 60% item overlap,
    /// 50k source / 5k target instances, seed 42.
    fn default() -> Self {
        Self {
            num_items: 800,
            num_genres: 24,
            ctx_vocab_sizes: vec![40, 40],
            latent_dim: 8,
            source_count: 50_000,
            target_count: 5_000,
            divergence: 0.5,
            item_overlap: 0.6,
            seed: 42,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.num_items == 0
            || self.num_genres == 0
            || self.ctx_vocab_sizes.iter().any(|&n| n == 0)
            || self.latent_dim == 0
            || self.source_count == 0
            || self.target_count == 0
        {
            return Err(Error::Config("synthetic spec counts must be >= 1".into()));
        }
        if self.ctx_vocab_sizes.is_empty() || self.ctx_vocab_sizes.len() > 20 {
            return Err(Error::Config("need between 1 and 20 context fields".into()));
        }
        if !(0.0..=1.0).contains(&self.divergence) {
            return Err(Error::Config(format!("divergence must be in [0,1], got {}", self.divergence)));
        }
        if !(0.0..=1.0).contains(&self.item_overlap) {
            return Err(Error::Config(format!("item_overlap must be in [0,1], got {}", self.item_overlap)));
        }
        Ok(())
    }
}

/// One generated raw row.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedRow {
    pub label: u8,
    pub item: String,
    pub genres: Vec<String>,
    /// One value per context field, in schema order.
    pub ctx: Vec<String>,
}

/// Rows of one domain, already split 8:1:1.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainRows {
    pub train: Vec<GeneratedRow>,
    pub validation: Vec<GeneratedRow>,
    pub test: Vec<GeneratedRow>,
}

/// True per-feature generative weights of both domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTruth {
    pub feature: String,
    pub source_latent: Vec<f64>,
    pub target_latent: Vec<f64>,
    pub source_bias: f64,
    pub target_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub source_positive_rate: f64,
    pub target_positive_rate: f64,
    /// (field name, per-feature truth), in generation order.
    pub truth: Vec<(String, Vec<FeatureTruth>)>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub schema: Schema,
    pub source: DomainRows,
    pub target: DomainRows,
    pub manifest: Manifest,
}

struct FeatureWeights {
    source_latent: Vec<f64>,
    target_latent: Vec<f64>,
    source_bias: f64,
    target_bias: f64,
}

fn draw_weights(g: usize, cos_t: f64, sin_t: f64, rng: &mut SeededRng) -> FeatureWeights {
    let source_latent: Vec<f64> = (0..g).map(|_| rng.next_gaussian()).collect();
    let fresh: Vec<f64> = (0..g).map(|_| rng.next_gaussian()).collect();
    let source_bias = rng.next_gaussian();
    let fresh_bias = rng.next_gaussian();
    let target_latent = source_latent
        .iter()
        .zip(&fresh)
        .map(|(&s, &f)| cos_t * s + sin_t * f)
        .collect();
    FeatureWeights {
        target_latent,
        target_bias: cos_t * source_bias + sin_t * fresh_bias,
        source_latent,
        source_bias,
    }
}

/// Scale applied to the standardized score before the sigmoid; controls
/// how separable the classes are (~0.85 optimal AUC).
const LOGIT_SCALE: f64 = 2.0;

/// Deterministically generates both domains. The draw order is fixed:
/// item genres, per-feature weights (items, genres, ctx_a, ctx_b), source
/// instances, source labels, target instances, target labels.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let g = spec.latent_dim;
    // Divergence is field-heterogeneous: each field rotates by
    // (delta^p) * pi/2 with its own exponent p, so at intermediate delta
    // some fields stay near the source semantics while others drift.
    // Endpoints are exact for every field: delta 0 keeps weights
    // identical, delta 1 makes them independent.
    let rotation = |exponent: f64| -> (f64, f64) {
        if spec.divergence == 0.0 {
            (1.0, 0.0)
        } else if spec.divergence == 1.0 {
            (0.0, 1.0)
        } else {
            let theta = spec.divergence.powf(exponent) * std::f64::consts::FRAC_PI_2;
            (theta.cos(), theta.sin())
        }
    };
    // context fields alternate between slow- and fast-diverging
    let ctx_names: Vec<String> = (0..spec.ctx_vocab_sizes.len())
        .map(|j| format!("ctx_{}", char::from(b'a' + j as u8)))
        .collect();
    let mut field_rotation = vec![("item".to_string(), rotation(0.8)), ("genres".to_string(), rotation(1.3))];
    for (j, name) in ctx_names.iter().enumerate() {
        let exponent = if j % 2 == 0 { 2.5 } else { 0.6 };
        field_rotation.push((name.clone(), rotation(exponent)));
    }

    // item pools: the first `overlap` source items also serve the target
    let overlap = ((spec.num_items as f64) * spec.item_overlap).round() as usize;
    let overlap = overlap.min(spec.num_items);
    let source_items: Vec<String> = (0..spec.num_items).map(|i| format!("item_{i:05}")).collect();
    let target_items: Vec<String> = (0..spec.num_items)
        .map(|i| {
            if i < overlap {
                source_items[i].clone()
            } else {
                format!("titem_{i:05}")
            }
        })
        .collect();
    let mut all_items = source_items.clone();
    all_items.extend(target_items.iter().filter(|s| s.starts_with("titem_")).cloned());

    let genres: Vec<String> = (0..spec.num_genres).map(|i| format!("genre_{i:02}")).collect();
    let ctx_values: Vec<Vec<String>> = spec
        .ctx_vocab_sizes
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let prefix = char::from(b'a' + j as u8);
            (0..n).map(|i| format!("{prefix}_{i:02}")).collect()
        })
        .collect();

    // each item carries 1..=3 distinct genres
    let item_genres: Vec<Vec<usize>> = all_items
        .iter()
        .map(|_| {
            let count = 1 + rng.next_index(3);
            let mut picked = Vec::with_capacity(count);
            while picked.len() < count {
                let c = rng.next_index(spec.num_genres);
                if !picked.contains(&c) {
                    picked.push(c);
                }
            }
            picked
        })
        .collect();

    let mut truth: Vec<(String, Vec<FeatureTruth>)> = Vec::new();
    let mut weights: Vec<Vec<FeatureWeights>> = Vec::new();
    let mut field_names: Vec<&Vec<String>> = vec![&all_items, &genres];
    field_names.extend(ctx_values.iter());
    for ((field, (cos_t, sin_t)), names) in field_rotation.into_iter().zip(field_names) {
        let ws: Vec<FeatureWeights> = names
            .iter()
            .map(|_| draw_weights(g, cos_t, sin_t, &mut rng))
            .collect();
        truth.push((
            field.to_string(),
            names
                .iter()
                .zip(&ws)
                .map(|(n, w)| FeatureTruth {
                    feature: n.clone(),
                    source_latent: w.source_latent.clone(),
                    target_latent: w.target_latent.clone(),
                    source_bias: w.source_bias,
                    target_bias: w.target_bias,
                })
                .collect(),
        ));
        weights.push(ws);
    }
    let (w_item, w_genre, w_ctx) = (&weights[0], &weights[1], &weights[2..]);

    // raw instance: indices into the weight tables
    struct RawInst {
        item: usize,
        ctx: Vec<usize>,
    }

    // pool position -> index into all_items, which is laid out as
    // [source items..., target-only items...]
    let source_pool: Vec<usize> = (0..spec.num_items).collect();
    let target_pool: Vec<usize> = (0..spec.num_items)
        .map(|i| if i < overlap { i } else { spec.num_items + (i - overlap) })
        .collect();

    let sample_domain = |pool: &[usize], n: usize, rng: &mut SeededRng| -> Vec<RawInst> {
        (0..n)
            .map(|_| RawInst {
                item: pool[rng.next_index(pool.len())],
                ctx: spec.ctx_vocab_sizes.iter().map(|&n| rng.next_index(n)).collect(),
            })
            .collect()
    };

    let score = |inst: &RawInst, source_domain: bool| -> f64 {
        let pick = |w: &FeatureWeights| -> (Vec<f64>, f64) {
            if source_domain {
                (w.source_latent.clone(), w.source_bias)
            } else {
                (w.target_latent.clone(), w.target_bias)
            }
        };
        let (e_item, b_item) = pick(&w_item[inst.item]);
        let gs = &item_genres[inst.item];
        let mut e_genre = vec![0.0; g];
        let mut b_genre = 0.0;
        for &gi in gs {
            let (e, b) = pick(&w_genre[gi]);
            for (acc, v) in e_genre.iter_mut().zip(e) {
                *acc += v;
            }
            b_genre += b;
        }
        let scale = 1.0 / gs.len() as f64;
        for v in &mut e_genre {
            *v *= scale;
        }
        b_genre *= scale;
        let mut vecs = vec![e_item, e_genre];
        let mut bias_sum = b_item + b_genre;
        for (j, &c) in inst.ctx.iter().enumerate() {
            let (e, b) = pick(&w_ctx[j][c]);
            vecs.push(e);
            bias_sum += b;
        }
        let mut pair_sum = 0.0;
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                pair_sum += dot(&vecs[i], &vecs[j]);
            }
        }
        let num_pairs = (vecs.len() * (vecs.len() - 1) / 2) as f64;
        pair_sum / (g as f64).sqrt() / num_pairs.sqrt() + 0.35 * bias_sum
    };

    let labeled_rows = |insts: Vec<RawInst>,
                        source_domain: bool,
                        rng: &mut SeededRng|
     -> (Vec<GeneratedRow>, f64) {
        let scores: Vec<f64> = insts.iter().map(|i| score(i, source_domain)).collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / scores.len() as f64;
        let std = var.sqrt().max(1e-9);
        let mut positives = 0usize;
        let rows: Vec<GeneratedRow> = insts
            .iter()
            .zip(&scores)
            .map(|(inst, &s)| {
                let p = sigmoid(LOGIT_SCALE * (s - mean) / std);
                let label = u8::from(rng.next_f64() < p);
                positives += label as usize;
                GeneratedRow {
                    label,
                    item: all_items[inst.item].clone(),
                    genres: item_genres[inst.item].iter().map(|&gi| genres[gi].clone()).collect(),
                    ctx: inst.ctx.iter().enumerate().map(|(j, &c)| ctx_values[j][c].clone()).collect(),
                }
            })
            .collect();
        let rate = positives as f64 / rows.len() as f64;
        (rows, rate)
    };

    let source_insts = sample_domain(&source_pool, spec.source_count, &mut rng);
    let (source_rows, source_rate) = labeled_rows(source_insts, true, &mut rng);
    let target_insts = sample_domain(&target_pool, spec.target_count, &mut rng);
    let (target_rows, target_rate) = labeled_rows(target_insts, false, &mut rng);

    let split = |rows: Vec<GeneratedRow>| -> DomainRows {
        let n = rows.len();
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        let mut rows = rows;
        let test = rows.split_off(n_train + n_val);
        let validation = rows.split_off(n_train);
        DomainRows {
            train: rows,
            validation,
            test,
        }
    };

    let mut fields = vec![FieldSchema::one_hot("item"), FieldSchema::multi_hot("genres")];
    fields.extend(ctx_names.iter().map(FieldSchema::one_hot));
    let schema = Schema::new("label", fields)?;

    Ok(SynthData {
        schema,
        source: split(source_rows),
        target: split(target_rows),
        manifest: Manifest {
            spec: spec.clone(),
            source_positive_rate: source_rate,
            target_positive_rate: target_rate,
            truth,
        },
    })
}

fn write_rows(path: &Path, schema: &Schema, rows: &[GeneratedRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    let mut header = vec!["label".to_string()];
    header.extend(schema.fields.iter().map(|f| f.name.clone()));
    w.write_record(&header)
        .map_err(|e| Error::Config(format!("csv write: {e}")))?;
    for r in rows {
        let mut record = vec![r.label.to_string(), r.item.clone(), r.genres.join("|")];
        record.extend(r.ctx.iter().cloned());
        w.write_record(&record)
            .map_err(|e| Error::Config(format!("csv write: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

impl SynthData {
    /// Writes the six split CSVs, the schema and the ground-truth manifest
    /// into a directory.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for (name, rows) in [
            ("source_train.csv", &self.source.train),
            ("source_validation.csv", &self.source.validation),
            ("source_test.csv", &self.source.test),
            ("target_train.csv", &self.target.train),
            ("target_validation.csv", &self.target.validation),
            ("target_test.csv", &self.target.test),
        ] {
            write_rows(&dir.join(name), &self.schema, rows)?;
        }
        self.schema.save(&dir.join("schema.toml"))?;
        let manifest = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Config(format!("manifest serialize: {e}")))?;
        std::fs::write(dir.join("manifest.json"), manifest)
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(())
    }
}
