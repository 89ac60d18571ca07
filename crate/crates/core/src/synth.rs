//! Synthetic perturbation screens with planted structure.
//!
//! Cells live in a latent space: Gaussian noise, plus a per-batch offset,
//! plus a perturbation effect shared (up to jitter) by all members of a
//! module. Genes read the latent through a softplus-linear rate and counts
//! are drawn from a zero-inflated negative binomial.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    Dataset, EmbeddingMatrix, ExpressionMatrix, Layout, LinkDatabase, Metadata, SampleMetadata,
    DEFAULT_CONTROL_LABEL,
};
use crate::error::{Error, Result};

pub const TRUE_LATENT: &str = "true_latent";

/// Log-scale spread of per-cell library sizes.
const LIBRARY_SPREAD: f64 = 0.2;
/// Baseline log-rate of silent target genes; softplus(−12) ≈ 6e-6.
const SILENT_BASELINE: f64 = -12.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_batches: usize,
    pub cells_per_batch: usize,
    /// Non-control perturbations, silent targets included.
    pub n_perturbations: usize,
    pub n_genes: usize,
    pub latent_dim: usize,
    pub n_modules: usize,
    pub batch_effect_scale: f64,
    pub perturbation_effect_scale: f64,
    pub zero_inflation: f64,
    pub dispersion: f64,
    pub library_size_mean: f64,
    pub n_silent_targets: usize,
    /// Spread of member effects around their module direction, relative
    /// to the unit direction.
    pub module_jitter: f64,
    /// Share of each batch given the control label.
    pub control_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_batches: 8,
            cells_per_batch: 400,
            n_perturbations: 60,
            n_genes: 200,
            latent_dim: 16,
            n_modules: 4,
            batch_effect_scale: 0.5,
            perturbation_effect_scale: 3.0,
            zero_inflation: 0.1,
            dispersion: 5.0,
            library_size_mean: 10_000.0,
            n_silent_targets: 20,
            module_jitter: 0.25,
            control_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("synth config: {msg}")));
        for (name, v) in [
            ("n_batches", self.n_batches),
            ("cells_per_batch", self.cells_per_batch),
            ("n_perturbations", self.n_perturbations),
            ("n_genes", self.n_genes),
            ("latent_dim", self.latent_dim),
            ("n_modules", self.n_modules),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.batch_effect_scale < 0.0 || self.perturbation_effect_scale < 0.0 || self.module_jitter < 0.0 {
            return bad("effect scales must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.zero_inflation) {
            return bad("zero_inflation must lie in [0, 1)".into());
        }
        if !(self.dispersion > 0.0) || !(self.library_size_mean > 0.0) {
            return bad("dispersion and library_size_mean must be positive".into());
        }
        if !(self.control_fraction > 0.0 && self.control_fraction < 1.0) {
            return bad("control_fraction must lie in (0, 1)".into());
        }
        if self.n_perturbations > self.n_genes {
            return bad("every perturbation targets a distinct gene; need n_genes >= n_perturbations".into());
        }
        if self.n_silent_targets >= self.n_perturbations {
            return bad("n_silent_targets must leave at least one active perturbation".into());
        }
        if self.n_modules > self.n_perturbations - self.n_silent_targets {
            return bad("more modules than active perturbations".into());
        }
        if self.n_controls_per_batch() == 0 || self.n_controls_per_batch() >= self.cells_per_batch {
            return bad("control_fraction leaves no controls or no perturbed cells per batch".into());
        }
        Ok(())
    }

    fn n_controls_per_batch(&self) -> usize {
        (self.control_fraction * self.cells_per_batch as f64).round() as usize
    }

    pub fn n_cells(&self) -> usize {
        self.n_batches * self.cells_per_batch
    }
}

pub fn gene_id(j: usize) -> String {
    format!("G{j:05}")
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// Raw counts plus the `true_latent` embedding.
    pub dataset: Dataset,
    pub true_latent: Array2<f64>,
    /// All within-module pairs of active perturbations.
    pub true_links: LinkDatabase,
    pub silent_targets: BTreeSet<String>,
    pub modules: Vec<Vec<String>>,
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let l = config.latent_dim;
    let g = config.n_genes;
    let p = config.n_perturbations;
    let n_active = p - config.n_silent_targets;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let module_dirs: Vec<Array1<f64>> = (0..config.n_modules)
        .map(|_| unit(Array1::from_shape_fn(l, |_| normal(&mut rng))))
        .collect();
    let mut effects = Array2::<f64>::zeros((p, l));
    let mut modules: Vec<Vec<String>> = vec![Vec::new(); config.n_modules];
    for k in 0..n_active {
        let m = k % config.n_modules;
        let jitter = Array1::from_shape_fn(l, |_| normal(&mut rng) * config.module_jitter / (l as f64).sqrt());
        let dir = unit(&module_dirs[m] + &jitter);
        effects.row_mut(k).assign(&(dir * config.perturbation_effect_scale));
        modules[m].push(gene_id(k));
    }
    let batch_offsets = Array2::from_shape_fn((config.n_batches, l), |_| {
        normal(&mut rng) * config.batch_effect_scale
    });
    let mut baseline = Array1::from_shape_fn(g, |_| normal(&mut rng));
    let mut loadings = Array2::from_shape_fn((g, l), |_| normal(&mut rng) / (l as f64).sqrt());
    let silent: Vec<usize> = (n_active..p).collect();
    for &j in &silent {
        baseline[j] = SILENT_BASELINE;
        loadings.row_mut(j).fill(0.0);
    }

    // labels: per batch, controls first, then perturbations cycling from a
    // batch-specific start so every batch sees every perturbation when it can
    let n_ctl = config.n_controls_per_batch();
    if config.cells_per_batch - n_ctl < p {
        log::warn!(
            "{} perturbed cells per batch cannot cover {p} perturbations",
            config.cells_per_batch - n_ctl
        );
    }
    let mut assignment: Vec<Option<usize>> = Vec::with_capacity(config.n_cells());
    let mut samples = Vec::with_capacity(config.n_cells());
    for b in 0..config.n_batches {
        for c in 0..config.cells_per_batch {
            let pert = (c >= n_ctl).then(|| (c - n_ctl + b * 7) % p);
            let i = b * config.cells_per_batch + c;
            samples.push(SampleMetadata {
                sample_id: format!("cell{i:07}"),
                perturbation: pert.map_or_else(|| DEFAULT_CONTROL_LABEL.to_string(), gene_id),
                batch: format!("batch{b:03}"),
                is_control: pert.is_none(),
                cell_line: Some("synthetic".into()),
            });
            assignment.push(pert);
        }
    }
    let metadata = Metadata::new(samples, DEFAULT_CONTROL_LABEL)?;

    let n = config.n_cells();
    let mut latent = Array2::<f64>::zeros((n, l));
    let mut counts = Array2::<f64>::zeros((n, g));
    let gamma_shape = config.dispersion;
    latent
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(counts.axis_iter_mut(Axis(0)))
        .enumerate()
        .try_for_each(|(i, (mut z, mut y))| -> Result<()> {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64 + 1);
            let b = i / config.cells_per_batch;
            for k in 0..l {
                let e: f64 = rng.sample(StandardNormal);
                z[k] = e + batch_offsets[[b, k]];
            }
            if let Some(pi) = assignment[i] {
                z += &effects.row(pi);
            }
            let rates: Vec<f64> = (0..g)
                .map(|j| softplus(baseline[j] + loadings.row(j).dot(&z)))
                .collect();
            let total: f64 = rates.iter().sum();
            let lib_noise: f64 = rng.sample(StandardNormal);
            let library = config.library_size_mean * (LIBRARY_SPREAD * lib_noise - 0.5 * LIBRARY_SPREAD * LIBRARY_SPREAD).exp();
            for j in 0..g {
                let mu = library * rates[j] / total;
                let w = Gamma::new(gamma_shape, mu / gamma_shape)
                    .map_err(|e| Error::InvalidArgument(format!("gamma: {e}")))?
                    .sample(&mut rng);
                let count = if w > 0.0 {
                    Poisson::new(w)
                        .map_err(|e| Error::InvalidArgument(format!("poisson: {e}")))?
                        .sample(&mut rng)
                } else {
                    0.0
                };
                let dropped = rng.random::<f64>() < config.zero_inflation;
                y[j] = if dropped { 0.0 } else { count };
            }
            Ok(())
        })?;

    let genes: Vec<String> = (0..g).map(gene_id).collect();
    let expression = ExpressionMatrix::new(genes, counts, Layout::RawCounts)?;
    let mut embeddings = BTreeMap::new();
    embeddings.insert(
        TRUE_LATENT.to_string(),
        EmbeddingMatrix::new(latent.clone(), format!("synth:latent:seed={}", config.seed))?,
    );
    let dataset = Dataset::new(metadata, Some(expression), embeddings)?;

    let mut pairs = Vec::new();
    for members in &modules {
        for (a, x) in members.iter().enumerate() {
            for y in &members[a + 1..] {
                pairs.push((x.clone(), y.clone()));
            }
        }
    }
    Ok(SynthOutput {
        dataset,
        true_latent: latent,
        true_links: LinkDatabase::from_pairs("true_links", pairs),
        silent_targets: silent.into_iter().map(gene_id).collect(),
        modules,
    })
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v / norm
    } else {
        v
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Writes `true_links.tsv` and `silent_targets.txt` into `dir`.
pub fn write_ground_truth(out: &SynthOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut links = String::from("# within-module perturbation pairs\n");
    for (a, b) in out.true_links.iter() {
        links.push_str(&format!("{a}\t{b}\n"));
    }
    let path = dir.join("true_links.tsv");
    fs::write(&path, links).map_err(|e| Error::io(&path, e))?;
    let mut silent = String::new();
    for gene in &out.silent_targets {
        silent.push_str(gene);
        silent.push('\n');
    }
    let path = dir.join("silent_targets.txt");
    fs::write(&path, silent).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
