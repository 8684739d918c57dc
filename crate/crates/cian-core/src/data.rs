//! Synthetic merchant data with planted structure, standing in for the
//! proprietary production features. Each category owns disjoint transaction
//! coordinates, split into two subtype halves: a merchant carries a coherent
//! signal pattern on the half matching its subtype and incoherent
//! signal-magnitude garbage on the other half. The subtype is readable only
//! from a flag coordinate in text space, so telling signal from garbage
//! requires conditioning on the text side. Spare transaction coordinates are
//! grouped with shared noise factors, giving intra-modal structure.

use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, standard_normal, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MerchantRecord {
    pub id: String,
    pub category: usize,
    pub t: Tensor,
    pub d: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_categories: usize,
    pub merchants_per_category: usize,
    pub t_dim: usize,
    pub d_dim: usize,
    /// Transaction coordinates owned by each (category, subtype) pair;
    /// empty means "lay out automatically from `coords_per_subtype`".
    pub informative: Vec<[Vec<usize>; 2]>,
    /// Text coordinate carrying each category's subtype flag; empty means
    /// automatic layout.
    pub flag_coords: Vec<usize>,
    pub coords_per_subtype: usize,
    pub text_coords_per_category: usize,
    /// Always-on component on all of a category's informative coordinates.
    pub category_mean_scale: f64,
    /// Coherent pattern on the subtype-matching half.
    pub signal_scale: f64,
    /// Incoherent (random-sign) energy on the other half.
    pub garbage_scale: f64,
    pub text_scale: f64,
    pub flag_scale: f64,
    pub noise_sigma: f64,
    /// Spare coordinates share noise factors in groups of this size.
    pub nuisance_group_size: usize,
    pub nuisance_group_sigma: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_categories: 6,
            merchants_per_category: 200,
            t_dim: 32,
            d_dim: 48,
            informative: Vec::new(),
            flag_coords: Vec::new(),
            coords_per_subtype: 2,
            text_coords_per_category: 3,
            category_mean_scale: 0.75,
            signal_scale: 1.0,
            garbage_scale: 1.0,
            text_scale: 1.0,
            flag_scale: 1.0,
            noise_sigma: 0.05,
            nuisance_group_size: 4,
            // Strong enough that raw transaction features do not cluster by
            // category on their own; the planted signal still dominates the
            // informative coordinates.
            nuisance_group_sigma: 1.0,
            seed: 0,
        }
    }
}

/// Planted structure emitted next to every generated dataset, used as the
/// oracle by explainer checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Per category: all informative transaction coordinates (both subtypes).
    pub informative: Vec<Vec<usize>>,
    /// Per category: informative coordinates split by subtype.
    pub informative_by_subtype: Vec<[Vec<usize>; 2]>,
    /// Per category: the text coordinate carrying the subtype flag.
    pub flag_coords: Vec<usize>,
    /// Per category: text coordinates carrying the category pattern.
    pub text_coords: Vec<Vec<usize>>,
}

impl GeneratorConfig {
    fn layout(&self) -> Result<GroundTruth> {
        let by_subtype: Vec<[Vec<usize>; 2]> = if !self.informative.is_empty() {
            self.informative.clone()
        } else {
            (0..self.n_categories)
                .map(|c| {
                    let base = c * 2 * self.coords_per_subtype;
                    [
                        (base..base + self.coords_per_subtype).collect(),
                        (base + self.coords_per_subtype..base + 2 * self.coords_per_subtype)
                            .collect(),
                    ]
                })
                .collect()
        };
        let text_coords: Vec<Vec<usize>> = (0..self.n_categories)
            .map(|c| {
                (c * self.text_coords_per_category..(c + 1) * self.text_coords_per_category)
                    .collect()
            })
            .collect();
        let flag_coords: Vec<usize> = if !self.flag_coords.is_empty() {
            self.flag_coords.clone()
        } else {
            let base = self.n_categories * self.text_coords_per_category;
            (base..base + self.n_categories).collect()
        };

        if by_subtype.len() != self.n_categories || flag_coords.len() != self.n_categories {
            return Err(Error::Parameter(
                "informative/flag coordinate lists must have one entry per category".to_string(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for sets in &by_subtype {
            for set in sets {
                for &j in set {
                    if j >= self.t_dim {
                        return Err(Error::Parameter(format!(
                            "informative coordinate {j} out of range for t_dim {}",
                            self.t_dim
                        )));
                    }
                    if !seen.insert(j) {
                        return Err(Error::Parameter(format!(
                            "informative coordinate {j} assigned to two categories"
                        )));
                    }
                }
            }
        }
        for (items, dim) in [(&flag_coords, self.d_dim)] {
            for &j in items {
                if j >= dim {
                    return Err(Error::Parameter(format!(
                        "flag coordinate {j} out of range for d_dim {dim}"
                    )));
                }
            }
        }
        if self.n_categories * self.text_coords_per_category + self.n_categories > self.d_dim {
            return Err(Error::Parameter("text layout does not fit d_dim".to_string()));
        }
        let informative = by_subtype
            .iter()
            .map(|[a, b]| {
                let mut v: Vec<usize> = a.iter().chain(b).copied().collect();
                v.sort_unstable();
                v
            })
            .collect();
        Ok(GroundTruth { informative, informative_by_subtype: by_subtype, flag_coords, text_coords })
    }

    /// Planted coordinate layout (also the explainer oracle sidecar).
    pub fn ground_truth(&self) -> Result<GroundTruth> {
        self.validate()?;
        self.layout()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_categories < 2 {
            return Err(Error::Parameter("need at least 2 categories".to_string()));
        }
        if self.merchants_per_category == 0 {
            return Err(Error::Parameter("merchants_per_category must be >= 1".to_string()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Parameter("noise_sigma must be >= 0".to_string()));
        }
        let gt = self.layout()?;
        // Category means must stay separated by at least 4 sigma.
        let mut means = vec![vec![0.0; self.t_dim]; self.n_categories];
        for c in 0..self.n_categories {
            for (s, set) in gt.informative_by_subtype[c].iter().enumerate() {
                let _ = s;
                for &j in set {
                    // Signal present on this half with probability 1/2.
                    means[c][j] = self.category_mean_scale + 0.5 * self.signal_scale;
                }
            }
        }
        for a in 0..self.n_categories {
            for b in (a + 1)..self.n_categories {
                let dist: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                if dist < 4.0 * self.noise_sigma {
                    return Err(Error::Parameter(format!(
                        "category means {a} and {b} separated by {dist:.4} < 4 sigma"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Deterministic function of the config: every call with the same config
/// yields the identical dataset.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<MerchantRecord>> {
    cfg.validate()?;
    let gt = cfg.layout()?;
    let mut rng = seeded_rng(cfg.seed);
    let owned: std::collections::BTreeSet<usize> =
        gt.informative.iter().flatten().copied().collect();
    let spare: Vec<usize> = (0..cfg.t_dim).filter(|j| !owned.contains(j)).collect();

    let mut records = Vec::with_capacity(cfg.n_categories * cfg.merchants_per_category);
    for c in 0..cfg.n_categories {
        for m in 0..cfg.merchants_per_category {
            let subtype = usize::from(rng.gen::<bool>());
            let mut t = vec![0.0; cfg.t_dim];
            for &j in &gt.informative[c] {
                t[j] = cfg.category_mean_scale;
            }
            for &j in &gt.informative_by_subtype[c][subtype] {
                t[j] += cfg.signal_scale;
            }
            for &j in &gt.informative_by_subtype[c][1 - subtype] {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                t[j] += sign * cfg.garbage_scale;
            }
            if cfg.nuisance_group_size > 0 {
                for chunk in spare.chunks(cfg.nuisance_group_size) {
                    let factor = cfg.nuisance_group_sigma * standard_normal(&mut rng);
                    for &j in chunk {
                        t[j] += factor;
                    }
                }
            }
            for x in &mut t {
                *x += cfg.noise_sigma * standard_normal(&mut rng);
            }

            let mut d = vec![0.0; cfg.d_dim];
            for &j in &gt.text_coords[c] {
                d[j] = cfg.text_scale;
            }
            d[gt.flag_coords[c]] = if subtype == 1 { cfg.flag_scale } else { -cfg.flag_scale };
            for x in &mut d {
                *x += cfg.noise_sigma * standard_normal(&mut rng);
            }

            records.push(MerchantRecord {
                id: format!("c{c}-m{m}"),
                category: c,
                t: Tensor::vector(t),
                d: Tensor::vector(d),
            });
        }
    }
    Ok(records)
}

/// One labeled (transaction, description) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub anchor_id: String,
    pub t: Tensor,
    pub d: Tensor,
    pub positive: bool,
    pub t_category: usize,
    pub d_category: usize,
}

/// One positive pair per merchant (its own description) plus
/// `negatives_per_positive` cross-category negatives.
pub fn build_pairs(
    records: &[MerchantRecord],
    negatives_per_positive: usize,
    seed: u64,
) -> Result<Vec<PairSample>> {
    let categories: std::collections::BTreeSet<usize> =
        records.iter().map(|r| r.category).collect();
    if categories.len() < 2 {
        return Err(Error::Data("build_pairs needs at least 2 categories".to_string()));
    }
    let mut rng = seeded_rng(seed);
    let mut pairs = Vec::with_capacity(records.len() * (1 + negatives_per_positive));
    for rec in records {
        pairs.push(PairSample {
            anchor_id: rec.id.clone(),
            t: rec.t.clone(),
            d: rec.d.clone(),
            positive: true,
            t_category: rec.category,
            d_category: rec.category,
        });
        for _ in 0..negatives_per_positive {
            let other = loop {
                let j = rng.gen_range(0..records.len());
                if records[j].category != rec.category {
                    break &records[j];
                }
            };
            pairs.push(PairSample {
                anchor_id: rec.id.clone(),
                t: rec.t.clone(),
                d: other.d.clone(),
                positive: false,
                t_category: rec.category,
                d_category: other.category,
            });
        }
    }
    Ok(pairs)
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    id: String,
    category: usize,
    t: Vec<f64>,
    d: Vec<f64>,
}

pub fn write_jsonl(records: &[MerchantRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        let wire = WireRecord {
            id: rec.id.clone(),
            category: rec.category,
            t: rec.t.data().to_vec(),
            d: rec.d.data().to_vec(),
        };
        let line = serde_json::to_string(&wire).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MerchantRecord>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: malformed record: {e}", path.display(), lineno + 1))
        })?;
        match dims {
            None => dims = Some((wire.t.len(), wire.d.len())),
            Some((td, dd)) => {
                if wire.t.len() != td || wire.d.len() != dd {
                    return Err(Error::Data(format!(
                        "{}:{}: inconsistent dims ({}, {}) vs ({td}, {dd})",
                        path.display(),
                        lineno + 1,
                        wire.t.len(),
                        wire.d.len()
                    )));
                }
            }
        }
        records.push(MerchantRecord {
            id: wire.id,
            category: wire.category,
            t: Tensor::vector(wire.t),
            d: Tensor::vector(wire.d),
        });
    }
    Ok(records)
}
