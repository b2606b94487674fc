//! Synthetic training data: feature stores paired with template reports.
//! Each report's class shifts the mean of its store's features, so the
//! pairing is learnable.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsireport::features::{write_store, FeatureMatrix, PatchMeta};

use crate::CliError;

const SITES: [&str; 4] = ["breast", "colon", "lung", "prostate"];
const FINDINGS: [&str; 4] = [
    "invasive carcinoma with moderate differentiation",
    "benign tissue without atypia",
    "adenoma with low grade dysplasia",
    "chronic inflammation and fibrosis",
];
const MARGINS: [&str; 2] = ["margins are clear", "tumor extends to the margin"];

pub fn class_report(class: usize) -> String {
    let site = SITES[class % SITES.len()];
    let finding = FINDINGS[(class / SITES.len()) % FINDINGS.len()];
    let margin = MARGINS[class % MARGINS.len()];
    format!("{site} biopsy shows {finding} ; {margin}")
}

/// Writes `stores/*.wsif`, `reports.tsv` (`id store report`), `corpus.tsv`
/// (`id report`, every class) and `reference.txt` (the first report).
pub fn write_dataset(out: &Path, count: usize, dim: usize, seed: u64) -> Result<(), CliError> {
    if count == 0 || dim == 0 {
        return Err(CliError::Validation("dataset count and feature dim must be positive".into()));
    }
    let stores = out.join("stores");
    fs::create_dir_all(&stores).map_err(|e| CliError::io(&stores, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = SITES.len() * FINDINGS.len();
    let mut reports = String::new();
    let mut first = None;
    for i in 0..count {
        let class = rng.gen_range(0..classes);
        let id = format!("case{i:03}");
        let n = rng.gen_range(3..=8);
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            for j in 0..dim {
                let centre = if j % classes == class { 1.0 } else { 0.0 };
                data.push(centre + rng.gen_range(-0.25f32..0.25));
            }
        }
        let meta = (0..n as u32).map(|k| PatchMeta { level: 0, x: k * 256, y: 0, focus: 0.0, tissue_fraction: 1.0 }).collect();
        let store = format!("stores/{id}.wsif");
        write_store(&FeatureMatrix::new(dim, data, meta)?, &out.join(&store))?;
        let report = class_report(class);
        reports.push_str(&format!("{id}\t{store}\t{report}\n"));
        first.get_or_insert(report);
    }
    let corpus: String = (0..classes).map(|c| format!("ref{c:02}\t{}\n", class_report(c))).collect();
    for (name, text) in [("reports.tsv", reports), ("corpus.tsv", corpus), ("reference.txt", first.unwrap_or_default() + "\n")] {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
    }
    Ok(())
}
