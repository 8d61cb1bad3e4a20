//! Synthetic corpus emission: one PNG and one ground-truth sidecar per
//! spread, plus a manifest listing every seed.

use std::path::Path;

use anyhow::Context;
use kayra_backend::ingest::encode_png;
use kayra_core::cascade::ClassLabel;
use kayra_core::synthgen::{generate_spread, karyotype, SyntheticSpec};
use serde::{Deserialize, Serialize};

pub const SIDECAR_SUFFIX: &str = ".gt.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub count: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub overlap_pairs: usize,
    pub touching_pairs: usize,
    pub border_adjacent: bool,
    pub male_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub seed: u64,
    pub image: String,
    pub ground_truth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub base_seed: u64,
    pub spreads: Vec<ManifestEntry>,
}

/// File stem of spread `index`, following the clinical naming convention so
/// that cultivation and sample type can be used as evaluation facets.
/// Even spreads are labelled peripheral blood, odd ones bone marrow.
pub fn spread_name(base_seed: u64, index: usize) -> String {
    let (cultivation, kind) = if index % 2 == 0 { ("PHA", "PB") } else { ("SPONT", "BM") };
    format!("S{base_seed}P{index:03}_2024_{}_{cultivation}_{kind}", index + 1)
}

pub fn spec_for(args: &GenerateArgs, index: usize) -> SyntheticSpec {
    let male = args.male_every > 0 && (index + 1) % args.male_every == 0;
    let sex = if male { [ClassLabel::X, ClassLabel::Y] } else { [ClassLabel::X, ClassLabel::X] };
    SyntheticSpec {
        image_id: spread_name(args.seed, index),
        seed: args.seed.wrapping_add(index as u64),
        width: args.width,
        height: args.height,
        classes: karyotype(&sex),
        overlap_pairs: args.overlap_pairs,
        touching_pairs: args.touching_pairs,
        border_adjacent: args.border_adjacent,
        ..Default::default()
    }
}

pub fn generate(args: &GenerateArgs, out: &Path) -> anyhow::Result<Manifest> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut spreads = Vec::with_capacity(args.count);
    for index in 0..args.count {
        let spec = spec_for(args, index);
        let (image, gt) = generate_spread(&spec).with_context(|| format!("spread {}", spec.image_id))?;
        let entry = ManifestEntry {
            image: format!("{}.png", spec.image_id),
            ground_truth: format!("{}{SIDECAR_SUFFIX}", spec.image_id),
            image_id: spec.image_id,
            seed: spec.seed,
        };
        write(&out.join(&entry.image), &encode_png(&image))?;
        write(&out.join(&entry.ground_truth), &serde_json::to_vec(&gt)?)?;
        tracing::info!(image = %entry.image, "generated");
        spreads.push(entry);
    }
    let manifest = Manifest {
        base_seed: args.seed,
        spreads,
    };
    write(&out.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
