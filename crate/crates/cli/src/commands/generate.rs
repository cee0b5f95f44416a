use longiseg::synthgen::{generate_dataset, split_sizes, SynthConfig};

use super::in_run_dir;
use crate::config::load_synth_config;
use crate::error::{runtime, Result};
use crate::manifest::RunManifest;
use crate::GenerateArgs;

/// Writes a synthetic dataset (`dataset.json` plus one directory per subject)
/// into `--out`.
pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => load_synth_config(path)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.n_subjects {
        cfg.n_subjects = n;
    }
    cfg.validate()?;
    split_sizes(cfg.n_subjects)?;
    let json = serde_json::to_value(&cfg).expect("synth config serializes");
    let out = &args.common.out;
    let manifest = RunManifest::start("generate", json.clone(), Some(cfg.seed));
    in_run_dir(out, args.common.force, manifest, || {
        let dataset = generate_dataset(&cfg)?;
        dataset.save(out, json).map_err(runtime)?;
        log::info!(
            "wrote {} subjects (split {}/{}/{}) to {}",
            dataset.subjects.len(),
            dataset.split.train.len(),
            dataset.split.val.len(),
            dataset.split.test.len(),
            out.display()
        );
        Ok(())
    })
}
