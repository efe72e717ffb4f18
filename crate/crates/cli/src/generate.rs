use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use dig_core::curriculum::{stage_sample, stage_seed, AnnotationRecord, Split};
use dig_core::scene;

use crate::config::RunConfig;
use crate::{io, CliError, GenerateArgs, Result, RunManifest};

/// Pairs rendered and encoded in parallel before being written out; bounds
/// peak memory for large stages.
const CHUNK: usize = 256;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

struct Encoded {
    pair_id: String,
    scene_doc: String,
    png_a: Vec<u8>,
    png_b: Vec<u8>,
    record: AnnotationRecord,
}

pub fn image_paths(stage_dir: &Path, pair_id: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let images = stage_dir.join("images");
    (
        images.join(format!("{pair_id}_a.png")),
        images.join(format!("{pair_id}_b.png")),
    )
}

/// Resolves `--stage`/`--n` against the configuration; returns the indices of
/// the stages to generate.
fn select_stages(cfg: &mut RunConfig, args: &GenerateArgs, split: Split) -> Result<Vec<usize>> {
    let selected: Vec<usize> = match &args.stage {
        Some(name) => vec![cfg
            .stages
            .iter()
            .position(|s| &s.name == name)
            .ok_or_else(|| {
                let known: Vec<&str> = cfg.stages.iter().map(|s| s.name.as_str()).collect();
                CliError::Usage(format!(
                    "unknown stage `{name}` (known: {})",
                    known.join(", ")
                ))
            })?],
        None => (0..cfg.stages.len()).collect(),
    };
    if let Some(n) = args.n {
        if n == 0 {
            return Err(CliError::Usage("--n must be positive".into()));
        }
        for &i in &selected {
            match split {
                Split::Train => cfg.stages[i].n_pairs = n,
                Split::Eval => cfg.stages[i].eval_pairs = n,
            }
        }
    }
    Ok(selected)
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<RunManifest> {
    let mut cfg = RunConfig::load(&args.config)?;
    let split = Split::from(args.split);
    let selected = select_stages(&mut cfg, args, split)?;
    cfg.validate()?;
    let out = &args.out;
    io::create_dir_all(out)?;
    let names: Vec<&str> = selected
        .iter()
        .map(|&i| cfg.stages[i].name.as_str())
        .collect();
    let mut manifest = RunManifest::new(
        "generate",
        Some(cfg.seed),
        json!({ "run": cfg, "split": split, "stages": names }),
    );
    if let Some(path) = &args.config.config {
        manifest.inputs.push(path.display().to_string());
    }

    for &si in &selected {
        let stage = &cfg.stages[si];
        let dir = out.join(&stage.name);
        io::create_dir_all(&dir.join("scenes"))?;
        io::create_dir_all(&dir.join("images"))?;
        let split_seed = stage_seed(cfg.seed, stage, split);
        let n = match split {
            Split::Train => stage.n_pairs,
            Split::Eval => stage.eval_pairs,
        };
        let mut records = Vec::with_capacity(n);
        for start in (0..n).step_by(CHUNK) {
            let encoded = (start..(start + CHUNK).min(n))
                .into_par_iter()
                .map(|i| {
                    let s = stage_sample(stage, split_seed, i, &cfg.data)?;
                    Ok(Encoded {
                        pair_id: s.pair.pair_id.clone(),
                        scene_doc: scene::to_document(&s.pair),
                        png_a: io::encode_png(&s.rendered.image_a),
                        png_b: io::encode_png(&s.rendered.image_b),
                        record: AnnotationRecord::new(&stage.name, &s),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            for e in encoded {
                let rel = |tail: String| format!("{}/{tail}", stage.name);
                let files = [
                    (
                        rel(format!("scenes/{}.json", e.pair_id)),
                        e.scene_doc.as_bytes(),
                    ),
                    (rel(format!("images/{}_a.png", e.pair_id)), &e.png_a[..]),
                    (rel(format!("images/{}_b.png", e.pair_id)), &e.png_b[..]),
                ];
                for (rel, bytes) in files {
                    io::write(&out.join(&rel), bytes)?;
                    manifest.record_bytes(&rel, bytes);
                }
                records.push(e.record);
            }
        }
        let rel = format!("{}/{ANNOTATIONS_FILE}", stage.name);
        let text = io::to_jsonl(&records);
        io::write(&out.join(&rel), text.as_bytes())?;
        manifest.record_bytes(&rel, text.as_bytes());
        println!(
            "{}: {} pairs -> {}",
            stage.name,
            records.len(),
            dir.display()
        );
    }
    manifest.write(out)?;
    Ok(manifest)
}
