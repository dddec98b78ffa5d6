//! Shared dataset assembly: every command reconstructs the same datasets
//! and splits deterministically from the config and seed, so artifacts
//! produced by separate invocations agree with each other.

use std::path::{Path, PathBuf};

use sentinel_core::data::{
    load_image_dir, split, synth_cells, LabeledDataset, LoadMode, SplitSpec, SynthConfig,
};
use sentinel_core::rng::{derive_seed, seeded};
use sentinel_core::Tensor;

use crate::config::RunConfig;
use crate::error::CliError;

pub struct PipelineData {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    /// OOD images held out for fitting fusers (empty without an OOD source).
    pub ood_val: Vec<Tensor>,
    /// OOD images used as evaluation negatives.
    pub ood_test: Vec<Tensor>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_pipeline_data(config: &RunConfig, base: &Path) -> Result<PipelineData, CliError> {
    let size = config.data.input_size;
    let mode = if config.strict { LoadMode::Strict } else { LoadMode::Lenient };

    let in_dist = if let Some(dir) = &config.data.in_dist_dir {
        let (ds, warnings) = load_image_dir(&resolve(base, dir), mode)?;
        for w in warnings {
            eprintln!("warning: {w}");
        }
        ds.resized(size)?
    } else {
        let synth = config.data.synth.as_ref().expect("validated config");
        synth_cells(&SynthConfig {
            n_per_class: synth.n_per_class,
            img_size: size,
            seed: derive_seed(config.seed, "data"),
            ood: false,
        })
    };

    let spec = SplitSpec {
        train_frac: config.data.split.train,
        val_frac: config.data.split.val,
        test_frac: config.data.split.test,
        seed: derive_seed(config.seed, "split"),
    };
    let (train, val, test) = split(&in_dist, &spec)?;

    let ood_images: Vec<Tensor> = if let Some(dir) = &config.data.ood_dir {
        let (ds, warnings) = load_image_dir(&resolve(base, dir), mode)?;
        for w in warnings {
            eprintln!("warning: {w}");
        }
        ds.resized(size)?.items().iter().map(|(t, _)| t.clone()).collect()
    } else if let Some(synth) = &config.data.synth {
        synth_cells(&SynthConfig {
            n_per_class: synth.ood_n_per_class,
            img_size: size,
            seed: derive_seed(config.seed, "ood"),
            ood: true,
        })
        .items()
        .iter()
        .map(|(t, _)| t.clone())
        .collect()
    } else {
        Vec::new()
    };

    // Hold one slice of the OOD set out for fuser fitting, use the rest
    // as evaluation negatives.
    let (ood_val, ood_test) = if ood_images.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let mut order: Vec<usize> = (0..ood_images.len()).collect();
        let mut rng = seeded(derive_seed(config.seed, "ood-split"));
        sentinel_core::rng::shuffle(&mut order, &mut rng);
        let n_val = ((ood_images.len() as f64 * 0.3).floor() as usize).max(1);
        let val: Vec<Tensor> = order[..n_val].iter().map(|&i| ood_images[i].clone()).collect();
        let test: Vec<Tensor> =
            order[n_val..].iter().map(|&i| ood_images[i].clone()).collect();
        (val, test)
    };

    Ok(PipelineData { train, val, test, ood_val, ood_test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth_config() -> RunConfig {
        serde_json::from_value(serde_json::json!({
            "seed": 5,
            "out_dir": "runs/t",
            "data": { "synth": { "n_per_class": 10, "ood_n_per_class": 5 }, "input_size": 12 }
        }))
        .unwrap()
    }

    #[test]
    fn splits_are_deterministic_and_sized() {
        let config = synth_config();
        let a = load_pipeline_data(&config, Path::new(".")).unwrap();
        let b = load_pipeline_data(&config, Path::new(".")).unwrap();
        assert_eq!(a.train.len(), 12);
        assert_eq!(a.val.len(), 2);
        assert_eq!(a.test.len(), 6);
        assert_eq!(a.ood_val.len(), 3);
        assert_eq!(a.ood_test.len(), 7);
        let pix = |ds: &LabeledDataset| -> Vec<u32> {
            ds.items().iter().map(|(t, _)| t.data()[0].to_bits()).collect()
        };
        assert_eq!(pix(&a.train), pix(&b.train));
        assert_eq!(pix(&a.test), pix(&b.test));
    }
}
