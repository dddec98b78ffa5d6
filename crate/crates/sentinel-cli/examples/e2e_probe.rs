use std::path::Path;
use std::time::Instant;

fn main() {
    let tmp = tempdir_path();
    std::fs::create_dir_all(&tmp).unwrap();
    let config: sentinel_cli::RunConfig = serde_json::from_value(serde_json::json!({
        "seed": 42,
        "out_dir": tmp.join("run").to_string_lossy(),
        "data": { "synth": { "n_per_class": 120, "ood_n_per_class": 80 }, "input_size": 32 },
        "model": { "epochs": 10, "lr": 0.01, "momentum": 0.9, "batch_size": 16,
                   "augment": { "rotate_deg_max": 15.0, "shear_max": 0.08,
                                "translate_frac_max": 0.08, "zoom_range": 0.10 } },
        "attacks": [ {"kind": "fgsm", "eps": 0.1}, {"kind": "bim", "eps": 0.1, "steps": 10, "step_size": 0.02} ]
    }))
    .unwrap();
    let base = Path::new(".");

    let t0 = Instant::now();
    sentinel_cli::cmd_train(&config, base).unwrap();
    println!("train: {:?}", t0.elapsed());

    // test accuracy
    let data = sentinel_cli::pipeline::load_pipeline_data(&config, base).unwrap();
    let (model, _) = sentinel_core::model::checkpoint::load(&sentinel_cli::Paths::new(&config, base).checkpoint()).unwrap();
    let acc = sentinel_core::model::train::accuracy(&model, &data.test, 16).unwrap();
    println!("test accuracy: {acc:.4}");

    let t1 = Instant::now();
    sentinel_cli::cmd_fit_detector(&config, base, None).unwrap();
    println!("fit-detector: {:?}", t1.elapsed());

    let t2 = Instant::now();
    sentinel_cli::cmd_attack(&config, base, None, None, None, None).unwrap();
    println!("attack: {:?}", t2.elapsed());

    let t3 = Instant::now();
    let (json, _) = sentinel_cli::cmd_evaluate(&config, base, None, None).unwrap();
    println!("evaluate: {:?}", t3.elapsed());
    let report = sentinel_core::metrics::EvalReport::from_json(&std::fs::read_to_string(json).unwrap()).unwrap();
    for row in &report.rows {
        println!("{:12} {:8} auroc {:.4} tnr95 {:.4} dacc {:.4}",
            row.detector, row.source, row.metrics.auroc, row.metrics.tnr_at_tpr95, row.metrics.detection_accuracy);
    }
    println!("total: {:?}", t0.elapsed());
}

fn tempdir_path() -> std::path::PathBuf {
    std::env::temp_dir().join(format!("sentinel-probe-{}", std::process::id()))
}
