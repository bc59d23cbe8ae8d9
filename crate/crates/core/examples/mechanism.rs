//! Paired fd-align vs plain fine-tuning on synthetic class/context data.
//!
//! cargo run --release -p fdalign --example mechanism -- [seeds] [first-seed]

use fdalign::synth::{experiment_config, run_paired, SynthConfig};

fn main() -> fdalign::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let (mut fd_ood, mut plain_ood) = (0.0, 0.0);
    println!(
        "{:>4} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "seed", "kl_fd", "kl_plain", "ood_fd", "ood_ft", "id_fd", "id_ft", "ood_zs"
    );
    let start: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    for seed in start..start + seeds {
        let data = merge(
            SynthConfig {
                seed,
                ..SynthConfig::default()
            },
            "SYNTH",
        )
        .generate()?;
        let o = run_paired(&data, &merge(experiment_config(seed), "TRAIN"))?;
        println!(
            "{:>4} {:>10.6} {:>10.6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            seed,
            o.fd_align.heldout_kl,
            o.plain_ft.heldout_kl,
            o.fd_align.ood_accuracy,
            o.plain_ft.ood_accuracy,
            o.fd_align.id_accuracy,
            o.plain_ft.id_accuracy,
            o.zero_shot_ood_accuracy
        );
        fd_ood += o.fd_align.ood_accuracy;
        plain_ood += o.plain_ft.ood_accuracy;
    }
    println!(
        "mean ood accuracy: fd_align {:.4}, plain_ft {:.4}",
        fd_ood / seeds as f64,
        plain_ood / seeds as f64
    );
    Ok(())
}

// Overlay a JSON object from the named environment variable onto `base`.
fn merge<T: serde::Serialize + serde::de::DeserializeOwned>(base: T, var: &str) -> T {
    let Ok(overlay) = std::env::var(var) else { return base };
    let mut value = serde_json::to_value(&base).expect("serializable");
    let overlay: serde_json::Value = serde_json::from_str(&overlay).expect("valid JSON overlay");
    if let (Some(dst), Some(src)) = (value.as_object_mut(), overlay.as_object()) {
        for (k, v) in src {
            dst.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(value).expect("overlay matches config fields")
}
