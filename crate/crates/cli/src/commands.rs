use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use fdalign::adapter::AdapterParams;
use fdalign::embed_store::{read_archive, write_archive, EmbeddingArchive};
use fdalign::eval::{format_table, prototypical_eval, sample_episodes, EvalReport, Metric};
use fdalign::prototypes::{class_archive, spurious_archive, SpuriousId};
use fdalign::spc::SpcConfig;
use fdalign::synth::SynthConfig;
use fdalign::trainer::{
    fit, initial_params, prepare, prototype_pipeline, read_checkpoint, wise_ft_interpolate, write_checkpoint,
    write_loss_log, Checkpoint, TrainConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{resolve, Flags};
use crate::manifest::RunManifest;
use crate::{Classify, Failure};

/// Options shared by every subcommand.
pub struct Globals {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
}

type Outcome = Result<(), Failure>;

fn load_archive(role: &str, prefix: &Path) -> Result<EmbeddingArchive, Failure> {
    read_archive(prefix)
        .with_context(|| format!("loading {role} archive {}", prefix.display()))
        .usage()
}

fn load_checkpoint(prefix: &Path) -> Result<Checkpoint, Failure> {
    read_checkpoint(prefix)
        .with_context(|| format!("loading checkpoint {}", prefix.display()))
        .usage()
}

fn create_out_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
        .runtime()
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).runtime()?;
    fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

/// Warns when a replayed manifest recorded different input contents.
fn check_replay(globals: &Globals, manifest: &RunManifest) {
    let Some(path) = &globals.config else { return };
    let Ok(recorded) = fs::read_to_string(path)
        .map_err(anyhow::Error::from)
        .and_then(|t| serde_json::from_str::<RunManifest>(&t).map_err(anyhow::Error::from))
    else {
        return;
    };
    for (role, input) in &manifest.inputs {
        if let Some(old) = recorded.inputs.get(role) {
            if old.sha256 != input.sha256 {
                eprintln!("warning: {role} differs from the replayed manifest ({})", input.path);
            }
        }
    }
}

/// Prototype-stage settings; keys match the training config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrototypeSettings {
    pub seed: u64,
    pub use_spc: bool,
    pub renormalize_prototypes: bool,
    pub spc: SpcConfig,
}

impl Default for PrototypeSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        PrototypeSettings {
            seed: t.seed,
            use_spc: t.use_spc,
            renormalize_prototypes: t.renormalize_prototypes,
            spc: t.spc,
        }
    }
}

impl PrototypeSettings {
    /// The correction settings training would use for the same seed.
    fn spc_config(&self) -> SpcConfig {
        TrainConfig {
            seed: self.seed,
            spc: self.spc.clone(),
            renormalize_prototypes: self.renormalize_prototypes,
            ..TrainConfig::default()
        }
        .spc_config()
    }
}

pub fn prototypes(globals: &Globals, text_prefix: &Path, mut flags: Flags) -> Outcome {
    flags.set("seed", globals.seed);
    let settings: PrototypeSettings = resolve(
        &PrototypeSettings::default(),
        globals.config.as_deref(),
        "prototypes",
        flags.into_map(),
    )
    .usage()?;
    let text = load_archive("text", text_prefix)?;
    let spc = settings.use_spc.then(|| settings.spc_config());
    let (set, raw, report) = prototype_pipeline(&text, settings.renormalize_prototypes, spc.as_ref())
        .context("building prototypes")
        .usage()?;
    let raw_ids: Vec<SpuriousId> = (0..raw.nrows()).map(SpuriousId::Template).collect();
    let class = class_archive(&set).runtime()?;
    let raw_archive = spurious_archive(&raw, &raw_ids, text.templates()).runtime()?;
    let corrected = spurious_archive(&set.spurious_protos, &set.spurious_ids, text.templates()).runtime()?;

    let mut manifest = RunManifest::new("prototypes", Some(settings.seed), &settings).runtime()?;
    manifest.add_prefix("text", text_prefix).usage()?;
    check_replay(globals, &manifest);

    let out = &globals.out_dir;
    create_out_dir(out)?;
    write_archive(&class, &out.join("class_protos")).runtime()?;
    write_archive(&raw_archive, &out.join("spurious_raw")).runtime()?;
    write_archive(&corrected, &out.join("spurious")).runtime()?;
    if let Some(report) = &report {
        write_json(&out.join("spc_report.json"), report)?;
    }
    manifest.write(out).runtime()?;
    println!(
        "{} class prototypes, {} raw spurious prototypes, {} after correction",
        set.class_protos.nrows(),
        raw.nrows(),
        set.spurious_protos.nrows()
    );
    Ok(())
}

pub fn train(globals: &Globals, images_prefix: &Path, text_prefix: &Path, mut flags: Flags) -> Outcome {
    flags.set("seed", globals.seed);
    let config: TrainConfig = resolve(
        &TrainConfig::default(),
        globals.config.as_deref(),
        "train",
        flags.into_map(),
    )
    .usage()?;
    config.validate().usage()?;
    let images = load_archive("image", images_prefix)?;
    let text = load_archive("text", text_prefix)?;
    let prepared = prepare(&images, &text, &config).usage()?;
    let frozen = initial_params(&config, images.dim()).usage()?;

    let mut manifest = RunManifest::new("train", Some(config.seed), &config).runtime()?;
    manifest.add_prefix("images", images_prefix).usage()?;
    manifest.add_prefix("text", text_prefix).usage()?;
    check_replay(globals, &manifest);

    let ckpt = fit(&frozen, &prepared, &config, |_| {})
        .context("training aborted")
        .runtime()?;

    let out = &globals.out_dir;
    create_out_dir(out)?;
    write_checkpoint(&ckpt, &out.join("checkpoint")).runtime()?;
    write_checkpoint(&Checkpoint::from_params(frozen), &out.join("initial")).runtime()?;
    write_loss_log(&ckpt.loss_history, &out.join("train_log.jsonl")).runtime()?;
    if let Some(report) = &prepared.spc_report {
        write_json(&out.join("spc_report.json"), report)?;
    }
    manifest.write(out).runtime()?;
    if let Some(last) = ckpt.loss_history.last() {
        println!(
            "{} steps over {} epochs; final class loss {:.6}, spurious loss {:.6}",
            ckpt.step_count, ckpt.epoch, last.losses.class_loss, last.losses.spurious_loss
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub seeds: Vec<u64>,
    pub metric: Metric,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            episodes: 2000,
            way: 5,
            shot: 1,
            query: 15,
            seeds: vec![1, 2, 3, 4, 5],
            metric: Metric::Cosine,
        }
    }
}

/// `checkpoint` is a checkpoint prefix or the literal `identity`.
pub fn eval(globals: &Globals, checkpoint: &str, images_prefix: &Path, mut flags: Flags, seeds_given: bool) -> Outcome {
    if !seeds_given {
        flags.set("seeds", globals.seed.map(|s| vec![s]));
    }
    let settings: EvalSettings = resolve(
        &EvalSettings::default(),
        globals.config.as_deref(),
        "eval",
        flags.into_map(),
    )
    .usage()?;
    if settings.seeds.is_empty() || settings.episodes == 0 {
        return Err(Failure::Usage(anyhow!("need at least one seed and one episode")));
    }
    let images = load_archive("image", images_prefix)?;
    let mut manifest = RunManifest::new("eval", None, &settings).runtime()?;
    manifest.add_prefix("images", images_prefix).usage()?;
    let params = if checkpoint == "identity" {
        AdapterParams::identity(images.dim()).usage()?
    } else {
        let prefix = Path::new(checkpoint);
        manifest.add_prefix("checkpoint", prefix).usage()?;
        load_checkpoint(prefix)?.params
    };
    if params.dim != images.dim() {
        return Err(Failure::Usage(anyhow!(
            "checkpoint dim {} does not match archive dim {}",
            params.dim,
            images.dim()
        )));
    }
    check_replay(globals, &manifest);

    let mut reports = Vec::with_capacity(settings.seeds.len());
    for &seed in &settings.seeds {
        let episodes = sample_episodes(
            &images,
            settings.way,
            settings.shot,
            settings.query,
            settings.episodes,
            seed,
        )
        .usage()?;
        reports.push(prototypical_eval(&params, &images, &episodes, settings.metric, seed).runtime()?);
    }
    let pooled = EvalReport::pooled(&reports);

    let out = &globals.out_dir;
    create_out_dir(out)?;
    for r in &reports {
        write_json(&out.join(format!("eval_{}.json", r.label)), r)?;
    }
    write_json(&out.join("eval_pooled.json"), &pooled)?;
    let mut all = reports;
    all.push(pooled);
    let table = format_table(&all);
    fs::write(out.join("eval_table.txt"), &table)
        .context("writing eval table")
        .runtime()?;
    manifest.write(out).runtime()?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WiseFtSettings {
    pub fusion: f64,
}

impl Default for WiseFtSettings {
    fn default() -> Self {
        WiseFtSettings { fusion: 0.5 }
    }
}

pub fn wiseft(globals: &Globals, from: &Path, to: &Path, flags: Flags) -> Outcome {
    let settings: WiseFtSettings = resolve(
        &WiseFtSettings::default(),
        globals.config.as_deref(),
        "wiseft",
        flags.into_map(),
    )
    .usage()?;
    if !(0.0..=1.0).contains(&settings.fusion) {
        return Err(Failure::Usage(anyhow!(
            "--fusion {} must lie in [0, 1]",
            settings.fusion
        )));
    }
    let p0 = load_checkpoint(from)?;
    let pt = load_checkpoint(to)?;
    let mixed = wise_ft_interpolate(&p0.params, &pt.params, settings.fusion).usage()?;

    let mut manifest = RunManifest::new("wiseft", None, &settings).runtime()?;
    manifest.add_prefix("from", from).usage()?;
    manifest.add_prefix("to", to).usage()?;
    check_replay(globals, &manifest);

    let out = &globals.out_dir;
    create_out_dir(out)?;
    write_checkpoint(&Checkpoint::from_params(mixed), &out.join("wiseft")).runtime()?;
    manifest.write(out).runtime()?;
    println!("interpolated with fusion {}", settings.fusion);
    Ok(())
}

pub fn synth(globals: &Globals, mut flags: Flags) -> Outcome {
    flags.set("seed", globals.seed);
    let config: SynthConfig = resolve(
        &SynthConfig::default(),
        globals.config.as_deref(),
        "synth",
        flags.into_map(),
    )
    .usage()?;
    config.validate().usage()?;
    let data = config.generate().runtime()?;
    let manifest = RunManifest::new("synth", Some(config.seed), &config).runtime()?;

    let out = &globals.out_dir;
    create_out_dir(out)?;
    write_archive(&data.train, &out.join("synth_train")).runtime()?;
    write_archive(&data.ood, &out.join("synth_ood")).runtime()?;
    write_archive(&data.text, &out.join("synth_text")).runtime()?;
    manifest.write(out).runtime()?;
    println!(
        "{} training images, {} held-out-context images, {} text rows",
        data.train.len(),
        data.ood.len(),
        data.text.len()
    );
    Ok(())
}

/// The architecture object for `--architecture`/`--hidden`.
pub fn architecture_value(name: &str, hidden: Option<usize>) -> Result<Value, Failure> {
    match (name, hidden) {
        ("mlp", h) => Ok(serde_json::json!({"type": "mlp", "hidden": h.unwrap_or(64)})),
        (_, Some(_)) => Err(Failure::Usage(anyhow!("--hidden only applies to --architecture mlp"))),
        (other, None) => Ok(serde_json::json!({ "type": other })),
    }
}
