use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;
use sha2::{Digest, Sha256};
use stormlab::assessment::{template_hash, vlm_vis, Assessor};
use stormlab::backends::mock::{PooledFeatures, WeatherEncoder};
use stormlab::backends::{Registry, DEFAULT_RATING_TEMPLATE};
use stormlab::config::{load_config, TrainConfig};
use stormlab::image::write_png16;
use stormlab::model::{write_atomic, RestorationModel};
use stormlab::pseudodb::PseudoLabelDb;
use stormlab::semantics::{DescribeContext, IclExampleSet, PairStore, Validator};
use stormlab::toy::{desk_config, weather_test_set, ToyFixture, ToySpec};
use stormlab::trainer::{load_checkpoint, Trainer};
use stormlab::{Error, Exec, ImageSample, Source, UnlabeledSet};

use crate::data::{self, RewriterKind};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: Error,
}

/// Exit status for an error: 1 config, 2 data, 3 backend, 4 divergence.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 1,
        Error::Transport { .. } | Error::Protocol { .. } | Error::Registry(_) | Error::PartialAssessment { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 2,
    }
}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        Self {
            code: exit_code(&error),
            error,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn config_error(error: Error) -> CliError {
    CliError { code: 1, error }
}

type CliResult = Result<(), CliError>;

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn assessor(template: Option<String>) -> Result<Assessor, CliError> {
    Assessor::new(template.unwrap_or_else(|| DEFAULT_RATING_TEMPLATE.to_string())).map_err(config_error)
}

/// Fills a fresh sibling directory, then swaps it in for `dst`.
fn replace_dir(dst: &Path, fill: impl FnOnce(&Path) -> stormlab::Result<()>) -> stormlab::Result<()> {
    let parent = match dst.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(parent)?;
    let tmp = tempfile::Builder::new().prefix(".stormlab").tempdir_in(parent)?;
    fill(tmp.path())?;
    if dst.exists() {
        std::fs::remove_dir_all(dst)?;
    }
    std::fs::rename(tmp.keep(), dst)?;
    Ok(())
}

fn jsonl(values: &[serde_json::Value]) -> String {
    let mut out = String::new();
    for v in values {
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

fn error_lines(errors: &[(String, String)]) -> Vec<serde_json::Value> {
    errors
        .iter()
        .map(|(id, message)| json!({ "error": { "image_id": id, "message": message } }))
        .collect()
}

fn unreadable(errors: &[(String, String)]) -> CliResult {
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Codec(format!("{} unreadable image(s); see the errors section", errors.len())).into())
    }
}

pub fn assess(
    image_dir: &Path,
    experts: &str,
    reference: Option<&Path>,
    template: Option<String>,
    out: &Path,
) -> CliResult {
    let assessor = assessor(template)?;
    let experts = data::build_experts(experts, reference)?;
    let load = data::load_grouped(image_dir, Source::Real)?;
    stormlab::image::ensure_unique_ids(load.samples.iter().map(|s| s.id.as_str()))?;
    let table = assessor.ensemble(&load.samples, &experts)?;
    let mut text = table.to_jsonl();
    text.push_str(&jsonl(&error_lines(&load.errors)));
    write_atomic(out, text.as_bytes())?;
    unreadable(&load.errors)
}

pub fn init_db(
    unlabeled_dir: &Path,
    candidates: &[PathBuf],
    experts: &str,
    reference: Option<&Path>,
    template: Option<String>,
    db_dir: &Path,
) -> CliResult {
    let assessor = assessor(template)?;
    let experts = data::build_experts(experts, reference)?;
    let unlabeled = UnlabeledSet::new(data::load_strict(unlabeled_dir, Source::Real)?)?;
    let ids: Vec<String> = unlabeled.items().iter().map(|s| s.id.clone()).collect();
    let sets = data::load_candidates(&ids, candidates)?;
    let db = PseudoLabelDb::init(&unlabeled, &sets, &experts, &assessor)?;
    replace_dir(db_dir, |tmp| db.save(tmp))?;
    println!("initialized {} labels, mean score {:.4}", db.len(), db.mean_score());
    Ok(())
}

pub fn describe(
    image_dir: &Path,
    scenes: Option<&Path>,
    icl: Option<&Path>,
    rewriter: RewriterKind,
    seed: u64,
    out: &Path,
) -> CliResult {
    let images = data::load_strict(image_dir, Source::Real)?;
    stormlab::image::ensure_unique_ids(images.iter().map(|s| s.id.as_str()))?;
    let icl = match icl {
        Some(p) => IclExampleSet::parse(&std::fs::read_to_string(p)?)?,
        None => IclExampleSet::default_set(),
    };
    let caption = data::captioner(data::read_scenes(scenes)?);
    let rewrite = rewriter.build();
    let encoder = WeatherEncoder::new("clip-mock", seed);
    let validator = Validator::default();
    let ctx = DescribeContext {
        caption: &caption,
        rewrite: rewrite.as_ref(),
        encoder: &encoder,
        icl: &icl,
        validator: &validator,
        retries: TrainConfig::default().description_retries,
    };
    let store = PairStore::build(&images, &ctx, Exec::default())?;
    write_atomic(out, store.to_jsonl()?.as_bytes())?;
    let n = store.len();
    let ok = store.validated_count();
    let rate = if n == 0 { 0.0 } else { 100.0 * ok as f64 / n as f64 };
    println!("validated {ok}/{n} ({rate:.1}%)");
    Ok(())
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub db: Option<PathBuf>,
    pub experts: String,
    pub reference: Option<PathBuf>,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub dry_run: bool,
    pub seed: Option<u64>,
}

pub fn train(args: TrainArgs) -> CliResult {
    let mut config = load_config(&args.config).map_err(config_error)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate().map_err(config_error)?;

    let (datasets, scenes) = data::load_dataset(&args.data)?;
    let reference = args.reference.clone().or_else(|| {
        let d = args.data.join("reference");
        d.is_dir().then_some(d)
    });
    let mut registry = Registry::new();
    for e in data::build_experts(&args.experts, reference.as_deref())? {
        registry.add_rating(e)?;
    }
    registry
        .set_encoder(Arc::new(WeatherEncoder::new("clip-mock", config.seed)))?
        .set_features(Arc::new(PooledFeatures::new("pool8")))?
        .set_caption(Arc::new(data::captioner(scenes)))?
        .set_rewrite(RewriterKind::Lexicon.build())?;

    let config_hash = sha256_hex(config.to_config_string().as_bytes());
    let expert_names: Vec<String> = registry.rating().iter().map(|e| e.id().name.clone()).collect();
    let n_labeled = datasets.labeled.len();
    let n_unlabeled = datasets.unlabeled.len();
    let mut trainer = Trainer::new(config, datasets, registry)?.with_checkpoints(args.out.join("checkpoints"));
    if let Some(dir) = &args.db {
        trainer = trainer.with_initial_db(PseudoLabelDb::load(dir)?)?;
    }
    let resumed = match &args.resume {
        Some(dir) => Some(
            load_checkpoint(dir, &trainer.config, trainer.registry.encoder().map(|e| e.as_ref()))
                .map_err(|e| match e {
                    Error::Config { .. } => config_error(e),
                    other => other.into(),
                })?,
        ),
        None => None,
    };
    if args.dry_run {
        println!(
            "ok: {n_labeled} labeled, {n_unlabeled} unlabeled, experts {}, config {}",
            expert_names.join(","),
            &config_hash[..12]
        );
        return Ok(());
    }

    let mut state = match resumed {
        Some(s) => s,
        None => trainer.init_state()?,
    };
    let report = trainer
        .run(&mut state)?
        .ok_or_else(|| Error::Training("training stopped early".into()))?;

    state.model().save(&args.out.join("model.bin"))?;
    replace_dir(&args.out.join("db"), |tmp| state.db.save(tmp))?;
    let doc = json!({
        "config_hash": config_hash,
        "experts": expert_names,
        "iterations": state.iteration,
        "report": report,
    });
    let mut text = serde_json::to_string_pretty(&doc).map_err(Error::from)?;
    text.push('\n');
    write_atomic(&args.out.join("report.json"), text.as_bytes())?;
    println!(
        "db score {:.4} -> {:.4}; VLM-Vis {:.4} -> {:.4}",
        report.db_score_init, report.db_score_final, report.vlm_vis_before, report.vlm_vis_after
    );
    Ok(())
}

struct LoadedModel {
    model: Option<RestorationModel>,
    id: String,
    config_hash: Option<String>,
}

fn load_model(spec: &str) -> Result<LoadedModel, CliError> {
    if spec == "identity" {
        return Ok(LoadedModel {
            model: None,
            id: "identity".into(),
            config_hash: None,
        });
    }
    let path = Path::new(spec);
    let (file, config_hash) = if path.is_dir() {
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path.join("state.json"))?).map_err(Error::from)?;
        let config = meta
            .get("config")
            .and_then(|c| c.as_str())
            .ok_or_else(|| Error::Validation(format!("{}: checkpoint without config", path.display())))?;
        (path.join("teacher.bin"), Some(sha256_hex(config.as_bytes())))
    } else {
        (path.to_path_buf(), None)
    };
    let bytes = std::fs::read(&file)?;
    Ok(LoadedModel {
        model: Some(RestorationModel::from_bytes(&bytes)?),
        id: sha256_hex(&bytes),
        config_hash,
    })
}

pub fn eval(
    model: &str,
    test_dir: &Path,
    experts: &str,
    reference: Option<&Path>,
    template: Option<String>,
    out: &Path,
) -> CliResult {
    let assessor = assessor(template)?;
    let template_id = template_hash(assessor.template());
    let experts = data::build_experts(experts, reference)?;
    let loaded = load_model(model)?;

    let conditions: Vec<&str> = ["rain", "haze", "snow"]
        .into_iter()
        .filter(|c| test_dir.join(c).is_dir())
        .collect();
    if conditions.is_empty() {
        return Err(Error::Validation(format!("{} has no rain/, haze/ or snow/ directory", test_dir.display())).into());
    }
    let load = data::load_grouped(test_dir, Source::Real)?;
    for c in &conditions {
        if !load.samples.iter().any(|s| s.weather_tag.is_some_and(|t| t.as_str() == *c))
            && !load.errors.iter().any(|(id, _)| id.starts_with(&format!("{c}/")))
        {
            return Err(Error::Validation(format!("test directory `{c}` is empty")).into());
        }
    }
    stormlab::image::ensure_unique_ids(load.samples.iter().map(|s| s.id.as_str()))?;

    let restored: Vec<ImageSample> = match &loaded.model {
        None => load.samples.clone(),
        Some(m) => {
            let inputs: Vec<_> = load.samples.iter().map(|s| &s.pixels).collect();
            load.samples
                .iter()
                .zip(m.forward_batch(&inputs, Exec::default())?)
                .map(|(s, p)| s.with_pixels(p))
                .collect::<stormlab::Result<_>>()?
        }
    };
    let mut lines = vec![json!({
        "kind": "meta",
        "model": loaded.id,
        "config_hash": loaded.config_hash,
        "experts": experts.iter().map(|e| e.id().name.clone()).collect::<Vec<_>>(),
        "template_hash": template_id,
    })];
    if !restored.is_empty() {
        let table = assessor.ensemble(&restored, &experts)?;
        let vis = vlm_vis(&table)?;
        let mut rows: Vec<(String, String, &ImageSample)> = restored
            .iter()
            .map(|s| {
                let c = s.weather_tag.expect("loaded from a weather directory").as_str().to_string();
                (format!("{c}/{}", s.id), c, s)
            })
            .collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let mut groups: BTreeMap<String, Vec<&str>> = BTreeMap::new();
        for (key, c, s) in &rows {
            lines.push(json!({
                "kind": "image",
                "image_id": key,
                "condition": c,
                "scores": table.rows()[&s.id],
                "vlm_vis": vis[&s.id],
            }));
            groups.entry(c.clone()).or_default().push(s.id.as_str());
        }
        let mean = |ids: &[&str], f: &dyn Fn(&str) -> f64| ids.iter().map(|id| f(id)).sum::<f64>() / ids.len() as f64;
        for (c, ids) in &groups {
            let scores: BTreeMap<String, f64> = table
                .experts()
                .iter()
                .map(|e| (e.clone(), mean(ids, &|id| table.rows()[id][e])))
                .collect();
            lines.push(json!({
                "kind": "condition",
                "condition": c,
                "count": ids.len(),
                "mean_scores": scores,
                "vlm_vis": mean(ids, &|id| vis[id]),
            }));
        }
        let all: Vec<&str> = rows.iter().map(|(_, _, s)| s.id.as_str()).collect();
        lines.push(json!({
            "kind": "overall",
            "count": all.len(),
            "vlm_vis": mean(&all, &|id| vis[id]),
        }));
    }
    lines.extend(error_lines(&load.errors));
    write_atomic(out, jsonl(&lines).as_bytes())?;
    unreadable(&load.errors)
}

fn write_samples(dir: &Path, samples: &[ImageSample]) -> stormlab::Result<()> {
    for s in samples {
        let sub = match s.weather_tag {
            Some(t) => dir.join(t.as_str()),
            None => dir.to_path_buf(),
        };
        std::fs::create_dir_all(&sub)?;
        write_png16(&sub.join(format!("{}.png", s.id)), &s.pixels)?;
    }
    Ok(())
}

pub fn toy(out: &Path, spec: ToySpec) -> CliResult {
    if out.exists() && std::fs::read_dir(out)?.next().is_some() {
        return Err(Error::Validation(format!("{} exists and is not empty", out.display())).into());
    }
    let fixture = ToyFixture::generate(&spec)?;
    let weather = weather_test_set(spec.seed, spec.n_heldout, spec.size)?;
    let config = TrainConfig {
        seed: spec.seed,
        ..desk_config()
    };
    replace_dir(out, |root| {
        let degraded: Vec<ImageSample> = fixture.labeled.iter().map(|p| p.degraded.clone()).collect();
        write_samples(&root.join("labeled/degraded"), &degraded)?;
        let clean = root.join("labeled/clean");
        std::fs::create_dir_all(&clean)?;
        for p in &fixture.labeled {
            write_png16(&clean.join(format!("{}.png", p.clean.id)), &p.clean.pixels)?;
        }
        write_samples(&root.join("unlabeled"), fixture.unlabeled.items())?;
        for set in fixture.candidates.values() {
            for (method, img) in &set.candidates {
                let dir = root.join("candidates").join(method);
                std::fs::create_dir_all(&dir)?;
                write_png16(&dir.join(format!("{}.png", set.image_id)), img)?;
            }
        }
        for refs in fixture.prompt_refs.values() {
            write_samples(&root.join("prompts"), refs)?;
        }
        let reference = root.join("reference");
        std::fs::create_dir_all(&reference)?;
        for (id, img) in &fixture.ground_truth {
            write_png16(&reference.join(format!("{id}.png")), img)?;
        }
        let test = root.join("test");
        write_samples(&test, &fixture.heldout)?;
        for (s, clean) in &weather {
            write_samples(&test, std::slice::from_ref(s))?;
            write_png16(&reference.join(format!("{}.png", s.id)), clean)?;
        }
        let mut scenes = String::new();
        for (id, scene) in &fixture.scenes {
            scenes.push_str(&format!("{id}\t{scene}\n"));
        }
        std::fs::write(root.join("scenes.tsv"), scenes)?;
        std::fs::write(root.join("train.toml"), config.to_config_string())?;
        Ok(())
    })?;
    println!("wrote toy dataset to {}", out.display());
    Ok(())
}
