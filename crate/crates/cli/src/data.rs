//! Directory layouts and backend construction.
//!
//! A dataset root looks like
//!
//! ```text
//! labeled/degraded/[<tag>/]*.png   synthetic inputs
//! labeled/clean/*.png              their ground truth, same file names
//! unlabeled/[<tag>/]*.png          real degraded images
//! candidates/<method>/*.png        one restoration per unlabeled image
//! prompts/<tag>/*.png              weather reference images
//! reference/*.png                  clean images for full-reference judges
//! scenes.tsv                       optional `id<TAB>scene` lines
//! ```
//!
//! `<tag>` is one of `clear`, `rain`, `haze`, `snow`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::ValueEnum;
use stormlab::backends::mock::{DarkChannelJudge, EchoRewriter, LexiconRewriter, MockCaptioner, OracleJudge};
use stormlab::backends::{RatingBackend, RewriteBackend};
use stormlab::image::{list_pngs, load_dir, read_png, DirLoad};
use stormlab::pseudodb::CandidateSet;
use stormlab::trainer::Datasets;
use stormlab::{Error, Image, ImageSample, LabeledPair, Result, Source, UnlabeledSet, WeatherTag};

pub const DEFAULT_EXPERTS: &str = "oracle-a,oracle-b";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RewriterKind {
    Lexicon,
    Echo,
}

impl RewriterKind {
    pub fn build(self) -> Arc<dyn RewriteBackend> {
        match self {
            RewriterKind::Lexicon => Arc::new(LexiconRewriter::new("rewrite-mock")),
            RewriterKind::Echo => Arc::new(EchoRewriter::new("rewrite-echo")),
        }
    }
}

pub fn load_references(dir: &Path) -> Result<BTreeMap<String, Image>> {
    let mut refs = BTreeMap::new();
    for (id, path) in list_pngs(dir)? {
        refs.insert(id, read_png(&path)?);
    }
    Ok(refs)
}

/// Parses a comma-separated expert list.
///
/// * `oracle-a`, `oracle-b`: full-reference judges with the desk settings
/// * `oracle`: full-reference judge with default settings
/// * `dark-channel`: no-reference haze judge
/// * `http:<name>=<url>`: remote judge (needs the `http` feature)
pub fn build_experts(spec: &str, reference: Option<&Path>) -> Result<Vec<Arc<dyn RatingBackend>>> {
    let mut refs: Option<Arc<BTreeMap<String, Image>>> = None;
    let mut get_refs = |name: &str| -> Result<Arc<BTreeMap<String, Image>>> {
        if let Some(r) = &refs {
            return Ok(r.clone());
        }
        let dir = reference
            .ok_or_else(|| Error::Registry(format!("expert `{name}` needs --reference")))?;
        let r = Arc::new(load_references(dir)?);
        refs = Some(r.clone());
        Ok(r)
    };
    let mut out: Vec<Arc<dyn RatingBackend>> = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let backend: Arc<dyn RatingBackend> = match item {
            "oracle-a" => Arc::new(OracleJudge::with_params(item, get_refs(item)?, 20.0, 0.3)),
            "oracle-b" => Arc::new(OracleJudge::with_params(item, get_refs(item)?, 12.0, 0.4)),
            "oracle" => Arc::new(OracleJudge::new(item, get_refs(item)?)),
            "dark-channel" => Arc::new(DarkChannelJudge::new(item)),
            other => match other.strip_prefix("http:") {
                Some(rest) => http_expert(rest)?,
                None => return Err(Error::Registry(format!("unknown expert `{other}`"))),
            },
        };
        if out.iter().any(|e| e.id().name == backend.id().name) {
            return Err(Error::Registry(format!("expert `{item}` listed twice")));
        }
        out.push(backend);
    }
    if out.is_empty() {
        return Err(Error::Registry("no experts given".into()));
    }
    Ok(out)
}

#[cfg(feature = "http")]
fn http_expert(spec: &str) -> Result<Arc<dyn RatingBackend>> {
    let (name, url) = spec
        .split_once('=')
        .ok_or_else(|| Error::Registry(format!("expected http:<name>=<url>, got `http:{spec}`")))?;
    Ok(Arc::new(stormlab::backends::http::HttpRatingBackend::new(name, url, None)))
}

#[cfg(not(feature = "http"))]
fn http_expert(spec: &str) -> Result<Arc<dyn RatingBackend>> {
    Err(Error::Registry(format!(
        "`http:{spec}` needs a build with the `http` feature"
    )))
}

/// Loads `dir`, or its weather subdirectories when any exist. Samples from a
/// subdirectory carry its tag; error ids are prefixed with the subdirectory.
pub fn load_grouped(dir: &Path, source: Source) -> Result<DirLoad> {
    let groups: Vec<(WeatherTag, PathBuf)> = WeatherTag::ALL
        .iter()
        .map(|t| (*t, dir.join(t.as_str())))
        .filter(|(_, p)| p.is_dir())
        .collect();
    if groups.is_empty() {
        return load_dir(dir, source, None);
    }
    let mut all = DirLoad::default();
    for (tag, path) in groups {
        let load = load_dir(&path, source, Some(tag))?;
        all.samples.extend(load.samples);
        all.errors
            .extend(load.errors.into_iter().map(|(id, e)| (format!("{tag}/{id}"), e)));
    }
    Ok(all)
}

/// Like [`load_grouped`] but any unreadable file is an error.
pub fn load_strict(dir: &Path, source: Source) -> Result<Vec<ImageSample>> {
    let load = load_grouped(dir, source)?;
    if let Some((id, e)) = load.errors.first() {
        return Err(Error::Codec(format!("{}: `{id}`: {e}", dir.display())));
    }
    Ok(load.samples)
}

/// Candidate restorations for `ids`; every method directory must hold every id.
pub fn load_candidates(ids: &[String], methods: &[PathBuf]) -> Result<BTreeMap<String, CandidateSet>> {
    let mut sets: BTreeMap<String, CandidateSet> = ids
        .iter()
        .map(|id| {
            (
                id.clone(),
                CandidateSet {
                    image_id: id.clone(),
                    candidates: Vec::new(),
                },
            )
        })
        .collect();
    let mut missing = Vec::new();
    for dir in methods {
        let method = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Validation(format!("bad candidate directory {}", dir.display())))?
            .to_string();
        for id in ids {
            let path = dir.join(format!("{id}.png"));
            if !path.is_file() {
                missing.push(format!("{id} ({method})"));
                continue;
            }
            let img = read_png(&path)?;
            sets.get_mut(id).expect("seeded").candidates.push((method.clone(), img));
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingCandidates(missing));
    }
    Ok(sets)
}

pub fn parse_scenes(text: &str) -> Result<BTreeMap<String, String>> {
    let mut scenes = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (id, scene) = line.split_once('\t').ok_or_else(|| Error::Load {
            path: "scenes".into(),
            line: i + 1,
            message: "expected `id<TAB>scene`".into(),
        })?;
        scenes.insert(id.trim().to_string(), scene.trim().to_string());
    }
    Ok(scenes)
}

pub fn read_scenes(path: Option<&Path>) -> Result<BTreeMap<String, String>> {
    match path {
        Some(p) => parse_scenes(&std::fs::read_to_string(p)?),
        None => Ok(BTreeMap::new()),
    }
}

pub fn captioner(scenes: BTreeMap<String, String>) -> MockCaptioner {
    MockCaptioner::new("caption-mock", scenes)
}

pub fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Reads a dataset root into training inputs plus its scene phrases.
pub fn load_dataset(root: &Path) -> Result<(Datasets, BTreeMap<String, String>)> {
    let degraded = load_strict(&root.join("labeled/degraded"), Source::Synthetic)?;
    let clean_dir = root.join("labeled/clean");
    let mut labeled = Vec::with_capacity(degraded.len());
    for d in degraded {
        let path = clean_dir.join(format!("{}.png", d.id));
        if !path.is_file() {
            return Err(Error::Validation(format!("no clean image for labeled `{}`", d.id)));
        }
        let clean = ImageSample::new(d.id.clone(), read_png(&path)?, Some(WeatherTag::Clear), Source::Synthetic)?;
        labeled.push(LabeledPair::new(d, clean)?);
    }

    let unlabeled = UnlabeledSet::new(load_strict(&root.join("unlabeled"), Source::Real)?)?;
    let ids: Vec<String> = unlabeled.items().iter().map(|s| s.id.clone()).collect();
    let cand_root = root.join("candidates");
    let candidates = if cand_root.is_dir() {
        load_candidates(&ids, &subdirs(&cand_root)?)?
    } else {
        BTreeMap::new()
    };

    let mut prompt_refs = BTreeMap::new();
    let prompt_root = root.join("prompts");
    if prompt_root.is_dir() {
        for tag in WeatherTag::ALL {
            let dir = prompt_root.join(tag.as_str());
            if dir.is_dir() {
                let load = load_dir(&dir, Source::Synthetic, Some(tag))?;
                if let Some((id, e)) = load.errors.first() {
                    return Err(Error::Codec(format!("prompt reference `{id}`: {e}")));
                }
                prompt_refs.insert(tag, load.samples);
            }
        }
    }

    let scenes_path = root.join("scenes.tsv");
    let scenes = read_scenes(scenes_path.is_file().then_some(scenes_path.as_path()))?;
    Ok((
        Datasets {
            labeled,
            unlabeled,
            candidates,
            prompt_refs,
        },
        scenes,
    ))
}
