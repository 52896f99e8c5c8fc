//! The pseudo-label database.
//!
//! One record per unlabeled image holds the best restoration seen so far.
//! Records are initialized from candidate restorations ranked by the expert
//! ensemble, replaced online when the round's judge strictly prefers a
//! teacher prediction, and re-checked by the whole ensemble at round
//! boundaries. Labels live on the 16-bit grid so the on-disk rasters are
//! lossless.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::assessment::Assessor;
use crate::backends::RatingBackend;
use crate::error::{Error, Result};
use crate::image::{read_png, write_png16, Image, ImageSample, UnlabeledSet};

pub const MANIFEST: &str = "manifest.jsonl";
pub const LABEL_DIR: &str = "labels";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelSource {
    InitCandidate { method: String },
    Teacher { round: u32, iteration: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelRecord {
    pub image_id: String,
    pub label: Image,
    pub score_cache: BTreeMap<String, f64>,
    pub source: LabelSource,
    pub version: u64,
}

impl PseudoLabelRecord {
    pub fn mean_cached_score(&self) -> Option<f64> {
        if self.score_cache.is_empty() {
            None
        } else {
            Some(self.score_cache.values().sum::<f64>() / self.score_cache.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub image_id: String,
    pub candidates: Vec<(String, Image)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReassessSummary {
    pub replaced: usize,
    /// fresh mean score minus stored mean score, per image
    pub deltas: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabelDb {
    records: BTreeMap<String, PseudoLabelRecord>,
}

fn as_sample(template: &ImageSample, pixels: Image) -> Result<ImageSample> {
    template.with_pixels(pixels)
}

impl PseudoLabelDb {
    pub fn records(&self) -> &BTreeMap<String, PseudoLabelRecord> {
        &self.records
    }

    pub fn get(&self, image_id: &str) -> Option<&PseudoLabelRecord> {
        self.records.get(image_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean over images of the mean cached ensemble score.
    pub fn mean_score(&self) -> f64 {
        let scores: Vec<f64> = self.records.values().filter_map(|r| r.mean_cached_score()).collect();
        scores.iter().sum::<f64>() / scores.len().max(1) as f64
    }

    /// Picks, per image, the candidate with the highest mean ensemble score.
    /// Ties keep the first-listed method.
    pub fn init(
        unlabeled: &UnlabeledSet,
        candidates: &BTreeMap<String, CandidateSet>,
        experts: &[Arc<dyn RatingBackend>],
        assessor: &Assessor,
    ) -> Result<Self> {
        let missing: Vec<String> = unlabeled
            .items()
            .iter()
            .filter(|s| candidates.get(&s.id).is_none_or(|c| c.candidates.is_empty()))
            .map(|s| s.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingCandidates(missing));
        }
        let mut records = BTreeMap::new();
        for sample in unlabeled.items() {
            let set = &candidates[&sample.id];
            let quantized: Vec<ImageSample> = set
                .candidates
                .iter()
                .map(|(_, img)| as_sample(sample, img.quantized16()))
                .collect::<Result<_>>()?;
            let mut best: Option<(usize, f64, BTreeMap<String, f64>)> = None;
            for (k, cand) in quantized.iter().enumerate() {
                let mut cache = BTreeMap::new();
                for expert in experts {
                    let s = assessor.assess(cand, expert.as_ref())?;
                    cache.insert(expert.id().name.clone(), s.value);
                }
                let mean = cache.values().sum::<f64>() / cache.len().max(1) as f64;
                if best.as_ref().is_none_or(|(_, b, _)| mean > *b) {
                    best = Some((k, mean, cache));
                }
            }
            let (k, _, score_cache) = best.expect("at least one candidate");
            records.insert(
                sample.id.clone(),
                PseudoLabelRecord {
                    image_id: sample.id.clone(),
                    label: quantized[k].pixels.clone(),
                    score_cache,
                    source: LabelSource::InitCandidate {
                        method: set.candidates[k].0.clone(),
                    },
                    version: 1,
                },
            );
        }
        Ok(Self { records })
    }

    fn record_mut(&mut self, image_id: &str) -> Result<&mut PseudoLabelRecord> {
        self.records
            .get_mut(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    /// Online update with a single judge: replaces the stored label iff the
    /// judge strictly prefers `prediction`. The stored label's score under the
    /// judge is computed lazily and cached.
    pub fn maybe_update(
        &mut self,
        sample: &ImageSample,
        prediction: &Image,
        judge: &dyn RatingBackend,
        assessor: &Assessor,
        source: LabelSource,
    ) -> Result<bool> {
        let name = judge.id().name.clone();
        let record = self.record_mut(&sample.id)?;
        if prediction.shape() != record.label.shape() {
            return Err(Error::Domain(format!(
                "prediction for `{}` has shape {:?}, label has {:?}",
                sample.id,
                prediction.shape(),
                record.label.shape()
            )));
        }
        let candidate = as_sample(sample, prediction.quantized16())?;
        let s_new = assessor.assess(&candidate, judge)?.value;
        let s_old = match record.score_cache.get(&name) {
            Some(s) => *s,
            None => {
                let stored = as_sample(sample, record.label.clone())?;
                let s = assessor.assess(&stored, judge)?.value;
                record.score_cache.insert(name.clone(), s);
                s
            }
        };
        if s_new > s_old {
            record.label = candidate.pixels;
            record.score_cache = BTreeMap::from([(name, s_new)]);
            record.source = source;
            record.version += 1;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Unconditional replacement, as in a plain mean teacher where the
    /// teacher's prediction always becomes the target.
    pub fn force_replace(&mut self, image_id: &str, prediction: &Image, source: LabelSource) -> Result<()> {
        let record = self.record_mut(image_id)?;
        if prediction.shape() != record.label.shape() {
            return Err(Error::Domain(format!("prediction for `{image_id}` has the wrong shape")));
        }
        record.label = prediction.quantized16();
        record.score_cache.clear();
        record.source = source;
        record.version += 1;
        Ok(())
    }

    /// Round-boundary pass: completes every record's score cache for all
    /// `experts`, then replaces labels whose fresh prediction has a strictly
    /// higher mean ensemble score. Nothing is modified if any assessment fails.
    pub fn full_reassess(
        &mut self,
        samples: &[ImageSample],
        fresh: &BTreeMap<String, Image>,
        experts: &[Arc<dyn RatingBackend>],
        assessor: &Assessor,
        source: impl Fn(&str) -> LabelSource,
    ) -> Result<ReassessSummary> {
        if experts.is_empty() {
            return Err(Error::Domain("full reassessment needs at least one expert".into()));
        }
        for id in fresh.keys() {
            if !self.records.contains_key(id) {
                return Err(Error::UnknownImage(id.clone()));
            }
        }
        let by_id: BTreeMap<&str, &ImageSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let lookup = |id: &str| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::UnknownImage(id.to_string()))
        };

        let stored: Vec<ImageSample> = self
            .records
            .values()
            .map(|r| as_sample(lookup(&r.image_id)?, r.label.clone()))
            .collect::<Result<_>>()?;
        let fresh_samples: Vec<ImageSample> = fresh
            .iter()
            .map(|(id, img)| as_sample(lookup(id)?, img.quantized16()))
            .collect::<Result<_>>()?;

        let stored_table = assessor.ensemble(&stored, experts)?;
        let fresh_table = if fresh_samples.is_empty() {
            None
        } else {
            Some(assessor.ensemble(&fresh_samples, experts)?)
        };

        let mut summary = ReassessSummary::default();
        for record in self.records.values_mut() {
            let old_row = &stored_table.rows()[&record.image_id];
            for (e, s) in old_row {
                record.score_cache.insert(e.clone(), *s);
            }
            let Some(fresh_table) = &fresh_table else { continue };
            let Some(new_row) = fresh_table.rows().get(&record.image_id) else { continue };
            let old_mean = stored_table.mean_score(&record.image_id).expect("row present");
            let new_mean = fresh_table.mean_score(&record.image_id).expect("row present");
            summary.deltas.insert(record.image_id.clone(), new_mean - old_mean);
            if new_mean > old_mean {
                record.label = fresh[&record.image_id].quantized16();
                record.score_cache = new_row.clone();
                record.source = source(&record.image_id);
                record.version += 1;
                summary.replaced += 1;
            }
        }
        Ok(summary)
    }

    // -----------------------------------------------------------------------
    // Persistence

    /// Writes `labels/<id>.png` for every record, then the manifest via a
    /// temporary file and rename.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let labels = dir.join(LABEL_DIR);
        std::fs::create_dir_all(&labels)?;
        let mut manifest = String::new();
        for r in self.records.values() {
            let file = format!("{}.png", r.image_id);
            write_png16(&labels.join(&file), &r.label)?;
            let line = ManifestLine {
                image_id: r.image_id.clone(),
                label_file: format!("{LABEL_DIR}/{file}"),
                version: r.version,
                source: r.source.clone(),
                score_cache: r.score_cache.clone(),
            };
            manifest.push_str(&serde_json::to_string(&line)?);
            manifest.push('\n');
        }
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(manifest.as_bytes())?;
        tmp.persist(dir.join(MANIFEST)).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)?;
        let load_err = |line: usize, message: String| Error::Load {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut records = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestLine = serde_json::from_str(line).map_err(|e| load_err(i + 1, e.to_string()))?;
            if rec.version == 0 {
                return Err(load_err(i + 1, "version must be at least 1".into()));
            }
            if let Some(s) = rec.score_cache.values().find(|s| !(1.0..=5.0).contains(*s)) {
                return Err(load_err(i + 1, format!("cached score {s} outside [1, 5]")));
            }
            let label = read_png(&dir.join(&rec.label_file)).map_err(|e| load_err(i + 1, e.to_string()))?;
            if records.contains_key(&rec.image_id) {
                return Err(load_err(i + 1, format!("duplicate record `{}`", rec.image_id)));
            }
            records.insert(
                rec.image_id.clone(),
                PseudoLabelRecord {
                    image_id: rec.image_id,
                    label,
                    score_cache: rec.score_cache,
                    source: rec.source,
                    version: rec.version,
                },
            );
        }
        Ok(Self { records })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    image_id: String,
    label_file: String,
    version: u64,
    source: LabelSource,
    score_cache: BTreeMap<String, f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::OracleJudge;
    use crate::backends::DEFAULT_RATING_TEMPLATE;
    use crate::image::Source;

    fn clean() -> Image {
        Image::from_fn(8, 8, |y, x, c| 0.2 + 0.05 * ((y + 2 * x + c) % 7) as f64).unwrap()
    }

    /// `clean` shifted towards white by `amount`; the oracle energy grows with it.
    fn degraded(amount: f64) -> Image {
        let c = clean();
        Image::from_fn(8, 8, |y, x, ch| c.get(y, x, ch) + amount * (1.0 - c.get(y, x, ch))).unwrap()
    }

    fn setup(ids: &[&str]) -> (UnlabeledSet, Arc<dyn RatingBackend>, Assessor) {
        let items = ids
            .iter()
            .map(|id| ImageSample::new(*id, degraded(0.6), None, Source::Real).unwrap())
            .collect();
        let refs: BTreeMap<String, Image> = ids.iter().map(|id| (id.to_string(), clean())).collect();
        let judge: Arc<dyn RatingBackend> = Arc::new(OracleJudge::new("o", Arc::new(refs)));
        (UnlabeledSet::new(items).unwrap(), judge, Assessor::new(DEFAULT_RATING_TEMPLATE).unwrap())
    }

    fn cands(ids: &[&str], list: &[(&str, Image)]) -> BTreeMap<String, CandidateSet> {
        ids.iter()
            .map(|id| {
                (
                    id.to_string(),
                    CandidateSet {
                        image_id: id.to_string(),
                        candidates: list.iter().map(|(m, i)| (m.to_string(), i.clone())).collect(),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn init_picks_best_and_breaks_ties_by_order() {
        let (u, judge, a) = setup(&["a"]);
        let db = PseudoLabelDb::init(&u, &cands(&["a"], &[("worse", degraded(0.5)), ("better", degraded(0.1))]), std::slice::from_ref(&judge), &a).unwrap();
        let r = db.get("a").unwrap();
        assert_eq!(r.source, LabelSource::InitCandidate { method: "better".into() });
        assert_eq!(r.version, 1);
        assert!(r.score_cache.contains_key("o"));

        let db = PseudoLabelDb::init(&u, &cands(&["a"], &[("first", degraded(0.3)), ("second", degraded(0.3))]), &[judge], &a).unwrap();
        assert_eq!(db.get("a").unwrap().source, LabelSource::InitCandidate { method: "first".into() });
    }

    #[test]
    fn init_lists_missing_candidates() {
        let (u, judge, a) = setup(&["a", "b"]);
        match PseudoLabelDb::init(&u, &cands(&["a"], &[("x", degraded(0.2))]), &[judge], &a) {
            Err(Error::MissingCandidates(ids)) => assert_eq!(ids, vec!["b".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn update_requires_strict_improvement() {
        let (u, judge, a) = setup(&["a"]);
        let mut db = PseudoLabelDb::init(&u, &cands(&["a"], &[("x", degraded(0.3))]), std::slice::from_ref(&judge), &a).unwrap();
        let s = &u.items()[0];
        let teacher = |i| LabelSource::Teacher { round: 0, iteration: i };
        assert!(!db.maybe_update(s, &degraded(0.5), judge.as_ref(), &a, teacher(1)).unwrap());
        assert!(!db.maybe_update(s, &degraded(0.3), judge.as_ref(), &a, teacher(2)).unwrap());
        assert_eq!(db.get("a").unwrap().version, 1);
        assert!(db.maybe_update(s, &degraded(0.1), judge.as_ref(), &a, teacher(3)).unwrap());
        let r = db.get("a").unwrap();
        assert_eq!(r.version, 2);
        assert_eq!(r.source, teacher(3));
        assert_eq!(r.score_cache.len(), 1);
    }

    #[test]
    fn unknown_id_is_lookup_error() {
        let (u, judge, a) = setup(&["a"]);
        let mut db = PseudoLabelDb::init(&u, &cands(&["a"], &[("x", degraded(0.3))]), std::slice::from_ref(&judge), &a).unwrap();
        let other = ImageSample::new("zz", degraded(0.1), None, Source::Real).unwrap();
        let r = db.maybe_update(&other, &degraded(0.1), judge.as_ref(), &a, LabelSource::Teacher { round: 0, iteration: 0 });
        assert!(matches!(r, Err(Error::UnknownImage(_))));
    }

    #[test]
    fn save_load_round_trip_and_deterministic_manifest() {
        let (u, judge, a) = setup(&["b", "a"]);
        let mut db = PseudoLabelDb::init(&u, &cands(&["a", "b"], &[("x", degraded(0.3))]), std::slice::from_ref(&judge), &a).unwrap();
        db.maybe_update(&u.items()[0], &degraded(0.05), judge.as_ref(), &a, LabelSource::Teacher { round: 1, iteration: 9 }).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        db.save(d1.path()).unwrap();
        db.save(d2.path()).unwrap();
        let m1 = std::fs::read(d1.path().join(MANIFEST)).unwrap();
        assert_eq!(m1, std::fs::read(d2.path().join(MANIFEST)).unwrap());
        assert!(String::from_utf8(m1).unwrap().starts_with("{\"image_id\":\"a\""));
        assert_eq!(PseudoLabelDb::load(d1.path()).unwrap(), db);
    }

    #[test]
    fn truncated_manifest_fails_with_line_number() {
        let (u, judge, a) = setup(&["a", "b"]);
        let db = PseudoLabelDb::init(&u, &cands(&["a", "b"], &[("x", degraded(0.3))]), &[judge], &a).unwrap();
        let dir = tempfile::tempdir().unwrap();
        db.save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 20]).unwrap();
        match PseudoLabelDb::load(dir.path()) {
            Err(Error::Load { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
