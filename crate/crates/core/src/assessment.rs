//! Visibility scoring from rating logits, expert ensembles, and the
//! dataset-normalized ensemble visibility metric.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{render_rating_prompt, ExpertId, ExpertKind, RatingBackend};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::{hex, ImageSample};

/// Expected rating under the softmax of the five token logits: `Σ i · p_i`.
pub fn score_from_logits(logits: &[f64; 5]) -> Result<f64> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Domain(format!("non-finite rating logits {logits:?}")));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let r: f64 = exps
        .iter()
        .enumerate()
        .map(|(i, e)| (i + 1) as f64 * e / z)
        .sum();
    Ok(r.clamp(1.0, 5.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityScore {
    pub value: f64,
    pub expert: ExpertId,
}

/// image id → expert name → score. Rows are complete: every row carries a
/// score for every expert in `experts`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExpertScoreTable {
    experts: Vec<String>,
    rows: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Serialize, Deserialize)]
struct TableLine {
    image_id: String,
    scores: BTreeMap<String, f64>,
}

impl ExpertScoreTable {
    pub fn new(experts: Vec<String>) -> Self {
        Self {
            experts,
            rows: BTreeMap::new(),
        }
    }

    pub fn experts(&self) -> &[String] {
        &self.experts
    }

    pub fn rows(&self) -> &BTreeMap<String, BTreeMap<String, f64>> {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, image_id: &str, expert: &str) -> Option<f64> {
        self.rows.get(image_id)?.get(expert).copied()
    }

    pub fn insert_row(&mut self, image_id: impl Into<String>, scores: BTreeMap<String, f64>) -> Result<()> {
        let image_id = image_id.into();
        if scores.len() != self.experts.len() || !self.experts.iter().all(|e| scores.contains_key(e)) {
            return Err(Error::Domain(format!(
                "row `{image_id}` must score exactly the experts {:?}",
                self.experts
            )));
        }
        if let Some(v) = scores.values().find(|v| !(1.0..=5.0).contains(*v)) {
            return Err(Error::Domain(format!("score {v} outside [1, 5]")));
        }
        self.rows.insert(image_id, scores);
        Ok(())
    }

    /// Unweighted mean over experts for one image.
    pub fn mean_score(&self, image_id: &str) -> Option<f64> {
        let row = self.rows.get(image_id)?;
        Some(row.values().sum::<f64>() / row.len() as f64)
    }

    /// Re-keys every row, e.g. to pool several restorations of one image set.
    pub fn merged_with_prefix(tables: &[(&str, &ExpertScoreTable)]) -> Result<ExpertScoreTable> {
        let experts = tables
            .first()
            .map(|(_, t)| t.experts.clone())
            .unwrap_or_default();
        let mut out = ExpertScoreTable::new(experts);
        for (prefix, t) in tables {
            if t.experts != out.experts {
                return Err(Error::Domain("cannot pool tables with different experts".into()));
            }
            for (id, row) in &t.rows {
                out.rows.insert(format!("{prefix}{id}"), row.clone());
            }
        }
        Ok(out)
    }

    /// One JSON object per line, sorted by image id.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, scores) in &self.rows {
            let line = TableLine {
                image_id: id.clone(),
                scores: scores.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, experts: Vec<String>) -> Result<Self> {
        let mut t = ExpertScoreTable::new(experts);
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: TableLine = serde_json::from_str(line).map_err(|e| Error::Load {
                path: "score table".into(),
                line: i + 1,
                message: e.to_string(),
            })?;
            t.insert_row(rec.image_id, rec.scores)?;
        }
        Ok(t)
    }
}

/// Per expert, min-max normalize scores across the table; per image, average
/// the normalized scores over experts. An expert whose scores are all equal
/// contributes 0.5 to every image.
pub fn vlm_vis(table: &ExpertScoreTable) -> Result<BTreeMap<String, f64>> {
    if table.rows.is_empty() || table.experts.is_empty() {
        return Err(Error::Domain("VLM-Vis of an empty table".into()));
    }
    let mut ranges = Vec::with_capacity(table.experts.len());
    for e in &table.experts {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for row in table.rows.values() {
            let s = row[e];
            lo = lo.min(s);
            hi = hi.max(s);
        }
        ranges.push((lo, hi));
    }
    let k = table.experts.len() as f64;
    Ok(table
        .rows
        .iter()
        .map(|(id, row)| {
            let sum: f64 = table
                .experts
                .iter()
                .zip(&ranges)
                .map(|(e, &(lo, hi))| if hi > lo { (row[e] - lo) / (hi - lo) } else { 0.5 })
                .sum();
            (id.clone(), sum / k)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Score cache

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    content: String,
    expert: String,
    template: String,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    content_hash: String,
    expert: String,
    template_hash: String,
    score: f64,
}

/// `(image content hash, expert, template hash) → score`, optionally backed
/// by an append-only file. Each insert appends exactly one complete line.
#[derive(Debug, Default)]
pub struct ScoreCache {
    map: Mutex<HashMap<CacheKey, f64>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

pub fn template_hash(template: &str) -> String {
    hex(&Sha256::digest(template.as_bytes()))
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads existing records from `path` (if present) and appends new ones.
    /// A trailing partial line from an interrupted write is ignored.
    pub fn open(path: &Path) -> Result<Self> {
        let mut map = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for line in reader.lines() {
                let line = line?;
                if let Ok(rec) = serde_json::from_str::<CacheLine>(&line) {
                    map.insert(
                        CacheKey {
                            content: rec.content_hash,
                            expert: rec.expert,
                            template: rec.template_hash,
                        },
                        rec.score,
                    );
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            map: Mutex::new(map),
            file: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &CacheKey) -> Option<f64> {
        self.map.lock().expect("cache lock").get(key).copied()
    }

    fn insert(&self, key: CacheKey, score: f64) -> Result<()> {
        let mut map = self.map.lock().expect("cache lock");
        if map.contains_key(&key) {
            return Ok(());
        }
        if let Some(file) = &self.file {
            let line = serde_json::to_string(&CacheLine {
                content_hash: key.content.clone(),
                expert: key.expert.clone(),
                template_hash: key.template.clone(),
                score,
            })?;
            let mut f = file.lock().expect("cache file lock");
            f.write_all(format!("{line}\n").as_bytes())?;
        }
        map.insert(key, score);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Assessor

/// Runs rating experts with a fixed prompt template, retrying transport
/// failures and optionally memoizing scores.
#[derive(Debug, Clone)]
pub struct Assessor {
    template: String,
    retries: usize,
    exec: Exec,
    cache: Option<Arc<ScoreCache>>,
}

impl Assessor {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        render_rating_prompt(&template)?;
        Ok(Self {
            template,
            retries: 2,
            exec: Exec::default(),
            cache: None,
        })
    }

    pub fn with_retries(mut self, retries: usize) -> Self {
        self.retries = retries;
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn with_cache(mut self, cache: Arc<ScoreCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn assess(&self, image: &ImageSample, expert: &dyn RatingBackend) -> Result<VisibilityScore> {
        let id = expert.id();
        if id.kind != ExpertKind::Rating {
            return Err(Error::Registry(format!("`{}` is not a rating expert", id.name)));
        }
        let key = self.cache.as_ref().map(|_| CacheKey {
            content: image.pixels.content_hash(),
            expert: id.name.clone(),
            template: template_hash(&self.template),
        });
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(value) = cache.get(key) {
                return Ok(VisibilityScore {
                    value,
                    expert: id.clone(),
                });
            }
        }
        let mut attempt = 0;
        let logits = loop {
            match expert.rate(image, &self.template) {
                Ok(l) => break l,
                Err(e) if e.is_retryable() && attempt < self.retries => attempt += 1,
                Err(e) => return Err(e),
            }
        };
        let value = score_from_logits(logits.values())?;
        if let (Some(cache), Some(key)) = (&self.cache, key) {
            cache.insert(key, value)?;
        }
        Ok(VisibilityScore {
            value,
            expert: id.clone(),
        })
    }

    /// Scores every image with every expert. Cells are evaluated in parallel
    /// (bounded by each expert's in-flight hint) and assembled in a fixed
    /// order, so the table never depends on completion order.
    pub fn ensemble(
        &self,
        images: &[ImageSample],
        experts: &[Arc<dyn RatingBackend>],
    ) -> Result<ExpertScoreTable> {
        if experts.is_empty() {
            return Err(Error::Domain("ensemble needs at least one expert".into()));
        }
        let names: Vec<String> = experts.iter().map(|e| e.id().name.clone()).collect();
        let mut columns: Vec<Vec<Result<f64>>> = Vec::with_capacity(experts.len());
        for expert in experts {
            let col = self.exec.map_bounded(images, expert.max_in_flight(), |img| {
                self.assess(img, expert.as_ref()).map(|s| s.value)
            });
            columns.push(col);
        }
        let mut table = ExpertScoreTable::new(names.clone());
        let mut failed = Vec::new();
        let mut first_error = None;
        for (i, img) in images.iter().enumerate() {
            let mut row = BTreeMap::new();
            let mut ok = true;
            for (j, name) in names.iter().enumerate() {
                match &columns[j][i] {
                    Ok(v) => {
                        row.insert(name.clone(), *v);
                    }
                    Err(e) => {
                        ok = false;
                        first_error.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            if ok {
                table.insert_row(img.id.clone(), row)?;
            } else {
                failed.push(img.id.clone());
            }
        }
        if !failed.is_empty() {
            return Err(Error::PartialAssessment {
                failed,
                message: first_error.unwrap_or_default(),
            });
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{oracle_logits, OracleJudge};
    use crate::backends::{RatingLogits, DEFAULT_RATING_TEMPLATE};
    use crate::image::{Image, Source};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn equal_logits_give_three() {
        assert_eq!(score_from_logits(&[0.7; 5]).unwrap(), 3.0);
    }

    #[test]
    fn hand_computed_expectation() {
        let l = [1f64.ln(), 1f64.ln(), 1f64.ln(), 1f64.ln(), 6f64.ln()];
        // p = (0.1, 0.1, 0.1, 0.1, 0.6): 0.1 * (1 + 2 + 3 + 4) + 0.6 * 5 = 4.0
        assert_relative_eq!(score_from_logits(&l).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_is_domain_error() {
        assert!(matches!(score_from_logits(&[0.0, 0.0, f64::INFINITY, 0.0, 0.0]), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn shift_invariant(l in prop::array::uniform5(-20.0f64..20.0), c in -50.0f64..50.0) {
            let shifted = l.map(|v| v + c);
            let a = score_from_logits(&l).unwrap();
            let b = score_from_logits(&shifted).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
            prop_assert!((1.0..=5.0).contains(&a));
        }

        #[test]
        fn monotone_in_extreme_logits(l in prop::array::uniform5(-10.0f64..10.0), d in 0.01f64..5.0) {
            let base = score_from_logits(&l).unwrap();
            let mut up5 = l; up5[4] += d;
            let mut up1 = l; up1[0] += d;
            prop_assert!(score_from_logits(&up5).unwrap() > base);
            prop_assert!(score_from_logits(&up1).unwrap() < base);
        }
    }

    fn table(rows: &[(&str, &[(&str, f64)])]) -> ExpertScoreTable {
        let experts: Vec<String> = rows[0].1.iter().map(|(e, _)| e.to_string()).collect();
        let mut t = ExpertScoreTable::new(experts);
        for (id, scores) in rows {
            t.insert_row(*id, scores.iter().map(|(e, s)| (e.to_string(), *s)).collect()).unwrap();
        }
        t
    }

    #[test]
    fn vlm_vis_endpoints() {
        let t = table(&[("a", &[("e", 1.0)]), ("b", &[("e", 5.0)])]);
        let v = vlm_vis(&t).unwrap();
        assert_eq!(v["a"], 0.0);
        assert_eq!(v["b"], 1.0);
    }

    #[test]
    fn vlm_vis_degenerate_column() {
        let t = table(&[
            ("a", &[("e1", 1.0), ("e2", 5.0)]),
            ("b", &[("e1", 3.0), ("e2", 5.0)]),
            ("c", &[("e1", 5.0), ("e2", 5.0)]),
        ]);
        let v = vlm_vis(&t).unwrap();
        assert_eq!(v["a"], 0.25);
        assert_eq!(v["b"], 0.5);
        assert_eq!(v["c"], 0.75);
    }

    #[test]
    fn vlm_vis_empty_is_error() {
        assert!(vlm_vis(&ExpertScoreTable::new(vec!["e".into()])).is_err());
    }

    #[test]
    fn table_jsonl_round_trip() {
        let t = table(&[("b", &[("e", 2.5)]), ("a", &[("e", 4.25)])]);
        let text = t.to_jsonl();
        assert!(text.starts_with("{\"image_id\":\"a\""));
        assert_eq!(ExpertScoreTable::from_jsonl(&text, vec!["e".into()]).unwrap(), t);
    }

    struct Flaky {
        id: ExpertId,
        failures_left: AtomicUsize,
        calls: AtomicUsize,
    }

    impl RatingBackend for Flaky {
        fn id(&self) -> &ExpertId {
            &self.id
        }
        fn rate(&self, _: &ImageSample, _: &str) -> Result<RatingLogits> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self
                .failures_left
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok()
            {
                return Err(Error::Transport { expert: "flaky".into(), message: "503".into() });
            }
            Ok(oracle_logits(0.0, 20.0))
        }
    }

    fn img(id: &str, v: f64) -> ImageSample {
        ImageSample::new(id, Image::filled(8, 8, v).unwrap(), None, Source::Real).unwrap()
    }

    #[test]
    fn transport_errors_are_retried() {
        let flaky = Flaky {
            id: ExpertId::new("flaky", ExpertKind::Rating),
            failures_left: AtomicUsize::new(2),
            calls: AtomicUsize::new(0),
        };
        let a = Assessor::new(DEFAULT_RATING_TEMPLATE).unwrap().with_retries(2);
        assert!(a.assess(&img("x", 0.5), &flaky).is_ok());
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 3);

        flaky.failures_left.store(5, Ordering::SeqCst);
        assert!(matches!(a.assess(&img("x", 0.5), &flaky), Err(Error::Transport { .. })));
    }

    #[test]
    fn ensemble_reports_failed_ids() {
        let refs = Arc::new(BTreeMap::from([("a".to_string(), Image::filled(8, 8, 0.5).unwrap())]));
        let judge: Arc<dyn RatingBackend> = Arc::new(OracleJudge::new("o", refs));
        let a = Assessor::new(DEFAULT_RATING_TEMPLATE).unwrap();
        match a.ensemble(&[img("a", 0.5), img("b", 0.5)], &[judge]) {
            Err(Error::PartialAssessment { failed, .. }) => assert_eq!(failed, vec!["b".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cache_is_persisted_and_reused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");
        let refs = Arc::new(BTreeMap::from([("a".to_string(), Image::filled(8, 8, 0.5).unwrap())]));
        let judge = OracleJudge::new("o", refs);
        let first = {
            let a = Assessor::new(DEFAULT_RATING_TEMPLATE).unwrap().with_cache(Arc::new(ScoreCache::open(&path).unwrap()));
            a.assess(&img("a", 0.4), &judge).unwrap()
        };
        let cache = Arc::new(ScoreCache::open(&path).unwrap());
        assert_eq!(cache.len(), 1);
        let a = Assessor::new(DEFAULT_RATING_TEMPLATE).unwrap().with_cache(cache.clone());
        assert_eq!(a.assess(&img("a", 0.4), &judge).unwrap(), first);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
    }
}
