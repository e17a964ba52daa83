use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
#[cfg(test)]
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{content_hash, Architecture, CertifierSpec, DatasetSpec, ExperimentConfig};
use crate::attacks::{clean_verdict, AttackSpec, Certifier, IbpCertifier, Method};
use crate::data::{load_mnist_idx, make_synthetic, Dataset};
use crate::error::{Error, Result};
use crate::model::{train, Classifier};
use crate::rng::derive_seed;
use crate::smoothing::{Smoothed, SmoothingConfig};

const DATA_STREAM: u64 = 0x6461_7461;
const SAMPLE_STREAM: u64 = 0x7361_6d70;
const ATTACKER_STREAM: u64 = 0x6174_6b72;
const JUDGE_STREAM: u64 = 0x6a64_6765;

pub(crate) const MANIFEST: &str = "manifest.json";
pub(crate) const ROWS: &str = "rows.jsonl";
pub(crate) const TIMINGS: &str = "timings.jsonl";
pub(crate) const RECORD: &str = "record.json";

/// Identifies one attack run: method grid, parameter point, σ setting and
/// test-set index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskKey {
    pub grid: usize,
    pub point: usize,
    pub setting: usize,
    pub sample: usize,
}

/// One persisted attack outcome. Contains no wall-clock data, so reruns are
/// byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    #[serde(flatten)]
    pub key: TaskKey,
    pub method: Method,
    /// Parameters with seed 0; the run used the sample's derived seed.
    pub params: AttackSpec,
    pub sigma: Option<f64>,
    pub label: usize,
    pub clean_class: usize,
    pub clean_radius: f64,
    pub success: bool,
    pub confident: bool,
    pub norm: f64,
    /// Norm of a confident success, 0 otherwise.
    pub attack_radius: f64,
    pub adv_class: Option<usize>,
    pub adv_radius: f64,
    pub iterations: usize,
    pub gradient_fallbacks: usize,
    pub aborted: Option<String>,
    /// The attack raised an error; the row counts as a failure.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    #[serde(flatten)]
    pub key: TaskKey,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingInfo {
    pub sigma: Option<f64>,
    pub model_hash: String,
    pub model_accuracy: f64,
    /// Test indices attacked: the first ones the judge classifies correctly.
    pub samples: Vec<usize>,
    pub clean_radii: Vec<f64>,
}

/// Everything a sweep produced. `rows` and `timings` live in their own
/// JSON-lines files; the rest in `record.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub config_hash: String,
    pub settings: Vec<SettingInfo>,
    pub started_unix: u64,
    pub finished_unix: u64,
    #[serde(skip)]
    pub rows: Vec<ResultRow>,
    #[serde(skip)]
    pub timings: Vec<TimingRow>,
}

impl RunRecord {
    /// Reads a finished (or partial) sweep directory.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join(RECORD);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut rec: RunRecord = serde_json::from_str(&text)?;
        rec.rows = read_jsonl(&dir.join(ROWS))?.0;
        rec.timings = read_jsonl(&dir.join(TIMINGS))?.0;
        Ok(rec)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let p = dir.as_ref().join(RECORD);
        fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))
    }

    pub fn timing_map(&self) -> BTreeMap<TaskKey, f64> {
        self.timings.iter().map(|t| (t.key, t.elapsed_secs)).collect()
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Train and test sets of the configured dataset.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSpec::Synthetic { shape, train, test } => Ok((
            make_synthetic(*shape, *train, derive_seed(cfg.seed, &[DATA_STREAM, 0]))?,
            make_synthetic(*shape, *test, derive_seed(cfg.seed, &[DATA_STREAM, 1]))?,
        )),
        DatasetSpec::Mnist {
            dir,
            train_subset,
            test_subset,
        } => {
            let tr = load_mnist_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
            let te = load_mnist_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
            let cut = |ds: Dataset, n: Option<usize>, what: &str| match n {
                Some(n) if n > ds.len() => Err(Error::invalid(format!(
                    "{what} subset of {n} exceeds the {} available samples",
                    ds.len()
                ))),
                Some(n) => Ok(ds.take(n)),
                None => Ok(ds),
            };
            Ok((cut(tr, *train_subset, "train")?, cut(te, *test_subset, "test")?))
        }
    }
}

fn build_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<Classifier> {
    match &cfg.model.arch {
        Architecture::Mlp => Classifier::mlp(data.dim(), &cfg.model.hidden, data.num_classes, cfg.model.seed),
        Architecture::Cnn => match data.input_shape[..] {
            [c, h, w] => Classifier::small_cnn(c, h, w, data.num_classes, cfg.model.seed),
            _ => Err(Error::invalid("the CNN needs [channels, height, width] inputs")),
        },
    }
}

/// The model for one σ setting, trained on first use and cached under
/// `cache_dir/models`. Returns the model and the hash of its checkpoint.
pub fn trained_model(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    sigma: Option<f64>,
    cache_dir: Option<&Path>,
) -> Result<(Classifier, String)> {
    let tc = cfg.model.train_config(sigma);
    let key = content_hash(serde_json::to_string(&(&cfg.dataset, &cfg.model, tc.sigma, cfg.seed))?.as_bytes());
    let path = cache_dir.map(|d| d.join("models").join(format!("model-{}.json", &key[..16])));
    let model = match &path {
        Some(p) if p.exists() => Classifier::load(p)?,
        _ => {
            let m = train(&build_model(cfg, train_set)?, train_set, &tc)?;
            if let Some(p) = &path {
                let dir = p.parent().expect("model path has a parent");
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                m.save(p)?;
            }
            m
        }
    };
    let hash = content_hash(model.to_checkpoint_json()?.as_bytes());
    Ok((model, hash))
}

pub type CertifierPair<'a> = (Box<dyn Certifier + 'a>, Box<dyn Certifier + 'a>);

/// Attacker and judge certifiers for one setting.
pub fn certifiers<'a>(
    spec: &CertifierSpec,
    model: &'a Classifier,
    sigma: Option<f64>,
    seed: u64,
) -> Result<CertifierPair<'a>> {
    match (spec, sigma) {
        (
            CertifierSpec::Smoothing {
                attack_samples,
                judge_samples,
                alpha,
                head,
                attacker_sigma_factor,
                ..
            },
            Some(s),
        ) => {
            let att = SmoothingConfig::new(
                s * attacker_sigma_factor,
                *attack_samples,
                *alpha,
                derive_seed(seed, &[ATTACKER_STREAM]),
            )?;
            let judge = SmoothingConfig::new(s, *judge_samples, *alpha, derive_seed(seed, &[JUDGE_STREAM]))?;
            Ok((
                Box::new(Smoothed::new(model, att, *head)?),
                Box::new(Smoothed::new(model, judge, *head)?),
            ))
        }
        (CertifierSpec::Ibp { tol }, None) => Ok((Box::new(IbpCertifier::new(model, *tol)), Box::new(IbpCertifier::new(model, *tol)))),
        _ => Err(Error::invalid("certifier setting does not match its specification")),
    }
}

/// Seed every attack on test point `sample` runs with.
pub fn sample_seed(cfg_seed: u64, sample: usize) -> u64 {
    derive_seed(cfg_seed, &[SAMPLE_STREAM, sample as u64])
}

/// The first `n` test points whose clean judge verdict is their label.
fn select_samples(judge: &dyn Certifier, test: &Dataset, n: usize, seed: u64) -> Result<(Vec<usize>, Vec<f64>)> {
    let (mut idx, mut radii) = (Vec::new(), Vec::new());
    for i in 0..test.len() {
        if idx.len() == n {
            break;
        }
        let v = clean_verdict(judge, test.input(i), sample_seed(seed, i))?;
        if v.class == test.label(i) {
            idx.push(i);
            radii.push(v.radius);
        }
    }
    Ok((idx, radii))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    config: ExperimentConfig,
}

fn check_manifest(dir: &Path, cfg: &ExperimentConfig, hash: &str) -> Result<()> {
    let p = dir.join(MANIFEST);
    if p.exists() {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.config_hash != hash {
            return Err(Error::invalid(format!(
                "{} holds a sweep of a different configuration ({})",
                dir.display(),
                m.config_hash
            )));
        }
        return Ok(());
    }
    let m = Manifest {
        config_hash: hash.to_string(),
        config: cfg.clone(),
    };
    fs::write(&p, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&p, e))
}

/// Complete lines of a JSON-lines file and the byte length they span.
fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(Vec<T>, usize)> {
    if !path.exists() {
        return Ok((Vec::new(), 0));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let complete = text.rfind('\n').map_or(0, |i| i + 1);
    let items = text[..complete]
        .lines()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect::<Result<Vec<T>>>()?;
    Ok((items, complete))
}

/// Keeps the first `keep` lines of a JSON-lines file and returns an appender.
fn reopen_truncated(path: &Path, keep: usize) -> Result<BufWriter<File>> {
    let text = if path.exists() {
        fs::read_to_string(path).map_err(|e| Error::io(path, e))?
    } else {
        String::new()
    };
    let len: usize = text.split_inclusive('\n').take(keep).map(str::len).sum();
    let f = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.set_len(len as u64).map_err(|e| Error::io(path, e))?;
    let f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

struct Task {
    key: TaskKey,
    spec: AttackSpec,
    sigma: Option<f64>,
}

/// Runs every (method grid, parameter point, σ, sample) combination in that
/// nesting order and persists each outcome. A directory holding a partial
/// sweep of the same configuration is resumed; the final files equal those a
/// fresh sweep writes.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let hash = cfg.config_hash()?;
    check_manifest(&dir, cfg, &hash)?;
    let started = now_unix();
    let mut record = RunRecord {
        name: cfg.name.clone(),
        config_hash: hash,
        settings: Vec::new(),
        started_unix: started,
        finished_unix: started,
        rows: Vec::new(),
        timings: Vec::new(),
    };
    if cfg.methods.is_empty() {
        reopen_truncated(&dir.join(ROWS), 0)?;
        reopen_truncated(&dir.join(TIMINGS), 0)?;
        record.finished_unix = now_unix();
        record.save(&dir)?;
        return Ok(record);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let (train_set, test_set) = load_datasets(cfg)?;
    let settings = cfg.certifier.settings();
    let mut models = Vec::new();
    for &s in &settings {
        models.push(trained_model(cfg, &train_set, s, Some(&dir))?);
    }
    let mut pairs = Vec::new();
    for (&s, (m, _)) in settings.iter().zip(&models) {
        pairs.push(certifiers(&cfg.certifier, m, s, cfg.seed)?);
    }
    for ((&s, (m, h)), (_, judge)) in settings.iter().zip(&models).zip(&pairs) {
        let (samples, clean_radii) = select_samples(judge.as_ref(), &test_set, cfg.samples, cfg.seed)?;
        record.settings.push(SettingInfo {
            sigma: s,
            model_hash: h.clone(),
            model_accuracy: crate::model::accuracy(m, &test_set)?,
            samples,
            clean_radii,
        });
    }

    let mut tasks = Vec::new();
    for (g, grid) in cfg.methods.iter().enumerate() {
        for (p, spec) in grid.points(cfg.grid_units)?.into_iter().enumerate() {
            for (s, info) in record.settings.iter().enumerate() {
                for &sample in &info.samples {
                    tasks.push(Task {
                        key: TaskKey {
                            grid: g,
                            point: p,
                            setting: s,
                            sample,
                        },
                        spec: spec.clone(),
                        sigma: info.sigma,
                    });
                }
            }
        }
    }

    let rows_path = dir.join(ROWS);
    let timings_path = dir.join(TIMINGS);
    let (mut rows, _) = read_jsonl::<ResultRow>(&rows_path)?;
    let (mut timings, _) = read_jsonl::<TimingRow>(&timings_path)?;
    if rows.len() > tasks.len() || rows.iter().zip(&tasks).any(|(r, t)| r.key != t.key) {
        return Err(Error::invalid(format!("{} does not match this configuration", rows_path.display())));
    }
    if timings.len() < rows.len() || timings.iter().zip(&rows).any(|(t, r)| t.key != r.key) {
        return Err(Error::invalid(format!("{} is out of step with the rows", timings_path.display())));
    }
    timings.truncate(rows.len());
    let mut rows_out = reopen_truncated(&rows_path, rows.len())?;
    let mut timings_out = reopen_truncated(&timings_path, rows.len())?;

    for chunk in tasks[rows.len()..].chunks(cfg.checkpoint) {
        let done: Vec<(ResultRow, TimingRow)> = pool.install(|| {
            chunk
                .par_iter()
                .map(|t| {
                    let (att, judge) = &pairs[t.key.setting];
                    run_task(t, att.as_ref(), judge.as_ref(), &test_set, cfg.seed)
                })
                .collect()
        });
        for (_, t) in &done {
            writeln!(timings_out, "{}", serde_json::to_string(t)?).map_err(|e| Error::io(&timings_path, e))?;
        }
        timings_out.flush().map_err(|e| Error::io(&timings_path, e))?;
        for (r, _) in &done {
            writeln!(rows_out, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&rows_path, e))?;
        }
        rows_out.flush().map_err(|e| Error::io(&rows_path, e))?;
        for (r, t) in done {
            rows.push(r);
            timings.push(t);
        }
    }
    record.rows = rows;
    record.timings = timings;
    record.finished_unix = now_unix();
    record.save(&dir)?;
    Ok(record)
}

fn run_task(task: &Task, att: &dyn Certifier, judge: &dyn Certifier, test: &Dataset, seed: u64) -> (ResultRow, TimingRow) {
    let x = test.input(task.key.sample);
    let start = Instant::now();
    let out = task.spec.with_seed(sample_seed(seed, task.key.sample)).run(att, judge, x);
    let mut row = ResultRow {
        key: task.key,
        method: task.spec.method(),
        params: task.spec.clone(),
        sigma: task.sigma,
        label: test.label(task.key.sample),
        clean_class: 0,
        clean_radius: 0.0,
        success: false,
        confident: false,
        norm: 0.0,
        attack_radius: 0.0,
        adv_class: None,
        adv_radius: 0.0,
        iterations: 0,
        gradient_fallbacks: 0,
        aborted: None,
        error: None,
    };
    let elapsed = match out {
        Ok(r) => {
            row.clean_class = r.original_class;
            row.clean_radius = r.clean_radius;
            row.success = r.success;
            row.confident = r.confident;
            row.norm = r.norm;
            row.attack_radius = r.attack_radius();
            row.adv_class = r.adv_class;
            row.adv_radius = r.adv_radius;
            row.iterations = r.iterations;
            row.gradient_fallbacks = r.gradient_fallbacks;
            row.aborted = r.aborted;
            r.elapsed_secs
        }
        Err(e) => {
            row.error = Some(e.to_string());
            start.elapsed().as_secs_f64()
        }
    };
    (
        row,
        TimingRow {
            key: task.key,
            elapsed_secs: elapsed,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::tests::BLOBS;

    fn config(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::from_toml(BLOBS).unwrap();
        cfg.output_dir = dir.to_path_buf();
        cfg.checkpoint = 3;
        cfg
    }

    #[test]
    fn empty_method_list_gives_empty_record() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = config(tmp.path());
        cfg.methods.clear();
        let r = run_sweep(&cfg).unwrap();
        assert!(r.rows.is_empty() && r.settings.is_empty());
        assert_eq!(RunRecord::load(tmp.path()).unwrap().rows.len(), 0);
    }

    #[test]
    fn sweep_is_deterministic_and_resumable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_sweep(&config(a.path())).unwrap();
        // 2 CAA points + 1 PGD point, one σ, 4 samples
        assert_eq!(ra.rows.len(), 12);
        assert_eq!(ra.settings[0].samples.len(), 4);
        let keys: Vec<TaskKey> = ra.rows.iter().map(|r| r.key).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted, "rows follow grid, point, setting, sample order");

        // interrupted run: keep 5 complete rows and half a line
        run_sweep(&config(b.path())).unwrap();
        let rows = fs::read_to_string(b.path().join(ROWS)).unwrap();
        let cut: usize = rows.split_inclusive('\n').take(5).map(str::len).sum::<usize>() + 7;
        fs::write(b.path().join(ROWS), &rows[..cut]).unwrap();
        let rb = run_sweep(&config(b.path())).unwrap();
        assert_eq!(ra.rows, rb.rows);
        assert_eq!(
            fs::read(a.path().join(ROWS)).unwrap(),
            fs::read(b.path().join(ROWS)).unwrap()
        );
        assert_eq!(rb.timings.len(), rb.rows.len());
        let loaded = RunRecord::load(b.path()).unwrap();
        assert_eq!(loaded.rows, rb.rows);
        assert_eq!(loaded.settings, rb.settings);
    }

    #[test]
    fn refuses_a_different_config_in_the_same_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = config(tmp.path());
        cfg.methods.clear();
        run_sweep(&cfg).unwrap();
        cfg.seed += 1;
        assert!(run_sweep(&cfg).is_err());
    }

    #[test]
    fn subset_larger_than_dataset_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = config(tmp.path());
        cfg.dataset = DatasetSpec::Mnist {
            dir: PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset"),
            train_subset: Some(10),
            test_subset: Some(1_000_000),
        };
        assert!(load_datasets(&cfg).is_err());
    }

    #[test]
    fn models_are_cached_by_content() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config(tmp.path());
        let (train_set, _) = load_datasets(&cfg).unwrap();
        let (m1, h1) = trained_model(&cfg, &train_set, Some(0.25), Some(tmp.path())).unwrap();
        let (m2, h2) = trained_model(&cfg, &train_set, Some(0.25), Some(tmp.path())).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        let (_, h3) = trained_model(&cfg, &train_set, Some(0.5), None).unwrap();
        assert_ne!(h1, h3);
    }
}
