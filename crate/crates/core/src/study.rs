//! Success-rate study over many (attacker, victim) pairs.
//!
//! Victims are embedded once, binned by their distance to each attacker, and
//! every pair that lands in a bin gets a full attack. Completed pairs are
//! appended to a JSON-lines checkpoint so an interrupted run picks up where it
//! stopped and produces the same report.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::attack::{search, AttackConfig, AttackError, Goal};
use crate::image::{load_image, Image, ImageError};
use crate::oracle::{distance, Embedding, EmbeddingOracle, OracleError};

/// Distance bins `(lo, hi]` tested by default.
pub const DEFAULT_BINS: [(f64, f64); 3] = [(1.242, 1.4), (1.4, 1.55), (1.55, 1.7)];

pub const HISTOGRAM_BIN_WIDTH: f64 = 0.02;

const BIN_NOTE: &str = "the middle bin is (1.4, 1.55]; the '(4.4, 1.55]' found in the source table is read as a typo";

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid study configuration: {0}")]
    Config(String),
    #[error("attacker image {path}: {source}")]
    Attacker { path: String, source: ImageError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("pair ({attacker}, {victim}): {source}")]
    Attack {
        attacker: String,
        victim: String,
        source: AttackError,
    },
}

impl StudyError {
    /// Whether the failure came from the embedding oracle.
    pub fn is_oracle(&self) -> bool {
        matches!(
            self,
            StudyError::Oracle(_) | StudyError::Attack { source: AttackError::Oracle(_), .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub attackers: Vec<PathBuf>,
    pub victim_dir: PathBuf,
    pub bins: Vec<(f64, f64)>,
    pub attack: AttackConfig,
    /// JSON-lines file of completed pairs; created if missing.
    pub checkpoint: Option<PathBuf>,
    pub jobs: usize,
}

impl StudyConfig {
    pub fn new(attackers: Vec<PathBuf>, victim_dir: PathBuf) -> Self {
        Self {
            attackers,
            victim_dir,
            bins: DEFAULT_BINS.to_vec(),
            attack: AttackConfig::default(),
            checkpoint: None,
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        let bad = |m: String| Err(StudyError::Config(m));
        if self.attackers.is_empty() {
            return bad("at least one attacker image is required".into());
        }
        if self.bins.is_empty() {
            return bad("at least one bin is required".into());
        }
        for (i, &(lo, hi)) in self.bins.iter().enumerate() {
            if !(lo < hi) {
                return bad(format!("bin {i} ({lo}, {hi}] is empty"));
            }
            if i > 0 && lo < self.bins[i - 1].1 {
                return bad(format!("bin {i} overlaps or precedes bin {}", i - 1));
            }
        }
        if self.bins[0].0 < self.attack.threshold {
            return bad(format!(
                "first bin starts at {} below the threshold {}",
                self.bins[0].0, self.attack.threshold
            ));
        }
        if self.jobs == 0 {
            return bad("jobs must be >= 1".into());
        }
        self.attack.validate().or_else(|e| bad(e.to_string()))
    }

    fn bin_of(&self, d: f64) -> Option<usize> {
        self.bins.iter().position(|&(lo, hi)| d > lo && d <= hi)
    }
}

/// One attacked pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub attacker: String,
    pub victim: String,
    /// Victim file stem without a trailing `_NNNN` photo counter.
    pub identity: String,
    pub bin: usize,
    pub original_distance: f64,
    pub final_distance: f64,
    pub drop: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lo: f64,
    pub hi: f64,
    pub n_victims: usize,
    pub n_success: usize,
    /// `None` for an empty bin.
    pub success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub start: f64,
    pub bin_width: f64,
    pub counts: Vec<usize>,
    /// Counts normalized to integrate to one.
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerReport {
    pub attacker: String,
    pub bins: Vec<BinStats>,
    /// Victims at or below the threshold.
    pub excluded_below: usize,
    /// Victims outside every bin above the threshold.
    pub excluded_above: usize,
    pub mean_drop: Option<f64>,
    pub final_distance_histogram: Histogram,
    pub pairs: Vec<PairRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub threshold: f64,
    pub seed: u64,
    pub n_spots: usize,
    pub max_iters: usize,
    pub refine_iters: usize,
    pub bins: Vec<(f64, f64)>,
    pub notes: Vec<String>,
    pub victims_total: usize,
    pub victims_unreadable: usize,
    pub victims_wrong_size: usize,
    pub attackers: Vec<AttackerReport>,
}

impl StudyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per attacker and bin.
    pub fn write_csv(&self, out: impl Write) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["attacker", "bin_lo", "bin_hi", "n_victims", "n_success", "success_rate", "mean_drop"])?;
        for a in &self.attackers {
            for b in &a.bins {
                w.write_record([
                    a.attacker.clone(),
                    b.lo.to_string(),
                    b.hi.to_string(),
                    b.n_victims.to_string(),
                    b.n_success.to_string(),
                    b.success_rate.map(|r| r.to_string()).unwrap_or_default(),
                    a.mean_drop.map(|r| r.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `abc_0003` -> `abc`; names without the counter are returned unchanged.
pub fn identity_of(stem: &str) -> String {
    match stem.rsplit_once('_') {
        Some((head, tail)) if !head.is_empty() && tail.len() == 4 && tail.bytes().all(|b| b.is_ascii_digit()) => {
            head.to_string()
        }
        _ => stem.to_string(),
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pnm")
    )
}

/// Builds one fresh oracle connection per worker.
pub type OracleFactory<'a> = dyn Fn() -> Result<Box<dyn EmbeddingOracle>, OracleError> + Sync + 'a;

struct Victim {
    name: String,
    image: Image,
    embedding: Embedding,
}

struct Job<'a> {
    attacker: usize,
    victim: &'a Victim,
    bin: usize,
    original: f64,
}

struct Checkpoint {
    path: PathBuf,
    file: Mutex<File>,
    done: HashMap<(String, String), PairRecord>,
}

fn header(cfg: &StudyConfig, attacker_ids: &[String]) -> Value {
    serde_json::json!({
        "study_checkpoint": 1,
        "attackers": attacker_ids,
        "bins": cfg.bins,
        "attack": cfg.attack,
    })
}

impl Checkpoint {
    fn open(path: &Path, header: &Value) -> Result<Self, StudyError> {
        let err = |message: String| StudyError::Checkpoint { path: path.display().to_string(), message };
        let mut done = HashMap::new();
        let exists = path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
        if exists {
            let reader = BufReader::new(File::open(path).map_err(|e| err(e.to_string()))?);
            let mut lines = reader.lines();
            let first = lines.next().transpose().map_err(|e| err(e.to_string()))?.unwrap_or_default();
            let found: Value = serde_json::from_str(&first).map_err(|e| err(format!("header: {e}")))?;
            if &found != header {
                return Err(err("written by a study with different settings".into()));
            }
            for (n, line) in lines.enumerate() {
                let line = line.map_err(|e| err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<PairRecord>(&line) {
                    Ok(r) => {
                        done.insert((r.attacker.clone(), r.victim.clone()), r);
                    }
                    // a torn final line from a killed run; the pair is simply redone
                    Err(e) => tracing::warn!(line = n + 2, error = %e, "ignoring unreadable checkpoint line"),
                }
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| err(e.to_string()))?;
        if !exists {
            writeln!(file, "{header}").map_err(|e| err(e.to_string()))?;
        } else if !std::fs::read(path).map_err(|e| err(e.to_string()))?.ends_with(b"\n") {
            // terminate a torn line so the next record starts cleanly
            writeln!(file).map_err(|e| err(e.to_string()))?;
        }
        Ok(Self { path: path.to_path_buf(), file: Mutex::new(file), done })
    }

    fn append(&self, record: &PairRecord) -> Result<(), StudyError> {
        let line = serde_json::to_string(record).expect("record serializes");
        let mut f = self.file.lock().expect("checkpoint lock");
        writeln!(f, "{line}")
            .and_then(|_| f.flush())
            .map_err(|e| StudyError::Checkpoint { path: self.path.display().to_string(), message: e.to_string() })
    }
}

fn load_victims(
    dir: &Path,
    oracle: &dyn EmbeddingOracle,
) -> Result<(Vec<Victim>, usize), StudyError> {
    let io = |e: std::io::Error| StudyError::Io { path: dir.display().to_string(), source: e };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    paths.sort();
    let mut victims = Vec::with_capacity(paths.len());
    let mut unreadable = 0;
    for path in paths {
        let image = match load_image(&path) {
            Ok(img) => img,
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "skipping unreadable victim");
                unreadable += 1;
                continue;
            }
        };
        let embedding = oracle.embed(&image)?;
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        victims.push(Victim { name, image, embedding });
    }
    Ok((victims, unreadable))
}

fn histogram(values: &[f64]) -> Histogram {
    if values.is_empty() {
        return Histogram { start: 0.0, bin_width: HISTOGRAM_BIN_WIDTH, counts: vec![], density: vec![] };
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start_k = (min / HISTOGRAM_BIN_WIDTH).floor();
    let start = start_k * HISTOGRAM_BIN_WIDTH;
    let n = ((max / HISTOGRAM_BIN_WIDTH).floor() - start_k) as usize + 1;
    let mut counts = vec![0usize; n];
    for &v in values {
        let k = ((v / HISTOGRAM_BIN_WIDTH).floor() - start_k) as usize;
        counts[k.min(n - 1)] += 1;
    }
    let total = values.len() as f64 * HISTOGRAM_BIN_WIDTH;
    let density = counts.iter().map(|&c| c as f64 / total).collect();
    Histogram { start, bin_width: HISTOGRAM_BIN_WIDTH, counts, density }
}

/// Run (or resume) the study.
///
/// `connect` is called once for the embedding pass and once per worker, so
/// each of the `jobs` workers owns its own oracle connection.
pub fn run_study(cfg: &StudyConfig, connect: &OracleFactory<'_>) -> Result<StudyReport, StudyError> {
    cfg.validate()?;
    let threshold = cfg.attack.threshold;
    let main_oracle = connect()?;

    let mut attackers = Vec::with_capacity(cfg.attackers.len());
    for path in &cfg.attackers {
        let image = load_image(path).map_err(|source| StudyError::Attacker { path: path.display().to_string(), source })?;
        attackers.push((file_stem(path), image));
    }
    let attacker_ids: Vec<String> = attackers.iter().map(|a| a.0.clone()).collect();
    let (victims, unreadable) = load_victims(&cfg.victim_dir, main_oracle.as_ref())?;
    tracing::info!(victims = victims.len(), unreadable, "victims embedded");

    let mut jobs = Vec::new();
    let mut excluded = vec![(0usize, 0usize); attackers.len()];
    let mut wrong_size = 0;
    for (ai, (_, image)) in attackers.iter().enumerate() {
        let anchor = main_oracle.embed(image)?;
        for v in &victims {
            if !image.same_shape(&v.image) {
                wrong_size += 1;
                continue;
            }
            let d = distance(&anchor, &v.embedding)?;
            match cfg.bin_of(d) {
                Some(bin) => jobs.push(Job { attacker: ai, victim: v, bin, original: d }),
                None if d <= threshold => excluded[ai].0 += 1,
                None => excluded[ai].1 += 1,
            }
        }
    }
    if wrong_size > 0 {
        tracing::warn!(wrong_size, "victims skipped: canvas differs from the attacker");
    }

    let checkpoint = match &cfg.checkpoint {
        Some(p) => Some(Checkpoint::open(p, &header(cfg, &attacker_ids))?),
        None => None,
    };
    let mut records: Vec<PairRecord> = Vec::with_capacity(jobs.len());
    let mut pending = Vec::new();
    for job in &jobs {
        let key = (attacker_ids[job.attacker].clone(), job.victim.name.clone());
        match checkpoint.as_ref().and_then(|c| c.done.get(&key)) {
            Some(r) => records.push(r.clone()),
            None => pending.push(job),
        }
    }
    tracing::info!(total = jobs.len(), resumed = records.len(), "pairs to attack");

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let finished = Mutex::new(Vec::new());
    let failure: Mutex<Option<StudyError>> = Mutex::new(None);
    let fail = |e: StudyError| {
        abort.store(true, Ordering::SeqCst);
        failure.lock().expect("failure lock").get_or_insert(e);
    };
    std::thread::scope(|scope| {
        for _ in 0..cfg.jobs.min(pending.len()) {
            scope.spawn(|| {
                let oracle = match connect() {
                    Ok(o) => o,
                    Err(e) => return fail(e.into()),
                };
                while !abort.load(Ordering::SeqCst) {
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    let Some(job) = pending.get(k) else { break };
                    let (aid, attacker) = (&attacker_ids[job.attacker], &attackers[job.attacker].1);
                    let result = match search(attacker, &job.victim.embedding, &cfg.attack, oracle.as_ref(), Goal::Impersonate) {
                        Ok(r) => r,
                        Err(source) => {
                            return fail(StudyError::Attack { attacker: aid.clone(), victim: job.victim.name.clone(), source })
                        }
                    };
                    let record = PairRecord {
                        attacker: aid.clone(),
                        victim: job.victim.name.clone(),
                        identity: identity_of(&file_stem(Path::new(&job.victim.name))),
                        bin: job.bin,
                        original_distance: job.original,
                        final_distance: result.best_distance,
                        drop: job.original - result.best_distance,
                        success: result.best_distance < threshold,
                    };
                    tracing::info!(attacker = %aid, victim = %record.victim, final_distance = record.final_distance, "pair done");
                    if let Some(c) = &checkpoint {
                        if let Err(e) = c.append(&record) {
                            return fail(e);
                        }
                    }
                    finished.lock().expect("results lock").push(record);
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("failure lock") {
        return Err(e);
    }
    records.extend(finished.into_inner().expect("results lock"));

    let mut by_attacker: BTreeMap<usize, Vec<PairRecord>> = BTreeMap::new();
    for r in records {
        let ai = attacker_ids.iter().position(|a| *a == r.attacker).expect("known attacker");
        by_attacker.entry(ai).or_default().push(r);
    }
    let attackers = attacker_ids
        .iter()
        .enumerate()
        .map(|(ai, id)| {
            let mut pairs = by_attacker.remove(&ai).unwrap_or_default();
            pairs.sort_by(|a, b| a.victim.cmp(&b.victim));
            let bins = cfg
                .bins
                .iter()
                .enumerate()
                .map(|(bi, &(lo, hi))| {
                    let in_bin: Vec<_> = pairs.iter().filter(|p| p.bin == bi).collect();
                    let n_success = in_bin.iter().filter(|p| p.success).count();
                    BinStats {
                        lo,
                        hi,
                        n_victims: in_bin.len(),
                        n_success,
                        success_rate: (!in_bin.is_empty()).then(|| n_success as f64 / in_bin.len() as f64),
                    }
                })
                .collect();
            let mean_drop = (!pairs.is_empty()).then(|| pairs.iter().map(|p| p.drop).sum::<f64>() / pairs.len() as f64);
            let finals: Vec<f64> = pairs.iter().map(|p| p.final_distance).collect();
            AttackerReport {
                attacker: id.clone(),
                bins,
                excluded_below: excluded[ai].0,
                excluded_above: excluded[ai].1,
                mean_drop,
                final_distance_histogram: histogram(&finals),
                pairs,
            }
        })
        .collect();

    Ok(StudyReport {
        threshold,
        seed: cfg.attack.seed,
        n_spots: cfg.attack.n_spots,
        max_iters: cfg.attack.max_iters,
        refine_iters: cfg.attack.refine_iters,
        bins: cfg.bins.clone(),
        notes: vec![BIN_NOTE.to_string()],
        victims_total: victims.len(),
        victims_unreadable: unreadable,
        victims_wrong_size: wrong_size,
        attackers,
    })
}
