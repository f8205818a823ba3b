//! Config-driven experiment runner: data preparation, the variant × repeat
//! grid, and result files.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    apply_permutation, channel_permutation, load_csv, make_synthetic, simulate_missing, Domain,
    DomainDataset, Instance, MinMaxScaler, MissingSpec, SyntheticSpec,
};
use crate::error::{IdianError, Result};
use crate::io::{write_atomic, write_string_atomic};
use crate::losses::LossReport;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{ArchSpec, IdianModel};
use crate::rng::{derive_seed, rng_for};
use crate::trainer::{build_variant, train, TrainConfig, TrainHistory, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Source CSV (`label,f0,...`). Both paths set means CSV input, neither
    /// means the synthetic task.
    pub source_path: Option<PathBuf>,
    pub target_path: Option<PathBuf>,
    /// Class count for CSV input.
    pub n_classes: Option<usize>,
    pub synthetic: SyntheticSpec,
    pub missing_rate: f64,
    /// Mask exactly `round(rate · d)` entries per target instance.
    pub exact_missing: bool,
    pub shuffle_channels: bool,
    pub labeled_per_class: usize,
    /// Fraction of the target domain used for training.
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source_path: None,
            target_path: None,
            n_classes: None,
            synthetic: SyntheticSpec::default(),
            missing_rate: 0.4,
            exact_missing: false,
            shuffle_channels: true,
            labeled_per_class: 10,
            train_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Optional checks against the data dimensions.
    pub source_dim: Option<usize>,
    pub target_dim: Option<usize>,
    pub n_classes: Option<usize>,
    pub arch: ArchSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variants: Vec<Variant>,
    pub repeats: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Full],
            repeats: 5,
            out_dir: PathBuf::from("results"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            run: RunConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| IdianError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| IdianError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| IdianError::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(0.0..1.0).contains(&d.missing_rate) {
            return Err(IdianError::config(format!(
                "data.missing_rate must lie in [0, 1), got {}",
                d.missing_rate
            )));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(IdianError::config(format!(
                "data.train_fraction must lie in (0, 1), got {}",
                d.train_fraction
            )));
        }
        if d.labeled_per_class == 0 {
            return Err(IdianError::config("data.labeled_per_class must be >= 1"));
        }
        match (&d.source_path, &d.target_path) {
            (Some(_), Some(_)) if d.n_classes.is_none() => {
                return Err(IdianError::config("data.n_classes is required for CSV input"))
            }
            (Some(_), None) | (None, Some(_)) => {
                return Err(IdianError::config(
                    "set both data.source_path and data.target_path, or neither",
                ))
            }
            _ => {}
        }
        if self.run.repeats == 0 {
            return Err(IdianError::config("run.repeats must be >= 1"));
        }
        if self.run.variants.is_empty() {
            return Err(IdianError::config("run.variants must not be empty"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(IdianError::config("name must be a non-empty path component"));
        }
        self.train
            .validate()
            .map_err(|e| IdianError::config(format!("train: {e}")))
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Master seed of repeat `k`.
    pub fn repeat_seed(&self, repeat: usize) -> u64 {
        derive_seed(self.train.master_seed, "repeat", repeat as u64)
    }
}

/// Datasets of one repeat, ready for training.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub source: DomainDataset,
    /// Labeled rows first; the rest carry no label.
    pub target_train: DomainDataset,
    pub test: DomainDataset,
    /// Channel order applied to the target: `new[k] = old[permutation[k]]`.
    pub permutation: Vec<usize>,
}

fn load_domains(cfg: &DataConfig) -> Result<(DomainDataset, DomainDataset)> {
    match (&cfg.source_path, &cfg.target_path) {
        (Some(s), Some(t)) => {
            let n_c = cfg
                .n_classes
                .ok_or_else(|| IdianError::config("data.n_classes is required for CSV input"))?;
            Ok((load_csv(s, Domain::Source, n_c)?, load_csv(t, Domain::Target, n_c)?))
        }
        _ => make_synthetic(&cfg.synthetic),
    }
}

fn subset(ds: &DomainDataset, rows: &[usize], labeled_count: usize) -> Result<DomainDataset> {
    DomainDataset::new(
        ds.domain,
        rows.iter().map(|&i| ds.instances[i].clone()).collect(),
        ds.dim,
        ds.n_classes,
        labeled_count,
    )
}

/// Moves `n_l` randomly chosen instances of every class to the front and
/// strips the labels of all others.
fn select_labeled(ds: &DomainDataset, n_l: usize, seed: u64) -> Result<DomainDataset> {
    let mut rng = rng_for(seed, "labeled", 0);
    let mut by_class = vec![Vec::new(); ds.n_classes];
    for (i, inst) in ds.instances.iter().enumerate() {
        if let Some(y) = inst.label {
            by_class[y].push(i);
        }
    }
    let mut labeled = Vec::with_capacity(n_l * ds.n_classes);
    for (class, rows) in by_class.iter_mut().enumerate() {
        if rows.len() < n_l {
            return Err(IdianError::config(format!(
                "class {class} has {} labeled target training instances, fewer than labeled_per_class = {n_l}",
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        labeled.extend_from_slice(&rows[..n_l]);
    }
    labeled.sort_unstable();
    let mut is_labeled = vec![false; ds.len()];
    for &i in &labeled {
        is_labeled[i] = true;
    }
    let mut instances: Vec<Instance> = labeled.iter().map(|&i| ds.instances[i].clone()).collect();
    instances.extend(
        (0..ds.len())
            .filter(|&i| !is_labeled[i])
            .map(|i| Instance {
                label: None,
                ..ds.instances[i].clone()
            }),
    );
    DomainDataset::new(ds.domain, instances, ds.dim, ds.n_classes, labeled.len())
}

/// Load or synthesize, split the target, normalize, mask, shuffle channels,
/// then select the labeled target subset.
pub fn prepare_data(cfg: &ExperimentConfig, repeat_seed: u64) -> Result<PreparedData> {
    let d = &cfg.data;
    let (source, target) = load_domains(d)?;

    let mut order: Vec<usize> = (0..target.len()).collect();
    order.shuffle(&mut rng_for(repeat_seed, "split", 0));
    let n_train = (target.len() as f64 * d.train_fraction).round() as usize;
    if n_train == 0 || n_train == target.len() {
        return Err(IdianError::config(format!(
            "train_fraction {} leaves an empty split of {} target instances",
            d.train_fraction,
            target.len()
        )));
    }
    let (train_rows, test_rows) = order.split_at(n_train);
    let labeled_train = train_rows.iter().filter(|&&i| target.instances[i].label.is_some()).count();
    let mut train_rows = train_rows.to_vec();
    train_rows.sort_by_key(|&i| target.instances[i].label.is_none());
    let target_train = subset(&target, &train_rows, labeled_train)?;
    let mut test_rows = test_rows.to_vec();
    test_rows.sort_by_key(|&i| target.instances[i].label.is_none());
    let labeled_test = test_rows.iter().filter(|&&i| target.instances[i].label.is_some()).count();
    let test = subset(&target, &test_rows, labeled_test)?;

    let source = MinMaxScaler::fit(&source)?.transform(&source)?;
    let scaler = MinMaxScaler::fit(&target_train)?;
    let mut target_train = scaler.transform(&target_train)?;
    let mut test = scaler.transform(&test)?;

    if d.missing_rate > 0.0 {
        let spec = |purpose| MissingSpec {
            rate: d.missing_rate,
            seed: derive_seed(repeat_seed, purpose, 0),
            exact_per_instance: d.exact_missing,
        };
        target_train = simulate_missing(&target_train, &spec("mask-train"))?;
        test = simulate_missing(&test, &spec("mask-test"))?;
    }

    let permutation = if d.shuffle_channels {
        let perm = channel_permutation(target.dim, derive_seed(repeat_seed, "channels", 0));
        target_train = apply_permutation(&target_train, &perm)?;
        test = apply_permutation(&test, &perm)?;
        perm
    } else {
        (0..target.dim).collect()
    };

    let target_train = select_labeled(&target_train, d.labeled_per_class, repeat_seed)?;
    Ok(PreparedData {
        source,
        target_train,
        test,
        permutation,
    })
}

/// One trained and evaluated (variant, repeat) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub variant: Variant,
    pub repeat: usize,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub eval: EvalReport,
    pub final_loss: Option<LossReport>,
    pub skipped_steps: usize,
    pub runtime_seconds: f64,
}

fn build_for(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<IdianModel> {
    let (d_s, d_t, n_c) = (data.source.dim, data.target_train.dim, data.target_train.n_classes);
    let m = &cfg.model;
    for (name, want, have) in [
        ("model.source_dim", m.source_dim, d_s),
        ("model.target_dim", m.target_dim, d_t),
        ("model.n_classes", m.n_classes, n_c),
    ] {
        if let Some(want) = want {
            if want != have {
                return Err(IdianError::config(format!("{name} is {want} but the data has {have}")));
            }
        }
    }
    IdianModel::new(d_s, d_t, n_c, m.arch, derive_seed(seed, "init", 0))
}

/// Trains and evaluates one variant on prepared data.
pub fn run_one(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    variant: Variant,
    repeat: usize,
) -> Result<(ResultRecord, TrainHistory, IdianModel)> {
    let started = Instant::now();
    let seed = cfg.repeat_seed(repeat);
    let mut train_cfg = build_variant(&cfg.train, variant);
    train_cfg.master_seed = seed;
    let mut model = build_for(cfg, data, seed)?;
    let history = train(&mut model, &data.source, &data.target_train, &train_cfg)?;
    let eval = evaluate(&model, &data.test, derive_seed(seed, "eval", 0))?;
    let record = ResultRecord {
        variant,
        repeat,
        seed,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        eval,
        final_loss: history.last_report(),
        skipped_steps: history.skipped_steps,
        runtime_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((record, history, model))
}

/// Mean and sample standard deviation of one metric over repeats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub runs: usize,
    pub acc: Stat,
    /// Present when every run reported an AUC.
    pub auc: Option<Stat>,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
}

/// One row per variant, in first-seen order.
pub fn summarize(records: &[ResultRecord]) -> Vec<SummaryRow> {
    let mut variants: Vec<Variant> = Vec::new();
    for r in records {
        if !variants.contains(&r.variant) {
            variants.push(r.variant);
        }
    }
    variants
        .into_iter()
        .map(|variant| {
            let runs: Vec<&EvalReport> = records
                .iter()
                .filter(|r| r.variant == variant)
                .map(|r| &r.eval)
                .collect();
            let stat = |f: fn(&EvalReport) -> f64| {
                Stat::of(&runs.iter().map(|e| f(e)).collect::<Vec<_>>()).expect("non-empty")
            };
            let aucs: Option<Vec<f64>> = runs.iter().map(|e| e.auc).collect();
            SummaryRow {
                variant,
                runs: runs.len(),
                acc: stat(|e| e.acc),
                auc: aucs.and_then(|a| Stat::of(&a)),
                precision: stat(|e| e.precision),
                recall: stat(|e| e.recall),
                f1: stat(|e| e.f1),
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "variant,runs,acc_mean,acc_std,auc_mean,auc_std,precision_mean,precision_std,recall_mean,recall_std,f1_mean,f1_std\n",
    );
    for r in rows {
        let (auc_m, auc_s) = match r.auc {
            Some(s) => (format!("{:?}", s.mean), format!("{:?}", s.std)),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{:?},{:?},{},{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.variant,
            r.runs,
            r.acc.mean,
            r.acc.std,
            auc_m,
            auc_s,
            r.precision.mean,
            r.precision.std,
            r.recall.mean,
            r.recall.std,
            r.f1.mean,
            r.f1.std
        ));
    }
    out
}

/// Everything an experiment produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub records: Vec<ResultRecord>,
    pub summary: Vec<SummaryRow>,
}

pub fn record_path(dir: &Path, variant: Variant, repeat: usize) -> PathBuf {
    dir.join(variant.name()).join(format!("seed{repeat}.json"))
}

/// Runs every (variant, repeat) pair and writes
/// `<out_dir>/<name>/<variant>/seed<k>.json`, `summary.csv` and `history.csv`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let dir = cfg.run.out_dir.join(&cfg.name);
    let mut records = Vec::new();
    let mut history_rows = Vec::new();
    for repeat in 0..cfg.run.repeats {
        let data = prepare_data(cfg, cfg.repeat_seed(repeat))?;
        for &variant in &cfg.run.variants {
            let (record, history, _) = run_one(cfg, &data, variant, repeat)?;
            let json = serde_json::to_string_pretty(&record)
                .map_err(|e| IdianError::Data(format!("serializing result: {e}")))?;
            write_string_atomic(&record_path(&dir, variant, repeat), &json)?;
            history_rows.push((variant, repeat, history));
            records.push(record);
        }
    }
    let summary = summarize(&records);
    write_string_atomic(&dir.join("summary.csv"), &summary_csv(&summary))?;
    write_atomic(&dir.join("history.csv"), |w| {
        writeln!(w, "variant,repeat,step,epoch,l_cls,l_ae,l_cont,l_adv,l_total")?;
        for (variant, repeat, history) in &history_rows {
            for s in &history.steps {
                let r = &s.report;
                writeln!(
                    w,
                    "{variant},{repeat},{},{},{:?},{:?},{:?},{:?},{:?}",
                    s.step, s.epoch, r.l_cls, r.l_ae, r.l_cont, r.l_adv, r.l_total
                )?;
            }
        }
        Ok(())
    })?;
    Ok(ExperimentOutput { dir, records, summary })
}

/// Reads back the per-run records of an experiment directory.
pub fn load_records(dir: &Path, variants: &[Variant], repeats: usize) -> Result<Vec<ResultRecord>> {
    let mut out = Vec::new();
    for &v in variants {
        for k in 0..repeats {
            let path = record_path(dir, v, k);
            let text = fs::read_to_string(&path).map_err(|e| IdianError::io(&path, e))?;
            out.push(
                serde_json::from_str(&text)
                    .map_err(|e| IdianError::Data(format!("{}: {e}", path.display())))?,
            );
        }
    }
    Ok(out)
}
