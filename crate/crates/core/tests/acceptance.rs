//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use idian::data::{compose_batches, Domain, DomainDataset, Instance};
use idian::experiment::{run_experiment, ExperimentConfig, ResultRecord};
use idian::gradcheck::oracle_suite;
use idian::losses::{loss_adv, loss_ae, loss_cls, loss_contrastive, PairMode};
use idian::metrics::{auc_pairwise, auc_rank_sum, report_from_predictions};
use idian::model::{ArchSpec, IdianModel};
use idian::nn::{NetId, ParamKind};
use idian::rng::{rng_for, NoiseSource};
use idian::trainer::{update_step, TrainConfig, Variant};

const DESK: &str = include_str!("../../../configs/desk.toml");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut checks = 0;
    for seed in 0..3 {
        for (name, report) in oracle_suite(seed, 1e-6).expect("oracle suite runs") {
            checks += 1;
            if report.max_relative_error >= worst.0 {
                worst = (report.max_relative_error, name);
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-4 && secs < 10.0,
        format!(
            "{checks} checks, max relative error {:.2e} ({}), {secs:.2}s",
            worst.0, worst.1
        ),
    )
}

fn imputation_identity() -> Outcome {
    let started = Instant::now();
    let mut rng = rng_for(17, "acceptance-imputation", 0);
    let mut failures = 0;
    let models: Vec<IdianModel> = (0..10)
        .map(|s| IdianModel::new(3, 7, 2, common::tiny_arch(), s).unwrap())
        .collect();
    for case in 0..1000 {
        let model = &models[case % models.len()];
        let rows = rng.random_range(1..5);
        let x = Array2::from_shape_fn((rows, 7), |_| rng.random::<f64>());
        let m = Array2::from_shape_fn((rows, 7), |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let eps = Array2::from_shape_fn((rows, 7), |_| rng.random::<f64>() * 4.0 - 2.0);
        let out = idian::model::masked_fill(|z| model.net(NetId::Imputer).forward(z), &x, &m, &eps).unwrap();
        for ((i, j), v) in out.indexed_iter() {
            let ok = if m[[i, j]] == 1.0 {
                v.to_bits() == (x[[i, j]] * m[[i, j]]).to_bits()
            } else {
                *v > 0.0 && *v < 1.0
            };
            if !ok {
                failures += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        failures == 0 && secs < 1.0,
        format!("1000 cases, {failures} violating entries, {secs:.3}s"),
    )
}

fn identity_autoencoder(d: usize) -> IdianModel {
    let arch = ArchSpec {
        encoder_hidden: d,
        embed_dim: d,
        decoder_hidden: d,
        ..common::tiny_arch()
    };
    let mut model = IdianModel::new(d, d, 2, arch, 0).unwrap();
    let mut params = model.param_map();
    for (key, value) in params.iter_mut() {
        let is_ae = matches!(
            key.net,
            NetId::SourceEncoder | NetId::TargetEncoder | NetId::SourceDecoder | NetId::TargetDecoder
        );
        if is_ae {
            *value = match key.kind {
                ParamKind::Weights => Array2::eye(d),
                ParamKind::Bias => Array2::zeros(value.dim()),
            };
        }
    }
    model.set_params(&params).unwrap();
    model
}

fn closed_form_losses() -> Outcome {
    let adv = loss_adv(&Array2::from_elem((5, 1), 0.5), &Array2::from_elem((7, 1), 0.5)).unwrap();
    let adv_ok = (adv - 2.0 * std::f64::consts::LN_2).abs() < 1e-9;

    let mut ce_ok = true;
    for n_c in [2usize, 3, 10] {
        let uniform = Array2::from_elem((4, n_c), 1.0 / n_c as f64);
        let labels: Vec<usize> = (0..4).map(|i| i % n_c).collect();
        let ce = loss_cls(&uniform, &labels, &uniform, &labels, 0.0).unwrap();
        ce_ok &= (ce - (n_c as f64).ln()).abs() < 1e-9;
    }

    let model = identity_autoencoder(5);
    let mut rng = rng_for(3, "acceptance-ae", 0);
    let xs = Array2::from_shape_fn((6, 5), |_| rng.random::<f64>());
    let xt = Array2::from_shape_fn((4, 5), |_| rng.random::<f64>());
    let ae = loss_ae(&model, &xs, &xt).unwrap();

    let f = Array2::from_shape_fn((4, 3), |(_, j)| j as f64 * 0.3);
    let (cont, _) = loss_contrastive(&f, &[1, 1, 1, 1], &[true, true, false, false], 1.0, PairMode::Union).unwrap();

    outcome(
        adv_ok && ce_ok && ae == 0.0 && cont == 0.0,
        format!("L_adv {adv:.12}, cross-entropy ok {ce_ok}, L_AE {ae:e}, L_cont {cont:e}"),
    )
}

fn routing_isolation() -> Outcome {
    let base = TrainConfig::default();
    let mut cases: Vec<(&str, TrainConfig, Vec<NetId>)> = Vec::new();
    let mut c = base.clone();
    c.switches.ae_loss = false;
    cases.push(("ae", c, vec![NetId::SourceDecoder, NetId::TargetDecoder]));
    let mut c = base.clone();
    c.switches.adversarial_loss = false;
    cases.push(("adversarial", c, vec![NetId::Discriminator]));
    let mut c = base.clone();
    c.switches.imputation = false;
    cases.push(("imputation", c, vec![NetId::Imputer]));
    let mut c = base.clone();
    c.switches.contrastive_loss = false;
    cases.push(("contrastive", c, vec![]));
    let mut c = base.clone();
    c.switches = idian::trainer::Switches {
        imputation: false,
        ae_loss: false,
        contrastive_loss: false,
        adversarial_loss: false,
        use_source: false,
    };
    cases.push(("source", c, vec![
        NetId::Imputer,
        NetId::SourceEncoder,
        NetId::SourceDecoder,
        NetId::TargetDecoder,
        NetId::Discriminator,
    ]));

    let mut problems = Vec::new();
    for (name, cfg, frozen) in &cases {
        let s = common::setup(21);
        let mut model = s.model.clone();
        let mut noise = NoiseSource::streaming(5);
        for batch in s.batches.iter().cycle().take(10) {
            update_step(&mut model, batch, cfg, &mut noise).unwrap();
        }
        for net in NetId::ALL {
            let same = model.net(net) == s.model.net(net);
            if frozen.contains(&net) != same {
                problems.push(format!("{name} off: {}", net.name()));
            }
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{} switch settings, 10 steps each", cases.len())
        } else {
            format!("unexpected: {}", problems.join(", "))
        },
    )
}

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(DESK).expect("desk config parses")
}

fn determinism(tmp: &Path) -> Outcome {
    let mut cfg = desk_config();
    cfg.data.synthetic.n_per_class = 150;
    cfg.train.epochs = 3;
    cfg.run.repeats = 2;
    let run = |dir: &str| {
        let mut c = cfg.clone();
        c.run.out_dir = tmp.join(dir);
        let out = run_experiment(&c).unwrap();
        std::fs::read(out.dir.join("summary.csv")).unwrap()
    };
    let a = run("det-a");
    let b = run("det-b");
    outcome(
        a == b && !a.is_empty(),
        format!("two runs, {} summary rows, identical {}", a.iter().filter(|c| **c == b'\n').count() - 1, a == b),
    )
}

fn accs(records: &[ResultRecord], variant: Variant) -> Vec<f64> {
    let mut by_repeat: BTreeMap<usize, f64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.variant == variant) {
        by_repeat.insert(r.repeat, r.eval.acc);
    }
    by_repeat.into_values().collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn run_grid(tmp: &Path, dir: &str, rate: f64, variants: &[Variant]) -> (Vec<ResultRecord>, f64) {
    let mut cfg = desk_config();
    cfg.data.missing_rate = rate;
    cfg.run.variants = variants.to_vec();
    cfg.run.out_dir = tmp.join(dir);
    let started = Instant::now();
    let out = run_experiment(&cfg).unwrap();
    (out.records, started.elapsed().as_secs_f64())
}

fn adaptation_effect(records: &[ResultRecord], secs: f64) -> Outcome {
    let cfg = desk_config();
    let protocol = cfg.data.synthetic.n_per_class >= 500
        && cfg.data.missing_rate == 0.4
        && cfg.data.labeled_per_class == 10
        && cfg.run.repeats == 5;
    let full = mean(&accs(records, Variant::Full));
    let target = mean(&accs(records, Variant::TargetOnly));
    outcome(
        protocol && full - target >= 0.05 && secs < 300.0,
        format!(
            "full {full:.4} vs target_only {target:.4}, gap {:.4} (>= 0.05), {secs:.0}s",
            full - target
        ),
    )
}

fn sign_count(full: &[f64], other: &[f64]) -> usize {
    full.iter().zip(other).filter(|(f, o)| f >= o).count()
}

fn ablation_ordering(at40: &[ResultRecord], at80: &[ResultRecord]) -> Outcome {
    let full = accs(at40, Variant::Full);
    let mut ok = true;
    let mut parts = vec![format!("full {:.4}", mean(&full))];
    for v in [Variant::NoImputation, Variant::NoAe, Variant::NoContrastive] {
        let other = accs(at40, v);
        let wins = sign_count(&full, &other);
        ok &= mean(&full) >= mean(&other) && wins >= 4;
        parts.push(format!("{v} {:.4} ({wins}/5)", mean(&other)));
    }
    let full80 = accs(at80, Variant::Full);
    let noimp80 = accs(at80, Variant::NoImputation);
    let gap = mean(&full80) - mean(&noimp80);
    let wins80 = full80.iter().zip(&noimp80).filter(|(f, o)| *f > *o).count();
    let degrade_full = mean(&full) - mean(&full80);
    let degrade_noimp = mean(&accs(at40, Variant::NoImputation)) - mean(&noimp80);
    ok &= gap >= 0.02 && wins80 >= 4 && degrade_noimp > degrade_full;
    parts.push(format!(
        "at 80%: full {:.4} vs no_imputation {:.4}, gap {gap:.4} ({wins80}/5); drop from 40% full {degrade_full:.4} vs no_imputation {degrade_noimp:.4}",
        mean(&full80),
        mean(&noimp80)
    ));
    outcome(ok, parts.join(", "))
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Per-class counts straight from the label lists.
fn brute_prf(truth: &[usize], pred: &[usize], n_c: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let classes: Vec<usize> = if n_c == 2 { vec![1] } else { (0..n_c).collect() };
    let mut p = 0.0;
    let mut r = 0.0;
    for &c in &classes {
        let tp = truth.iter().zip(pred).filter(|(t, q)| **t == c && **q == c).count();
        let predicted = pred.iter().filter(|q| **q == c).count();
        let actual = truth.iter().filter(|t| **t == c).count();
        p += ratio(tp, predicted);
        r += ratio(tp, actual);
    }
    p /= classes.len() as f64;
    r /= classes.len() as f64;
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

fn metric_oracles() -> Outcome {
    let mut rng = rng_for(8, "acceptance-metrics", 0);
    let mut auc_mismatch = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..200);
        let mut scores: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 - 11.0).collect();
        scores.shuffle(&mut rng);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        labels[0] = true;
        labels[1] = false;
        let a = auc_pairwise(&scores, &labels).unwrap();
        let b = auc_rank_sum(&scores, &labels).unwrap();
        if a != b || (a - brute_auc(&scores, &labels)).abs() > 1e-12 {
            auc_mismatch += 1;
        }
    }
    let mut prf_mismatch = 0;
    for case in 0..100 {
        let n_c = if case % 2 == 0 { 2 } else { rng.random_range(3..7) };
        let n = rng.random_range(1..80);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_c)).collect();
        let report = report_from_predictions(&truth, &pred, None, n_c, 0).unwrap();
        let (p, r, f1) = brute_prf(&truth, &pred, n_c);
        let acc = truth.iter().zip(&pred).filter(|(t, q)| t == q).count() as f64 / n as f64;
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        if !(close(report.precision, p) && close(report.recall, r) && close(report.f1, f1) && close(report.acc, acc)) {
            prf_mismatch += 1;
        }
    }
    outcome(
        auc_mismatch == 0 && prf_mismatch == 0,
        format!("AUC mismatches {auc_mismatch}/100, P/R/F1 mismatches {prf_mismatch}/100"),
    )
}

fn batch_composition() -> Outcome {
    let mut rng = rng_for(9, "acceptance-batches", 0);
    let mut bad = 0;
    for case in 0..100 {
        let n_b = rng.random_range(1..64);
        let n_s = rng.random_range(n_b..400);
        let n_t = rng.random_range(2..300);
        let n_l = rng.random_range(1..n_t);
        let source = DomainDataset::new(
            Domain::Source,
            (0..n_s).map(|i| Instance::observed(vec![i as f64], Some(i % 3))).collect(),
            1,
            3,
            n_s,
        )
        .unwrap();
        let target = DomainDataset::new(
            Domain::Target,
            (0..n_t)
                .map(|i| Instance::observed(vec![i as f64], (i < n_l).then_some(i % 3)))
                .collect(),
            1,
            3,
            n_l,
        )
        .unwrap();
        let batches = compose_batches(&source, &target, n_b, case).unwrap();
        let mut seen = vec![0u32; n_s];
        let mut ok = batches.len() == n_s / n_b;
        for b in &batches {
            ok &= b.source.indices.len() == n_b
                && b.target_labeled.indices.len() == n_b
                && b.target_unlabeled.indices.len() == n_b
                && b.source.features.nrows() == n_b
                && b.target_labeled.features.nrows() == n_b
                && b.target_unlabeled.features.nrows() == n_b;
            for &i in &b.source.indices {
                seen[i] += 1;
            }
        }
        ok &= seen.iter().all(|c| *c <= 1);
        if !ok {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("100 random shapes, {bad} violations"))
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    report("1 gradient fidelity", gradient_fidelity());
    report("2 imputation identity", imputation_identity());
    report("3 closed-form losses", closed_form_losses());
    report("4 routing isolation", routing_isolation());
    report("5 determinism", determinism(tmp.path()));

    let (main40, secs) = run_grid(tmp.path(), "effect", 0.4, &[Variant::Full, Variant::TargetOnly]);
    report("6 desk-scale adaptation effect", adaptation_effect(&main40, secs));
    let (mut ablate40, _) = run_grid(
        tmp.path(),
        "ablation-40",
        0.4,
        &[Variant::NoImputation, Variant::NoAe, Variant::NoContrastive],
    );
    ablate40.extend(main40.iter().filter(|r| r.variant == Variant::Full).cloned());
    let (at80, _) = run_grid(tmp.path(), "ablation-80", 0.8, &[Variant::Full, Variant::NoImputation]);
    report("7 ablation ordering", ablation_ordering(&ablate40, &at80));

    report("8 metric oracles", metric_oracles());
    report("9 batch composition", batch_composition());

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
