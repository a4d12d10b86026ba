//! The black-box transferability protocol: pick samples every model
//! classifies correctly, craft perturbations on a source model, measure
//! fooling ratios across targets, budgets, attacks, and defenses.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::attacks::{craft_batch, AttackKind, AttackSpec, MAX_EPSILON};
use crate::data::Dataset;
use crate::defenses::DefenseSpec;
use crate::error::{Error, Result};
use crate::nn::{predict, Model};
use crate::ortho::{measure_pair_similarity, train_orthogonal, OrthoConfig, SimilarityStats, TrainRecord};
use crate::tensor::Tensor;
use crate::util;

/// Samples are crafted and classified in fixed-size slices so results do not
/// depend on the worker count.
const CHUNK: usize = 64;

#[derive(Debug, Clone)]
pub struct EvalProtocol {
    /// Pre-verified correctly classified samples to evaluate.
    pub n_samples: usize,
    /// Strictly ascending budgets within `[0, 0.08]`.
    pub eps_grid: Vec<f64>,
    pub attacks: Vec<AttackKind>,
    pub seed: u64,
}

impl EvalProtocol {
    pub fn new(n_samples: usize, eps_grid: Vec<f64>, attacks: Vec<AttackKind>, seed: u64) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::InvalidArgument("protocol needs n_samples >= 1".into()));
        }
        if eps_grid.is_empty() {
            return Err(Error::InvalidArgument("protocol needs a nonempty eps grid".into()));
        }
        if eps_grid.iter().any(|e| !(0.0..=MAX_EPSILON).contains(e)) {
            return Err(Error::InvalidArgument(format!(
                "eps grid entries must lie in [0, {MAX_EPSILON}]"
            )));
        }
        if eps_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("eps grid must be strictly ascending".into()));
        }
        if attacks.is_empty() {
            return Err(Error::InvalidArgument("protocol needs at least one attack".into()));
        }
        Ok(Self { n_samples, eps_grid, attacks, seed })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoolingRow {
    pub source: String,
    pub target: String,
    pub attack: String,
    pub epsilon: f64,
    /// Defense id or `none`.
    pub defense: String,
    pub n: usize,
    pub n_fooled: usize,
}

impl FoolingRow {
    pub fn ratio(&self) -> f64 {
        self.n_fooled as f64 / self.n as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FoolingReport {
    pub rows: Vec<FoolingRow>,
}

impl FoolingReport {
    pub fn merge(&mut self, other: FoolingReport) {
        self.rows.extend(other.rows);
    }

    /// Rows sorted by the CSV column order.
    fn sorted_rows(&self) -> Vec<&FoolingRow> {
        let mut rows: Vec<&FoolingRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            (&a.source, &a.target, &a.attack)
                .cmp(&(&b.source, &b.target, &b.attack))
                .then(a.epsilon.total_cmp(&b.epsilon))
                .then(a.defense.cmp(&b.defense))
        });
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,target,attack,epsilon,defense,n,n_fooled,fooling_ratio\n");
        for r in self.sorted_rows() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.source,
                r.target,
                r.attack,
                r.epsilon,
                r.defense,
                r.n,
                r.n_fooled,
                r.ratio()
            )
            .unwrap();
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<FoolingReport> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Truncated { what: "report header".into() })?;
        if header != "source,target,attack,epsilon,defense,n,n_fooled,fooling_ratio" {
            return Err(Error::FieldMismatch {
                field: "report header".into(),
                detail: header.to_string(),
            });
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::FieldMismatch {
                    field: format!("report row {i}"),
                    detail: line.to_string(),
                });
            }
            let bad = |what: &str| Error::FieldMismatch {
                field: format!("report row {i} {what}"),
                detail: line.to_string(),
            };
            rows.push(FoolingRow {
                source: f[0].to_string(),
                target: f[1].to_string(),
                attack: f[2].to_string(),
                epsilon: f[3].parse().map_err(|_| bad("epsilon"))?,
                defense: f[4].to_string(),
                n: f[5].parse().map_err(|_| bad("n"))?,
                n_fooled: f[6].parse().map_err(|_| bad("n_fooled"))?,
            });
        }
        Ok(FoolingReport { rows })
    }

    pub fn find(&self, target: &str, attack: &str, epsilon: f64, defense: &str) -> Option<&FoolingRow> {
        self.rows.iter().find(|r| {
            r.target == target && r.attack == attack && r.epsilon == epsilon && r.defense == defense
        })
    }
}

/// Indices of `n` samples classified correctly by every listed model, drawn
/// uniformly (seeded, without replacement) from the jointly-correct pool.
pub fn select_correct(models: &[&Model], dataset: &Dataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot select zero samples".into()));
    }
    if models.is_empty() {
        return Err(Error::InvalidArgument("need at least one model".into()));
    }
    let mut jointly_correct = vec![true; dataset.len()];
    for model in models {
        let mut at = 0;
        while at < dataset.len() {
            let upper = (at + 256).min(dataset.len());
            let idx: Vec<usize> = (at..upper).collect();
            let (batch, labels) = dataset.batch(&idx);
            let preds = predict(model, &batch)?;
            for (k, (p, l)) in preds.iter().zip(&labels).enumerate() {
                if p != l {
                    jointly_correct[at + k] = false;
                }
            }
            at = upper;
        }
    }
    let pool: Vec<usize> =
        (0..dataset.len()).filter(|&i| jointly_correct[i]).collect();
    if pool.len() < n {
        return Err(Error::PoolTooSmall { pool: pool.len(), requested: n });
    }
    let mut rng = util::rng_from_seed(seed);
    let mut picked = util::sample_without_replacement(&mut rng, &pool, n);
    picked.sort_unstable();
    Ok(picked)
}

/// One crafted perturbation sweep: the perturbed tensors per (attack, eps),
/// plus the clean batch and labels for the selected pool.
struct CraftedSet {
    labels: Vec<usize>,
    clean: Tensor,
    /// `(attack name, epsilon, perturbed batch over the whole pool)`.
    perturbed: Vec<(String, f64, Tensor)>,
}

fn craft_all(
    source: &Model,
    dataset: &Dataset,
    pool: &[usize],
    protocol: &EvalProtocol,
    workers: usize,
) -> Result<CraftedSet> {
    let (clean, labels) = dataset.batch(pool);
    let chunks: Vec<(usize, Vec<usize>)> = pool
        .chunks(CHUNK)
        .scan(0usize, |off, c| {
            let item = (*off, c.to_vec());
            *off += c.len();
            Some(item)
        })
        .collect();

    let threadpool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;

    let mut perturbed = Vec::new();
    for &kind in &protocol.attacks {
        for &eps in &protocol.eps_grid {
            let spec = AttackSpec::new(kind, eps)?.with_seed(protocol.seed);
            let parts: Vec<Result<Vec<f64>>> = threadpool.install(|| {
                chunks
                    .par_iter()
                    .map(|(offset, idx)| {
                        let (batch, lbl) = dataset.batch(idx);
                        let crafted = craft_batch(source, &batch, &lbl, &spec, *offset as u64)?;
                        Ok(crafted.perturbed.data().to_vec())
                    })
                    .collect()
            });
            let mut data = Vec::with_capacity(clean.numel());
            for part in parts {
                data.extend(part?);
            }
            perturbed.push((kind.name().to_string(), eps, Tensor::new(clean.shape().to_vec(), data)?));
        }
    }
    Ok(CraftedSet { labels, clean, perturbed })
}

fn count_fooled(
    target: &Model,
    batch: &Tensor,
    labels: &[usize],
    defense: Option<&DefenseSpec>,
) -> Result<usize> {
    let evaluated = match defense {
        Some(d) => d.apply_batch(batch)?,
        None => batch.clone(),
    };
    let n = labels.len();
    let mut fooled = 0;
    let d = evaluated.numel() / n;
    let shape = evaluated.shape().to_vec();
    let mut at = 0;
    while at < n {
        let upper = (at + 256).min(n);
        let slice = Tensor::new(
            vec![upper - at, shape[1], shape[2], shape[3]],
            evaluated.data()[at * d..upper * d].to_vec(),
        )?;
        let preds = predict(target, &slice)?;
        fooled += preds.iter().zip(&labels[at..upper]).filter(|(p, l)| p != l).count();
        at = upper;
    }
    Ok(fooled)
}

/// Craft on `source`, classify on every target (the source itself is always
/// the first, white-box row). The optional defense sits at each target's
/// input: the attacker never sees it.
///
/// With no defense, the `eps = 0` rows are 0 by construction (samples are
/// pre-verified correct). With a defense, the `eps = 0` rows measure the
/// misclassification the defense itself induces on clean inputs.
pub fn run_transfer(
    source: (&str, &Model),
    targets: &[(&str, &Model)],
    dataset: &Dataset,
    protocol: &EvalProtocol,
    defense: Option<&DefenseSpec>,
    workers: usize,
) -> Result<FoolingReport> {
    let (source_id, source_model) = source;
    let mut models: Vec<&Model> = vec![source_model];
    models.extend(targets.iter().map(|(_, m)| *m));
    for m in &models {
        if m.input_shape() != dataset.image_shape() || m.num_classes() != source_model.num_classes()
        {
            return Err(Error::InvalidArgument(
                "all models must share the dataset input shape and class count".into(),
            ));
        }
    }
    let pool = select_correct(&models, dataset, protocol.n_samples, protocol.seed)?;
    let crafted = craft_all(source_model, dataset, &pool, protocol, workers)?;

    let defense_id = defense.map(|d| d.id()).unwrap_or_else(|| "none".to_string());
    let mut report = FoolingReport::default();
    let mut eval_rows = vec![(source_id, source_model)];
    eval_rows.extend(targets.iter().copied());
    for (target_id, target_model) in eval_rows {
        for (attack, eps, batch) in &crafted.perturbed {
            let n_fooled = count_fooled(target_model, batch, &crafted.labels, defense)?;
            report.rows.push(FoolingRow {
                source: source_id.to_string(),
                target: target_id.to_string(),
                attack: attack.clone(),
                epsilon: *eps,
                defense: defense_id.clone(),
                n: pool.len(),
                n_fooled,
            });
        }
    }
    Ok(report)
}

/// One trained arm of a lambda sweep.
pub struct LambdaArm {
    pub lambda: f64,
    pub model: Model,
    pub train_record: TrainRecord,
    pub stats: SimilarityStats,
    pub report: FoolingReport,
}

/// Train one orthogonal model per lambda against the frozen reference, then
/// measure similarity and transfer fooling for each. `lambda = 0` arms are
/// plain retraining with the sweep seed.
#[allow(clippy::too_many_arguments)]
pub fn sweep_lambda(
    arch: &[crate::nn::LayerSpec],
    reference: &Model,
    lambdas: &[f64],
    train: &Dataset,
    val: &Dataset,
    base: &OrthoConfig,
    protocol: &EvalProtocol,
    workers: usize,
) -> Result<Vec<LambdaArm>> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("lambda sweep needs at least one value".into()));
    }
    let mut arms = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut cfg = base.clone();
        cfg.lambda = lambda;
        let (model, train_record) = train_orthogonal(arch, reference, train, val, &cfg)?;
        let stats = measure_pair_similarity(reference, &model, val, 10, 32.min(val.len()))?;
        let report =
            run_transfer(("source", reference), &[("target", &model)], val, protocol, None, workers)?;
        arms.push(LambdaArm { lambda, model, train_record, stats, report });
    }
    Ok(arms)
}

/// Table-style defense comparison: the ordinary target behind each defense
/// variant (plus a `none` row), against the orthogonal target with no
/// defense. Rows with attack `clean` and `eps = 0` report each defense's
/// misclassification on unperturbed inputs.
pub fn compare_defenses(
    source: (&str, &Model),
    ordinary: (&str, &Model),
    orthogonal: (&str, &Model),
    specs: &[DefenseSpec],
    dataset: &Dataset,
    protocol: &EvalProtocol,
    workers: usize,
) -> Result<FoolingReport> {
    let (source_id, source_model) = source;
    let models = vec![source_model, ordinary.1, orthogonal.1];
    let pool = select_correct(&models, dataset, protocol.n_samples, protocol.seed)?;
    let crafted = craft_all(source_model, dataset, &pool, protocol, workers)?;

    let mut report = FoolingReport::default();
    let mut push_rows = |target: (&str, &Model), defense: Option<&DefenseSpec>| -> Result<()> {
        let defense_id = defense.map(|d| d.id()).unwrap_or_else(|| "none".to_string());
        let clean_fooled = count_fooled(target.1, &crafted.clean, &crafted.labels, defense)?;
        report.rows.push(FoolingRow {
            source: source_id.to_string(),
            target: target.0.to_string(),
            attack: "clean".to_string(),
            epsilon: 0.0,
            defense: defense_id.clone(),
            n: pool.len(),
            n_fooled: clean_fooled,
        });
        for (attack, eps, batch) in &crafted.perturbed {
            let n_fooled = count_fooled(target.1, batch, &crafted.labels, defense)?;
            report.rows.push(FoolingRow {
                source: source_id.to_string(),
                target: target.0.to_string(),
                attack: attack.clone(),
                epsilon: *eps,
                defense: defense_id.clone(),
                n: pool.len(),
                n_fooled,
            });
        }
        Ok(())
    };

    push_rows(ordinary, None)?;
    for spec in specs {
        push_rows(ordinary, Some(spec))?;
    }
    push_rows(orthogonal, None)?;
    Ok(report)
}

/// Write `report.csv` (bit-exact column order) and a matplotlib script that
/// renders fooling-vs-epsilon curves, one panel per attack, one line per
/// target.
pub fn emit_report(report: &FoolingReport, dir: &Path) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::InvalidArgument("cannot emit an empty report".into()));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    fs::write(dir.join("plot_report.py"), PLOT_SCRIPT)?;
    Ok(())
}

const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
"""Render fooling-vs-epsilon curves from report.csv (one panel per attack,
one line per target/defense pair)."""
import csv
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
rows = []
with open(os.path.join(here, "report.csv")) as f:
    for row in csv.DictReader(f):
        if row["attack"] == "clean":
            continue
        rows.append(row)

attacks = sorted({r["attack"] for r in rows})
fig, axes = plt.subplots(1, max(len(attacks), 1), figsize=(4.2 * len(attacks), 3.4), squeeze=False)
for ax, attack in zip(axes[0], attacks):
    series = defaultdict(list)
    for r in rows:
        if r["attack"] != attack:
            continue
        key = r["target"] if r["defense"] == "none" else f'{r["target"]}+{r["defense"]}'
        series[key].append((float(r["epsilon"]), 100.0 * float(r["fooling_ratio"])))
    for key in sorted(series):
        pts = sorted(series[key])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=key)
    ax.set_title(attack)
    ax.set_xlabel("epsilon (fraction of dynamic range)")
    ax.set_ylabel("fooling ratio (%)")
    ax.set_ylim(-2, 102)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
fig.tight_layout()
out = os.path.join(here, "fooling_curves.png")
fig.savefig(out, dpi=150)
print(f"wrote {out}")
"#;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::nn::{build_model, desk_mlp, InitSpec, LayerSpec};

    fn trained_pair() -> (Model, Model, Dataset) {
        let ds = gen_synthetic(2, 120, 4, 55).unwrap();
        let (train, val) = ds.split(0.5).unwrap();
        let arch = desk_mlp([1, 4, 4], 2);
        let cfg = OrthoConfig {
            lambda: 0.0,
            epochs_check: 30,
            max_epochs: 60,
            optimizer: crate::nn::OptimizerSpec::sgd(0.5, 0.9, 16).unwrap(),
            seed: 3,
        };
        let (a, _) = crate::ortho::train_ordinary(&arch, &train, &val, &cfg).unwrap();
        let mut cfg_b = cfg;
        cfg_b.seed = 4;
        let (b, _) = crate::ortho::train_ordinary(&arch, &train, &val, &cfg_b).unwrap();
        (a, b, val)
    }

    #[test]
    fn selected_samples_are_correct_on_all_models() {
        let (a, b, val) = trained_pair();
        let picked = select_correct(&[&a, &b], &val, 20, 9).unwrap();
        assert_eq!(picked.len(), 20);
        for &i in &picked {
            let (img, lbl) = val.batch(&[i]);
            assert_eq!(predict(&a, &img).unwrap()[0], lbl[0]);
            assert_eq!(predict(&b, &img).unwrap()[0], lbl[0]);
        }
        let again = select_correct(&[&a, &b], &val, 20, 9).unwrap();
        assert_eq!(picked, again);
    }

    #[test]
    fn always_wrong_model_shrinks_pool_to_its_class() {
        // A model that always predicts class 0 restricts the joint pool to
        // the class-0 samples (counted by brute force).
        let ds = gen_synthetic(2, 30, 3, 8).unwrap();
        let mut stub = build_model(
            [1, 3, 3],
            vec![LayerSpec::Dense { input: 9, output: 2 }],
            InitSpec::xavier(0),
        )
        .unwrap();
        stub.set_params(vec![
            ("layer0.weight".into(), Tensor::zeros(vec![9, 2])),
            ("layer0.bias".into(), Tensor::from_vec(vec![1.0, 0.0])),
        ])
        .unwrap();
        let class0 = ds.labels().iter().filter(|&&l| l == 0).count();
        let picked = select_correct(&[&stub], &ds, class0, 1).unwrap();
        assert_eq!(picked.len(), class0);
        assert!(select_correct(&[&stub], &ds, class0 + 1, 1).is_err());
    }

    #[test]
    fn pool_too_small_reports_pool_size() {
        let ds = gen_synthetic(2, 10, 3, 8).unwrap();
        let m = build_model([1, 3, 3], desk_mlp([1, 3, 3], 2), InitSpec::xavier(0)).unwrap();
        match select_correct(&[&m], &ds, 10_000, 0) {
            Err(Error::PoolTooSmall { pool, requested: 10_000 }) => assert!(pool <= 10),
            other => panic!("expected PoolTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn transfer_report_has_zero_fooling_at_eps_zero() {
        let (a, b, val) = trained_pair();
        let protocol = EvalProtocol::new(
            30,
            vec![0.0, 0.03],
            vec![AttackKind::Fgsm, AttackKind::Pgd],
            7,
        )
        .unwrap();
        let report = run_transfer(("src", &a), &[("tgt", &b)], &val, &protocol, None, 1).unwrap();
        for row in &report.rows {
            assert_eq!(row.n, 30);
            if row.epsilon == 0.0 {
                assert_eq!(row.n_fooled, 0, "{row:?}");
            }
        }
        // source white-box row exists
        assert!(report.find("src", "fgsm", 0.03, "none").is_some());
    }

    #[test]
    fn worker_count_does_not_change_the_report() {
        let (a, b, val) = trained_pair();
        let protocol =
            EvalProtocol::new(40, vec![0.01, 0.05], vec![AttackKind::Pgd], 3).unwrap();
        let r1 = run_transfer(("s", &a), &[("t", &b)], &val, &protocol, None, 1).unwrap();
        let r4 = run_transfer(("s", &a), &[("t", &b)], &val, &protocol, None, 4).unwrap();
        assert_eq!(r1.to_csv(), r4.to_csv());
    }

    #[test]
    fn csv_round_trip_preserves_rows() {
        let report = FoolingReport {
            rows: vec![
                FoolingRow {
                    source: "s".into(),
                    target: "t".into(),
                    attack: "fgsm".into(),
                    epsilon: 0.03,
                    defense: "none".into(),
                    n: 100,
                    n_fooled: 37,
                },
                FoolingRow {
                    source: "s".into(),
                    target: "t".into(),
                    attack: "pgd".into(),
                    epsilon: 0.05,
                    defense: "jpeg_q80".into(),
                    n: 100,
                    n_fooled: 99,
                },
            ],
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("source,target,attack,epsilon,defense,n,n_fooled,fooling_ratio\n"));
        let back = FoolingReport::parse_csv(&csv).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.to_csv(), csv);
    }

    #[test]
    fn empty_report_cannot_be_emitted() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("sub");
        let err = emit_report(&FoolingReport::default(), &out);
        assert!(err.is_err());
        assert!(!out.join("report.csv").exists());
    }

    #[test]
    fn emitted_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let report = FoolingReport {
            rows: vec![FoolingRow {
                source: "s".into(),
                target: "t".into(),
                attack: "fgsm".into(),
                epsilon: 0.01,
                defense: "none".into(),
                n: 10,
                n_fooled: 1,
            }],
        };
        emit_report(&report, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(FoolingReport::parse_csv(&text).unwrap(), report);
        assert!(dir.path().join("plot_report.py").exists());
    }
}
