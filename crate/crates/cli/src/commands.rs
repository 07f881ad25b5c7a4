//! The five batch tasks behind the subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use rca_core::eval::{adtributor, aggregate_reports, ground_truth, prf1, EvalReport};
use rca_core::forecast::{
    default_order, detect_3sigma, fit_ar_robust, forecast_panel, ForecastBundle,
};
use rca_core::gat::{train, GatError, GatModel};
use rca_core::ingest::{load_csv, read_labels, DatasetManifest};
use rca_core::localize::{localize, LocalizeError, RootCauseReport};
use rca_core::panel::{aggregate_panel, validate_panel, MetricPanel, MissingPolicy};
use rca_core::relation::{OracleModel, Relationship};
use rca_core::schema::{DimensionSchema, MetricSchema};
use rca_core::synth::{generate_dataset, write_dataset};
use rca_core::tree::{build_tree, DimensionTree, NodeKey};

use crate::config::{RelationshipKind, RunConfig, TimeSelector, TruthBasis};

/// Exit codes shared by every subcommand.
pub mod exit {
    pub const INPUT: i32 = 2;
    pub const NO_ANOMALY: i32 = 3;
    pub const NO_CANDIDATES: i32 = 4;
    pub const DIVERGENCE: i32 = 5;
}

/// An error that already knows its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    fn input(error: anyhow::Error) -> Self {
        Failure {
            code: exit::INPUT,
            error,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure::input(error)
    }
}

type CmdResult = std::result::Result<(), Failure>;

struct Dataset {
    schema: DimensionSchema,
    metrics: MetricSchema,
    tree: DimensionTree,
    /// Full panel: exact aggregates and deriveds over the leaf records.
    panel: MetricPanel,
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let manifest_path = config
        .manifest
        .as_deref()
        .ok_or_else(|| anyhow!("`manifest` is required"))?;
    let manifest = DatasetManifest::read(manifest_path)?;
    let (schema, metrics, leaf_panel) = load_csv(&manifest)?;
    let keys = leaf_panel.keys().iter().cloned().collect();
    let tree = build_tree(&schema, &keys)?;
    let report = validate_panel(&leaf_panel, &tree, &metrics);
    if !report.missing.is_empty() {
        eprintln!(
            "warning: {} missing leaf cells (coverage {:.4}), SUM treats them as 0",
            report.missing.len(),
            report.coverage
        );
    }
    if !report.non_finite.is_empty() {
        return Err(anyhow!(
            "panel has {} non-finite cells, first at {}",
            report.non_finite.len(),
            report.non_finite[0]
        ));
    }
    let (panel, _) = aggregate_panel(&leaf_panel, &tree, &metrics, MissingPolicy::Tolerate)?;
    Ok(Dataset {
        schema,
        metrics,
        tree,
        panel,
    })
}

fn ar_order(config: &RunConfig, t_len: usize) -> usize {
    config.ar_order.unwrap_or_else(|| default_order(t_len))
}

/// Timestamps whose observed root value breaks the 3-sigma rule against a
/// forecast fitted on history strictly before them.
fn detect_root_anomalies(
    dataset: &Dataset,
    monitored: &str,
    order: usize,
) -> Result<Vec<(usize, f64, f64, f64)>> {
    let root = dataset.tree.key(dataset.tree.root());
    let series: Vec<f64> = (0..dataset.panel.t_len())
        .map(|t| {
            dataset
                .panel
                .get(root, monitored, t)
                .ok_or_else(|| anyhow!("missing root {monitored} at t={t}"))
        })
        .collect::<Result<_>>()?;
    let mut flagged = Vec::new();
    for t in 0..series.len() {
        let history = &series[..t];
        if history.len() < order + 2 {
            continue;
        }
        let model = fit_ar_robust(history, order)?;
        let f = model.predict_next(history);
        let sigma = model.residual_std();
        if detect_3sigma(series[t], f, sigma) {
            flagged.push((t, series[t], f, sigma));
        }
    }
    Ok(flagged)
}

pub fn cmd_simulate(config: &RunConfig) -> CmdResult {
    let dataset = generate_dataset(&config.sim).map_err(|e| Failure::input(e.into()))?;
    fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("cannot create `{}`", config.out_dir.display()))
        .map_err(Failure::input)?;
    let manifest = write_dataset(&dataset, &config.out_dir).map_err(|e| Failure::input(e.into()))?;
    println!(
        "wrote {} ({} leaves x {} timestamps), {} labeled anomalies",
        manifest.data.display(),
        dataset.leaf_panel.keys().len(),
        dataset.leaf_panel.t_len(),
        dataset.labels.len()
    );
    println!(
        "derived metrics: a = {}, d = {}",
        rca_core::synth::G_FORMULAS[dataset.g_index],
        rca_core::synth::F_FORMULAS[dataset.f_index]
    );
    Ok(())
}

pub fn cmd_train(config: &RunConfig) -> CmdResult {
    let dataset = load_dataset(config)?;
    let started = Instant::now();
    let (model, log) = train(&config.gat, &dataset.tree, &dataset.metrics, &dataset.panel)
        .map_err(|e| match e {
            GatError::Diverged { .. } => Failure {
                code: exit::DIVERGENCE,
                error: e.into(),
            },
            other => Failure::input(other.into()),
        })?;
    fs::create_dir_all(&config.out_dir)
        .map_err(|e| Failure::input(e.into()))?;
    let model_path = config.out_dir.join("model.txt");
    fs::write(&model_path, model.to_text()).map_err(|e| Failure::input(e.into()))?;
    let mut csv = String::from("epoch,train_mse,val_mse\n");
    for row in &log.epochs {
        let _ = writeln!(csv, "{},{},{}", row.epoch, row.train_mse, row.val_mse);
    }
    let log_path = config.out_dir.join("training_log.csv");
    fs::write(&log_path, csv).map_err(|e| Failure::input(e.into()))?;
    println!(
        "trained {} epochs in {:.1?} (best epoch {}, val mse {:.6e}){}",
        log.epochs.len(),
        started.elapsed(),
        log.best_epoch,
        log.epochs[log.best_epoch].val_mse,
        if log.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    println!("wrote {} and {}", model_path.display(), log_path.display());
    Ok(())
}

pub fn cmd_detect(config: &RunConfig) -> CmdResult {
    let dataset = load_dataset(config)?;
    let order = ar_order(config, dataset.panel.t_len());
    let flagged =
        detect_root_anomalies(&dataset, &config.monitored, order).map_err(Failure::input)?;
    fs::create_dir_all(&config.out_dir).map_err(|e| Failure::input(e.into()))?;
    let mut csv = String::from("t,t_label,value,expected,sigma\n");
    for (t, v, f, sigma) in &flagged {
        let _ = writeln!(
            csv,
            "{t},{},{v},{f},{sigma}",
            dataset.panel.t_labels()[*t]
        );
    }
    let path = config.out_dir.join("detect.csv");
    fs::write(&path, csv).map_err(|e| Failure::input(e.into()))?;
    if flagged.is_empty() {
        println!("no 3-sigma anomalies on root {}", config.monitored);
    } else {
        for (t, v, f, _) in &flagged {
            println!(
                "t={t} ({}): {} observed {v:.6}, expected {f:.6}",
                dataset.panel.t_labels()[*t],
                config.monitored
            );
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn load_relationship(
    config: &RunConfig,
    dataset: &Dataset,
) -> Result<Box<dyn Relationship>> {
    match config.relationship {
        RelationshipKind::Oracle => Ok(Box::new(OracleModel::new(dataset.metrics.clone()))),
        RelationshipKind::Gat => {
            let path = config
                .model
                .as_deref()
                .ok_or_else(|| anyhow!("`model` is required when relationship = gat"))?;
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read model `{}`", path.display()))?;
            let model = GatModel::from_text(&text)?;
            let fingerprint = dataset.metrics.fingerprint(&dataset.schema);
            if model.fingerprint() != fingerprint {
                return Err(anyhow!(
                    "model was trained for a different schema (fingerprint {:016x} vs {fingerprint:016x})",
                    model.fingerprint()
                ));
            }
            Ok(Box::new(model))
        }
    }
}

fn run_localize(
    config: &RunConfig,
    dataset: &Dataset,
    model: &dyn Relationship,
    bundle: &ForecastBundle,
    t: usize,
) -> std::result::Result<RootCauseReport, Failure> {
    localize(
        &dataset.tree,
        &dataset.metrics,
        &dataset.panel,
        bundle,
        model,
        &config.monitored,
        t,
        &config.localize,
    )
    .map_err(|e| match e {
        LocalizeError::NoAnomaly { .. } => Failure {
            code: exit::NO_ANOMALY,
            error: e.into(),
        },
        LocalizeError::NoCandidates { .. } => Failure {
            code: exit::NO_CANDIDATES,
            error: e.into(),
        },
        other => Failure::input(other.into()),
    })
}

pub fn cmd_localize(config: &RunConfig) -> CmdResult {
    let dataset = load_dataset(config)?;
    let order = ar_order(config, dataset.panel.t_len());
    let t = match config.t {
        TimeSelector::Index(t) => {
            if t >= dataset.panel.t_len() {
                return Err(Failure::input(anyhow!(
                    "t={t} outside 0..{}",
                    dataset.panel.t_len()
                )));
            }
            t
        }
        TimeSelector::Auto => {
            let flagged = detect_root_anomalies(&dataset, &config.monitored, order)
                .map_err(Failure::input)?;
            match flagged.last() {
                Some((t, ..)) => *t,
                None => {
                    return Err(Failure {
                        code: exit::NO_ANOMALY,
                        error: anyhow!(
                            "no 3-sigma anomaly found on root {}",
                            config.monitored
                        ),
                    })
                }
            }
        }
    };
    let model = load_relationship(config, &dataset).map_err(Failure::input)?;
    let bundle = forecast_panel(&dataset.panel, t, order);
    // the analysis only makes sense for a timestamp the detector flags
    let root = dataset.tree.key(dataset.tree.root());
    let v_root = dataset
        .panel
        .get(root, &config.monitored, t)
        .ok_or_else(|| Failure::input(anyhow!("missing root {} at t={t}", config.monitored)))?;
    let f_root = bundle
        .expected
        .get(root, &config.monitored, 0)
        .ok_or_else(|| Failure::input(anyhow!("missing root forecast")))?;
    let sigma_root = bundle.sigma.get(root, &config.monitored, 0).unwrap_or(0.0);
    if !detect_3sigma(v_root, f_root, sigma_root) {
        return Err(Failure {
            code: exit::NO_ANOMALY,
            error: anyhow!(
                "root {} at t={t} is within 3 sigma of its forecast ({v_root:.6} vs {f_root:.6})",
                config.monitored
            ),
        });
    }
    let report = run_localize(config, &dataset, model.as_ref(), &bundle, t)?;
    fs::create_dir_all(&config.out_dir).map_err(|e| Failure::input(e.into()))?;
    // expected values for the analyzed timestamp, same layout as the data
    rca_core::ingest::write_csv(
        &bundle.expected,
        dataset.schema.dim_names(),
        "timestamp",
        "_expected",
        &config.out_dir.join("forecast.csv"),
    )
    .map_err(|e| Failure::input(e.into()))?;
    let text = rca_core::localize::render_report(&report);
    let path = config.out_dir.join("report.txt");
    fs::write(&path, &text).map_err(|e| Failure::input(e.into()))?;
    // print only the human-readable block
    if let Some(pos) = text.find("== summary ==") {
        print!("{}", &text[pos..]);
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_evaluate(config: &RunConfig) -> CmdResult {
    let dataset = load_dataset(config)?;
    let labels_path = config.labels.clone().unwrap_or_else(|| {
        config
            .manifest
            .as_deref()
            .map(|m| m.parent().unwrap_or(Path::new(".")).join("labels.csv"))
            .unwrap_or_else(|| "labels.csv".into())
    });
    if !labels_path.exists() {
        return Err(Failure::input(anyhow!(
            "labels file `{}` not found",
            labels_path.display()
        )));
    }
    let labels = read_labels(&labels_path).map_err(|e| Failure::input(e.into()))?;
    if labels.is_empty() {
        return Err(Failure::input(anyhow!("labels file is empty")));
    }
    let model = load_relationship(config, &dataset).map_err(Failure::input)?;
    let order = ar_order(config, dataset.panel.t_len());

    struct Row {
        case: usize,
        t: usize,
        method: &'static str,
        report: EvalReport,
        ms: u128,
    }
    let mut rows: Vec<Row> = Vec::new();
    for (case, (t, label_keys)) in labels.iter().enumerate() {
        let t = *t;
        if t >= dataset.panel.t_len() {
            return Err(Failure::input(anyhow!(
                "label timestamp {t} outside 0..{}",
                dataset.panel.t_len()
            )));
        }
        let bundle = forecast_panel(&dataset.panel, t, order);
        let truth = match config.eval_truth {
            TruthBasis::Labels => label_keys.iter().cloned().collect(),
            TruthBasis::Recovery => ground_truth(
                &dataset.tree,
                &dataset.metrics,
                &dataset.panel,
                &bundle,
                &config.monitored,
                t,
                config.eval_threshold,
            )
            .map_err(|e| Failure::input(e.into()))?,
        };
        if truth.is_empty() {
            eprintln!("warning: case {case} (t={t}) has an empty truth set, skipped");
            continue;
        }

        let started = Instant::now();
        let predicted: std::collections::BTreeSet<NodeKey> =
            match run_localize(config, &dataset, model.as_ref(), &bundle, t) {
                Ok(report) => report.nodes.iter().map(|n| n.key.clone()).collect(),
                Err(failure) if failure.code == exit::INPUT => return Err(failure),
                Err(_) => Default::default(), // no anomaly / no candidates: empty prediction
            };
        rows.push(Row {
            case,
            t,
            method: "rca",
            report: prf1(&predicted, &truth, &dataset.tree),
            ms: started.elapsed().as_millis(),
        });

        let started = Instant::now();
        let (adt_nodes, _) = adtributor(
            &dataset.tree,
            &dataset.metrics,
            &dataset.panel,
            &bundle,
            &config.monitored,
            t,
            &config.adtributor,
        )
        .map_err(|e| Failure::input(e.into()))?;
        rows.push(Row {
            case,
            t,
            method: "adtributor",
            report: prf1(&adt_nodes, &truth, &dataset.tree),
            ms: started.elapsed().as_millis(),
        });
    }

    let mut csv = String::from("case,t,method,tp,fp,fn,precision,recall,f1,runtime_ms\n");
    for row in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            row.case,
            row.t,
            row.method,
            row.report.tp,
            row.report.fp,
            row.report.fn_,
            row.report.precision,
            row.report.recall,
            row.report.f1,
            row.ms
        );
    }
    for method in ["rca", "adtributor"] {
        let agg = aggregate_reports(
            rows.iter()
                .filter(|r| r.method == method)
                .map(|r| &r.report),
        );
        let ms: u128 = rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.ms)
            .sum();
        let _ = writeln!(
            csv,
            "aggregate,,{},{},{},{},{},{},{},{}",
            method, agg.tp, agg.fp, agg.fn_, agg.precision, agg.recall, agg.f1, ms
        );
        println!(
            "{method}: P {:.4} R {:.4} F1 {:.4} over {} cases",
            agg.precision,
            agg.recall,
            agg.f1,
            rows.iter().filter(|r| r.method == method).count()
        );
    }
    fs::create_dir_all(&config.out_dir).map_err(|e| Failure::input(e.into()))?;
    let path = config.out_dir.join("evaluation.csv");
    fs::write(&path, csv).map_err(|e| Failure::input(e.into()))?;
    println!("wrote {}", path.display());
    Ok(())
}
