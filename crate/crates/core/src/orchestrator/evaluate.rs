//! Leave-one-domain-out evaluation and report formatting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::grid::{Image, Mask};
use crate::inference::{
    extract_descriptor, infer_target, RandomProjectionExtractor, SelectionStrategy,
};
use crate::metrics::{evaluate_site, format_records, site_std, SiteResult};
use crate::sim::data::{generate_domain, DomainSpec, SegSample};
use crate::tree::{ClientId, NodeId};

use super::config::ExperimentConfig;
use super::federation::{Client, Federation};
use super::OrchestratorError;

pub type Dataset = Vec<(DomainSpec, Vec<SegSample>)>;

/// Renders every configured domain.
pub fn generate_dataset(config: &ExperimentConfig) -> Dataset {
    config
        .domains
        .iter()
        .map(|spec| (spec.clone(), generate_domain(spec)))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub explain: bool,
    pub checkpoint_dir: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub held_out: String,
    pub site: SiteResult,
    pub matched: String,
    pub chain: Vec<NodeId>,
    pub weights: Vec<f64>,
    pub predictions: Vec<Mask>,
    pub explain: String,
    pub tree_dump: String,
    pub round_logs: String,
}

#[derive(Debug, Clone)]
pub struct LooReport {
    pub method: String,
    pub folds: Vec<FoldOutcome>,
}

impl LooReport {
    pub fn fold_dice(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.site.mean_dice()).collect()
    }

    /// Mean of the per-fold Dice scores.
    pub fn mean_dice(&self) -> f64 {
        let d = self.fold_dice();
        d.iter().sum::<f64>() / d.len() as f64
    }

    /// Population std of the per-fold Dice scores.
    pub fn dice_std(&self) -> f64 {
        site_std(&self.fold_dice()).unwrap_or(0.0)
    }

    pub fn mean_hd95(&self) -> f64 {
        self.folds.iter().map(|f| f.site.mean_hd95()).sum::<f64>() / self.folds.len() as f64
    }

    /// Structured-text records, one per line.
    pub fn format(&self) -> String {
        let mut out = String::new();
        let prefix = format!("method={} ", self.method);
        for f in &self.folds {
            let chain: Vec<String> = f.chain.iter().map(|n| n.to_string()).collect();
            let weights: Vec<String> = f.weights.iter().map(|w| format!("{w:.6}")).collect();
            let _ = writeln!(
                out,
                "{prefix}fold={} matched={} chain={} weights={}",
                f.held_out,
                f.matched,
                chain.join(","),
                weights.join(",")
            );
            out.push_str(&format_records(&prefix, &f.site));
            let _ = writeln!(
                out,
                "{prefix}site={} class=mean metric=dice value={:.6}",
                f.held_out,
                f.site.mean_dice()
            );
        }
        let _ = writeln!(
            out,
            "{prefix}aggregate metric=dice mean={:.6} std={:.6}",
            self.mean_dice(),
            self.dice_std()
        );
        let _ = writeln!(out, "{prefix}aggregate metric=hd95 mean={:.6}", self.mean_hd95());
        out
    }
}

/// Table with sites as columns and methods as rows; values are mean Dice
/// and mean HD95 over classes.
pub fn csv_table(reports: &[LooReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else {
        return out;
    };
    let sites: Vec<&str> = first.folds.iter().map(|f| f.held_out.as_str()).collect();
    let _ = writeln!(out, "method,metric,{},mean,std", sites.join(","));
    for r in reports {
        let dice: Vec<String> = r.fold_dice().iter().map(|d| format!("{d:.6}")).collect();
        let _ = writeln!(
            out,
            "{},dice,{},{:.6},{:.6}",
            r.method,
            dice.join(","),
            r.mean_dice(),
            r.dice_std()
        );
        let hd: Vec<String> = r.folds.iter().map(|f| format!("{:.6}", f.site.mean_hd95())).collect();
        let hd_values: Vec<f64> = r.folds.iter().map(|f| f.site.mean_hd95()).collect();
        let _ = writeln!(
            out,
            "{},hd95,{},{:.6},{:.6}",
            r.method,
            hd.join(","),
            r.mean_hd95(),
            site_std(&hd_values).unwrap_or(0.0)
        );
    }
    out
}

/// Method label used in reports.
pub fn method_name(config: &ExperimentConfig, selection: SelectionStrategy) -> String {
    format!(
        "{}-{}-{}-{}",
        config.topology.name(),
        if config.style.enabled { "style" } else { "nostyle" },
        config.fusion.mode.name(),
        selection.name()
    )
}

fn clients_from(dataset: &[(DomainSpec, Vec<SegSample>)]) -> Vec<Client> {
    dataset
        .iter()
        .map(|(spec, samples)| Client {
            id: spec.domain_id,
            name: spec.name.clone(),
            data: samples.clone(),
        })
        .collect()
}

/// Trains a federation on all of `dataset` for `config.rounds` rounds.
pub fn train_federation(
    config: &ExperimentConfig,
    dataset: &[(DomainSpec, Vec<SegSample>)],
    options: &RunOptions,
) -> Result<Federation, OrchestratorError> {
    let mut fed = Federation::new(config.clone(), clients_from(dataset))?;
    if let Some(dir) = &options.checkpoint_dir {
        fed = fed.with_checkpoints(dir.clone());
    }
    fed.run(config.rounds)?;
    Ok(fed)
}

/// Leave-one-domain-out with the configured selection strategy.
pub fn leave_one_out(
    config: &ExperimentConfig,
    dataset: &[(DomainSpec, Vec<SegSample>)],
    options: &RunOptions,
) -> Result<LooReport, OrchestratorError> {
    let mut reports = leave_one_out_multi(config, dataset, &[config.inference.selection], options)?;
    Ok(reports.remove(0))
}

/// Leave-one-domain-out evaluated under several selection strategies. Each
/// fold is trained once and shared by all strategies.
pub fn leave_one_out_multi(
    config: &ExperimentConfig,
    dataset: &[(DomainSpec, Vec<SegSample>)],
    selections: &[SelectionStrategy],
    options: &RunOptions,
) -> Result<Vec<LooReport>, OrchestratorError> {
    if dataset.len() < 3 {
        return Err(OrchestratorError::TooFewDomains(dataset.len()));
    }
    let mut reports: Vec<LooReport> = selections
        .iter()
        .map(|&s| LooReport {
            method: method_name(config, s),
            folds: Vec::new(),
        })
        .collect();
    let extractor =
        RandomProjectionExtractor::new(config.inference.extractor_seed, config.inference.extractor_filters);
    let bins = config.inference.histogram_bins;

    for (k, (held_spec, held_samples)) in dataset.iter().enumerate() {
        log::info!("fold {}: holding out {}", k, held_spec.name);
        let train: Vec<_> = dataset
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .map(|(_, d)| d.clone())
            .collect();
        let mut fold_opts = options.clone();
        if let Some(dir) = &options.checkpoint_dir {
            fold_opts.checkpoint_dir = Some(dir.join(format!("fold_{}", held_spec.name)));
        }
        let fed = train_federation(config, &train, &fold_opts)?;
        let tree = fed.tree().expect("at least one round");
        let round_logs: String = fed.logs().iter().map(|l| l.format()).collect();

        let mut descriptors = BTreeMap::new();
        let mut names: BTreeMap<ClientId, String> = BTreeMap::new();
        for c in fed.clients() {
            let imgs: Vec<Image> = c.data.iter().map(|s| s.image.clone()).collect();
            descriptors.insert(c.id, extract_descriptor(&extractor, &imgs, bins)?);
            names.insert(c.id, c.name.clone());
        }
        let target_imgs: Vec<Image> = held_samples.iter().map(|s| s.image.clone()).collect();
        let truths: Vec<Mask> = held_samples.iter().map(|s| s.mask.clone()).collect();

        for (report, &selection) in reports.iter_mut().zip(selections) {
            let mut inf_cfg = config.inference_config();
            inf_cfg.selection = selection;
            let result = infer_target(tree, &descriptors, &target_imgs, &extractor, &inf_cfg)?;
            let site = evaluate_site(&held_spec.name, &result.masks, &truths)?;
            let explain = if options.explain {
                result.explain(&names)
            } else {
                String::new()
            };
            report.folds.push(FoldOutcome {
                held_out: held_spec.name.clone(),
                site,
                matched: names[&result.selection.matched].clone(),
                chain: result.selection.nodes.clone(),
                weights: result.selection.weights.weights.clone(),
                predictions: result.masks,
                explain,
                tree_dump: tree.dump(),
                round_logs: round_logs.clone(),
            });
        }
    }
    Ok(reports)
}
