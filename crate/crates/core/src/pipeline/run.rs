//! Whole-network sparsification from a directory of layer dumps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;

use crate::config::SparsifyConfig;
use crate::dump::{LayerDump, META_FILE};
use crate::error::{Error, Result};
use crate::lifting::extract_patches;
use crate::network::{LayerKind, NetworkSpec};

use super::prune::{install_in_place, prune_network, trace_producer, PruneMode};
use super::report::{report, PruneReport};
use super::{merge_residual_w, refit_with, sample_positions, sparsify_layer, LayerPruneResult};

pub const PRUNED_NET_FILE: &str = "pruned_net.json";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const LAYERS_DIR: &str = "layers";

#[derive(Debug, Clone, Default)]
pub struct NetworkPruneOptions {
    pub config: SparsifyConfig,
    pub mode: PruneMode,
    /// Also prune layers sharing their input with a projection shortcut, by
    /// merging the two channel distributions.
    pub merge_residual: bool,
    /// Worker threads for the per-layer solves; 0 or 1 runs serially.
    pub jobs: usize,
    /// Restrict to these layers; all dumped eligible layers otherwise.
    pub layers: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct NetworkPruneOutcome {
    pub pruned: NetworkSpec,
    /// In network order; merged residual pairs carry their refit results.
    pub results: Vec<LayerPruneResult>,
    pub report: PruneReport,
    /// Dumped layers left alone, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Conv and dense layers whose input channels can be removed at the producer.
pub fn eligible_layers(net: &NetworkSpec) -> Vec<String> {
    net.layers
        .iter()
        .enumerate()
        .filter(|(i, l)| {
            matches!(l.kind, LayerKind::Conv(_) | LayerKind::Linear(_)) && trace_producer(net, *i).is_ok()
        })
        .map(|(_, l)| l.id.clone())
        .collect()
}

/// `(first conv of the block, shortcut projection)` for every residual block
/// with a projection shortcut; both read the block input.
pub fn residual_pairs(net: &NetworkSpec) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        let LayerKind::ResidualAdd { tag, shortcut: Some(sc) } = &layer.kind else {
            continue;
        };
        let begin = net.layers[..i]
            .iter()
            .rposition(|l| matches!(&l.kind, LayerKind::ResidualBegin { tag: t } if t == tag));
        let first = begin.and_then(|b| net.layers.get(b + 1));
        if let Some(first) = first.filter(|l| matches!(l.kind, LayerKind::Conv(_))) {
            pairs.push((first.id.clone(), sc.id.clone()));
        }
    }
    pairs
}

/// Loads every dump directory under `dir`, keyed by layer id.
pub fn load_dumps(dir: impl AsRef<Path>) -> Result<BTreeMap<String, LayerDump>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.join(META_FILE).is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    let mut dumps = BTreeMap::new();
    for path in paths {
        let dump = LayerDump::load(&path)?;
        if dumps.contains_key(&dump.layer_id) {
            return Err(Error::Structural(format!(
                "two dumps for layer {} (second in {})",
                dump.layer_id,
                path.display()
            )));
        }
        dumps.insert(dump.layer_id.clone(), dump);
    }
    if dumps.is_empty() {
        return Err(Error::format(dir, "no layer dumps found"));
    }
    Ok(dumps)
}

fn position_of(net: &NetworkSpec, id: &str) -> usize {
    net.position(id)
        .or_else(|| net.shortcut_position(id))
        .unwrap_or(usize::MAX)
}

fn skip_reason(net: &NetworkSpec, id: &str) -> Error {
    match net.position(id) {
        Some(i) => trace_producer(net, i)
            .err()
            .unwrap_or_else(|| Error::Structural(format!("layer {id} cannot be sparsified"))),
        None => Error::Structural(format!(
            "{id} is a shortcut projection; enable residual merging to prune it"
        )),
    }
}

/// Solves every selected layer against its baseline dump, then rewrites the
/// network and reports the savings.
pub fn sparsify_network(
    net: &NetworkSpec,
    dumps: &BTreeMap<String, LayerDump>,
    opts: &NetworkPruneOptions,
) -> Result<NetworkPruneOutcome> {
    opts.config.validate()?;
    net.validate()?;
    for dump in dumps.values() {
        if net.position(&dump.layer_id).is_none() && net.shortcut(&dump.layer_id).is_none() {
            return Err(Error::Structural(format!(
                "dump names layer {} which the network does not have",
                dump.layer_id
            )));
        }
        let g = net.lifted_geometry(&dump.layer_id)?;
        if g != dump.geometry {
            return Err(Error::Structural(format!(
                "dump of layer {} has geometry {:?}, network layer has {:?}",
                dump.layer_id, dump.geometry, g
            )));
        }
    }

    let eligible = eligible_layers(net);
    let pairs: Vec<(String, String)> = if opts.merge_residual {
        residual_pairs(net)
    } else {
        Vec::new()
    };
    let in_pair = |id: &str| pairs.iter().any(|(a, b)| a == id || b == id);
    let requested: Vec<String> = match &opts.layers {
        Some(ids) => {
            for id in ids {
                if !dumps.contains_key(id) {
                    return Err(Error::Structural(format!("no dump for requested layer {id}")));
                }
                if !eligible.contains(id) && !in_pair(id) {
                    return Err(skip_reason(net, id));
                }
            }
            ids.clone()
        }
        None => dumps.keys().cloned().collect(),
    };

    let mut skipped = Vec::new();
    let mut direct = Vec::new();
    let mut paired = Vec::new();
    for id in requested {
        if eligible.contains(&id) {
            direct.push(id);
        } else if in_pair(&id) {
            paired.push(id);
        } else {
            let reason = skip_reason(net, &id).to_string();
            warn!("skipping layer {id}: {reason}");
            skipped.push((id, reason));
        }
    }
    direct.sort_by_key(|id| position_of(net, id));
    direct.dedup();
    paired.sort_by_key(|id| position_of(net, id));
    paired.dedup();

    let solve_all = |ids: &[String]| -> Result<Vec<LayerPruneResult>> {
        ids.par_iter()
            .map(|id| {
                info!("sparsifying {id}");
                sparsify_layer(&dumps[id], &opts.config)
            })
            .collect()
    };
    let all_ids: Vec<String> = direct.iter().chain(&paired).cloned().collect();
    let solved = if opts.jobs > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", opts.jobs)))?
            .install(|| solve_all(&all_ids))?
    } else {
        all_ids.iter().map(|id| sparsify_layer(&dumps[id], &opts.config)).collect::<Result<Vec<_>>>()?
    };
    let (direct_results, paired_results) = solved.split_at(direct.len());

    let mut merged = Vec::new();
    for (a, b) in &pairs {
        let ra = paired_results.iter().find(|r| &r.layer_id == a);
        let rb = paired_results.iter().find(|r| &r.layer_id == b);
        match (ra, rb) {
            (Some(ra), Some(rb)) => {
                let w = merge_residual_w(&ra.solve.w, &rb.solve.w)?;
                for id in [a, b] {
                    let dump = &dumps[id];
                    let data = extract_patches(dump, &sample_positions(dump, &opts.config))?;
                    merged.push(refit_with(&data, &w, &opts.config)?);
                }
            }
            (Some(r), None) | (None, Some(r)) => {
                let reason = "its residual partner was not dumped or selected".to_string();
                warn!("skipping layer {}: {reason}", r.layer_id);
                skipped.push((r.layer_id.clone(), reason));
            }
            (None, None) => {}
        }
    }

    // In-place installs keep shapes, so they go first; a merged layer may
    // itself be the producer whose outputs a direct result removes.
    let pruned = install_in_place(net, &merged, opts.mode)?;
    let pruned = prune_network(&pruned, direct_results, opts.mode)?;
    let report = report(net, &pruned, net.input_shape)?;
    let mut results: Vec<LayerPruneResult> = direct_results.iter().cloned().chain(merged).collect();
    results.sort_by_key(|r| position_of(net, &r.layer_id));
    Ok(NetworkPruneOutcome {
        pruned,
        results,
        report,
        skipped,
    })
}

impl NetworkPruneOutcome {
    /// Writes the pruned network with its weights, both report forms and
    /// per-layer solver artifacts under `layers/<id>/`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.pruned.save(dir.join(PRUNED_NET_FILE))?;
        let json = dir.join(REPORT_JSON_FILE);
        fs::write(&json, self.report.to_json()).map_err(|e| Error::io(&json, e))?;
        let text = dir.join(REPORT_TEXT_FILE);
        fs::write(&text, self.report.to_string()).map_err(|e| Error::io(&text, e))?;
        for r in &self.results {
            r.solve.save(dir.join(LAYERS_DIR).join(&r.layer_id))?;
        }
        Ok(())
    }
}
