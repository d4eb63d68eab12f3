//! Ablation plans: named arms applied as config deltas to a base run, each
//! trained on the same data with the same seeds.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::cstt::Variant;
use crate::error::{Error, Result};
use crate::synth::Dataset;
use crate::training::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plan {
    /// Baseline / spatial only / stacked / parallel / cross (ours).
    Variants,
    /// Cluster counts 1, 2, 3, 4, 6.
    Clusters,
    /// Intra/inter attention on-off grid.
    Attention,
    /// 0 to 4 blocks.
    Blocks,
}

impl Plan {
    pub fn parse(s: &str) -> Result<Plan> {
        match s {
            "variants" => Ok(Plan::Variants),
            "clusters" => Ok(Plan::Clusters),
            "attention" => Ok(Plan::Attention),
            "blocks" => Ok(Plan::Blocks),
            other => Err(Error::Config(format!(
                "unknown ablation plan '{other}', expected variants, clusters, attention or blocks"
            ))),
        }
    }

    pub fn arms(self) -> Vec<String> {
        match self {
            Plan::Variants => Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
            Plan::Clusters => [1, 2, 3, 4, 6].iter().map(|c| format!("clusters={c}")).collect(),
            Plan::Attention => ["intra=off+inter=off", "intra=on+inter=off", "intra=off+inter=on", "intra=on+inter=on"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            Plan::Blocks => (0..=4).map(|b| format!("blocks={b}")).collect(),
        }
    }
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(Error::Config(format!("arm key {key} takes on|off, got '{other}'"))),
    }
}

fn parse_count(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("arm key {key} takes a non-negative integer, got '{value}'")))
}

/// Apply an arm to `base`. An arm is a variant name or `key=value` terms
/// joined by `+`; keys are variant, clusters, blocks, intra, inter, grg.
pub fn arm_config(base: &RunConfig, arm: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    for term in arm.split('+') {
        let Some((key, value)) = term.split_once('=') else {
            cfg.model.variant = Variant::parse(term)
                .map_err(|_| Error::Config(format!("unknown ablation arm '{term}'")))?;
            continue;
        };
        let m = &mut cfg.model;
        match key {
            "variant" => m.variant = Variant::parse(value)?,
            "clusters" => m.clusters = parse_count(key, value)?,
            "blocks" => m.blocks = parse_count(key, value)?,
            "intra" => m.intra = parse_switch(key, value)?,
            "inter" => m.inter = parse_switch(key, value)?,
            "grg" => m.grg = parse_switch(key, value)?,
            other => return Err(Error::Config(format!("unknown ablation arm key '{other}' in '{arm}'"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub group_acc: f64,
    pub ind_acc: f64,
    pub seed: u64,
}

/// Train every arm and report its final validation accuracies.
pub fn run_ablation(
    arms: &[String],
    base: &RunConfig,
    data: &Dataset,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    // Resolve every arm before spending time on training.
    let configs: Vec<RunConfig> = arms.iter().map(|a| arm_config(base, a)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(arms.len());
    for (arm, cfg) in arms.iter().zip(&configs) {
        let outcome = train(cfg, data)?;
        let m = outcome
            .history
            .last()
            .and_then(|r| r.val.clone())
            .ok_or_else(|| Error::Config(format!("arm {arm} trained for zero epochs")))?;
        let row = AblationRow {
            arm: arm.clone(),
            group_acc: m.group_acc,
            ind_acc: m.ind_acc,
            seed: cfg.seed,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("arm,group_acc,ind_acc,seed\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6},{}\n", r.arm, r.group_acc, r.ind_acc, r.seed));
    }
    out
}
