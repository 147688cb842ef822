use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use iort_core::journal::{read_journal, Journal};
use iort_core::{ArmProfile, Broker, SystemClock};
use serde::Serialize;

use crate::{load_profile, StoreArgs};

fn replay(args: &StoreArgs) -> anyhow::Result<Broker> {
    let records = read_journal(&args.journal)
        .with_context(|| format!("reading journal {}", args.journal.display()))?
        .records;
    Ok(Broker::recover(
        args.broker.config()?,
        Arc::new(SystemClock),
        Journal::disabled(),
        records,
    )?)
}

pub fn store_dump(args: StoreArgs) -> anyhow::Result<()> {
    let broker = replay(&args)?;
    print!("{}", broker.store().snapshot_string());
    Ok(())
}

#[derive(Serialize)]
struct PatternStats<'a> {
    pattern_id: &'a str,
    arm_id: &'a str,
    use_count: u64,
    length: usize,
}

#[derive(Serialize)]
struct Stats<'a> {
    ongoing: usize,
    learning: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    patterns: Vec<PatternStats<'a>>,
}

pub fn store_stats(args: StoreArgs) -> anyhow::Result<()> {
    let broker = replay(&args)?;
    let tree = broker.store().tree();
    let stats = Stats {
        ongoing: tree.ongoing.len(),
        learning: tree.learning.len(),
        patterns: tree
            .learning
            .iter()
            .map(|p| PatternStats {
                pattern_id: &p.pattern_id,
                arm_id: &p.arm_id,
                use_count: p.use_count,
                length: p.canonical_commands.len(),
            })
            .collect(),
    };
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

pub fn profile_dump(path: Option<&PathBuf>) -> anyhow::Result<()> {
    print!("{}", load_profile(path)?.to_toml_string());
    Ok(())
}

pub fn profile_check(path: &Path) -> anyhow::Result<()> {
    let profile =
        ArmProfile::load(path).with_context(|| format!("loading profile {}", path.display()))?;
    println!("ok: {} (reach {} cm)", profile.name, profile.links.total());
    Ok(())
}
