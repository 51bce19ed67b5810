//! `gen-scenes`: write a line-delimited scenario dataset.

use std::str::FromStr;

use anyhow::Context;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use spagnn_core::scenes::{gen_scenario, DatasetWriter, ScenarioKind};

use crate::manifest::{sibling_manifest_path, RunManifest};
use crate::GenScenesArgs;

/// Per-record agent-count range drawn from the master seed.
const AGENTS: std::ops::RangeInclusive<usize> = 2..=6;

#[derive(Serialize)]
struct GenConfigEcho {
    kind: String,
    count: usize,
    min_agents: usize,
    max_agents: usize,
}

pub fn run(args: &GenScenesArgs) -> anyhow::Result<()> {
    let kind = ScenarioKind::from_str(&args.kind).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut writer = DatasetWriter::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for index in 0..args.count {
        let n_agents = rng.gen_range(AGENTS);
        let record_seed = rng.gen::<u64>();
        let scenario = gen_scenario(kind, n_agents, record_seed)
            .with_context(|| format!("generating record {index}"))?;
        writer.write(&scenario)?;
    }
    let written = writer.finish()?;

    let config = GenConfigEcho {
        kind: kind.name().to_string(),
        count: args.count,
        min_agents: *AGENTS.start(),
        max_agents: *AGENTS.end(),
    };
    let manifest =
        RunManifest::new(serde_json::to_value(&config)?, Some(args.seed), &[&args.out]);
    manifest.write(&sibling_manifest_path(&args.out))?;
    println!("wrote {written} scenarios to {}", args.out.display());
    Ok(())
}
