//! `gabp-check` and `grad-check`: numerical verification suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spagnn_core::gabp::{
    exact_marginals, gabp_run, max_mean_deviation, max_precision_deviation, random_dominant_mrf,
    GabpConfig,
};
use spagnn_core::train::gradient_battery;

use crate::{GabpCheckArgs, GradCheckArgs};

/// Belief-propagation means must match exact inference to this tolerance
/// on block-dominant models.
const MEAN_TOL: f64 = 1e-8;
/// On trees the per-variable precisions are exact as well.
const TREE_PRECISION_TOL: f64 = 1e-8;
/// Finite-difference agreement required of every gradient entry.
const GRAD_TOL: f64 = 1e-5;

pub fn gabp(args: &GabpCheckArgs) -> anyhow::Result<()> {
    if args.nodes < 2 {
        anyhow::bail!("--nodes must be at least 2, got {}", args.nodes);
    }
    if args.trials == 0 {
        anyhow::bail!("--trials must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut max_mean = 0.0f64;
    let mut max_tree_precision = 0.0f64;
    let mut max_iterations = 0usize;
    let mut trees = 0usize;
    for trial in 0..args.trials {
        let n = rng.gen_range(2..=args.nodes);
        // Cycle through tree, single-loop, and double-loop topologies.
        let extra_edges = trial % 3;
        let model_seed = rng.gen::<u64>();
        let mrf = random_dominant_mrf(n, extra_edges, model_seed)?;
        let approx = gabp_run(&mrf, &GabpConfig::default())?;
        let exact = exact_marginals(&mrf)?;
        max_mean = max_mean.max(max_mean_deviation(&approx, &exact));
        max_iterations = max_iterations.max(approx.iterations);
        if extra_edges == 0 {
            trees += 1;
            max_tree_precision =
                max_tree_precision.max(max_precision_deviation(&approx, &exact));
        }
    }
    println!(
        "checked {} random models (max {} variables, {} trees), worst case {} sweeps",
        args.trials, args.nodes, trees, max_iterations
    );
    println!("max mean deviation: {max_mean:.3e}");
    println!("max tree precision deviation: {max_tree_precision:.3e}");
    let pass = max_mean <= MEAN_TOL && max_tree_precision <= TREE_PRECISION_TOL;
    if pass {
        println!("PASS (tolerance {MEAN_TOL:.0e})");
        Ok(())
    } else {
        anyhow::bail!(
            "FAIL: deviation exceeds {MEAN_TOL:.0e} (means {max_mean:.3e}, tree precisions {max_tree_precision:.3e})"
        )
    }
}

pub fn gradients(args: &GradCheckArgs) -> anyhow::Result<()> {
    let entries = gradient_battery(args.seed)?;
    let mut failed = Vec::new();
    for entry in &entries {
        let ok = entry.report.max_rel_err <= GRAD_TOL;
        println!(
            "{:<20} {:>7} coordinates, max rel err {:.3e}  {}",
            entry.name,
            entry.report.checked,
            entry.report.max_rel_err,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(entry.name);
        }
    }
    if failed.is_empty() {
        println!("all {} entries within {GRAD_TOL:.0e}", entries.len());
        Ok(())
    } else {
        anyhow::bail!("gradient check failed: {}", failed.join(", "))
    }
}
