//! The `oracle-verify` command: exact checks of the patch-marginal
//! machinery on tiny enumerable spaces.
//!
//! Two claims are verified. First, the support of the maximum-entropy fit
//! equals the set of images whose every window content is normal. Second,
//! the fit matches every window marginal to tolerance and out-entropies
//! random feasible perturbations (and satisfies the factorization swap
//! identity when the windows partition the pixels).

use std::path::Path;

use mlsad_core::mrf::oracle::{
    extract_patch_marginals, factorization_swap_residual, fit_max_entropy, marginal_tv_residual,
    random_distribution, support_set, DiscreteImageDistribution, DiscreteSpace,
    FeasiblePerturber,
};
use mlsad_core::types::RandomSource;

/// Bundled 1x2 binary fixture: mass only on the two anti-diagonal states.
const BUNDLED_FIXTURE: &str = "\
# rows=1 cols=2 alphabet=2
00 0
01 0.5
10 0.5
11 0
";

const RANDOM_CASES: usize = 20;
const PERTURBATIONS: usize = 1000;

pub fn oracle_verify(fixture: Option<&Path>) -> anyhow::Result<()> {
    let mut all_ok = true;

    let p = match fixture {
        Some(path) => DiscreteImageDistribution::load(path)?,
        None => DiscreteImageDistribution::from_text(BUNDLED_FIXTURE)?,
    };
    let name = fixture
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "bundled 1x2 binary".into());
    for w in 1..=p.space.rows.max(p.space.cols) {
        all_ok &= verify_instance(&format!("{name} w={w}"), &p, w)?;
    }

    let src = RandomSource::new(20_240_817);
    let mut rng = src.stream(0);
    let shapes = [(1usize, 2usize), (1, 3), (2, 2)];
    let alphabets = [2usize, 3];
    let mut case = 0;
    'outer: loop {
        for &(rows, cols) in &shapes {
            for &alphabet in &alphabets {
                for w in [1usize, 2] {
                    if case >= RANDOM_CASES {
                        break 'outer;
                    }
                    let space = DiscreteSpace::new(rows, cols, alphabet)?;
                    let p = random_distribution(space, 0.6, &mut rng);
                    all_ok &= verify_instance(
                        &format!("random {rows}x{cols} a={alphabet} w={w}"),
                        &p,
                        w,
                    )?;
                    case += 1;
                }
            }
        }
    }

    if all_ok {
        println!("oracle-verify: all checks PASS");
        Ok(())
    } else {
        anyhow::bail!("oracle-verify: at least one check FAILED")
    }
}

fn verify_instance(name: &str, p: &DiscreteImageDistribution, w: usize) -> anyhow::Result<bool> {
    let marginals = extract_patch_marginals(p, w)?;
    let q = fit_max_entropy(&marginals)?;

    let support_ok = q.support() == support_set(p, w)?.members;
    println!(
        "[{}] support-equality ({name}): fit support == normal-window set",
        if support_ok { "PASS" } else { "FAIL" }
    );

    let tv = marginal_tv_residual(&q, &marginals);
    let tv_ok = tv <= 1e-9;
    println!(
        "[{}] marginal-match ({name}): worst TV {tv:.3e} (<= 1e-9)",
        if tv_ok { "PASS" } else { "FAIL" }
    );

    let h = q.entropy();
    let perturber = FeasiblePerturber::new(&q, &marginals);
    let mut rng = RandomSource::new(7).stream(99);
    let mut beaten = true;
    let mut tried = 0;
    for _ in 0..PERTURBATIONS {
        if let Some(qp) = perturber.perturb(&q, &mut rng) {
            tried += 1;
            if h <= qp.entropy() - 1e-10 {
                beaten = false;
            }
        }
    }
    let ent_ok = beaten;
    println!(
        "[{}] max-entropy ({name}): fit beats {tried} feasible perturbations",
        if ent_ok { "PASS" } else { "FAIL" }
    );

    let mut swap_ok = true;
    if let Some(residual) = factorization_swap_residual(&q, w)? {
        swap_ok = residual <= 1e-8;
        println!(
            "[{}] factorization-swap ({name}): worst residual {residual:.3e} (<= 1e-8)",
            if swap_ok { "PASS" } else { "FAIL" }
        );
    }

    Ok(support_ok && tv_ok && ent_ok && swap_ok)
}
