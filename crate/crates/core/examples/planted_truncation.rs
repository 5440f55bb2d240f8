//! Truncation indices on planted profiles: a width-invariant head, and a
//! drift family with a known optimum shift.

use std::collections::BTreeMap;

use hptransfer::truncation::planted::{invariant_head, linspace, DriftFamily};
use hptransfer::truncation::{compute_khat, constant_candidates, decomposition_hp_gap, ToleranceConfig};

fn main() -> hptransfer::Result<()> {
    let hp = linspace(0.0, 1.0, 9);
    let profiles = invariant_head(&hp, &[64, 128, 256, 512], 8)?;
    for (n, out) in compute_khat(&profiles, &ToleranceConfig::default())? {
        println!("invariant head, width {n:>3}: kappa = {:?}", out.kappa());
    }

    let fam = DriftFamily::default();
    let hp = linspace(0.0, 1.0, 17);
    let mut grids = BTreeMap::new();
    for n in [16usize, 32, 64, 128, 256] {
        grids.insert(n, fam.profile(&hp, Some(n), n)?);
    }
    println!("\ndrift family: decomposition bound t_n against the true hp gap b_n");
    for (&n, g) in &grids {
        let lim = fam.profile(&hp, None, n)?;
        let tn = decomposition_hp_gap(g, &lim, &constant_candidates(n, hp.len()))?;
        let bn = fam.hp_gap_on_grid(n, 0.0, 1.0, 100_001);
        match tn {
            Some(t) => println!("  n = {n:>3}: t_n = {:.4}, b_n = {bn:.4}, kappa = {}", t.t_n, t.kappa[0]),
            None => println!("  n = {n:>3}: no feasible truncation, b_n = {bn:.4}"),
        }
    }
    Ok(())
}
