//! Compute-optimal grid search on a synthetic loss family: direct tuning at
//! the target width against tuning at a small width and transferring.

use hptransfer::gridsim::{budget_ladder, fit_frontier, frontier, theory_exponents, Strategy, SyntheticLossFamily};

fn main() -> hptransfer::Result<()> {
    let budgets = budget_ladder(1e6, 1e11, 3);
    let (alpha, h, r) = (1.0, 1, 2.0);
    for beta in [1.0, 0.4] {
        let f = SyntheticLossFamily::new(alpha, beta, 1.0, 1.0, 2.0, h)?;
        let d = frontier(Strategy::Direct, &f, &budgets, r, 32, 7)?;
        let t = frontier(Strategy::Transfer, &f, &budgets, r, 32, 7)?;
        let (fd, ft) = (fit_frontier(&d)?, fit_frontier(&t)?);
        let (td, tt) = theory_exponents(alpha, beta, h, r);
        println!("beta = {beta}");
        println!("  direct   exponent {:.3} (theory {td:.3})", -fd.exponent);
        println!("  transfer exponent {:.3} (theory {tt:.3})", -ft.exponent);
        println!("  {:>10} {:>12} {:>12} {:>8} {:>8}", "budget", "direct", "transfer", "n", "M");
        for (a, b) in d.iter().zip(&t).step_by(3) {
            println!("  {:>10.1e} {:>12.4e} {:>12.4e} {:>8} {:>8}", a.budget, a.suboptimality, b.suboptimality, b.n_star, b.m_star);
        }
    }
    Ok(())
}
