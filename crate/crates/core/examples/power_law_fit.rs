//! Power-law fits with and without an additive offset.

use hptransfer::hpcore::{fit_power_law, fit_power_law_offset};

fn main() -> hptransfer::Result<()> {
    let widths: Vec<f64> = (4..=12).map(|k| 2f64.powi(k)).collect();
    let clean: Vec<(f64, f64)> = widths.iter().map(|&n| (n, 3.0 * n.powf(-0.75))).collect();
    let f = fit_power_law(&clean)?;
    println!("clean:  exponent {:.4}, prefactor {:.4}, r2 {:.6}", f.exponent, f.log_prefactor.exp(), f.r_squared);

    let shifted: Vec<(f64, f64)> = clean.iter().map(|&(n, y)| (n, y + 0.02)).collect();
    let naive = fit_power_law(&shifted)?;
    let off = fit_power_law_offset(&shifted)?;
    println!("offset: naive exponent {:.4}; with offset {:.4}, offset {:.4}", naive.exponent, off.fit.exponent, off.offset);
    Ok(())
}
