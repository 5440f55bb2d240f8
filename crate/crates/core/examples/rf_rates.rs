//! Loss, hyperparameter and suboptimality gaps of random-features ridge
//! regression, and the transfer verdict they imply.

use hptransfer::hpcore::classify_transfer;
use hptransfer::rf::{numeric_leading_coefficients, rf_rates};
use hptransfer::rf::ActivationMoments;
use hptransfer::rf::RfSetting;

fn main() -> hptransfer::Result<()> {
    let mo = ActivationMoments::tanh_relu();
    let s = RfSetting::reference(1.0);
    let psi2s: Vec<f64> = (2..=10).map(|k| 2f64.powi(k)).collect();
    let rep = rf_rates(&s, &mo, &psi2s)?;

    println!("{:>6} {:>10} {:>12} {:>12} {:>12}", "psi2", "lambda*", "loss gap", "hp gap", "subopt");
    for r in &rep.rows {
        println!("{:>6} {:>10.5} {:>12.4e} {:>12.4e} {:>12.4e}", r.psi2, r.lambda_star, r.loss_gap, r.hp_gap, r.subopt_gap);
    }
    let (alpha, beta) = (-rep.loss_gap.exponent, -rep.hp_gap.exponent);
    println!("\nalpha = {alpha:.3}, beta = {beta:.3}, subopt exponent = {:.3}", -rep.subopt_gap.exponent);
    println!("verdict: {:?}", classify_transfer(alpha, beta)?);

    let lc = numeric_leading_coefficients(&s, &mo)?;
    println!("leading coefficients: {lc:?}");
    println!("closed forms: {:?}", rep.closed_forms);
    Ok(())
}
