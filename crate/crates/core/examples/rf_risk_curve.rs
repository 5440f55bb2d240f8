//! Asymptotic random-features ridge risk as a function of λ at several widths.
//!
//! Run with `cargo run --release --example rf_risk_curve`.

use hptransfer::rf::{closed_forms_inf, optimal_lambda, risk_inf};
use hptransfer::rf::ActivationMoments;
use hptransfer::rf::risk;
use hptransfer::rf::RfSetting;

fn main() -> hptransfer::Result<()> {
    let mo = ActivationMoments::tanh_relu();
    let base = RfSetting::reference(1.0);
    let cf = closed_forms_inf(&base, &mo)?;
    println!("infinite width: lambda* = {:.5}, risk = {:.5}", cf.lambda_star_inf, cf.risk_inf_at_opt);

    let lambdas: Vec<f64> = (0..9).map(|i| 10f64.powf(-2.0 + 0.5 * i as f64)).collect();
    print!("{:>10}", "lambda");
    let psi2s = [1.0, 4.0, 16.0, 64.0];
    for p in psi2s {
        print!("{:>12}", format!("psi2={p}"));
    }
    println!("{:>12}", "inf");
    for &l in &lambdas {
        print!("{l:>10.4}");
        for p in psi2s {
            print!("{:>12.5}", risk(l, &base.with_psi2(p), &mo)?.risk);
        }
        println!("{:>12.5}", risk_inf(l, &base, &mo)?);
    }

    println!("\noptimal ridge per width");
    for p in psi2s {
        let (l, r) = optimal_lambda(&base.with_psi2(p), &mo, (1e-4, 1e2))?;
        println!("psi2 = {p:>4}: lambda* = {l:.5}, risk* = {r:.5}");
    }
    Ok(())
}
