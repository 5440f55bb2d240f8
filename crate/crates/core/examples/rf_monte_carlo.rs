//! Finite-dimension ridge regression on random features against the
//! asymptotic risk. The penalty scale is calibrated once, at a λ where the
//! risk is steep.

use hptransfer::rf::{calibrate_lambda_scale, closed_forms_inf, monte_carlo_rf};
use hptransfer::rf::{hermite_moments, ActivationMoments, RfActivation};
use hptransfer::rf::risk;
use hptransfer::rf::RfSetting;

fn main() -> hptransfer::Result<()> {
    let student = hermite_moments(RfActivation::Tanh)?;
    let teacher = hermite_moments(RfActivation::Relu)?;
    let mo = ActivationMoments::from_activations(&student, &teacher);
    let (d, trials, seed) = (150, 10, 3);
    let s = RfSetting::reference(2.0);

    let anchor = 10.0 * closed_forms_inf(&s, &mo)?.lambda_star_inf;
    let scale = calibrate_lambda_scale(d, &s, &student, &teacher, anchor, risk(anchor, &s, &mo)?.risk, trials, seed)?;
    println!("d = {d}, N = {}, n = {}, penalty scale = {scale:.4}", s.psi1 * d as f64, s.psi2 * d as f64);

    let lambdas = [0.03, 0.1, 0.3, 1.0, 3.0];
    for psi2 in [1.0, 2.0, 4.0] {
        let sp = s.with_psi2(psi2);
        let est = monte_carlo_rf(d, &sp, &student, &teacher, &lambdas, trials, seed + 1, scale)?;
        println!("\npsi2 = {psi2}");
        for e in est {
            let a = risk(e.lambda, &sp, &mo)?.risk;
            println!("  lambda {:>5}: mc {:.4} ± {:.4}, asymptotic {a:.4}", e.lambda, e.mean, e.stderr);
        }
    }
    Ok(())
}
