//! Newton–Schulz orthogonalization as used by Muon, against the exact
//! matrix sign from an SVD.

use hptransfer::rng::stream;
use hptransfer::trainer::{msgn_exact, orthogonalize, NsSchedule};
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

fn main() {
    let mut rng = stream(0, "muon-example");
    for (r, c) in [(8, 8), (16, 32), (64, 24)] {
        let m = DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
        let exact = msgn_exact(&m);
        for iters in [3, 5, 8] {
            let approx = orthogonalize(&m, iters, NsSchedule::Default);
            let rel = (&approx - &exact).norm() / exact.norm();
            let sv = approx.singular_values();
            let (lo, hi) = (sv.min(), sv.max());
            println!("{r:>3}x{c:<3} iters {iters}: rel error {rel:.3}, singular values in [{lo:.3}, {hi:.3}]");
        }
    }
}
