//! For mutually orthogonal vectors the geometric product and the outer
//! product coincide. Random vectors are orthogonalized with Gram-Schmidt and
//! the two products compared; the raw, non-orthogonal vectors show how large
//! the gap is otherwise. Ends with the randomized property suite.
//!
//!     cargo run --example ga_equivalence

use reco_lab::ga::{self, SuiteConfig};
use reco_lab::rng::Stream;
use reco_lab::Vec1;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = Stream::derived(42, 0);
    println!(" n  k   orthogonal dev   raw dev");
    for (n, k) in [(3, 2), (4, 3), (5, 4), (6, 6)] {
        let raw: Vec<Vec1> = (0..k).map(|_| Vec1::new((0..n).map(|_| rng.next_gaussian()).collect())).collect::<Result<_, _>>()?;
        let ortho = ga::gram_schmidt(&raw);
        let a = ga::orthogonal_equivalence_check(&ortho, 1e-10)?;
        let b = ga::orthogonal_equivalence_check(&raw, 1e-10)?;
        println!("{n:2} {k:2}   {:14.3e}   {:.3e}", a.max_deviation, b.max_deviation);
    }

    // e1 e2 is a pure bivector, e1 e1 is the scalar 1.
    let e1 = Vec1::basis(3, 1).to_multivector()?;
    let e2 = Vec1::basis(3, 2).to_multivector()?;
    let e12 = ga::geometric_product(&e1, &e2)?;
    println!("\ne1 e2 = {:+} e12, e2 e1 = {:+} e12, e1 e1 = {}", e12.coeff(&[1, 2]), ga::geometric_product(&e2, &e1)?.coeff(&[1, 2]), ga::geometric_product(&e1, &e1)?.scalar_part());

    let report = ga::run_property_suite(&SuiteConfig { trials: 200, ..SuiteConfig::default() })?;
    println!();
    for p in &report.properties {
        println!("{:<24} {:5} checks  worst {:.2e}", p.name, p.checked, p.worst);
    }
    println!("suite {}", if report.passed() { "passed" } else { "FAILED" });
    Ok(())
}
