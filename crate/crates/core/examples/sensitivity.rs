//! One-step sensitivity `|δg_{L-1}|_rms / |δloss|` of ReLU MLPs under the
//! NTK and FSC schemes as depth grows.

use featspeed::backprop::{evaluate, resolve_lrs};
use featspeed::diagnostics::one_step_sensitivity;
use featspeed::network::{Activation, ArchSpec, Problem, Setting};
use featspeed::scalings::{named_scheme, NamedScheme, SchemeName};

fn main() -> featspeed::Result<()> {
    let (d, m, k) = (4, 200, 2);
    println!("{:>4} {:>12} {:>12}", "L", "ntk", "fsc_mlp");
    for depth in [8, 16, 32, 64] {
        let mut row = Vec::new();
        for name in [SchemeName::Ntk, SchemeName::FscMlp] {
            let arch = ArchSpec::mlp(d, m, k, depth, Activation::Relu)?.with_batch(8)?;
            let scheme = named_scheme(&NamedScheme::new(name, Setting::Dense, d, m, k, depth, 1.0))?;
            let p = Problem::sample_gaussian(arch, &scheme, Setting::Dense, 1)?;
            let (_, bt) = evaluate(&p.model, &p.input, &p.loss)?;
            let lrs = resolve_lrs(&scheme, &bt, depth);
            row.push(one_step_sensitivity(&p.model, &p.input, &p.loss, &lrs, 0.01)?.unwrap_or(f64::NAN));
        }
        println!("{depth:>4} {:>12.4e} {:>12.4e}", row[0], row[1]);
    }
    Ok(())
}
