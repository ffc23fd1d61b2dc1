//! Width and depth sweep of one scheme, printing the fitted exponents and the
//! verdict for each scaling property.

use featspeed::scalings::{property_sweep, Property, SchemeName, SweepConfig};

fn main() -> featspeed::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "fsc_mlp".into());
    let scheme: SchemeName = name.parse()?;
    let cfg = SweepConfig {
        grid_m: vec![64, 128, 256, 512],
        grid_l: vec![8, 16, 32, 64],
        seeds: 5,
        ..SweepConfig::new(scheme)
    };
    let report = property_sweep(&cfg)?;
    for p in Property::ALL {
        let f = report.fit(p);
        println!(
            "{:<4} m^{:+.2} L^{:+.2}  {}",
            p.as_str(),
            f.exponent_m(),
            f.exponent_l(),
            if f.pass { "holds" } else { "fails" }
        );
    }
    Ok(())
}
