//! Initialization scales and learning rates of the tabulated schemes.

use featspeed::network::Setting;
use featspeed::scalings::{named_scheme, NamedScheme, SchemeName};

fn main() -> featspeed::Result<()> {
    let (d, m, k, depth) = (10, 256, 1, 16);
    let beta = 1.0 / (depth as f64).sqrt();
    println!("{:<11} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}", "scheme", "s_in", "s_hid", "s_out", "eta_in", "eta_hid", "eta_out");
    for name in SchemeName::ALL {
        let s = named_scheme(&NamedScheme::new(name, Setting::Dense, d, m, k, depth, beta))?;
        println!(
            "{:<11} {:>9.3e} {:>9.3e} {:>9.3e} {:>9.3e} {:>9.3e} {:>9.3e}",
            name.as_str(),
            s.sigma_in,
            s.sigma_hid,
            s.sigma_out,
            s.eta_in,
            s.eta_hid,
            s.eta_out
        );
    }
    Ok(())
}
