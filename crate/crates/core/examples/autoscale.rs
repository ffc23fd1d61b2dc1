//! Data-driven scaling: tune the initialization of a ReLU MLP until forward
//! scales are of order one, learning rates follow the scale-invariant rule.

use featspeed::network::{Activation, ArchSpec, Setting};
use featspeed::scalings::autoscale::fsc_autoscale;

fn main() -> featspeed::Result<()> {
    for depth in [8, 32] {
        let arch = ArchSpec::mlp(10, 128, 1, depth, Activation::Relu)?;
        let s = fsc_autoscale(arch, Setting::Dense, 1, 1e-3)?;
        println!(
            "L {depth:>2}: sigma ({:.3e}, {:.3e}, {:.3e}), learning rates {:?}",
            s.sigma_in, s.sigma_hid, s.sigma_out, s.lr_mode
        );
    }
    Ok(())
}
