//! Zero-initialized output layer: after one step only `W_L` has moved, and
//! `m |z_{L-1}|_rms / sqrt(L)` stays of order one across depths.

use featspeed::network::{Activation, ArchSpec, Setting};
use featspeed::scalings::{zero_output_init, zero_output_step};

fn main() -> featspeed::Result<()> {
    for depth in [16, 32, 64, 128] {
        let arch = ArchSpec::mlp(10, 400, 1, depth, Activation::Relu)?;
        let init = zero_output_init(arch, Setting::Dense, 3)?;
        let step = zero_output_step(&init)?;
        println!(
            "L {depth:>3}: eta_L(0) {:.3e}  ratio {:.3}  lower grads {:.1e}",
            init.eta_out0, step.ratio, step.max_lower_grad
        );
    }
    Ok(())
}
