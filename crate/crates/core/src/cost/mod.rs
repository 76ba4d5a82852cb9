//! MAC counting over realized token schedules, throughput timing, and the
//! threshold sweep trading fidelity against cost.
//!
//! One multiply-accumulate counts as one FLOP. Softmax, layer norm and GELU
//! are left out of every total.

mod bench;
mod flops;
mod sweep;

pub use bench::{throughput_bench, BenchOptions, BenchReport, HardwareInfo, ImageBench};
pub use flops::{flops_encoder, layer_macs, DecoderCost, FlopsReport, LayerMacs, SiteMacs, MAC_CONVENTION};
pub use sweep::{fidelity_sweep, SweepOptions, SweepReport, SweepRow};
