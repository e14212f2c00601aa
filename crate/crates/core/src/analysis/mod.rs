//! Parameter counts, operation counts and real-time-factor benchmarking.

mod complexity;
mod rtf;

pub use complexity::{
    closest_entry, convention_sweep, count_flops, count_params, executed_macs, frames_for_seconds, layer_ops,
    seconds_for_frames, ComplexityReport, FlopConvention, InputSpec, LayerRow, OpGeom, SweepEntry, DEFAULT_CONVENTION,
};
pub use rtf::{benchmark_rtf, median, Clock, FakeClock, RtfConfig, RtfReport, WallClock};
