//! Files, manifests, signal preprocessing, crop sampling and synthetic data.

pub mod crops;
pub mod manifest;
pub mod signal;
pub mod synth;
pub mod t4df;

pub use crops::{random_temporal_crop, sliding_window_crops, window_starts, CROP_LEN, DEFAULT_STRIDE};
pub use manifest::{Entry, FmriRecord, Manifest, Split, SplitCounts};
pub use signal::{bandpass_filter, downsample_spatial, sine_amplitude, BAND_HI_HZ, BAND_LO_HZ};
pub use synth::{generate_records, generate_synthetic, SignalMode, SynthConfig, SynthReport, MANIFEST_NAME};
pub use t4df::{load_tensor, load_tensor_as, read_header, save_tensor, Header};
