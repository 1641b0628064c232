//! Waveform containers, WAV I/O, mixture synthesis, short-time spectral
//! analysis, ideal-mask oracles, separation metrics, and basis export.

mod basis;
mod clip;
mod eval;
mod mask;
mod mix;
mod stft;
mod wav;

pub use basis::{export_basis, upgma_order};
pub use clip::AudioClip;
pub use eval::{
    EvalReport, Separator, ShiftReport, UtteranceScore, evaluate, report_csv, sdr_value,
    separate, shift_experiment,
};
pub use mask::{OracleMask, TfMask, ideal_masks};
pub use mix::{ManifestEntry, load_manifest, synthesize_mixtures};
pub use stft::{STFT_BINS, STFT_HOP, STFT_WINDOW, Spectrogram, istft, stft};
pub use wav::{read_wav, write_wav, write_wav_f32};
