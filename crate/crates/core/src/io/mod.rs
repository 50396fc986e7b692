//! File formats and data plumbing: the binary embedding archive (with a
//! CSV fallback), trial-list and score-file parsing, the synthetic
//! embedding generator, the train/eval split manifest, and trainer
//! checkpoints.

mod archive;
mod bank;
mod checkpoint;
mod synth;
mod trials;

pub use archive::{
    read_archive, read_csv_embeddings, read_embeddings, write_archive, write_csv_embeddings,
    write_embeddings, EmbeddingRecord, EmbeddingStore,
};
pub use bank::{read_bank, sniff_magic, write_bank};
pub use checkpoint::{load_checkpoint, resume_trainer, save_checkpoint, trainer_state, CheckpointData};
pub use synth::{generate_synthetic, make_trials, SplitManifest, SynthConfig};
pub use trials::{parse_trials, read_scores, write_scores, write_trials};
