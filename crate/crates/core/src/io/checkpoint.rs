//! Trainer checkpoints: the complete fine-tuning state — bank, gates,
//! batch-norm, Adam moments, epoch counter, config, and the exact
//! generator position — in a little-endian binary container (`CNCK`,
//! version 1, f64 payload), so a resumed run is bit-identical to an
//! uninterrupted one.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scoring::Select;
use crate::train::{
    Adam, LwbParams, MarginSpace, ScoreBatchNorm, TrainConfig, Trainer, TrainingPool, Variant,
};
use crate::types::{ImpostorBank, SpeakerId};

const MAGIC: &[u8; 4] = b"CNCK";
const VERSION: u8 = 1;

/// Everything a checkpoint stores. Enough to resume training (given the
/// training embeddings) or to score trials (standing alone).
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub cfg: TrainConfig,
    pub epoch: usize,
    pub bank: ImpostorBank,
    pub lwb: LwbParams,
    pub bn: ScoreBatchNorm,
    pub adam: Adam,
    pub rng_state: ([u8; 32], u64, u128),
}

/// Snapshot a trainer into checkpointable form.
pub fn trainer_state(trainer: &Trainer) -> CheckpointData {
    CheckpointData {
        cfg: trainer.cfg.clone(),
        epoch: trainer.epoch,
        bank: trainer.bank.clone(),
        lwb: trainer.lwb,
        bn: trainer.bn.clone(),
        adam: trainer.adam.clone(),
        rng_state: trainer.rng.state(),
    }
}

/// Rebuild a trainer from a checkpoint plus the training pool it was
/// created from. Everything is validated so a checkpoint paired with the
/// wrong embeddings file fails loudly instead of training nonsense.
pub fn resume_trainer(data: CheckpointData, pool: TrainingPool) -> Result<Trainer> {
    data.cfg.validate()?;
    if data.bank.dim() != pool.dim() {
        return Err(Error::Checkpoint(format!(
            "checkpoint dimension {} does not match embeddings dimension {}",
            data.bank.dim(),
            pool.dim()
        )));
    }
    if data.bank.len() != pool.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} speakers, embeddings have {}",
            data.bank.len(),
            pool.len()
        )));
    }
    for class in 0..pool.len() {
        let (id, _) = pool.speaker(class);
        if data.bank.class_of(&id.name) != Some(class) {
            return Err(Error::Checkpoint(format!(
                "speaker {} is missing or reordered in the checkpoint bank",
                id.name
            )));
        }
    }
    if data.bank.n_sub() != data.cfg.n_sub {
        return Err(Error::Checkpoint(format!(
            "bank has {} sub-center(s), config says {}",
            data.bank.n_sub(),
            data.cfg.n_sub
        )));
    }
    if data.cfg.cohort_size > data.bank.len() {
        return Err(Error::InvalidCohortSize {
            k: data.cfg.cohort_size,
            c: data.bank.len(),
        });
    }
    let expected_params = match data.cfg.variant {
        Variant::Lie => data.bank.centers().len() + 2,
        Variant::Lwb => 6,
    };
    if data.adam.m.len() != expected_params {
        return Err(Error::Checkpoint(format!(
            "optimizer state holds {} parameters, expected {expected_params}",
            data.adam.m.len()
        )));
    }
    let (seed, stream, word_pos) = data.rng_state;
    Ok(Trainer {
        cfg: data.cfg,
        pool,
        bank: data.bank,
        lwb: data.lwb,
        bn: data.bn,
        adam: data.adam,
        rng: Rng::from_state(seed, stream, word_pos),
        epoch: data.epoch,
    })
}

pub fn save_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);

    let cfg = &data.cfg;
    for v in [
        cfg.cohort_size as u64,
        cfg.n_sub as u64,
        cfg.speakers_per_batch as u64,
        cfg.utts_per_speaker as u64,
        cfg.epochs as u64,
        cfg.seed,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [
        cfg.margin,
        cfg.aic_scale,
        cfg.aic_weight,
        cfg.cllr_weight,
        cfg.learning_rate,
        cfg.lr_decay_per_epoch,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
        cfg.utterance_crop_seconds,
        cfg.bn_momentum,
        cfg.bn_eps,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(match cfg.margin_space {
        MarginSpace::Angular => 0,
        MarginSpace::Cosine => 1,
    });
    buf.push(match cfg.select {
        Select::Min => 0,
        Select::Max => 1,
    });
    buf.push(cfg.positive_target_cllr as u8);
    buf.push(match cfg.variant {
        Variant::Lie => 0,
        Variant::Lwb => 1,
    });

    buf.extend_from_slice(&(data.epoch as u64).to_le_bytes());

    let bank = &data.bank;
    for v in [bank.len() as u64, bank.n_sub() as u64, bank.dim() as u64] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in bank.speakers() {
        let bytes = s.name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::InvalidConfig("speaker name too long".into()));
        }
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
    }
    for v in bank.centers() {
        buf.extend_from_slice(&v.to_le_bytes());
    }

    for v in data.lwb.as_array() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [
        data.bn.gamma,
        data.bn.beta,
        data.bn.running_mean,
        data.bn.running_var,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }

    buf.extend_from_slice(&data.adam.t.to_le_bytes());
    buf.extend_from_slice(&(data.adam.m.len() as u64).to_le_bytes());
    for v in data.adam.m.iter().chain(data.adam.v.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }

    let (seed, stream, word_pos) = data.rng_state;
    buf.extend_from_slice(&seed);
    buf.extend_from_slice(&stream.to_le_bytes());
    buf.extend_from_slice(&word_pos.to_le_bytes());

    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let data = fs::read(path)?;
    let mut cur = Reader { data: &data, pos: 0 };

    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic (not a trainer checkpoint)".into(),
        ));
    }
    let version = cur.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }

    let cohort_size = cur.u64("cohort_size")? as usize;
    let n_sub = cur.u64("n_sub")? as usize;
    let speakers_per_batch = cur.u64("speakers_per_batch")? as usize;
    let utts_per_speaker = cur.u64("utts_per_speaker")? as usize;
    let epochs = cur.u64("epochs")? as usize;
    let seed = cur.u64("seed")?;
    let margin = cur.f64("margin")?;
    let aic_scale = cur.f64("aic_scale")?;
    let aic_weight = cur.f64("aic_weight")?;
    let cllr_weight = cur.f64("cllr_weight")?;
    let learning_rate = cur.f64("learning_rate")?;
    let lr_decay_per_epoch = cur.f64("lr_decay_per_epoch")?;
    let adam_beta1 = cur.f64("adam_beta1")?;
    let adam_beta2 = cur.f64("adam_beta2")?;
    let adam_eps = cur.f64("adam_eps")?;
    let utterance_crop_seconds = cur.f64("utterance_crop_seconds")?;
    let bn_momentum = cur.f64("bn_momentum")?;
    let bn_eps = cur.f64("bn_eps")?;
    let margin_space = match cur.take(1, "margin_space")?[0] {
        0 => MarginSpace::Angular,
        1 => MarginSpace::Cosine,
        other => {
            return Err(Error::Checkpoint(format!(
                "unknown margin_space tag {other}"
            )))
        }
    };
    let select = match cur.take(1, "select")?[0] {
        0 => Select::Min,
        1 => Select::Max,
        other => return Err(Error::Checkpoint(format!("unknown select tag {other}"))),
    };
    let positive_target_cllr = cur.take(1, "positive_target_cllr")?[0] != 0;
    let variant = match cur.take(1, "variant")?[0] {
        0 => Variant::Lie,
        1 => Variant::Lwb,
        other => return Err(Error::Checkpoint(format!("unknown variant tag {other}"))),
    };
    let cfg = TrainConfig {
        cohort_size,
        margin,
        n_sub,
        aic_scale,
        aic_weight,
        cllr_weight,
        speakers_per_batch,
        utts_per_speaker,
        epochs,
        learning_rate,
        lr_decay_per_epoch,
        adam_beta1,
        adam_beta2,
        adam_eps,
        seed,
        utterance_crop_seconds,
        margin_space,
        select,
        positive_target_cllr,
        bn_momentum,
        bn_eps,
        variant,
    };

    let epoch = cur.u64("epoch")? as usize;

    let c = cur.u64("bank speaker count")? as usize;
    let bank_n_sub = cur.u64("bank n_sub")? as usize;
    let dim = cur.u64("bank dim")? as usize;
    let mut speakers = Vec::with_capacity(c);
    for i in 0..c {
        let len = cur.take(2, "speaker name length")?;
        let len = u16::from_le_bytes([len[0], len[1]]) as usize;
        let bytes = cur.take(len, "speaker name")?;
        let name = String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint(format!("speaker name {i} is not UTF-8")))?;
        speakers.push(SpeakerId::with_class(name, i));
    }
    let centers = cur.f64s(c * bank_n_sub * dim, "bank centers")?;
    let bank = ImpostorBank::new(speakers, centers, bank_n_sub, dim)?;

    let lwb = LwbParams::from_array([
        cur.f64("w_mu")?,
        cur.f64("b_mu")?,
        cur.f64("w_sigma")?,
        cur.f64("b_sigma")?,
    ]);
    let bn = ScoreBatchNorm {
        gamma: cur.f64("gamma")?,
        beta: cur.f64("beta")?,
        running_mean: cur.f64("running_mean")?,
        running_var: cur.f64("running_var")?,
    };

    let t = cur.u64("adam step count")?;
    let n_params = cur.u64("adam parameter count")? as usize;
    let m = cur.f64s(n_params, "adam first moments")?;
    let v = cur.f64s(n_params, "adam second moments")?;
    let adam = Adam {
        m,
        v,
        t,
        beta1: adam_beta1,
        beta2: adam_beta2,
        eps: adam_eps,
    };

    let seed_bytes: [u8; 32] = cur.take(32, "rng seed")?.try_into().expect("32 bytes");
    let stream = cur.u64("rng stream")?;
    let word_pos_bytes: [u8; 16] = cur.take(16, "rng position")?.try_into().expect("16 bytes");
    let word_pos = u128::from_le_bytes(word_pos_bytes);

    if cur.pos != data.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing byte(s) at offset {}",
            data.len() - cur.pos,
            cur.pos
        )));
    }

    Ok(CheckpointData {
        cfg,
        epoch,
        bank,
        lwb,
        bn,
        adam,
        rng_state: (seed_bytes, stream, word_pos),
    })
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at offset {}: wanted {n} byte(s) for {what}",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(n * 8, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::testutil::make_temp_dir;
    use crate::train::init_lies;
    use crate::types::{Embedding, LabeledEmbedding};

    fn pool(speakers: usize, utts: usize, dim: usize, seed: u64) -> TrainingPool {
        let mut rng = Rng::new(seed, Stream::Synth);
        let mut embs = Vec::new();
        for s in 0..speakers {
            let centroid: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            for _ in 0..utts {
                let v: Vec<f64> = centroid.iter().map(|c| c + 0.3 * rng.normal()).collect();
                embs.push(LabeledEmbedding {
                    embedding: Embedding::new(v).unwrap(),
                    speaker: SpeakerId::new(format!("spk{s:03}")),
                });
            }
        }
        TrainingPool::from_labeled(&embs).unwrap()
    }

    fn small_trainer(variant: Variant, seed: u64) -> Trainer {
        let p = pool(6, 2, 4, seed);
        let cfg = TrainConfig {
            cohort_size: 3,
            n_sub: 1,
            speakers_per_batch: 3,
            epochs: 4,
            seed,
            variant,
            margin: 0.4,
            aic_scale: 5.0,
            ..TrainConfig::default()
        };
        let mut rng = Rng::new(seed, Stream::Init);
        let bank = init_lies(&p, 1, &mut rng).unwrap();
        Trainer::new(p, bank, cfg).unwrap()
    }

    fn assert_states_equal(a: &CheckpointData, b: &CheckpointData) {
        assert_eq!(a.cfg, b.cfg);
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.bank.centers(), b.bank.centers());
        assert_eq!(a.bank.speakers(), b.bank.speakers());
        assert_eq!(a.lwb, b.lwb);
        assert_eq!(a.bn, b.bn);
        assert_eq!(a.adam, b.adam);
        assert_eq!(a.rng_state, b.rng_state);
    }

    #[test]
    fn round_trip_preserves_every_field() {
        for variant in [Variant::Lie, Variant::Lwb] {
            let dir = make_temp_dir("ckpt-rt");
            let path = dir.join("t.cnck");
            let mut trainer = small_trainer(variant, 31);
            trainer.run_epoch().unwrap();
            let state = trainer_state(&trainer);
            save_checkpoint(&path, &state).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_states_equal(&state, &back);
        }
    }

    #[test]
    fn untrained_checkpoint_reproduces_init_exactly() {
        let dir = make_temp_dir("ckpt-init");
        let path = dir.join("t.cnck");
        let trainer = small_trainer(Variant::Lie, 32);
        let expected = trainer.bank.centers().to_vec();
        save_checkpoint(&path, &trainer_state(&trainer)).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.bank.centers(), &expected[..]);
        assert_eq!(back.epoch, 0);
        assert_eq!(back.adam.t, 0);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        // A: two epochs straight through. B: one epoch, checkpoint, resume
        // from disk, second epoch. Bit-identical parameters.
        for variant in [Variant::Lie, Variant::Lwb] {
            let dir = make_temp_dir("ckpt-resume");
            let path = dir.join("t.cnck");

            let mut a = small_trainer(variant, 33);
            a.run_epoch().unwrap();
            a.run_epoch().unwrap();

            let mut b1 = small_trainer(variant, 33);
            b1.run_epoch().unwrap();
            save_checkpoint(&path, &trainer_state(&b1)).unwrap();
            drop(b1);
            let data = load_checkpoint(&path).unwrap();
            let mut b2 = resume_trainer(data, pool(6, 2, 4, 33)).unwrap();
            assert_eq!(b2.epoch, 1);
            b2.run_epoch().unwrap();

            let pa = a.flat_params();
            let pb = b2.flat_params();
            for (x, y) in pa.iter().zip(&pb) {
                assert_eq!(x.to_bits(), y.to_bits(), "{variant:?} diverged after resume");
            }
            assert_eq!(a.rng.state(), b2.rng.state());
            assert_eq!(a.bn, b2.bn);
            assert_eq!(a.adam, b2.adam);
        }
    }

    #[test]
    fn resume_rejects_mismatched_embeddings() {
        let dir = make_temp_dir("ckpt-mismatch");
        let path = dir.join("t.cnck");
        let trainer = small_trainer(Variant::Lie, 34);
        save_checkpoint(&path, &trainer_state(&trainer)).unwrap();
        let data = load_checkpoint(&path).unwrap();
        // Wrong dimension.
        assert!(matches!(
            resume_trainer(data.clone(), pool(6, 2, 5, 34)),
            Err(Error::Checkpoint(_))
        ));
        // Wrong speaker count.
        assert!(matches!(
            resume_trainer(data, pool(7, 2, 4, 34)),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn version_and_magic_are_checked() {
        let dir = make_temp_dir("ckpt-ver");
        let path = dir.join("t.cnck");
        let trainer = small_trainer(Variant::Lie, 35);
        save_checkpoint(&path, &trainer_state(&trainer)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // version byte
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version")),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncation_is_reported_with_offset() {
        let dir = make_temp_dir("ckpt-trunc");
        let path = dir.join("t.cnck");
        let trainer = small_trainer(Variant::Lie, 36);
        save_checkpoint(&path, &trainer_state(&trainer)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("truncated")),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }
}
