//! The six subcommand implementations. Each resolves its parameters as
//! flag → config-file key → default, does the work through the library,
//! and prints a short plain-text summary (all floats at 9 significant
//! digits).

use std::path::{Path, PathBuf};
use std::time::Instant;

use cohort_norm::error::Error;
use cohort_norm::io::{
    generate_synthetic, load_checkpoint, make_trials, parse_trials, read_bank, read_scores,
    resume_trainer, save_checkpoint, sniff_magic, trainer_state, write_bank, write_embeddings,
    write_scores, write_trials, CheckpointData, EmbeddingStore, SplitManifest, SynthConfig,
};
use cohort_norm::metrics::{
    cllr_metric, det_csv, det_points, eer, format_sig9, min_dcf, DcfParams, ScoredTrialSet,
};
use cohort_norm::norms::{score_trials_classic, NormMethod};
use cohort_norm::rng::{Rng, Stream};
use cohort_norm::scoring::{cosine, Select};
use cohort_norm::train::{
    init_lies, score_trials_trained, LwbParams, MarginSpace, TrainConfig, Trainer, TrainingPool,
    Variant,
};
use cohort_norm::types::{average_enrollment, Embedding, ImpostorBank, TrialLabel, TrialList};

use crate::config::{sibling, ConfigFile};
use crate::errors::{CliError, CliResult};
use crate::{CompareArgs, EvalArgs, GenSynthArgs, InitArgs, ScoreArgs, TrainArgs};

pub fn gen_synth(args: GenSynthArgs, cfg: &mut ConfigFile) -> CliResult<()> {
    let benchmark = cfg.resolve_switch(args.benchmark, "benchmark")?;
    let base = if benchmark {
        SynthConfig::benchmark()
    } else {
        SynthConfig::default()
    };
    let out: PathBuf = cfg.require(args.out, "out")?;
    let synth = SynthConfig {
        n_speakers: cfg.resolve(args.speakers, "speakers", base.n_speakers)?,
        eval_speakers: cfg.resolve(args.eval_speakers, "eval-speakers", base.eval_speakers)?,
        utts_per_speaker: cfg.resolve(args.utts, "utts", base.utts_per_speaker)?,
        dim: cfg.resolve(args.dim, "dim", base.dim)?,
        within_speaker_std: cfg.resolve(args.within, "within", base.within_speaker_std)?,
        n_channels: cfg.resolve(args.channels, "channels", base.n_channels)?,
        channel_shift_std: cfg.resolve(args.shift, "shift", base.channel_shift_std)?,
        duration_proxy_noise: cfg.resolve(
            args.duration_noise,
            "duration-noise",
            base.duration_proxy_noise,
        )?,
        seed: cfg.resolve(args.seed, "seed", base.seed)?,
    };
    // The pinned benchmark protocol uses 50 non-target tests per eval
    // speaker; ad-hoc archives default to a lighter trial list.
    let non_default: usize = if benchmark { 50 } else { 25 };
    let non_per_speaker = cfg.resolve(args.non_per_speaker, "non-per-speaker", non_default)?;

    let (records, manifest) = generate_synthetic(&synth)?;
    write_embeddings(&out, &records)?;
    let split_path = sibling(&out, "split.txt");
    manifest.write(&split_path)?;
    println!(
        "archive  {}  ({} embeddings, {}+{} speakers, dim {})",
        out.display(),
        records.len(),
        synth.n_speakers,
        synth.eval_speakers,
        synth.dim
    );
    println!(
        "split    {}  ({} train / {} eval)",
        split_path.display(),
        manifest.train.len(),
        manifest.eval.len()
    );
    if manifest.eval.len() >= 2 && synth.utts_per_speaker >= 2 {
        let trials = make_trials(
            &manifest.eval,
            synth.utts_per_speaker,
            non_per_speaker,
            synth.seed,
        )?;
        let trials_path = sibling(&out, "trials.txt");
        write_trials(&trials_path, &trials)?;
        let targets = trials
            .iter()
            .filter(|t| t.label == TrialLabel::Target)
            .count();
        println!(
            "trials   {}  ({} trials: {} target / {} non-target)",
            trials_path.display(),
            trials.len(),
            targets,
            trials.len() - targets
        );
    } else {
        println!("trials   skipped (needs >= 2 eval speakers and >= 2 utterances per speaker)");
    }
    Ok(())
}

pub fn init(args: InitArgs, cfg: &mut ConfigFile) -> CliResult<()> {
    let embeddings: PathBuf = cfg.require(args.embeddings, "embeddings")?;
    let out: PathBuf = cfg.require(args.out, "out")?;
    let subcenters = cfg.resolve(args.subcenters, "subcenters", 1usize)?;
    let seed = cfg.resolve(args.seed, "seed", 0u64)?;
    let manifest: Option<PathBuf> = cfg.resolve_opt(args.manifest, "manifest")?;

    let store = EmbeddingStore::load(&embeddings)?;
    let labeled = match &manifest {
        Some(m) => store.labeled_for_speakers(&SplitManifest::read(m)?.train),
        None => store.labeled(),
    };
    if labeled.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no embeddings selected (empty archive or manifest without matches)",
            embeddings.display()
        )));
    }
    let pool = TrainingPool::from_labeled(&labeled)?;
    let bank = init_lies(&pool, subcenters, &mut Rng::new(seed, Stream::Init))?;
    write_bank(&out, &bank)?;
    println!(
        "bank  {}  ({} speakers x {} sub-centers x dim {})",
        out.display(),
        bank.len(),
        bank.n_sub(),
        bank.dim()
    );
    Ok(())
}

pub fn train(args: TrainArgs, cfg: &mut ConfigFile) -> CliResult<()> {
    let embeddings: PathBuf = cfg.require(args.embeddings, "embeddings")?;
    let bank_path: PathBuf = cfg.require(args.bank, "bank")?;
    let out: PathBuf = cfg.require(args.out, "out")?;
    let bank_out: PathBuf = cfg.resolve(args.bank_out, "bank-out", out.with_extension("cnbk"))?;

    // Hyperparameters are resolved as options so the resume path can tell
    // "explicitly set" from "defaulted".
    let epochs = cfg.resolve_opt(args.epochs, "epochs")?;
    let lr = cfg.resolve_opt(args.lr, "lr")?;
    let k = cfg.resolve_opt(args.k, "k")?;
    let margin = cfg.resolve_opt(args.margin, "margin")?;
    let margin_space = cfg
        .resolve_opt::<String>(args.margin_space, "margin-space")?
        .as_deref()
        .map(MarginSpace::parse)
        .transpose()?;
    let subcenters = cfg.resolve_opt(args.subcenters, "subcenters")?;
    let delta = cfg.resolve_opt(args.delta, "delta")?;
    let aic_weight = cfg.resolve_opt(args.aic_weight, "aic-weight")?;
    let cllr_weight = cfg.resolve_opt(args.cllr_weight, "cllr-weight")?;
    let variant = cfg
        .resolve_opt::<String>(args.variant, "variant")?
        .as_deref()
        .map(Variant::parse)
        .transpose()?;
    let spb = cfg.resolve_opt(args.spb, "spb")?;
    let seed = cfg.resolve_opt(args.seed, "seed")?;
    let select = cfg
        .resolve_opt::<String>(args.select, "select")?
        .as_deref()
        .map(Select::parse)
        .transpose()?;
    let positive_target = cfg.resolve_switch(args.positive_target_cllr, "positive-target-cllr")?;

    let store = EmbeddingStore::load(&embeddings)?;
    let mut trainer = match &sniff_magic(&bank_path)? {
        b"CNBK" => {
            let bank = read_bank(&bank_path)?;
            if let Some(ns) = subcenters {
                if ns != bank.n_sub() {
                    return Err(CliError::Usage(format!(
                        "--subcenters {ns} conflicts with the bank's {} sub-center(s); \
                         re-run init with the wanted count",
                        bank.n_sub()
                    )));
                }
            }
            let d = TrainConfig::default();
            let tc = TrainConfig {
                cohort_size: k.unwrap_or(d.cohort_size),
                margin: margin.unwrap_or(d.margin),
                n_sub: bank.n_sub(),
                aic_scale: delta.unwrap_or(d.aic_scale),
                aic_weight: aic_weight.unwrap_or(d.aic_weight),
                cllr_weight: cllr_weight.unwrap_or(d.cllr_weight),
                speakers_per_batch: spb.unwrap_or(d.speakers_per_batch),
                epochs: epochs.unwrap_or(d.epochs),
                learning_rate: lr.unwrap_or(d.learning_rate),
                seed: seed.unwrap_or(d.seed),
                margin_space: margin_space.unwrap_or(d.margin_space),
                select: select.unwrap_or(d.select),
                positive_target_cllr: positive_target,
                variant: variant.unwrap_or(d.variant),
                ..d
            };
            let pool = pool_for_bank(&store, &bank)?;
            Trainer::new(pool, bank, tc)?
        }
        b"CNCK" => {
            if lr.is_some()
                || k.is_some()
                || margin.is_some()
                || margin_space.is_some()
                || subcenters.is_some()
                || delta.is_some()
                || aic_weight.is_some()
                || cllr_weight.is_some()
                || variant.is_some()
                || spb.is_some()
                || seed.is_some()
                || select.is_some()
                || positive_target
            {
                return Err(CliError::Usage(
                    "resuming from a checkpoint: hyperparameters are fixed by it \
                     (only --epochs, --out and --bank-out apply)"
                        .into(),
                ));
            }
            let mut data = load_checkpoint(&bank_path)?;
            if let Some(e) = epochs {
                if e < data.epoch {
                    return Err(CliError::Usage(format!(
                        "checkpoint is already at epoch {}; cannot train to {e}",
                        data.epoch
                    )));
                }
                data.cfg.epochs = e;
            }
            let pool = pool_for_bank(&store, &data.bank)?;
            resume_trainer(data, pool)?
        }
        _ => {
            return Err(CliError::Data(format!(
                "{}: not a cohort bank or trainer checkpoint",
                bank_path.display()
            )))
        }
    };

    let total = trainer.cfg.epochs;
    while trainer.epoch < total {
        let s = trainer.run_epoch()?;
        println!(
            "epoch {:>3}/{}  lr {:.3e}  loss {:.6}  cllr {:.6}  aic {:.6}  leaks {}  floor-hits {}",
            s.epoch + 1,
            total,
            s.lr,
            s.mean_total,
            s.mean_cllr,
            s.mean_aic,
            s.own_class_leaks,
            s.std_floor_hits
        );
        save_atomic(&out, &trainer_state(&trainer))?;
    }
    // Covers --epochs 0 (and rewrites the last state, which is idempotent).
    save_atomic(&out, &trainer_state(&trainer))?;
    write_bank(&bank_out, &trainer.bank)?;
    println!("checkpoint  {}  (epoch {})", out.display(), trainer.epoch);
    println!("bank        {}", bank_out.display());
    Ok(())
}

/// Training embeddings restricted to the bank's speakers, failing loudly
/// when the archive does not cover all of them.
fn pool_for_bank(store: &EmbeddingStore, bank: &ImpostorBank) -> CliResult<TrainingPool> {
    let names: Vec<String> = bank.speakers().iter().map(|s| s.name.clone()).collect();
    let labeled = store.labeled_for_speakers(&names);
    if labeled.is_empty() {
        return Err(CliError::Data(
            "archive contains no utterances of the bank's speakers".into(),
        ));
    }
    let pool = TrainingPool::from_labeled(&labeled)?;
    if pool.len() != bank.len() {
        return Err(CliError::Data(format!(
            "archive covers {} of the bank's {} speakers",
            pool.len(),
            bank.len()
        )));
    }
    Ok(pool)
}

fn save_atomic(path: &Path, data: &CheckpointData) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    save_checkpoint(&tmp, data)?;
    std::fs::rename(&tmp, path).map_err(Error::from)?;
    Ok(())
}

pub fn score(args: ScoreArgs, cfg: &mut ConfigFile) -> CliResult<()> {
    let method = NormMethod::parse(&cfg.require::<String>(args.method, "method")?)?;
    let embeddings: PathBuf = cfg.require(args.embeddings, "embeddings")?;
    let trials_path: PathBuf = cfg.require(args.trials, "trials")?;
    let out: PathBuf = cfg.require(args.out, "out")?;
    let cohort: Option<PathBuf> = cfg.resolve_opt(args.cohort, "cohort")?;
    let k_flag: Option<usize> = cfg.resolve_opt(args.k, "k")?;
    let select_flag = cfg
        .resolve_opt::<String>(args.select, "select")?
        .as_deref()
        .map(Select::parse)
        .transpose()?;

    let store = EmbeddingStore::load(&embeddings)?;
    let trials = parse_trials(&trials_path)?;
    let lookup = |id: &str| store.get(id);

    let scores = match &cohort {
        None if method == NormMethod::None => raw_scores(&store, &trials)?,
        None => {
            return Err(CliError::Usage(format!(
                "method {} needs --cohort (a bank or checkpoint)",
                method.name()
            )))
        }
        Some(path) => {
            let (bank, lwb, ckpt_select, ckpt_k) = load_cohort(path, method)?;
            let select = match (select_flag, ckpt_select) {
                (Some(s), Some(cs)) if s != cs => {
                    return Err(CliError::Usage(format!(
                        "--select {} conflicts with the checkpoint's pooling ({})",
                        s.name(),
                        cs.name()
                    )))
                }
                (Some(s), _) => s,
                (None, Some(cs)) => cs,
                (None, None) => Select::Min,
            };
            let k = k_flag.or(ckpt_k).unwrap_or(400);
            if method.is_trainable() {
                score_trials_trained(method, k, &bank, &lwb, select, &trials, lookup)?
            } else {
                score_trials_classic(
                    method,
                    method.needs_k().then_some(k),
                    &bank,
                    &trials,
                    lookup,
                )?
            }
        }
    };
    write_scores(&out, &trials, &scores)?;
    println!(
        "scores  {}  ({} trials, method {})",
        out.display(),
        trials.len(),
        method.name()
    );
    Ok(())
}

/// Load `--cohort`: a plain bank carries centers only; a checkpoint also
/// carries the gate parameters and the training-time pooling/cohort-size.
fn load_cohort(
    path: &Path,
    method: NormMethod,
) -> CliResult<(ImpostorBank, LwbParams, Option<Select>, Option<usize>)> {
    match &sniff_magic(path)? {
        b"CNBK" => {
            if method == NormMethod::LwbTas {
                return Err(CliError::Usage(
                    "method lwb_tas needs a trainer checkpoint (its gate parameters \
                     are trained state); got a plain bank"
                        .into(),
                ));
            }
            Ok((read_bank(path)?, LwbParams::default(), None, None))
        }
        b"CNCK" => {
            let d = load_checkpoint(path)?;
            Ok((d.bank, d.lwb, Some(d.cfg.select), Some(d.cfg.cohort_size)))
        }
        _ => Err(CliError::Data(format!(
            "{}: not a cohort bank or trainer checkpoint",
            path.display()
        ))),
    }
}

/// Plain cosine scoring (method `none` without a cohort): average the
/// enrollment embeddings, then cosine against the test embedding — the
/// same arithmetic the cohort pipeline applies to its raw score.
fn raw_scores(store: &EmbeddingStore, trials: &TrialList) -> CliResult<Vec<f64>> {
    trials
        .iter()
        .map(|t| {
            let embs: Vec<Embedding> = t
                .enroll_ids
                .iter()
                .map(|id| {
                    store
                        .get(id)
                        .cloned()
                        .ok_or_else(|| Error::UnknownUtterance(id.clone()))
                })
                .collect::<Result<_, _>>()?;
            let e = average_enrollment(&embs)?;
            let tv = store
                .get(&t.test_id)
                .ok_or_else(|| Error::UnknownUtterance(t.test_id.clone()))?;
            Ok(cosine(&e, tv)?)
        })
        .collect()
}

pub fn eval(args: EvalArgs, cfg: &mut ConfigFile) -> CliResult<()> {
    let scores_path: PathBuf = cfg.require(args.scores, "scores")?;
    let trials_path: PathBuf = cfg.require(args.trials, "trials")?;
    let params = DcfParams {
        p_target: cfg.resolve(args.p_target, "p-target", 0.01)?,
        c_miss: cfg.resolve(args.c_miss, "c-miss", 1.0)?,
        c_fa: cfg.resolve(args.c_fa, "c-fa", 1.0)?,
    };
    let det_out: Option<PathBuf> = cfg.resolve_opt(args.det_out, "det-out")?;

    let rows = read_scores(&scores_path)?;
    let trials = parse_trials(&trials_path)?;
    if rows.len() != trials.len() {
        return Err(CliError::Data(format!(
            "{} score row(s) vs {} trial(s)",
            rows.len(),
            trials.len()
        )));
    }
    let mut scores = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (i, (row, t)) in rows.iter().zip(&trials).enumerate() {
        if row.0 != t.enroll_key() || row.1 != t.test_id {
            return Err(CliError::Data(format!(
                "row {}: score file has ({} {}) but trial list has ({} {})",
                i + 1,
                row.0,
                row.1,
                t.enroll_key(),
                t.test_id
            )));
        }
        scores.push(row.2);
        labels.push(trial_label(t, i)?);
    }
    let set = ScoredTrialSet::new(scores, labels)?;
    println!(
        "trials   {} ({} target / {} non-target)",
        trials.len(),
        set.n_target(),
        set.n_nontarget()
    );
    println!("eer_pct  {}", format_sig9(eer(&set)? * 100.0));
    println!("min_dcf  {}", format_sig9(min_dcf(&set, &params)?));
    println!("cllr     {}", format_sig9(cllr_metric(&set)?));
    if let Some(p) = det_out {
        let pts = det_points(&set)?;
        std::fs::write(&p, det_csv(&pts)).map_err(Error::from)?;
        println!("det_csv  {}  ({} points)", p.display(), pts.len());
    }
    Ok(())
}

fn trial_label(t: &cohort_norm::types::Trial, index: usize) -> CliResult<bool> {
    match t.label {
        TrialLabel::Target => Ok(true),
        TrialLabel::NonTarget => Ok(false),
        TrialLabel::Unlabeled => Err(CliError::Data(format!(
            "trial {} is unlabeled; evaluation needs 1/0 labels",
            index + 1
        ))),
    }
}

struct ReportRow {
    method: NormMethod,
    k: Option<usize>,
    eer_pct: f64,
    min_dcf: f64,
    cllr: f64,
}

pub fn compare(args: CompareArgs, cfg: &mut ConfigFile) -> CliResult<()> {
    let t0 = Instant::now();
    let embeddings: PathBuf = cfg.require(args.embeddings, "embeddings")?;
    let manifest_path: PathBuf = cfg.require(args.manifest, "manifest")?;
    let trials_path: PathBuf = cfg.require(args.trials, "trials")?;
    let methods_str = cfg.resolve(
        args.methods,
        "methods",
        "none,snorm,asnorm1,asnorm2,lie_tas".to_string(),
    )?;
    let k_str = cfg.resolve(args.k_sweep, "k-sweep", "50,100,200,400".to_string())?;
    let out_csv: Option<PathBuf> = cfg.resolve_opt(args.out, "out")?;
    let params = DcfParams {
        p_target: cfg.resolve(args.p_target, "p-target", 0.01)?,
        c_miss: 1.0,
        c_fa: 1.0,
    };

    let d = TrainConfig::default();
    let epochs = cfg.resolve(args.epochs, "epochs", d.epochs)?;
    let lr = cfg.resolve(args.lr, "lr", d.learning_rate)?;
    let margin = cfg.resolve(args.margin, "margin", d.margin)?;
    let margin_space = cfg
        .resolve_opt::<String>(args.margin_space, "margin-space")?
        .as_deref()
        .map(MarginSpace::parse)
        .transpose()?
        .unwrap_or(d.margin_space);
    let subcenters = cfg.resolve(args.subcenters, "subcenters", d.n_sub)?;
    let delta = cfg.resolve(args.delta, "delta", d.aic_scale)?;
    let aic_weight = cfg.resolve(args.aic_weight, "aic-weight", d.aic_weight)?;
    let cllr_weight = cfg.resolve(args.cllr_weight, "cllr-weight", d.cllr_weight)?;
    let spb = cfg.resolve(args.spb, "spb", d.speakers_per_batch)?;
    let seed = cfg.resolve(args.seed, "seed", d.seed)?;
    let select = cfg
        .resolve_opt::<String>(args.select, "select")?
        .as_deref()
        .map(Select::parse)
        .transpose()?
        .unwrap_or(d.select);
    let positive_target = cfg.resolve_switch(args.positive_target_cllr, "positive-target-cllr")?;

    let methods: Vec<NormMethod> = methods_str
        .split(',')
        .map(|s| NormMethod::parse(s))
        .collect::<Result<_, _>>()?;
    let ks = parse_usize_list(&k_str, "k-sweep")?;
    if methods.is_empty() {
        return Err(CliError::Usage("--methods must name at least one method".into()));
    }
    if ks.is_empty() && methods.iter().any(|m| m.needs_k()) {
        return Err(CliError::Usage(
            "--k-sweep must carry at least one size for adaptive methods".into(),
        ));
    }

    let store = EmbeddingStore::load(&embeddings)?;
    let manifest = SplitManifest::read(&manifest_path)?;
    let trials = parse_trials(&trials_path)?;
    let labels: Vec<bool> = trials
        .iter()
        .enumerate()
        .map(|(i, t)| trial_label(t, i))
        .collect::<CliResult<_>>()?;
    let labeled = store.labeled_for_speakers(&manifest.train);
    if labeled.is_empty() {
        return Err(CliError::Data(
            "archive contains no utterances of the manifest's [train] speakers".into(),
        ));
    }
    let lookup = |id: &str| store.get(id);

    let classic_pool = TrainingPool::from_labeled(&labeled)?;
    let classic_bank = init_lies(&classic_pool, 1, &mut Rng::new(seed, Stream::Init))?;

    let n_target = labels.iter().filter(|l| **l).count();
    println!("# embeddings {}  dim {}", embeddings.display(), store.dim());
    println!(
        "# cohort {} speakers  trials {} ({} target / {} non-target)",
        classic_bank.len(),
        trials.len(),
        n_target,
        trials.len() - n_target
    );
    println!(
        "# seed {}  epochs {}  spb {}  subcenters {}  margin {}  select {}",
        seed,
        epochs,
        spb,
        subcenters,
        margin,
        select.name()
    );

    let mut rows = Vec::new();
    for m in &methods {
        if !m.needs_k() {
            let scores = score_trials_classic(*m, None, &classic_bank, &trials, lookup)?;
            rows.push(report_row(*m, None, scores, &labels, &params)?);
        } else if !m.is_trainable() {
            for &k in &ks {
                let scores = score_trials_classic(*m, Some(k), &classic_bank, &trials, lookup)?;
                rows.push(report_row(*m, Some(k), scores, &labels, &params)?);
            }
        } else {
            for &k in &ks {
                let tc = TrainConfig {
                    cohort_size: k,
                    margin,
                    n_sub: subcenters,
                    aic_scale: delta,
                    aic_weight,
                    cllr_weight,
                    speakers_per_batch: spb,
                    epochs,
                    learning_rate: lr,
                    seed,
                    margin_space,
                    select,
                    positive_target_cllr: positive_target,
                    variant: if *m == NormMethod::LwbTas {
                        Variant::Lwb
                    } else {
                        Variant::Lie
                    },
                    ..TrainConfig::default()
                };
                let pool = TrainingPool::from_labeled(&labeled)?;
                let bank0 = init_lies(&pool, subcenters, &mut Rng::new(seed, Stream::Init))?;
                let mut trainer = Trainer::new(pool, bank0, tc)?;
                while trainer.epoch < epochs {
                    let s = trainer.run_epoch()?;
                    eprintln!(
                        "[{} k={}] epoch {:>3}/{}  loss {:.6}  cllr {:.6}  aic {:.6}",
                        m.name(),
                        k,
                        s.epoch + 1,
                        epochs,
                        s.mean_total,
                        s.mean_cllr,
                        s.mean_aic
                    );
                }
                let scores = score_trials_trained(
                    *m,
                    k,
                    &trainer.bank,
                    &trainer.lwb,
                    select,
                    &trials,
                    lookup,
                )?;
                rows.push(report_row(*m, Some(k), scores, &labels, &params)?);
            }
        }
    }

    println!(
        "{:<10} {:<6} {:<16} {:<16} {}",
        "method", "k", "eer_pct", "min_dcf", "cllr"
    );
    for r in &rows {
        println!(
            "{:<10} {:<6} {:<16} {:<16} {}",
            r.method.name(),
            k_column(r.k),
            format_sig9(r.eer_pct),
            format_sig9(r.min_dcf),
            format_sig9(r.cllr)
        );
    }
    if let Some(p) = &out_csv {
        let mut csv = String::from("method,k,eer_pct,min_dcf,cllr\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.method.name(),
                k_column(r.k),
                format_sig9(r.eer_pct),
                format_sig9(r.min_dcf),
                format_sig9(r.cllr)
            ));
        }
        std::fs::write(p, csv).map_err(Error::from)?;
        println!("# csv {}", p.display());
    }
    println!("# wall-time {:.1} s", t0.elapsed().as_secs_f64());
    Ok(())
}

fn k_column(k: Option<usize>) -> String {
    k.map_or_else(|| "-".to_string(), |k| k.to_string())
}

fn report_row(
    method: NormMethod,
    k: Option<usize>,
    scores: Vec<f64>,
    labels: &[bool],
    params: &DcfParams,
) -> CliResult<ReportRow> {
    let set = ScoredTrialSet::new(scores, labels.to_vec())?;
    Ok(ReportRow {
        method,
        k,
        eer_pct: eer(&set)? * 100.0,
        min_dcf: min_dcf(&set, params)?,
        cllr: cllr_metric(&set)?,
    })
}

fn parse_usize_list(s: &str, flag: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>().map_err(|e| {
                CliError::Usage(format!("--{flag} entry `{t}`: {e}"))
            })
        })
        .collect()
}
