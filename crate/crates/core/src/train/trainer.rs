use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{adam_step, clip_global_norm, AdamState, Tape, Tensor};
use crate::text::{
    encode_all, interleave, interleave_rebalanced, load_tsv, make_batches, Batch, ConversationPair, EncodedPair,
    Language, Vocabulary,
};
use crate::train::checkpoint::Checkpoint;
use crate::train::config::TrainConfig;

/// Vocabularies and encoded corpora for each language of a run.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub vocabs: [Option<Vocabulary>; 2],
    pub train: [Vec<EncodedPair>; 2],
    pub valid: [Vec<EncodedPair>; 2],
}

impl TrainData {
    /// Builds one vocabulary per trained language from its training pairs
    /// (shared by that language's encoder and decoder) and encodes both splits.
    pub fn from_pairs(
        config: &TrainConfig,
        train: [Vec<ConversationPair>; 2],
        valid: [Vec<ConversationPair>; 2],
    ) -> Result<Self> {
        let mut data = TrainData::default();
        for lang in config.languages() {
            let i = lang.index();
            let vocab = Vocabulary::build(&train[i], config.vocab_size)?;
            data.train[i] = encode_all(&train[i], &vocab);
            data.valid[i] = encode_all(&valid[i], &vocab);
            data.vocabs[i] = Some(vocab);
        }
        if data.vocabs.iter().all(Option::is_none) {
            return Err(Error::Config("no training corpus configured".into()));
        }
        Ok(data)
    }

    pub fn load(config: &TrainConfig) -> Result<Self> {
        let mut train: [Vec<ConversationPair>; 2] = Default::default();
        let mut valid: [Vec<ConversationPair>; 2] = Default::default();
        for lang in config.languages() {
            let i = lang.index();
            let path = config.train[i]
                .as_ref()
                .ok_or_else(|| Error::Config(format!("no training corpus for {lang}")))?;
            train[i] = load_tsv(path, lang)?;
            if let Some(v) = &config.valid[i] {
                valid[i] = load_tsv(v, lang)?;
            }
        }
        TrainData::from_pairs(config, train, valid)
    }

    pub fn vocab_sizes(&self) -> [Option<usize>; 2] {
        [0, 1].map(|i| self.vocabs[i].as_ref().map(Vocabulary::len))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
        })
    }
}

/// One line of the metric history.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub language: Language,
    pub split: Split,
    pub loss: f64,
    pub perplexity: f64,
}

pub const METRICS_HEADER: &str = "epoch,lang,split,loss,perplexity";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{:?},{:?}\n", r.epoch, r.language, r.split, r.loss, r.perplexity));
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("metric history header missing".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad metric row `{l}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(MetricRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                language: f[1].parse()?,
                split: match f[2] {
                    "train" => Split::Train,
                    "valid" => Split::Valid,
                    _ => return Err(bad()),
                },
                loss: f[3].parse().map_err(|_| bad())?,
                perplexity: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Token-weighted NLL over a corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllSummary {
    pub loss: f64,
    pub tokens: usize,
    pub perplexity: f64,
}

/// Teacher-forced mean per-token NLL and perplexity of one language's pairs.
pub fn corpus_nll(params: &ModelParams, pairs: &[EncodedPair], batch_size: usize, max_len: usize) -> Result<NllSummary> {
    if pairs.is_empty() {
        return Err(Error::Empty("validation corpus"));
    }
    let mut total = 0.0;
    let mut tokens = 0;
    for batch in make_batches(pairs, batch_size, max_len)? {
        let n = batch.target_tokens();
        total += params.joint_loss(&batch)? * n as f64;
        tokens += n;
    }
    let loss = total / tokens as f64;
    Ok(NllSummary {
        loss,
        tokens,
        perplexity: loss.exp(),
    })
}

/// Per-language perplexity of a (possibly bilingual) corpus.
pub fn validate(
    params: &ModelParams,
    corpus: &[EncodedPair],
    batch_size: usize,
    max_len: usize,
) -> Result<BTreeMap<Language, NllSummary>> {
    if corpus.is_empty() {
        return Err(Error::Empty("validation corpus"));
    }
    let mut by_lang: BTreeMap<Language, Vec<EncodedPair>> = BTreeMap::new();
    for p in corpus {
        by_lang.entry(p.language).or_default().push(p.clone());
    }
    by_lang
        .into_iter()
        .map(|(l, pairs)| Ok((l, corpus_nll(params, &pairs, batch_size, max_len)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStop {
    pub best_score: f64,
    pub best_epoch: usize,
    pub stale_epochs: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            best_score: f64::INFINITY,
            best_epoch: 0,
            stale_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based epoch number.
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: [Option<f64>; 2],
    pub valid: [Option<NllSummary>; 2],
    /// Mean over languages of the validation loss (training loss when no
    /// validation data exists); drives early stopping.
    pub score: f64,
    /// Sum over the epoch's batches of the shared bank's gradient norm,
    /// split by the batch's language.
    pub shared_grad: [f64; 2],
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub reports: Vec<EpochReport>,
}

/// Epoch loop over interleaved monolingual batches with one Adam step per batch.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<MetricRow>,
    pub early_stop: EarlyStop,
    pub best_params: Vec<Tensor>,
    pub vocabs: [Option<Vocabulary>; 2],
    /// Loss of every optimizer step taken by this trainer instance.
    pub step_losses: Vec<f64>,
}

fn shuffle_rng(seed: u64, epoch: usize, lang: Language) -> ChaCha8Rng {
    let mix = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((epoch as u64) << 1 | lang.index() as u64);
    ChaCha8Rng::seed_from_u64(mix)
}

impl Trainer {
    pub fn new(config: TrainConfig, data: &TrainData) -> Result<Self> {
        config.validate()?;
        let model_config = config.model_config(data.vocab_sizes());
        let params = ModelParams::new(model_config, config.seed)?;
        let adam = AdamState::new(config.adam(), params.store.tensors());
        Ok(Trainer {
            best_params: params.store.tensors().to_vec(),
            config,
            params,
            adam,
            epoch: 0,
            history: Vec::new(),
            early_stop: EarlyStop::default(),
            vocabs: data.vocabs.clone(),
            step_losses: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        let best_params = ckpt
            .best_params
            .clone()
            .unwrap_or_else(|| ckpt.params.store.tensors().to_vec());
        Trainer {
            config: ckpt.train_config,
            params: ckpt.params,
            adam: ckpt.adam,
            epoch: ckpt.epoch,
            history: ckpt.history,
            early_stop: ckpt.early_stop,
            best_params,
            vocabs: ckpt.vocabs,
            step_losses: Vec::new(),
        }
    }

    /// State after the last completed epoch, including the best parameters so
    /// far; resuming from it continues the run exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            train_config: self.config.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            vocabs: self.vocabs.clone(),
            early_stop: self.early_stop,
            best_params: Some(self.best_params.clone()),
        }
    }

    /// The best parameters so far as a standalone checkpoint.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut params = self.params.clone();
        for (dst, src) in params.store.tensors_mut().iter_mut().zip(&self.best_params) {
            *dst = src.clone();
        }
        Checkpoint {
            params,
            best_params: None,
            epoch: self.early_stop.best_epoch,
            ..self.checkpoint()
        }
    }

    fn languages(&self) -> Vec<Language> {
        self.params.languages()
    }

    /// The epoch's batch order: per-language shuffled batches, alternating
    /// languages batch by batch.
    pub fn schedule(&self, data: &TrainData, epoch: usize) -> Result<Vec<Batch>> {
        let mut streams: [Vec<Batch>; 2] = Default::default();
        for lang in self.languages() {
            let mut pairs = data.train[lang.index()].clone();
            pairs.shuffle(&mut shuffle_rng(self.config.seed, epoch, lang));
            streams[lang.index()] = make_batches(&pairs, self.config.batch_size, self.config.max_len)?;
        }
        let [a, b] = streams;
        if self.config.rebalance {
            interleave_rebalanced(a, b)
        } else {
            interleave(a, b)
        }
    }

    /// Forward, backward, clip and Adam update on one batch. Returns the loss
    /// and the shared bank's (pre-clipping) gradient norm.
    pub fn step(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let bound = self.params.store.bind(&mut tape);
        let loss_var = self.params.batch_loss(&mut tape, &bound, batch)?;
        let loss = tape.value(loss_var).item();
        if !loss.is_finite() {
            return Ok((loss, 0.0));
        }
        let mut grads = tape.backward(loss_var)?;
        let mut flat: Vec<Vec<f64>> = bound
            .vars()
            .iter()
            .zip(self.params.store.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        drop(tape);
        let shared_norm = self
            .params
            .shared_bank()
            .map(|bank| {
                bank.blocks
                    .iter()
                    .flat_map(|blk| [blk.keys, blk.values])
                    .flat_map(|id| flat[id.index()].iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt()
            })
            .unwrap_or(0.0);
        clip_global_norm(&mut flat, self.config.clip_norm);
        adam_step(self.params.store.tensors_mut(), &flat, &mut self.adam)?;
        self.step_losses.push(loss);
        Ok((loss, shared_norm))
    }

    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochReport> {
        let epoch = self.epoch + 1;
        let schedule = self.schedule(data, self.epoch)?;
        let mut sums = [0.0f64; 2];
        let mut tokens = [0usize; 2];
        let mut shared_grad = [0.0; 2];
        for (i, batch) in schedule.iter().enumerate() {
            let (loss, shared_norm) = self.step(batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: i, value: loss });
            }
            let l = batch.language.index();
            let n = batch.target_tokens();
            sums[l] += loss * n as f64;
            tokens[l] += n;
            shared_grad[l] += shared_norm;
        }

        let mut train_loss = [None, None];
        let mut valid = [None, None];
        let mut scores = Vec::new();
        for lang in self.languages() {
            let i = lang.index();
            if tokens[i] > 0 {
                let loss = sums[i] / tokens[i] as f64;
                train_loss[i] = Some(loss);
                self.history.push(MetricRow {
                    epoch,
                    language: lang,
                    split: Split::Train,
                    loss,
                    perplexity: loss.exp(),
                });
            }
            if !data.valid[i].is_empty() {
                let s = corpus_nll(&self.params, &data.valid[i], self.config.batch_size, self.config.max_len)?;
                if !s.loss.is_finite() {
                    return Err(Error::Divergence { epoch, batch: schedule.len(), value: s.loss });
                }
                valid[i] = Some(s);
                scores.push(s.loss);
                self.history.push(MetricRow {
                    epoch,
                    language: lang,
                    split: Split::Valid,
                    loss: s.loss,
                    perplexity: s.perplexity,
                });
            }
        }
        if scores.is_empty() {
            scores.extend(train_loss.iter().flatten());
        }
        let score = scores.iter().sum::<f64>() / scores.len() as f64;
        let improved = score < self.early_stop.best_score;
        if improved {
            self.early_stop = EarlyStop {
                best_score: score,
                best_epoch: epoch,
                stale_epochs: 0,
            };
            self.best_params = self.params.store.tensors().to_vec();
        } else {
            self.early_stop.stale_epochs += 1;
        }
        self.epoch = epoch;
        Ok(EpochReport {
            epoch,
            steps: schedule.len(),
            train_loss,
            valid,
            score,
            shared_grad,
            improved,
        })
    }

    pub fn should_stop(&self) -> bool {
        self.epoch >= self.config.max_epochs || self.early_stop.stale_epochs >= self.config.patience.max(1)
    }

    /// Trains until `max_epochs` or until `patience` epochs pass without a
    /// better score.
    pub fn run(&mut self, data: &TrainData) -> Result<TrainOutcome> {
        self.run_with(data, |_| {})
    }

    pub fn run_with(&mut self, data: &TrainData, mut on_epoch: impl FnMut(&EpochReport)) -> Result<TrainOutcome> {
        let start = self.epoch;
        let mut reports = Vec::new();
        while !self.should_stop() {
            let r = self.run_epoch(data)?;
            on_epoch(&r);
            reports.push(r);
        }
        Ok(TrainOutcome {
            best: self.best_checkpoint(),
            last: self.checkpoint(),
            epochs_run: self.epoch - start,
            stopped_early: self.epoch < self.config.max_epochs,
            reports,
        })
    }
}

/// Builds and trains a model from in-memory corpora.
pub fn train(config: TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    Trainer::new(config, data)?.run(data)
}
