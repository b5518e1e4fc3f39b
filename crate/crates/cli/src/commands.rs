use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use spmem::eval::{
    export_memory_pca, generate, generate_all, generations_tsv, load_generations, pca_csv, Generation, MetricReport,
    Strategy,
};
use spmem::text::synth::{gen_splits, SynthSpec};
use spmem::text::{load_tsv, tokenize, write_tsv, ConversationPair, Language};
use spmem::train::{metrics_csv, Checkpoint, TrainData, Trainer};

use crate::manifest::{sha256_file, RunManifest};
use crate::settings::Settings;
use crate::{Common, EvalArgs, GenerateArgs, InspectArgs, SynthArgs, TrainArgs};

/// Loads settings (defaults, config file, `--set`, `--seed`) and prepares the
/// output directory.
fn prepare(common: &Common) -> Result<Settings> {
    let mut s = Settings::load(common.config.as_deref())?;
    s.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        s.train.seed = seed;
    }
    fs::create_dir_all(&common.out)
        .with_context(|| format!("cannot create output directory {}", common.out.display()))?;
    Ok(s)
}

fn start(command: &str, common: &Common, s: &Settings) -> RunManifest {
    RunManifest::start(command, common.config.as_deref(), s.snapshot(), s.train.seed, &common.out)
}

fn tsv_bytes(pairs: &[ConversationPair]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_tsv(&mut buf, pairs)?;
    Ok(buf)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut s = prepare(&a.common)?;
    if let Some(n) = a.pairs {
        s.synth.pairs = [n, n];
    }
    if let Some(n) = a.pairs_l1 {
        s.synth.pairs[0] = n;
    }
    if let Some(n) = a.pairs_l2 {
        s.synth.pairs[1] = n;
    }
    if let Some(n) = a.valid {
        s.synth.valid = n;
    }
    if let Some(n) = a.test {
        s.synth.test = n;
    }
    if let Some(v) = a.vocab {
        s.synth.vocab = v;
    }
    if let Some(r) = &a.rule {
        s.synth.rule = r.parse()?;
    }
    let mut m = start("synth", &a.common, &s);
    let spec = SynthSpec::new(s.train.seed, s.synth.vocab, s.synth.rule);
    let splits = gen_splits(&spec, s.synth.pairs, s.synth.valid, s.synth.test)?;
    for lang in Language::ALL {
        let i = lang.index();
        let tag = lang.as_str().to_lowercase();
        for (split, pairs) in [("train", &splits.train[i]), ("valid", &splits.valid[i]), ("test", &splits.test[i])] {
            m.write(&format!("{tag}.{split}.tsv"), &tsv_bytes(pairs)?)?;
        }
    }
    let renaming: String = spec.renaming().iter().map(|(a, b)| format!("{a}\t{b}\n")).collect();
    m.write("renaming.tsv", renaming.as_bytes())?;
    m.note("pairs_l1", s.synth.pairs[0]);
    m.note("pairs_l2", s.synth.pairs[1]);
    m.finish()?;
    eprintln!("wrote synthetic corpus to {}", a.common.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut s = prepare(&a.common)?;
    let resume = match &a.resume {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("cannot resume from {}", p.display()))?),
        None => None,
    };
    if let Some(ckpt) = &resume {
        s.train = ckpt.train_config.clone();
    }
    let t = &mut s.train;
    if let Some(k) = a.model {
        t.model = k;
    }
    if let Some(l) = a.monolingual {
        t.monolingual = Some(l);
    }
    if let Some(b) = a.blocks {
        t.mem_blocks = b;
    }
    for (slot, flag) in t.train.iter_mut().zip([&a.train_l1, &a.train_l2]) {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    for (slot, flag) in t.valid.iter_mut().zip([&a.valid_l1, &a.valid_l2]) {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Some(e) = a.epochs {
        t.max_epochs = e;
    }
    if let Some(seed) = a.common.seed {
        t.seed = seed;
    }
    t.validate()?;
    let languages = t.languages();
    if languages.is_empty() {
        bail!("no training corpus given (set train_l1/train_l2 or --train-l1/--train-l2)");
    }
    for lang in &languages {
        let Some(p) = &t.train[lang.index()] else {
            bail!("no training corpus for {lang}");
        };
        if !p.exists() {
            bail!("training corpus {} does not exist", p.display());
        }
    }

    let mut m = start("train", &a.common, &s);
    let data = TrainData::load(&s.train)?;
    let mut trainer = match resume {
        Some(ckpt) => {
            if ckpt.vocabs != data.vocabs {
                bail!("corpora differ from the ones the checkpoint was trained on");
            }
            let mut tr = Trainer::from_checkpoint(ckpt);
            tr.config = s.train.clone();
            tr
        }
        None => Trainer::new(s.train.clone(), &data)?,
    };
    eprintln!(
        "training {} ({} parameters) on {}",
        trainer.params.config.kind,
        trainer.params.parameter_count(),
        languages.iter().map(|l| l.as_str()).collect::<Vec<_>>().join("+")
    );
    let outcome = trainer.run_with(&data, |r| {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        eprintln!(
            "epoch {:>4}  train L1 {} L2 {}  valid L1 {} L2 {}  score {:.4}{}",
            r.epoch,
            fmt(r.train_loss[0]),
            fmt(r.train_loss[1]),
            fmt(r.valid[0].map(|v| v.loss)),
            fmt(r.valid[1].map(|v| v.loss)),
            r.score,
            if r.improved { " *" } else { "" }
        );
    })?;

    m.write("best.ckpt", &outcome.best.to_bytes()?)?;
    m.write("last.ckpt", &outcome.last.to_bytes()?)?;
    m.write("metrics.csv", metrics_csv(&trainer.history).as_bytes())?;
    m.note("model", trainer.params.config.kind.name());
    m.note("parameter_count", trainer.params.parameter_count());
    m.note("fingerprint", trainer.params.config.fingerprint());
    m.note("epochs", trainer.epoch);
    m.note("best_epoch", trainer.early_stop.best_epoch);
    m.note("best_score", trainer.early_stop.best_score);
    m.note("stopped_early", outcome.stopped_early);
    if let Some(&l) = trainer.step_losses.last() {
        m.note("final_step_loss", l);
    }
    m.finish()?;
    Ok(())
}

fn decode_config(s: &mut Settings, beam: Option<usize>, max_len: Option<usize>) -> Result<()> {
    if let Some(w) = beam {
        s.decode.strategy = if w <= 1 { Strategy::Greedy } else { Strategy::Beam(w) };
    }
    if let Some(n) = max_len {
        s.decode.max_len = n;
    }
    s.decode.validate()?;
    Ok(())
}

/// Loads a checkpoint; with a config file, its architecture must match.
fn load_checkpoint(path: &Path, s: &Settings, checked: bool) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    if checked {
        let expected = s.train.model_config(ckpt.params.config.vocab_sizes);
        let found = ckpt.fingerprint();
        if expected.fingerprint() != found {
            return Err(spmem::Error::Fingerprint {
                expected: expected.fingerprint(),
                found,
            }
            .into());
        }
    }
    Ok(ckpt)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut s = prepare(&a.common)?;
    decode_config(&mut s, a.beam, a.max_len)?;
    let mut m = start("eval", &a.common, &s);
    let mut corpora = BTreeMap::new();
    corpora.insert("lang".to_string(), a.lang.to_string());
    let gens = match (&a.generations, &a.checkpoint, &a.test) {
        (Some(g), _, _) => {
            corpora.insert("generations".into(), format!("{} sha256:{}", g.display(), sha256_file(g)?));
            load_generations(g)?
        }
        (None, Some(ck), Some(test)) => {
            let ckpt = load_checkpoint(ck, &s, a.common.config.is_some())?;
            let pairs = load_tsv(test, a.lang)?;
            corpora.insert("checkpoint".into(), format!("{} sha256:{}", ck.display(), sha256_file(ck)?));
            corpora.insert("test".into(), format!("{} sha256:{}", test.display(), sha256_file(test)?));
            generate_all(&ckpt.params, ckpt.vocab(a.lang)?, a.lang, &pairs, &s.decode)?
        }
        _ => bail!("eval needs --checkpoint and --test, or --generations"),
    };
    if gens.is_empty() {
        bail!("nothing to evaluate");
    }
    let report = MetricReport::from_generations(gens, corpora)?;
    m.write("generations.tsv", generations_tsv(&report.generations).as_bytes())?;
    m.write("report.json", (report.to_json()? + "\n").as_bytes())?;
    m.note("bleu_4", report.bleu_4);
    m.note("examples", report.examples);
    m.finish()?;
    eprintln!(
        "BLEU-1 {:.4}  BLEU-2 {:.4}  BLEU-3 {:.4}  BLEU-4 {:.4}  Distinct-1 {:.4}  Distinct-2 {:.4}",
        report.bleu_1, report.bleu_2, report.bleu_3, report.bleu_4, report.distinct_1, report.distinct_2
    );
    Ok(())
}

pub fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let mut s = prepare(&a.common)?;
    decode_config(&mut s, a.beam, a.max_len)?;
    let mut m = start("generate", &a.common, &s);
    let ckpt = load_checkpoint(&a.checkpoint, &s, a.common.config.is_some())?;
    let vocab = ckpt.vocab(a.lang)?;
    let text = fs::read_to_string(&a.input).with_context(|| format!("cannot read {}", a.input.display()))?;
    let mut gens = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let (q, r) = line.split_once('\t').unwrap_or((line, ""));
        let query = tokenize(q);
        if query.is_empty() {
            if line.trim().is_empty() {
                continue;
            }
            bail!("{}:{}: empty query", a.input.display(), n + 1);
        }
        let out = generate(&ckpt.params, a.lang, &vocab.encode(&query), &s.decode)?;
        gens.push(Generation {
            query: query.join(" "),
            hypothesis: vocab.decode(&out).join(" "),
            reference: tokenize(r).join(" "),
        });
    }
    m.write("generations.tsv", generations_tsv(&gens).as_bytes())?;
    m.note("queries", gens.len());
    m.finish()?;
    Ok(())
}

pub fn inspect_mem(a: InspectArgs) -> Result<()> {
    let s = prepare(&a.common)?;
    let mut m = start("inspect-mem", &a.common, &s);
    let ckpt = load_checkpoint(&a.checkpoint, &s, a.common.config.is_some())?;
    let names: Vec<String> = if a.banks.is_empty() {
        ckpt.params.banks().into_iter().map(|(n, _)| n).collect()
    } else {
        a.banks.clone()
    };
    if names.is_empty() {
        bail!("checkpoint has no memory banks ({} model)", ckpt.params.config.kind);
    }
    let mut summary = BTreeMap::new();
    for name in &names {
        let bank = ckpt.params.bank(name)?;
        let proj = export_memory_pca(&ckpt.params.store, bank, a.block)?;
        m.write(&format!("pca-{name}.csv"), pca_csv(&proj).as_bytes())?;
        summary.insert(
            name.clone(),
            serde_json::json!({
                "block_index": a.block,
                "slots": proj.coords.len(),
                "explained_variance_ratio": proj.explained_variance_ratio,
            }),
        );
    }
    m.write("pca-summary.json", (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
    m.note("banks", names);
    m.finish()?;
    Ok(())
}
