use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use querylab::corpus::{
    read_corpus, synthesize_corpus, synthesize_gazetteer, write_corpus, Gazetteer, QueryClickPair,
};
use querylab::eval::{self, ProbeReport, ProbeSets, TextEncoder};
use querylab::numerics::RngStream;
use querylab::taskgen::{write_shard, BatchStats, PretrainData};
use querylab::text::Vocab;
use querylab::train::{
    ablation_suite_with, AblationManifest, Checkpoint, LogRecord, RunConfig, Trainer,
};

const CONFIG: &str = "config.toml";
const GAZETTEER: &str = "gazetteer.tsv";
const CORPUS: &str = "corpus.jsonl";
const TRAIN_PAIRS: &str = "train.jsonl";
const HELDOUT_PAIRS: &str = "heldout.jsonl";
const VOCAB: &str = "vocab.txt";
const PREP_STATS: &str = "prep_stats.json";
const SHARD: &str = "shard-000.jsonl";
const SHARD_SIZE: usize = 256;
const PROBES: &str = "probes";
const TRAIN_DIR: &str = "train";
const ABLATION_DIR: &str = "ablation";
const EVAL_REPORT: &str = "eval_report.jsonl";
const ABLATION_REPORT: &str = "ablation_report.jsonl";
const EMBEDDINGS: &str = "poi_embeddings.tsv";

#[derive(Parser)]
#[command(name = "querylab", about = "Query-understanding pretraining lab on synthetic search logs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults to `<out-dir>/config.toml` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the corpus and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the gazetteer and the query-click corpus.
    Synth,
    /// Split off held-out items, build the vocabulary, an example shard and probe sets.
    Prep,
    /// Joint pretraining.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Full model plus one leave-one-out model per task.
    Ablate {
        /// Keep runs whose final checkpoint already exists.
        #[arg(long)]
        reuse: bool,
    },
    /// Every probe on one checkpoint, or the ablation table.
    Eval {
        #[arg(long, conflicts_with = "ablation")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        ablation: bool,
    },
    /// One probe on one checkpoint.
    Probe {
        kind: ProbeKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeKind {
    Retrieval,
    GeoMask,
    Order,
    Similarity,
    Cluster,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let saved = common.out_dir.join(CONFIG);
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None if saved.exists() => RunConfig::load(&saved)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

fn read_pairs(path: &Path) -> Result<Vec<QueryClickPair>> {
    read_corpus(path).with_context(|| format!("reading {}", path.display()))
}

fn load_gazetteer(out: &Path) -> Result<Gazetteer> {
    let p = out.join(GAZETTEER);
    Gazetteer::load(&p).with_context(|| format!("reading {}", p.display()))
}

fn load_vocab(out: &Path) -> Result<Vocab> {
    let p = out.join(VOCAB);
    Vocab::load(&p).with_context(|| format!("reading {} (run prep first)", p.display()))
}

fn load_data(out: &Path, cfg: &RunConfig) -> Result<(PretrainData, Vocab)> {
    let pairs = read_pairs(&out.join(TRAIN_PAIRS))?;
    let gaz = load_gazetteer(out)?;
    let vocab = load_vocab(out)?;
    let (data, _) = PretrainData::from_corpus(&pairs, &vocab, &gaz, cfg.task.clone())?;
    Ok((data, vocab))
}

/// Short content hash, so reports name a checkpoint independently of its path.
fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect())
}

fn progress(total: usize) -> impl FnMut(&str, &LogRecord) {
    move |run: &str, r: &LogRecord| {
        if r.step.is_multiple_of(500) || r.step == total {
            eprintln!(
                "[{run}] step {}/{total} loss {:.4} lr {:.2e}",
                r.step, r.total, r.lr
            );
        }
    }
}

fn synth(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = &common.out_dir;
    fs::create_dir_all(out)?;
    let gaz = synthesize_gazetteer(&cfg.synth)?;
    let pairs = synthesize_corpus(&cfg.synth, &gaz)?;
    gaz.save(&out.join(GAZETTEER))?;
    write_corpus(&out.join(CORPUS), &pairs)?;
    fs::write(out.join(CONFIG), cfg.to_toml())?;
    eprintln!("wrote {} pairs, {} gazetteer entries", pairs.len(), gaz.entries().len());
    Ok(())
}

fn prep(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = &common.out_dir;
    let pairs = read_pairs(&out.join(CORPUS))?;
    let gaz = load_gazetteer(out)?;
    let (train, heldout) = eval::holdout_split(&pairs, cfg.eval.holdout_fraction, cfg.eval.seed);
    write_corpus(&out.join(TRAIN_PAIRS), &train)?;
    write_corpus(&out.join(HELDOUT_PAIRS), &heldout)?;

    let names = gaz.entries().iter().map(|e| e.name.as_str());
    let texts = train
        .iter()
        .flat_map(|p| [p.query.as_str(), p.item_title.as_str()])
        .chain(names);
    let vocab = Vocab::build(texts);
    vocab.save(&out.join(VOCAB))?;

    let (data, stats) = PretrainData::from_corpus(&train, &vocab, &gaz, cfg.task.clone())?;
    fs::write(out.join(PREP_STATS), serde_json::to_string_pretty(&stats)?)?;
    let mut rng = RngStream::new(cfg.train.seed).derive(0x5a4d);
    let mut bs = BatchStats::default();
    let shard: Vec<_> = (0..SHARD_SIZE.min(data.pairs.len()))
        .map(|i| data.make_example(i, &mut rng, &mut bs))
        .collect();
    write_shard(&out.join(SHARD), &shard)?;

    let probes = eval::build_probe_sets(&heldout, &gaz, &cfg.eval);
    probes.save(&out.join(PROBES))?;
    eprintln!(
        "vocab {} | train pairs {} (kept {}, too long {}) | held-out pairs {} | probes: retrieval {}, geo-mask {}, order {}, pairs {}, pois {}",
        vocab.len(),
        train.len(),
        stats.kept,
        stats.too_long,
        heldout.len(),
        probes.retrieval.probes.len(),
        probes.geo_mask.len(),
        probes.order.len(),
        probes.pairs.len(),
        probes.pois.len()
    );
    Ok(())
}

fn train(common: &Common, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let out = &common.out_dir;
    let (data, vocab) = load_data(out, &cfg)?;
    let mut t = match resume {
        Some(p) => Trainer::resume(&data, Checkpoint::load(p)?)?,
        None => Trainer::new(&data, cfg.encoder_for(vocab.len()), cfg.train.clone())?,
    };
    let total = t.config().total_steps;
    let dir = out.join(TRAIN_DIR);
    let mut log = Vec::new();
    let mut report = progress(total);
    t.run_with(Some(&dir), &mut log, |r| report("train", r))?;
    eprintln!("wrote {}", dir.join("final.ckpt").display());
    Ok(())
}

fn ablate(common: &Common, reuse: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let out = &common.out_dir;
    let (data, vocab) = load_data(out, &cfg)?;
    let total = cfg.train.total_steps;
    let mut report = progress(total);
    let manifest = ablation_suite_with(
        &data,
        &cfg.encoder_for(vocab.len()),
        &cfg.train,
        &out.join(ABLATION_DIR),
        reuse,
        |n, r| report(n, r),
    )?;
    for r in &manifest.runs {
        eprintln!("{} {} {}", r.name, r.tasks, r.checkpoint.display());
    }
    Ok(())
}

fn print_reports(reports: &[ProbeReport]) {
    for r in reports {
        for (k, v) in &r.metrics {
            println!("{:<11} {:<34} {v:.6}", r.task, k);
        }
    }
}

fn default_checkpoint(out: &Path, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| out.join(TRAIN_DIR).join("final.ckpt"))
}

fn evaluate(common: &Common, checkpoint: Option<PathBuf>, ablation: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let out = &common.out_dir;
    let vocab = load_vocab(out)?;
    let probes = ProbeSets::load(&out.join(PROBES))?;
    if ablation {
        let manifest = AblationManifest::load(&out.join(ABLATION_DIR))?;
        let rows = eval::ablation_report(&manifest, &vocab, &probes, cfg.eval.seed)?;
        eval::write_ablation_rows(&out.join(ABLATION_REPORT), &rows)?;
        print!("{}", eval::ablation_table(&rows));
        return Ok(());
    }
    let path = default_checkpoint(out, checkpoint);
    let ckpt = Checkpoint::load(&path)?;
    let reports = eval::evaluate(&ckpt.model, &vocab, &probes, &checkpoint_id(&path)?, cfg.eval.seed)?;
    eval::write_reports(&out.join(EVAL_REPORT), &reports)?;
    print_reports(&reports);
    Ok(())
}

fn probe(common: &Common, kind: ProbeKind, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let out = &common.out_dir;
    let vocab = load_vocab(out)?;
    let probes = ProbeSets::load(&out.join(PROBES))?;
    let path = default_checkpoint(out, checkpoint);
    let ckpt = Checkpoint::load(&path)?;
    let enc = TextEncoder::new(&ckpt.model, &vocab);
    let mut report = match kind {
        ProbeKind::Retrieval => eval::retrieve(&probes.retrieval, &enc)?.1,
        ProbeKind::GeoMask => eval::geo_mask_probe(&probes.geo_mask, &enc)?,
        ProbeKind::Order => eval::order_probe(&probes.order, &enc)?,
        ProbeKind::Similarity => eval::similarity_probe(&probes.pairs, &enc)?,
        ProbeKind::Cluster => {
            let (r, vecs) = eval::cluster_probe(&probes.pois, &enc)?;
            eval::write_embeddings(&out.join(EMBEDDINGS), &probes.pois, &vecs)?;
            r
        }
    };
    report.checkpoint = checkpoint_id(&path)?;
    report.seed = cfg.eval.seed;
    print_reports(&[report]);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let c = &cli.common;
    match cli.cmd {
        Cmd::Synth => synth(c),
        Cmd::Prep => prep(c),
        Cmd::Train { resume } => train(c, resume.as_deref()),
        Cmd::Ablate { reuse } => ablate(c, reuse),
        Cmd::Eval {
            checkpoint,
            ablation,
        } => evaluate(c, checkpoint, ablation),
        Cmd::Probe { kind, checkpoint } => probe(c, kind, checkpoint),
    }
}
