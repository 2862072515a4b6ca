//! Command-line pipeline for the sparse retrieval toolkit.
//!
//! Every subcommand reads an optional `--config` file (line-oriented
//! `key = value` with `[section]` headers), then `LSR_*` environment
//! overrides, then repeatable `--set section.key=value` flags. `--seed` and
//! `--out-dir` are universal.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lsr_core::checkpoint::load_checkpoint;
use lsr_core::config::{
    adapter_from_map, encoder_from_map, regularizer_from_map,
    ConfigMap,
};
use lsr_core::data::{
    load_collection, load_qrels, load_queries, load_run, load_teacher_triplets, load_triplets,
    TextTable, Tokenizer,
};
use lsr_core::encoder::{
    count_params, init_adapters, init_backbone, EncoderConfig, TrainMode,
};
use lsr_core::eval::{mrr_at_k, ndcg_at_k, paired_t_test, recall_at_k, MetricSummary};
use lsr_core::index::{build_index, estimate_rflops, InvertedIndex};
use lsr_core::linalg::Precision;
use lsr_core::reranker::{rerank, train_reranker, CrossEncoder, RerankerData};
use lsr_core::sparse::encode_to_sparse;
use lsr_core::synth::{generate, write_dataset, SynthConfig};
use lsr_core::tape::GradCheckConfig;
use lsr_core::trainer::{
    adapt_domain, encode_corpus, run_ablation_suite, AdaptConfig, InBatchNegatives, TestData,
    TrainConfig, TrainData, TrainSetup, TrainTask, Trainer,
};

#[derive(Parser)]
#[command(
    name = "lsr",
    version,
    about = "Learned sparse retrieval: train, index, search, evaluate"
)]
struct Cli {
    /// Configuration file (sections of key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value: section.key=value (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    /// Seed override (wins over [train]/[synth] seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "lsr-out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding collection.tsv, queries.*.tsv, triplets.*.tsv and
    /// qrels.*.txt (the gen-synth layout).
    #[arg(long)]
    data_dir: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// Encoder checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file (defaults to vocab.txt next to the checkpoint).
    #[arg(long)]
    vocab: Option<PathBuf>,
}

impl ModelArgs {
    fn vocab_path(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| {
            self.checkpoint
                .parent()
                .unwrap_or(Path::new("."))
                .join("vocab.txt")
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted relevance.
    GenSynth,
    /// Train a sparse encoder with the contrastive objective.
    Train(DataArgs),
    /// Train with margin distillation from teacher scores.
    Distill(DataArgs),
    /// Encode a collection and build the inverted index.
    Index {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        collection: PathBuf,
        /// Index file to write (default: out-dir/index.bin).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Drop weights below this threshold at index time.
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
    },
    /// Retrieve top-k for a query file, writing a TREC run.
    Search {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 1000)]
        k: usize,
        #[arg(long, default_value = "lsr")]
        tag: String,
        /// Run file to write (default: out-dir/run.txt).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a run against qrels (MRR@10, R@1000, NDCG@10).
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Second run for a paired significance test.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Rescore the top of a run with a cross-encoder checkpoint.
    Rerank {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        collection: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 100)]
        depth: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a cross-encoder reranker (optionally from a first-stage
    /// checkpoint).
    TrainReranker {
        #[command(flatten)]
        data: DataArgs,
        /// First-stage checkpoint to copy the backbone from.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Adapter-layer ablation sweep over removal prefixes.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated removal prefixes, e.g. 0,1,2,3,4,5,6.
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
    },
    /// Domain-adaptation rounds with hard-negative mining.
    Adapt {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 2)]
        rounds: usize,
        #[arg(long, default_value_t = 50)]
        mining_depth: usize,
    },
    /// Estimate retrieval FLOPS of an index against a query sample.
    Rflops {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
    },
    /// Finite-difference check of the full training objective on a toy
    /// model.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_config_map(cli: &Cli) -> Result<ConfigMap> {
    let mut map = match &cli.config {
        Some(path) => ConfigMap::from_file(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ConfigMap::new(),
    };
    map.apply_env();
    for spec in &cli.overrides {
        map.apply_override(spec)?;
    }
    if let Some(seed) = cli.seed {
        map.set("train", "seed", &seed.to_string());
        map.set("synth", "seed", &seed.to_string());
    }
    Ok(map)
}

fn train_config_from_map(map: &ConfigMap) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        learning_rate: map.get_f64("train", "learning_rate", d.learning_rate)?,
        batch_size: map.get_usize("train", "batch_size", d.batch_size)?,
        total_iters: map.get_usize("train", "total_iters", d.total_iters)?,
        warmup_steps: map.get_usize("train", "warmup_steps", d.warmup_steps)?,
        constant_after_warmup: map.get_bool(
            "train",
            "constant_after_warmup",
            d.constant_after_warmup,
        )?,
        eval_every: map.get_usize("train", "eval_every", d.eval_every)?,
        seed: map.get_usize("train", "seed", d.seed as usize)? as u64,
        task: TrainTask::parse(&map.get_str("train", "task", "triplets"))
            .map_err(anyhow::Error::from)?,
        encoder_mode: TrainMode::parse(&map.get_str("train", "mode", "adapter-tune"))
            .map_err(anyhow::Error::from)?,
        bi_adapter: map.get_bool("train", "bi_adapter", false)?,
        in_batch: match map.get_str("train", "in_batch", "full").as_str() {
            "full" => InBatchNegatives::Full,
            "positives-only" => InBatchNegatives::PositivesOnly,
            other => bail!("[train] in_batch: unknown variant `{other}`"),
        },
        epochs: match map.get_usize("train", "epochs", 0)? {
            0 => None,
            n => Some(n),
        },
    })
}

fn synth_config_from_map(map: &ConfigMap) -> Result<SynthConfig> {
    let d = SynthConfig::default();
    Ok(SynthConfig {
        vocab_terms: map.get_usize("synth", "vocab_terms", d.vocab_terms)?,
        num_docs: map.get_usize("synth", "num_docs", d.num_docs)?,
        train_queries: map.get_usize("synth", "train_queries", d.train_queries)?,
        dev_queries: map.get_usize("synth", "dev_queries", d.dev_queries)?,
        test_queries: map.get_usize("synth", "test_queries", d.test_queries)?,
        terms_per_doc: map.get_usize("synth", "terms_per_doc", d.terms_per_doc)?,
        signature_len: map.get_usize("synth", "signature_len", d.signature_len)?,
        relevant_per_query: map.get_usize("synth", "relevant_per_query", d.relevant_per_query)?,
        negatives_per_query: map.get_usize(
            "synth",
            "negatives_per_query",
            d.negatives_per_query,
        )?,
        domain_shift: map.get_f64("synth", "domain_shift", d.domain_shift)?,
        teacher_margin: map.get_f64("synth", "teacher_margin", d.teacher_margin)?,
        seed: map.get_usize("synth", "seed", d.seed as usize)? as u64,
    })
}

/// The on-disk dataset layout produced by gen-synth.
struct Dataset {
    collection: TextTable,
    train_queries: TextTable,
    dev_queries: TextTable,
    test_queries: TextTable,
    train_triplets: Vec<lsr_core::data::TrainingExample>,
    teacher_triplets: Option<Vec<lsr_core::data::TrainingExample>>,
    train_qrels: lsr_core::data::Qrels,
    dev_qrels: lsr_core::data::Qrels,
    test_qrels: lsr_core::data::Qrels,
}

fn load_dataset(dir: &Path, with_teacher: bool) -> Result<Dataset> {
    use lsr_core::synth as s;
    let collection = load_collection(&dir.join(s::COLLECTION_FILE))?;
    let train_queries = load_queries(&dir.join(s::TRAIN_QUERIES_FILE))?;
    let dev_queries = load_queries(&dir.join(s::DEV_QUERIES_FILE))?;
    let test_queries = load_queries(&dir.join(s::TEST_QUERIES_FILE))?;
    let train_triplets = load_triplets(
        &dir.join(s::TRAIN_TRIPLETS_FILE),
        &train_queries,
        &collection,
    )?;
    let teacher_triplets = if with_teacher {
        Some(load_teacher_triplets(
            &dir.join(s::TEACHER_TRIPLETS_FILE),
            &train_queries,
            &collection,
        )?)
    } else {
        None
    };
    Ok(Dataset {
        train_qrels: load_qrels(&dir.join(s::TRAIN_QRELS_FILE))?,
        dev_qrels: load_qrels(&dir.join(s::DEV_QRELS_FILE))?,
        test_qrels: load_qrels(&dir.join(s::TEST_QRELS_FILE))?,
        collection,
        train_queries,
        dev_queries,
        test_queries,
        train_triplets,
        teacher_triplets,
    })
}

fn build_setup(map: &ConfigMap, vocab_size: usize) -> Result<TrainSetup> {
    let mut encoder = encoder_from_map(map)?;
    if encoder.vocab_size == 0 {
        encoder.vocab_size = vocab_size;
    } else if encoder.vocab_size != vocab_size {
        bail!(
            "[encoder] vocab_size {} does not match the built vocabulary ({vocab_size})",
            encoder.vocab_size
        );
    }
    let adapters = adapter_from_map(map, encoder.num_layers)?;
    let regularizer = regularizer_from_map(map)?;
    let train = train_config_from_map(map)?;
    Ok(TrainSetup {
        encoder,
        adapters,
        regularizer,
        train,
    })
}

fn load_model(model: &ModelArgs) -> Result<(lsr_core::checkpoint::Checkpoint, Tokenizer)> {
    let ckpt = load_checkpoint(&model.checkpoint)
        .with_context(|| format!("loading checkpoint {}", model.checkpoint.display()))?;
    let vocab_path = model.vocab_path();
    let tokenizer = Tokenizer::load(&vocab_path)
        .with_context(|| format!("loading vocabulary {}", vocab_path.display()))?;
    if tokenizer.vocab_size() != ckpt.encoder.vocab_size {
        bail!(
            "vocabulary has {} entries but the checkpoint expects {}",
            tokenizer.vocab_size(),
            ckpt.encoder.vocab_size
        );
    }
    Ok((ckpt, tokenizer))
}

fn run_train(cli: &Cli, data_args: &DataArgs, distill: bool) -> Result<()> {
    let map = load_config_map(cli)?;
    let mut ds = load_dataset(&data_args.data_dir, distill)?;
    let tokenizer = Tokenizer::from_texts(ds.collection.iter().map(|(_, t)| t), true);
    let mut setup = build_setup(&map, tokenizer.vocab_size())?;
    if distill {
        setup.train.task = TrainTask::Distill;
        // Distillation defaults unless the config overrides them.
        if map.get("regularizer", "lambda_q").is_none() {
            setup.regularizer.lambda_q = lsr_core::objectives::RegularizerConfig::distillation().lambda_q;
        }
        if map.get("regularizer", "lambda_d").is_none() {
            setup.regularizer.lambda_d = lsr_core::objectives::RegularizerConfig::distillation().lambda_d;
        }
    }

    let triplets = if distill {
        ds.teacher_triplets.take().expect("loaded with teacher")
    } else {
        ds.train_triplets.clone()
    };
    let mut store = init_backbone(&setup.encoder, setup.train.seed)?;
    init_adapters(&mut store, &setup.encoder, &setup.adapters, setup.train.seed)?;

    std::fs::create_dir_all(&cli.out_dir)?;
    tokenizer.save(&cli.out_dir.join("vocab.txt"))?;
    let counts = {
        let mut probe = store.clone();
        lsr_core::encoder::set_trainable(&mut probe, &setup.adapters, setup.train.encoder_mode);
        count_params(&probe)
    };
    println!(
        "model: {} params, {} trainable ({:.2}%)",
        counts.total,
        counts.trainable,
        100.0 * counts.fraction()
    );

    let mut trainer = Trainer::new(setup, store)?;
    let data = TrainData {
        tokenizer: &tokenizer,
        collection: &ds.collection,
        queries: &ds.train_queries,
        triplets: &triplets,
        dev_queries: &ds.dev_queries,
        dev_qrels: &ds.dev_qrels,
        train_qrels: Some(&ds.train_qrels),
    };
    let best = trainer.train(data, &cli.out_dir)?;
    println!(
        "best checkpoint: step {} dev MRR@10 {:.4} -> {}",
        best.step,
        best.mrr10,
        best.path.display()
    );
    Ok(())
}

fn encode_query_table(
    ckpt: &lsr_core::checkpoint::Checkpoint,
    tokenizer: &Tokenizer,
    queries: &TextTable,
) -> Result<Vec<(String, lsr_core::sparse::SparseVector)>> {
    let enc = lsr_core::encoder::Encoder::new(&ckpt.encoder, &ckpt.adapters, &ckpt.store)?;
    let set = query_set_of(ckpt);
    queries
        .iter()
        .map(|(qid, text)| {
            encode_to_sparse(&enc, &tokenizer.encode_sequence(text), set)
                .map(|rep| (qid.to_string(), rep))
                .map_err(anyhow::Error::from)
        })
        .collect()
}

fn query_set_of(ckpt: &lsr_core::checkpoint::Checkpoint) -> lsr_core::encoder::AdapterSet {
    match ckpt.adapters.adapter_sets {
        lsr_core::encoder::AdapterSets::Shared => lsr_core::encoder::AdapterSet::Shared,
        lsr_core::encoder::AdapterSets::QueryDocument => lsr_core::encoder::AdapterSet::Query,
    }
}

fn doc_set_of(ckpt: &lsr_core::checkpoint::Checkpoint) -> lsr_core::encoder::AdapterSet {
    match ckpt.adapters.adapter_sets {
        lsr_core::encoder::AdapterSets::Shared => lsr_core::encoder::AdapterSet::Shared,
        lsr_core::encoder::AdapterSets::QueryDocument => lsr_core::encoder::AdapterSet::Document,
    }
}

fn print_metric(name: &str, m: &MetricSummary) {
    println!(
        "{name}\t{:.6}\t({} queries evaluated, {} skipped)",
        m.mean,
        m.evaluated(),
        m.skipped
    );
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth => {
            let map = load_config_map(&cli)?;
            let cfg = synth_config_from_map(&map)?;
            let data = generate(&cfg)?;
            write_dataset(&data, &cli.out_dir)?;
            println!(
                "wrote synthetic dataset to {}: {}",
                cli.out_dir.display(),
                lsr_core::synth::describe(&data)
            );
            Ok(())
        }
        Command::Train(data_args) => run_train(&cli, data_args, false),
        Command::Distill(data_args) => run_train(&cli, data_args, true),
        Command::Index {
            model,
            collection,
            output,
            epsilon,
        } => {
            let (ckpt, tokenizer) = load_model(model)?;
            let coll = load_collection(collection)?;
            let corpus = encode_corpus(
                &ckpt.encoder,
                &ckpt.adapters,
                &ckpt.store,
                &tokenizer,
                &coll,
                doc_set_of(&ckpt),
            )?;
            let index = build_index(corpus, ckpt.encoder.vocab_size, *epsilon)?;
            std::fs::create_dir_all(&cli.out_dir)?;
            let path = output.clone().unwrap_or_else(|| cli.out_dir.join("index.bin"));
            index.save(&path)?;
            println!(
                "indexed {} docs, {} postings -> {}",
                index.doc_count(),
                index.num_postings(),
                path.display()
            );
            Ok(())
        }
        Command::Search {
            model,
            index,
            queries,
            k,
            tag,
            output,
        } => {
            let (ckpt, tokenizer) = load_model(model)?;
            let idx = InvertedIndex::load(index)?;
            let queries = load_queries(queries)?;
            let reps = encode_query_table(&ckpt, &tokenizer, &queries)?;
            let mut run = lsr_core::data::RunFile::new(tag.clone());
            for (qid, rep) in &reps {
                run.set_ranking(qid, idx.search(rep, *k))?;
            }
            std::fs::create_dir_all(&cli.out_dir)?;
            let path = output.clone().unwrap_or_else(|| cli.out_dir.join("run.txt"));
            run.write(&path)?;
            println!("searched {} queries -> {}", reps.len(), path.display());
            Ok(())
        }
        Command::Evaluate {
            run,
            qrels,
            compare,
        } => {
            let run_a = load_run(run)?;
            let qrels = load_qrels(qrels)?;
            let mrr = mrr_at_k(&run_a, &qrels, 10);
            let recall = recall_at_k(&run_a, &qrels, 1000);
            let ndcg = ndcg_at_k(&run_a, &qrels, 10);
            print_metric("MRR@10", &mrr);
            print_metric("R@1000", &recall);
            print_metric("NDCG@10", &ndcg);
            if let Some(other) = compare {
                let run_b = load_run(other)?;
                for (name, of_a, of_b) in [
                    ("MRR@10", mrr.per_query, mrr_at_k(&run_b, &qrels, 10).per_query),
                    (
                        "R@1000",
                        recall.per_query,
                        recall_at_k(&run_b, &qrels, 1000).per_query,
                    ),
                    (
                        "NDCG@10",
                        ndcg.per_query,
                        ndcg_at_k(&run_b, &qrels, 10).per_query,
                    ),
                ] {
                    // paired test over the common evaluated queries
                    let common: BTreeMap<String, f64> = of_a
                        .iter()
                        .filter(|(q, _)| of_b.contains_key(*q))
                        .map(|(q, v)| (q.clone(), *v))
                        .collect();
                    let other_vals: BTreeMap<String, f64> = of_b
                        .iter()
                        .filter(|(q, _)| common.contains_key(*q))
                        .map(|(q, v)| (q.clone(), *v))
                        .collect();
                    match paired_t_test(&common, &other_vals) {
                        Ok(t) => println!(
                            "{name} paired t-test: t={:.4} p={:.6} n={}{}",
                            t.t,
                            t.p,
                            t.n,
                            if t.significant { " (significant)" } else { "" }
                        ),
                        Err(e) => println!("{name} paired t-test unavailable: {e}"),
                    }
                }
            }
            Ok(())
        }
        Command::Rerank {
            model,
            collection,
            queries,
            run,
            depth,
            output,
        } => {
            let (ckpt, tokenizer) = load_model(model)?;
            let coll = load_collection(collection)?;
            let queries = load_queries(queries)?;
            let input = load_run(run)?;
            let ce = CrossEncoder::new(&ckpt.encoder, &ckpt.adapters, &ckpt.store)?;
            let out = rerank(&ce, &tokenizer, &coll, &queries, &input, *depth)?;
            std::fs::create_dir_all(&cli.out_dir)?;
            let path = output
                .clone()
                .unwrap_or_else(|| cli.out_dir.join("rerank.txt"));
            out.write(&path)?;
            println!("reranked {} queries -> {}", out.num_queries(), path.display());
            Ok(())
        }
        Command::TrainReranker { data, init_from } => {
            let map = load_config_map(&cli)?;
            let ds = load_dataset(&data.data_dir, false)?;
            let tokenizer = Tokenizer::from_texts(ds.collection.iter().map(|(_, t)| t), true);
            let setup = build_setup(&map, tokenizer.vocab_size())?;
            let store = match init_from {
                Some(path) => {
                    let first = load_checkpoint(path)?;
                    lsr_core::reranker::init_from_first_stage(
                        &first,
                        &setup.encoder,
                        &setup.adapters,
                        setup.train.encoder_mode,
                        setup.train.seed,
                    )?
                }
                None => lsr_core::reranker::init_cross_encoder(
                    &setup.encoder,
                    &setup.adapters,
                    setup.train.seed,
                )?,
            };
            // Hold out a slice of the training triples for validation.
            let split = ds.train_triplets.len().max(10) / 10;
            let (dev, train_tr) = ds.train_triplets.split_at(split.min(ds.train_triplets.len()));
            std::fs::create_dir_all(&cli.out_dir)?;
            tokenizer.save(&cli.out_dir.join("vocab.txt"))?;
            let record = train_reranker(
                &setup.encoder,
                &setup.adapters,
                &setup.train,
                store,
                &RerankerData {
                    tokenizer: &tokenizer,
                    collection: &ds.collection,
                    queries: &ds.train_queries,
                    triplets: train_tr,
                    dev_triplets: dev,
                },
                &cli.out_dir,
            )?;
            println!(
                "best reranker: step {} dev pairwise accuracy {:.4} -> {}",
                record.step,
                record.accuracy,
                record.path.display()
            );
            Ok(())
        }
        Command::Ablate { data, ks } => {
            let map = load_config_map(&cli)?;
            let ds = load_dataset(&data.data_dir, false)?;
            let tokenizer = Tokenizer::from_texts(ds.collection.iter().map(|(_, t)| t), true);
            let setup = build_setup(&map, tokenizer.vocab_size())?;
            let rows = run_ablation_suite(
                &setup,
                TrainData {
                    tokenizer: &tokenizer,
                    collection: &ds.collection,
                    queries: &ds.train_queries,
                    triplets: &ds.train_triplets,
                    dev_queries: &ds.dev_queries,
                    dev_qrels: &ds.dev_qrels,
                    train_qrels: Some(&ds.train_qrels),
                },
                TestData {
                    queries: &ds.test_queries,
                    qrels: &ds.test_qrels,
                },
                ks,
                &cli.out_dir,
            )?;
            print!("{}", lsr_core::trainer::ablation_table_tsv(&rows));
            println!("table written to {}", cli.out_dir.join("ablation.tsv").display());
            Ok(())
        }
        Command::Adapt {
            model,
            data,
            rounds,
            mining_depth,
        } => {
            let map = load_config_map(&cli)?;
            let (ckpt, tokenizer) = load_model(model)?;
            let ds = load_dataset(&data.data_dir, false)?;
            let mut setup = build_setup(&map, tokenizer.vocab_size())?;
            // The checkpoint dictates the model shape; the config may still
            // choose the adaptation mode, adapters and schedule.
            setup.encoder = ckpt.encoder.clone();
            let adapt = AdaptConfig {
                rounds: *rounds,
                mining_depth: *mining_depth,
                negatives_per_query: map.get_usize("adapt", "negatives_per_query", 4)?,
            };
            let metrics = adapt_domain(
                &setup,
                ckpt.store,
                TrainData {
                    tokenizer: &tokenizer,
                    collection: &ds.collection,
                    queries: &ds.train_queries,
                    triplets: &ds.train_triplets,
                    dev_queries: &ds.dev_queries,
                    dev_qrels: &ds.dev_qrels,
                    train_qrels: Some(&ds.train_qrels),
                },
                TestData {
                    queries: &ds.test_queries,
                    qrels: &ds.test_qrels,
                },
                &adapt,
                &cli.out_dir,
            )?;
            println!("round\ttest_mrr10\ttest_recall100\tmined");
            for m in &metrics {
                println!(
                    "{}\t{:.6}\t{:.6}\t{}",
                    m.round, m.test_mrr10, m.test_recall100, m.mined_examples
                );
            }
            Ok(())
        }
        Command::Rflops {
            model,
            index,
            queries,
        } => {
            let (ckpt, tokenizer) = load_model(model)?;
            let idx = InvertedIndex::load(index)?;
            let queries = load_queries(queries)?;
            let reps = encode_query_table(&ckpt, &tokenizer, &queries)?;
            let sample: Vec<lsr_core::sparse::SparseVector> =
                reps.into_iter().map(|(_, r)| r).collect();
            let est = estimate_rflops(&idx, &sample)?;
            println!("R-FLOPS\t{est:.6}");
            Ok(())
        }
        Command::GradCheck { tolerance } => {
            let map = load_config_map(&cli)?;
            let err = run_grad_check(&map)?;
            println!("grad-check max relative error: {err:.3e}");
            if err > *tolerance {
                bail!("gradient check failed: {err:.3e} > {tolerance:.3e}");
            }
            Ok(())
        }
    }
}

/// Composed-objective gradient check on a toy model: encode a few
/// query/document pairs, pool, score with in-batch candidates, add the
/// ramped regularizers, and compare reverse-mode gradients against central
/// differences (details in `lsr_core::verify`).
fn run_grad_check(map: &ConfigMap) -> Result<f64> {
    use lsr_core::encoder::AdapterConfig;
    use lsr_core::objectives::RegularizerConfig;
    use lsr_core::verify::composed_objective_grad_check;

    let encoder = EncoderConfig {
        num_layers: map.get_usize("gradcheck", "num_layers", 2)?,
        hidden_dim: map.get_usize("gradcheck", "hidden_dim", 16)?,
        num_heads: 2,
        ffn_dim: 24,
        vocab_size: map.get_usize("gradcheck", "vocab_size", 50)?,
        max_seq_len: 16,
        precision: Precision::F64,
    };
    let adapters = AdapterConfig::houlsby(encoder.num_layers, 8);
    let reg = RegularizerConfig {
        lambda_q: 1e-3,
        lambda_d: 1e-3,
        ramp_steps: 0,
        flops_squared: true,
    };
    let task = TrainTask::parse(&map.get_str("gradcheck", "task", "triplets"))?;
    let err = composed_objective_grad_check(
        &encoder,
        &adapters,
        &reg,
        task,
        &GradCheckConfig {
            step: 1e-5,
            coords_per_param: map.get_usize("gradcheck", "coords_per_param", 50)?,
            seed: map.get_usize("train", "seed", 7)? as u64,
        },
    )?;
    Ok(err)
}
