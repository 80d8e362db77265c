//! Command-line front end. `main` in `bin/oar.rs` only forwards to [`run`].

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::data::{attach_orders, generate_corpus, load_dataset, save_dataset, split_dataset, Background, CorpusSpec};
use crate::decode::{generate, DecodeMode, DecodePolicy, ScoreDomain};
use crate::error::{Error, Result};
use crate::eval::{
    audit_forward_count, background_rank_gap, eval_orders, mean_nll, render_order_heatmap, render_sample_grid,
    timing_comparison, v_information_gap, write_ppm, EvalOrder, MetricsReport,
};
use crate::grid::Order;
use crate::model::{load_weights, TransformerWeights};
use crate::rng::{Purpose, SeededStream};
use crate::train::{
    extract_orders, extraction_policy, load_checkpoint, save_checkpoint, OrderPolicy, TrainConfig, Trainer,
};

#[derive(Parser, Debug)]
#[command(
    name = "oar",
    version,
    about = "Any-order autoregressive grid models with ordered decoding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackgroundArg {
    Constant,
    Noisy,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrainOrderArg {
    Raster,
    Random,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and write train and test splits.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 250)]
        per_class: usize,
        #[arg(long, value_enum, default_value = "constant")]
        background: BackgroundArg,
        #[arg(long, default_value_t = 0.9)]
        train_ratio: f64,
    },
    /// Train from scratch (or resume) and print the training log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "random")]
        order: TrainOrderArg,
        /// Overrides `epochs_random`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the checkpoint at `ckpt_path`.
        #[arg(long)]
        resume: bool,
        /// Validation split used for the plateau schedule.
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Extract the model's preferred order for every sample.
    ExtractOrders {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Fine-tune on extracted orders.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Labeled dataset; defaults to the extract-orders output.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate one image and write its record and order heatmap.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, default_value_t = 0)]
        class: usize,
    },
    /// Held-out metrics as `metric,policy,value` CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Held-out split; defaults to the test split next to `data_path`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Median generation time under each cache regime.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Render dataset samples and, when labeled, their orders.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
}

#[derive(Args, Debug, Clone)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Decoding mode: raster, random, ordered or joint_topk.
    #[arg(long)]
    policy: Option<DecodeMode>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    score_domain: Option<ScoreDomain>,
}

impl DecodeArgs {
    fn apply(&self, base: &DecodePolicy) -> DecodePolicy {
        let mut p = base.clone();
        if let Some(m) = self.policy {
            p.mode = m;
        }
        if let Some(l) = self.lambda {
            p.lambda = l;
        }
        if let Some(k) = self.topk {
            p.top_k = k;
        }
        if let Some(d) = self.score_domain {
            p.domain = d;
        }
        p
    }
}

/// `runs/corpus.oard` → `runs/corpus.<tag>.oard`.
pub fn sibling_path(path: &Path, tag: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned());
    let name = match ext {
        Some(e) => format!("{stem}.{tag}.{e}"),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => c.with_seed(s),
        None => c,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn corpus_spec(c: &RunConfig) -> CorpusSpec {
    CorpusSpec {
        grid: c.model.grid,
        vocab: c.model.vocab,
        cond_vocab: c.model.cond_vocab,
        cond_len: c.model.cond_len,
        seed: c.seed,
        ..CorpusSpec::default()
    }
}

fn load_model(c: &RunConfig, ckpt: Option<&PathBuf>) -> Result<TransformerWeights> {
    load_weights(ckpt.unwrap_or(&c.ckpt_path), Some(&c.model))
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    let emit = |out: &mut dyn Write, s: &str| out.write_all(s.as_bytes()).map_err(|e| Error::io("<stdout>", e));
    match cmd {
        Command::GenData {
            common,
            classes,
            per_class,
            background,
            train_ratio,
        } => {
            let c = load_config(&common)?;
            let spec = CorpusSpec {
                classes,
                per_class,
                background: match background {
                    BackgroundArg::Constant => Background::Constant,
                    BackgroundArg::Noisy => Background::Noisy,
                },
                ..corpus_spec(&c)
            };
            let all = generate_corpus(&spec)?;
            let mut s = SeededStream::keyed(c.seed, Purpose::Split, &[]);
            let (train, test) = split_dataset(&all, train_ratio, &mut s)?;
            ensure_parent(&c.data_path)?;
            save_dataset(&train, &c.data_path)?;
            let test_path = sibling_path(&c.data_path, "test");
            save_dataset(&test, &test_path)?;
            emit(
                out,
                &format!(
                    "train,{},{}\ntest,{},{}\n",
                    train.len(),
                    c.data_path.display(),
                    test.len(),
                    test_path.display()
                ),
            )
        }
        Command::Train {
            common,
            order,
            epochs,
            resume,
            val,
        } => {
            let c = load_config(&common)?;
            let data = load_dataset(&c.data_path)?;
            let val = val.map(load_dataset).transpose()?;
            let mut trainer = if resume {
                load_checkpoint(&c.ckpt_path, Some(&c.model))?
            } else {
                let cfg = TrainConfig {
                    policy: match order {
                        TrainOrderArg::Raster => OrderPolicy::Raster,
                        TrainOrderArg::Random => OrderPolicy::Random,
                    },
                    ..c.train.clone()
                };
                Trainer::new(TransformerWeights::init(&c.model, c.seed)?, cfg)?
            };
            let epochs = epochs.unwrap_or(c.train.epochs);
            let log = trainer.fit(&data, val.as_ref(), epochs)?;
            ensure_parent(&c.ckpt_path)?;
            save_checkpoint(&c.ckpt_path, &trainer)?;
            emit(out, &log.to_csv())
        }
        Command::ExtractOrders {
            common,
            data,
            out: dest,
            lambda,
        } => {
            let c = load_config(&common)?;
            let src = data.unwrap_or_else(|| c.data_path.clone());
            let ds = load_dataset(&src)?;
            let w = load_model(&c, None)?;
            let orders = extract_orders(&w, &ds, &extraction_policy(&c.model, lambda.unwrap_or(0.0)))?;
            let bg = background_rank_gap(&ds, &orders).ok();
            let labeled = attach_orders(&ds, orders)?;
            let dest = dest.unwrap_or_else(|| sibling_path(&src, "labeled"));
            ensure_parent(&dest)?;
            save_dataset(&labeled, &dest)?;
            let mut r = MetricsReport::default();
            r.push("samples", "extracted", labeled.len() as f64);
            if let Some(g) = bg {
                r.push("background_rank_gap", "extracted", g);
            }
            emit(out, &r.to_csv())
        }
        Command::Finetune {
            common,
            data,
            out: dest,
            epochs,
        } => {
            let c = load_config(&common)?;
            let src = data.unwrap_or_else(|| sibling_path(&c.data_path, "labeled"));
            let ds = load_dataset(&src)?;
            let w = load_model(&c, None)?;
            let cfg = TrainConfig {
                epochs: epochs.unwrap_or(c.epochs_finetune),
                ..c.train.clone()
            };
            let epochs = cfg.epochs;
            let mut trainer = Trainer::new(
                w,
                TrainConfig {
                    policy: OrderPolicy::Labeled,
                    ..cfg
                },
            )?;
            if let Some(i) = ds.samples.iter().position(|s| s.order.is_none()) {
                return Err(Error::Validation(format!(
                    "{}: sample {i} has no order label",
                    src.display()
                )));
            }
            let log = trainer.fit(&ds, None, epochs)?;
            let dest = dest.unwrap_or_else(|| c.out_dir.join("finetuned.ckpt"));
            ensure_parent(&dest)?;
            save_checkpoint(&dest, &trainer)?;
            emit(out, &log.to_csv())
        }
        Command::Generate { common, decode, class } => {
            let c = load_config(&common)?;
            let w = load_model(&c, decode.ckpt.as_ref())?;
            let policy = decode.apply(&c.decode);
            let spec = corpus_spec(&c);
            let cond = spec.encode_class(class);
            let rec = generate(&cond, &w, &policy, c.seed)?;
            ensure_dir(&c.out_dir)?;
            let stem = format!("generate_{}_seed{}", policy.mode, c.seed);
            rec.save(c.out_dir.join(format!("{stem}.txt")))?;
            write_ppm(
                c.out_dir.join(format!("{stem}_order.ppm")),
                &render_order_heatmap(&rec.order, rec.grid, 16)?,
            )?;
            write_ppm(
                c.out_dir.join(format!("{stem}_tokens.ppm")),
                &render_sample_grid(&[&rec.tokens], rec.grid, c.model.vocab, 1, 16)?,
            )?;
            emit(out, &rec.to_text())
        }
        Command::Eval { common, ckpt, data } => {
            let c = load_config(&common)?;
            let path = data.unwrap_or_else(|| sibling_path(&c.data_path, "test"));
            let ds = load_dataset(&path)?;
            let w = load_model(&c, ckpt.as_ref())?;
            let mut r = MetricsReport::default();
            let mut which = vec![
                EvalOrder::Raster,
                EvalOrder::Random,
                EvalOrder::Extracted {
                    lambda: c.decode.lambda,
                },
            ];
            if ds.samples.iter().all(|s| s.order.is_some()) {
                which.push(EvalOrder::Labeled);
            }
            let mut orders: Vec<(EvalOrder, Vec<Order>)> = Vec::new();
            for wo in which {
                let o = eval_orders(&w, &ds, wo, c.seed)?;
                r.push("heldout_nll", wo.name(), mean_nll(&w, &ds, &o)?);
                orders.push((wo, o));
            }
            let raster = &orders[0].1;
            let extracted = &orders[2].1;
            let gap = v_information_gap(&w, &ds, raster, extracted)?;
            r.push("v_information_gap_per_token", "raster_vs_extracted", gap.per_token);
            r.push("v_information_gap_summed", "raster_vs_extracted", gap.summed);
            if let Ok(g) = background_rank_gap(&ds, extracted) {
                r.push("background_rank_gap", "extracted", g);
            }
            let audit = audit_forward_count(&ds.samples[0].cond, &w, &c.decode, c.seed)?;
            r.push("forward_count", c.decode.mode.name(), audit.observed as f64);
            r.push("forward_count_expected", c.decode.mode.name(), audit.expected as f64);
            emit(out, &r.to_csv())
        }
        Command::Bench {
            common,
            decode,
            repeats,
        } => {
            let c = load_config(&common)?;
            let w = load_model(&c, decode.ckpt.as_ref())?;
            let policy = decode.apply(&c.decode);
            let cond = corpus_spec(&c).encode_class(0);
            let t = timing_comparison(&cond, &w, &policy, c.seed, repeats)?;
            let mut r = MetricsReport::default();
            r.push("median_seconds", "naive", t.naive.as_secs_f64());
            r.push("median_seconds", "no_cache", t.no_cache.as_secs_f64());
            r.push("median_seconds", "cache", t.cache.as_secs_f64());
            r.push("speedup", "cache_vs_naive", t.speedup());
            emit(out, &r.to_csv())
        }
        Command::Visualize {
            common,
            data,
            count,
            scale,
        } => {
            let c = load_config(&common)?;
            let path = data.unwrap_or_else(|| c.data_path.clone());
            let ds = load_dataset(&path)?;
            let take: Vec<&[u32]> = ds.samples.iter().take(count).map(|s| s.tokens.as_slice()).collect();
            ensure_dir(&c.out_dir)?;
            let grid_path = c.out_dir.join("samples.ppm");
            write_ppm(
                &grid_path,
                &render_sample_grid(&take, ds.spec.grid, ds.spec.vocab, 8, scale)?,
            )?;
            let mut listing = format!("{}\n", grid_path.display());
            for (i, s) in ds.samples.iter().take(count).enumerate() {
                if let Some(o) = &s.order {
                    let p = c.out_dir.join(format!("order_{i:03}.ppm"));
                    write_ppm(&p, &render_order_heatmap(o, ds.spec.grid, scale)?)?;
                    listing.push_str(&format!("{}\n", p.display()));
                }
            }
            emit(out, &listing)
        }
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code: 0 on success, 1 for usage or validation
/// errors, 2 for runtime failures.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return 0;
            }
            let _ = write!(err, "{}", e.render());
            return 1;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
