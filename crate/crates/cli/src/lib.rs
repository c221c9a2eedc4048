//! Subcommands behind the `ldspn` binary.
//!
//! Every command that reads a config writes the fully resolved config
//! (after CLI overrides) next to its outputs as `<command>.config.toml`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ldspn::graph::write_matrix;
use ldspn::metrics::format_table;
use ldspn::train::{self, EpochLog};
use ldspn::{
    Checkpoint, Dataset, Error, Head, LabelGraph, Metrics, Model, ModelConfig, ModelSettings,
    Result, RunConfig, Split, Tensor,
};

#[derive(Debug, Parser)]
#[command(
    name = "ldspn",
    version,
    about = "Label-dependency-aware set prediction for multi-label text"
)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand; each one overrides a config field.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Run config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Training seed (model init, shuffling, dropout).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Number of label queries.
    #[arg(long, global = true)]
    pub m: Option<usize>,
    /// Learnable query table instead of GCN-generated queries.
    #[arg(long, global = true)]
    pub no_gcn: bool,
    /// Drop the Bhattacharyya term.
    #[arg(long, global = true)]
    pub no_bc: bool,
    /// `set_prediction` or `bce`.
    #[arg(long, global = true)]
    pub head: Option<Head>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the label graph and dump C, P, A and A'.
    Graph,
    /// Train and keep the best-validation checkpoint.
    Train,
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Evaluation threads.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Predict label sets for a JSONL file of `{"text": ...}` objects.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train full, wo/GCN, wo/BC and BCE variants and compare them.
    Ablate {
        /// Extra full-model runs, one per λ (comma-separated).
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.data.out = Some(out.clone());
        }
        if let Some(lambda) = self.lambda {
            cfg.model.lambda = lambda;
        }
        if let Some(tau) = self.tau {
            cfg.model.tau = tau;
        }
        if let Some(m) = self.m {
            cfg.model.m = Some(m);
        }
        if self.no_gcn {
            cfg.model.use_gcn = false;
        }
        if self.no_bc {
            cfg.model.use_bc = false;
        }
        if let Some(head) = self.head {
            cfg.model.head = head;
        }
        cfg.validate()
    }

    /// Loads `--config` and applies the remaining flags on top.
    pub fn load(&self) -> Result<RunConfig> {
        let path = self
            .config
            .as_deref()
            .ok_or_else(|| Error::Config("this command needs --config".into()))?;
        let mut cfg = RunConfig::load(path)?;
        self.apply(&mut cfg)?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Graph => {
            let report = cmd_graph(&cli.overrides.load()?)?;
            print!("{}", report.describe());
        }
        Command::Train => {
            let report = cmd_train(&cli.overrides.load()?)?;
            println!(
                "{}",
                serde_json::to_string(&report.to_json()).expect("json")
            );
        }
        Command::Eval {
            checkpoint,
            split,
            workers,
        } => {
            let report = cmd_eval(&cli.overrides.load()?, checkpoint, *split, *workers)?;
            print!("{}", report.table);
            println!("{}", report.metrics.to_json());
        }
        Command::Predict {
            checkpoint,
            input,
            output,
        } => {
            let n = cmd_predict(checkpoint, input, output)?;
            log::info!("wrote {n} predictions to {}", output.display());
        }
        Command::Ablate { lambdas } => {
            let rows = cmd_ablate(&cli.overrides.load()?, lambdas)?;
            print!("{}", format_table(&rows));
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(format!("creating {}", dir.display()), e))
}

fn io_err(context: String, source: std::io::Error) -> Error {
    Error::Io { context, source }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(format!("writing {}", path.display()), e))
}

/// Creates the output directory and echoes the resolved config into it.
fn prepare_out(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    write_file(&dir.join(format!("{command}.config.toml")), &cfg.to_toml())?;
    Ok(dir)
}

fn dump_matrix(path: &Path, m: &Tensor) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| io_err(ctx(), e))?;
    let mut w = BufWriter::new(file);
    write_matrix(&mut w, m)
        .and_then(|_| w.flush())
        .map_err(|e| io_err(ctx(), e))
}

/// Table label for a model variant.
pub fn variant_name(s: &ModelSettings) -> String {
    if s.head == Head::Bce {
        return "BCE".into();
    }
    match (s.use_gcn, s.effective_lambda() > 0.0) {
        (true, true) => "LD-SPN".into(),
        (false, true) => "wo/GCN".into(),
        (true, false) => "wo/BC".into(),
        (false, false) => "wo/GCN+BC".into(),
    }
}

#[derive(Debug, Clone)]
pub struct GraphReport {
    pub labels: Vec<String>,
    pub graph: LabelGraph,
    pub out_dir: PathBuf,
}

impl GraphReport {
    pub fn edges(&self) -> usize {
        self.graph.summary().edges
    }

    pub fn isolated(&self) -> Vec<String> {
        self.graph
            .summary()
            .isolated
            .iter()
            .map(|&i| self.labels[i].clone())
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let k = self.labels.len();
        let rows = |m: &Tensor| -> Vec<Vec<f64>> {
            (0..k)
                .map(|i| (0..k).map(|j| m.at(i, j)).collect())
                .collect()
        };
        json!({
            "num_labels": k,
            "tau": self.graph.tau,
            "p_self": self.graph.p_self,
            "edges": self.edges(),
            "isolated": self.isolated(),
            "labels": self.labels,
            "occurrences": self.graph.counts.occurrences(),
            "cond_prob": rows(&self.graph.cond_prob),
        })
    }

    pub fn describe(&self) -> String {
        let mut out = format!(
            "{} labels, {} edges at tau={}, p_self={}\n",
            self.labels.len(),
            self.edges(),
            self.graph.tau,
            self.graph.p_self
        );
        let isolated = self.isolated();
        if !isolated.is_empty() {
            out.push_str(&format!("isolated: {}\n", isolated.join(" ")));
        }
        let k = self.labels.len();
        for i in 0..k {
            for j in 0..k {
                let a = self.graph.adjacency.at(i, j);
                if i != j && a != 0.0 {
                    out.push_str(&format!(
                        "P({} | {}) = {:.4}\n",
                        self.labels[j], self.labels[i], a
                    ));
                }
            }
        }
        out.push_str(&format!("matrices written to {}\n", self.out_dir.display()));
        out
    }
}

/// Writes `C.txt`, `P.txt`, `A.txt`, `A_prime.txt` and `graph.json`.
pub fn cmd_graph(cfg: &RunConfig) -> Result<GraphReport> {
    let corpus = cfg.corpus()?;
    let graph = LabelGraph::build(
        &corpus.train.label_sets(),
        corpus.labels.len(),
        cfg.model.tau,
        cfg.model.p_self,
    )?;
    let dir = prepare_out(cfg, "graph")?;
    dump_matrix(&dir.join("C.txt"), &graph.counts.as_tensor())?;
    dump_matrix(&dir.join("P.txt"), &graph.cond_prob)?;
    dump_matrix(&dir.join("A.txt"), &graph.adjacency)?;
    dump_matrix(&dir.join("A_prime.txt"), &graph.reweighted)?;
    let report = GraphReport {
        labels: corpus.labels.names().to_vec(),
        graph,
        out_dir: dir.clone(),
    };
    write_file(
        &dir.join("graph.json"),
        &format!("{:#}\n", report.to_json()),
    )?;
    Ok(report)
}

#[derive(Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_f1: Option<f64>,
    pub checkpoint: PathBuf,
    pub model: Model,
}

impl TrainReport {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "epochs": self.epochs.len(),
            "best_epoch": self.best_epoch,
            "best_valid_f1": self.best_valid_f1,
            "checkpoint": self.checkpoint,
        })
    }
}

/// Saves through a temporary file so a crash never leaves a torn checkpoint.
fn save_atomically(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    ckpt.save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| io_err(format!("renaming {}", tmp.display()), e))
}

/// Trains into `<out>/best.ckpt` with a JSON-lines log in `<out>/train_log.jsonl`.
///
/// The checkpoint is rewritten whenever validation improves, so a later
/// divergence leaves the last good one in place.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let corpus = cfg.corpus()?;
    if corpus.stats.dropped_unseen_labels > 0 {
        log::warn!(
            "{} valid/test labels never occur in training and were dropped",
            corpus.stats.dropped_unseen_labels
        );
    }
    let dir = prepare_out(cfg, "train")?;
    let (mut model, _) = Model::for_corpus(&corpus, cfg.model.clone(), cfg.train.seed)?;
    let ckpt_path = dir.join("best.ckpt");
    let log_path = dir.join("train_log.jsonl");
    let log_file = File::create(&log_path)
        .map_err(|e| io_err(format!("creating {}", log_path.display()), e))?;
    let mut log = BufWriter::new(log_file);

    let outcome = train::train(
        &mut model,
        &corpus.train,
        &corpus.valid,
        &cfg.train,
        |entry, m, improved| {
            let line = serde_json::to_string(entry).expect("epoch log serializes");
            writeln!(log, "{line}")
                .and_then(|_| log.flush())
                .map_err(|e| io_err(format!("writing {}", log_path.display()), e))?;
            if improved {
                save_atomically(
                    &Checkpoint::from_model(m, &corpus.tokens, &corpus.labels),
                    &ckpt_path,
                )?;
            }
            Ok(())
        },
    )?;
    Ok(TrainReport {
        epochs: outcome.epochs,
        best_epoch: outcome.best_epoch,
        best_valid_f1: outcome.best_valid_f1,
        checkpoint: ckpt_path,
        model,
    })
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub name: String,
    pub metrics: Metrics,
    pub table: String,
}

/// Loads a checkpoint, checks it against the configured architecture and
/// scores one split. Writes `eval_<split>.json` and `eval_<split>.txt`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    workers: usize,
) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut settings = cfg.model.clone();
    if settings.m.is_none() {
        settings.m = Some(ckpt.config.m);
    }
    let expected = ModelConfig::resolve(settings, ckpt.tokens.len(), ckpt.labels.len(), 0)?;
    ckpt.check_compatible(&expected)?;
    let model = ckpt.to_model()?;

    let raw = cfg.raw_splits()?;
    let ds = Dataset::index(raw.split(split), &ckpt.tokens, &ckpt.labels);
    if ds.is_empty() {
        return Err(Error::Validation(format!(
            "the {} split is empty",
            split_name(split)
        )));
    }
    let metrics = train::evaluate_sharded(&model, &ds, workers)?.finalize();
    let name = variant_name(&ckpt.config.settings);
    let table = format_table(&[(name.clone(), metrics)]);

    let dir = prepare_out(cfg, "eval")?;
    let stem = format!("eval_{}", split_name(split));
    write_file(
        &dir.join(format!("{stem}.json")),
        &format!("{}\n", metrics.to_json()),
    )?;
    write_file(&dir.join(format!("{stem}.txt")), &table)?;
    Ok(EvalReport {
        name,
        metrics,
        table,
    })
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

/// One output line per non-blank input line, in order, each carrying the
/// input text and `predicted_labels` sorted by name. Unknown words map to
/// the OOV token. Returns the number of lines written.
pub fn cmd_predict(checkpoint: &Path, input: &Path, output: &Path) -> Result<usize> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let reader = BufReader::new(
        File::open(input).map_err(|e| io_err(format!("opening {}", input.display()), e))?,
    );
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let out_ctx = || format!("writing {}", output.display());
    let mut w = BufWriter::new(File::create(output).map_err(|e| io_err(out_ctx(), e))?);
    let mut written = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(format!("reading {}", input.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: input.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let text = value
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| parse_err("expected an object with a string \"text\" field".into()))?;
        let pred = model.predict(&ckpt.tokens.encode(text))?;
        let mut names: Vec<&str> = pred.iter().filter_map(|&k| ckpt.labels.name(k)).collect();
        names.sort_unstable();
        let record = json!({ "text": text, "predicted_labels": names });
        writeln!(w, "{record}").map_err(|e| io_err(out_ctx(), e))?;
        written += 1;
    }
    w.flush().map_err(|e| io_err(out_ctx(), e))?;
    Ok(written)
}

/// Trains the four variants (and one full model per extra λ) with the same
/// seed and scores each on the test split, or on valid when test is empty.
/// Writes `ablation.txt` and `ablation.json`.
pub fn cmd_ablate(cfg: &RunConfig, lambdas: &[f64]) -> Result<Vec<(String, Metrics)>> {
    let corpus = cfg.corpus()?;
    let dir = prepare_out(cfg, "ablate")?;
    let (eval_set, split) = if corpus.test.is_empty() {
        (&corpus.valid, "valid")
    } else {
        (&corpus.test, "test")
    };
    if eval_set.is_empty() {
        return Err(Error::Validation(
            "ablation needs a non-empty test or valid split".into(),
        ));
    }
    let base = ModelSettings {
        use_gcn: true,
        use_bc: true,
        head: Head::SetPrediction,
        ..cfg.model.clone()
    };
    let mut variants = vec![
        ("LD-SPN".to_string(), base.clone()),
        (
            "wo/GCN".to_string(),
            ModelSettings {
                use_gcn: false,
                ..base.clone()
            },
        ),
        (
            "wo/BC".to_string(),
            ModelSettings {
                use_bc: false,
                ..base.clone()
            },
        ),
        (
            "BCE".to_string(),
            ModelSettings {
                head: Head::Bce,
                ..base.clone()
            },
        ),
    ];
    for &lambda in lambdas {
        variants.push((
            format!("LD-SPN λ={lambda}"),
            ModelSettings {
                lambda,
                ..base.clone()
            },
        ));
    }

    let mut rows = Vec::with_capacity(variants.len());
    for (name, settings) in variants {
        settings.validate()?;
        log::info!("ablation: training {name}");
        let (mut model, _) = Model::for_corpus(&corpus, settings, cfg.train.seed)?;
        train::train(
            &mut model,
            &corpus.train,
            &corpus.valid,
            &cfg.train,
            |_, _, _| Ok(()),
        )?;
        let metrics = train::evaluate(&model, eval_set)?.finalize();
        rows.push((name, metrics));
    }

    let table = format_table(&rows);
    write_file(&dir.join("ablation.txt"), &table)?;
    let records: Vec<_> = rows
        .iter()
        .map(|(name, m)| {
            let mut v = serde_json::to_value(m).expect("metrics serialize");
            v["model"] = json!(name);
            v["split"] = json!(split);
            v
        })
        .collect();
    write_file(
        &dir.join("ablation.json"),
        &format!("{:#}\n", json!(records)),
    )?;
    Ok(rows)
}
