//! `ctxzsl` command-line front end. The binary is a thin wrapper over
//! [`execute`]; [`run_args`] runs a command line in-process.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxzsl::crf::InferenceConfig;
use ctxzsl::detection::{write_detections_csv, write_proposals, BgNorm, DetectConfig};
use ctxzsl::evaluation::{improvement_report, read_records, write_improvement_csv, write_records};
use ctxzsl::geometry::GeomEmbedConfig;
use ctxzsl::kgraph::{build_graph, read_triples_csv, write_triples_csv, LabelSpace};
use ctxzsl::pipeline::{
    detect_all, files, ground_truth_for, infer_scenes, metrics_csv, metrics_rows, read_text,
    recall_csv, recall_report, synthesize, topk_sweep, training_unary, write_text, ContextModel,
    DatasetDir, MetricsRow, SynthesisInputs, UnaryModel,
};
use ctxzsl::relnet::{train_relnet, LossTerms, RelNetParams, TrainConfig};
use ctxzsl::scene::write_scenes;
use ctxzsl::synthworld::{gen_world, into_scenes, SceneConfig, WorldConfig};
use ctxzsl::zsl::{write_matrix_csv, ClassifierMatrix, GcnConfig, Method, Setting, Similarity};
use ctxzsl::{par, Error, Exec, Result};

#[derive(Parser)]
#[command(name = "ctxzsl", version, about = "Context-aware zero-shot recognition")]
pub struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Context weight (default depends on --method).
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Comma-separated K values; inference and detection use the first.
    #[arg(long, global = true, value_delimiter = ',')]
    topk: Vec<usize>,
    /// Training iterations (relation net or GCN).
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Zero-shot method: we, conse, gcn or sync.
    #[arg(long, global = true)]
    method: Option<Method>,
    /// Evaluation setting: classic or generalized.
    #[arg(long, global = true, default_value = "generalized")]
    setting: Setting,
}

#[derive(Subcommand)]
enum Command {
    /// Build the relation graph from a triple-count CSV.
    BuildGraph {
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 20)]
        min_count: u64,
        #[arg(long, default_value_t = 20)]
        top_relations: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// World configuration JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 500)]
        n_test: usize,
        #[arg(long, default_value_t = 2)]
        min_objects: usize,
        #[arg(long, default_value_t = 5)]
        max_objects: usize,
    },
    /// Train the relation net on seen-labeled training scenes.
    TrainRelnet {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        hidden: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.005)]
        learning_rate: f64,
        /// Add the seen-class unary term to the pseudo-likelihood.
        #[arg(long)]
        include_unary: bool,
        /// Write per-iteration losses as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Produce the full classifier for every class.
    Synthesize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SimArg::Cosine)]
        similarity: SimArg,
        #[arg(long, default_value_t = 1.0)]
        bandwidth: f64,
        #[arg(long)]
        no_row_normalize: bool,
        #[arg(long, default_value_t = 1e-6)]
        ridge: f64,
        /// GCN hidden width.
        #[arg(long, default_value_t = 32)]
        hidden: usize,
    },
    /// Recognize labeled test regions with and without context.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        relnet: Option<PathBuf>,
        #[arg(long, default_value = files::TEST_SCENES)]
        scenes: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect objects in region proposals.
    Detect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        relnet: Option<PathBuf>,
        #[arg(long, default_value = files::TEST_SCENES)]
        scenes: String,
        #[arg(long, value_enum, default_value_t = BgArg::Squared)]
        bg_norm: BgArg,
        #[arg(long, default_value_t = 100)]
        recall_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute metric tables from inference records.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        context: Option<PathBuf>,
        /// With --relnet, also rerun inference for every --topk value.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        relnet: Option<PathBuf>,
        #[arg(long, default_value = files::TEST_SCENES)]
        scenes: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SimArg {
    Cosine,
    Rbf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BgArg {
    Squared,
    Plain,
}

const EVAL_TOPK: [usize; 3] = [5, 10, 20];

/// Runs a parsed command line inside a pool of `--threads` workers.
pub fn execute(cli: Cli) -> Result<()> {
    let threads = cli.common.threads;
    par::with_threads(threads, move || run(cli))
}

/// Parses and runs `args` (program name first). Errors come back as a single
/// line.
pub fn run_args<I, T>(args: I) -> std::result::Result<(), String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| one_line(&e.to_string()))?;
    execute(cli).map_err(|e| one_line(&e.to_string()))
}

pub fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Common {
    fn exec(&self) -> Exec {
        if self.threads == 1 {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    fn method(&self) -> Result<Method> {
        self.method
            .ok_or_else(|| Error::Config("--method is required (we, conse, gcn or sync)".into()))
    }

    fn gamma_for(&self, method: Method) -> f64 {
        self.gamma.unwrap_or_else(|| method.default_gamma())
    }

    fn inference(&self, method: Method) -> InferenceConfig {
        InferenceConfig {
            gamma: self.gamma_for(method),
            top_k: self.topk.first().copied().unwrap_or(InferenceConfig::default().top_k),
            ..InferenceConfig::default()
        }
    }

    fn sweep_ks(&self) -> Vec<usize> {
        if self.topk.is_empty() {
            EVAL_TOPK.to_vec()
        } else {
            self.topk.clone()
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::BuildGraph {
            triples,
            labels,
            min_count,
            top_relations,
            out,
        } => {
            let labels = LabelSpace::from_json(&read_text(&labels)?)?;
            let file = std::fs::File::open(&triples)
                .map_err(|e| Error::Invalid(format!("{}: {e}", triples.display())))?;
            let t = read_triples_csv(file)?;
            let g = build_graph(&t, &labels, min_count, top_relations)?;
            eprintln!("graph: {} edges over {} relations", g.n_edges(), g.n_relations());
            write_text(&out, &g.to_json(&labels)?)
        }
        Command::Synth {
            out,
            config,
            n_train,
            n_test,
            min_objects,
            max_objects,
        } => {
            let mut cfg: WorldConfig = match config {
                Some(p) => serde_json::from_str(&read_text(&p)?)?,
                None => WorldConfig::default(),
            };
            cfg.seed = c.seed;
            let exec = c.exec();
            let world = gen_world(&cfg)?;
            let scenes = |n, include_unseen, stream: u64| -> Result<_> {
                let sc = SceneConfig {
                    n_scenes: n,
                    min_objects,
                    max_objects,
                    include_unseen,
                    seed: c.seed.wrapping_mul(2).wrapping_add(stream),
                };
                Ok(into_scenes(world.gen_scenes(&sc, exec)?))
            };
            let train = scenes(n_train, false, 1)?;
            let test = scenes(n_test, true, 2)?;
            let proposals = world.gen_proposals(&test, c.seed.wrapping_add(3), exec);
            let labels = &world.labels;
            let seen_names: Vec<String> = labels.seen().iter().map(|&s| labels.name(s).to_string()).collect();
            let d = DatasetDir(out);
            write_text(&d.path(files::WORLD), &serde_json::to_string_pretty(&world.config)?)?;
            write_text(&d.path(files::LABELS), &labels.to_json()?)?;
            write_text(&d.path(files::EMBEDDINGS), &world.embeddings.to_csv(labels))?;
            write_text(&d.path(files::TRIPLES), &write_triples_csv(&world.triples)?)?;
            write_text(&d.path(files::GRAPH), &world.graph.to_json(labels)?)?;
            write_text(&d.path(files::SEEN_CLASSIFIER), &write_matrix_csv(&seen_names, &world.w_seen))?;
            write_text(&d.path(files::WORD_GRAPH), &world.word_graph.to_json()?)?;
            write_text(&d.path(files::TRAIN_SCENES), &write_scenes(&train, labels)?)?;
            write_text(&d.path(files::TEST_SCENES), &write_scenes(&test, labels)?)?;
            write_text(&d.path(files::PROPOSALS), &write_proposals(&proposals)?)?;
            eprintln!(
                "synth: {} classes, {} edges, {} train and {} test scenes",
                labels.len(),
                world.graph.n_edges(),
                train.len(),
                test.len()
            );
            Ok(())
        }
        Command::TrainRelnet {
            data,
            out,
            hidden,
            batch_size,
            learning_rate,
            include_unary,
            log,
        } => {
            let d = DatasetDir(data);
            let labels = d.labels()?;
            let graph = d.graph(&labels)?;
            let train = d.scenes(files::TRAIN_SCENES, &labels)?;
            let exec = c.exec();
            let unary = if include_unary {
                let w_seen = d.w_seen(&labels)?;
                let zeros = ndarray_zeros(labels.unseen().len(), w_seen.ncols());
                let w = ClassifierMatrix::assemble(&labels, &w_seen, &zeros)?;
                Some(training_unary(&train, &labels, &UnaryModel::Linear(w), exec)?)
            } else {
                None
            };
            let tc = TrainConfig {
                learning_rate,
                batch_size,
                gamma: c.gamma.unwrap_or(1.0),
                include_unary,
                seed: c.seed.wrapping_add(1),
                ..TrainConfig::with_iterations(c.iters.unwrap_or(60_000))
            };
            let init = RelNetParams::init(GeomEmbedConfig::default(), hidden, graph.n_relations(), None, c.seed)?;
            let terms = LossTerms {
                graph: &graph,
                labels: &labels,
                gamma: tc.gamma,
            };
            let (net, tlog) = train_relnet(&train, unary.as_deref(), terms, init, &tc, exec)?;
            if let Some(p) = log {
                let mut s = String::from("iteration,loss\n");
                for (i, l) in tlog.losses.iter().enumerate() {
                    s.push_str(&format!("{i},{l}\n"));
                }
                write_text(&p, &s)?;
            }
            if let (Some(first), Some(last)) = (tlog.losses.first(), tlog.losses.last()) {
                eprintln!("train-relnet: loss {first:.4} -> {last:.4}");
            }
            write_text(&out, &net.to_json()?)
        }
        Command::Synthesize {
            data,
            out,
            similarity,
            bandwidth,
            no_row_normalize,
            ridge,
            hidden,
        } => {
            let method = c.method()?;
            let d = DatasetDir(data);
            let labels = d.labels()?;
            let embeddings = d.embeddings(&labels)?;
            let w_seen = d.w_seen(&labels)?;
            let word_graph = match method {
                Method::Gcn => Some(d.word_graph()?),
                _ => None,
            };
            let gcn_default = GcnConfig::default();
            let inp = SynthesisInputs {
                labels: &labels,
                embeddings: &embeddings,
                w_seen: &w_seen,
                word_graph: word_graph.as_ref(),
                gcn: GcnConfig {
                    hidden_dim: hidden,
                    iterations: c.iters.unwrap_or(gcn_default.iterations),
                    seed: c.seed,
                    ..gcn_default
                },
                similarity: match similarity {
                    SimArg::Cosine => Similarity::Cosine,
                    SimArg::Rbf => Similarity::Rbf { bandwidth },
                },
                row_normalize: !no_row_normalize,
                ridge,
            };
            let w = synthesize(method, &inp)?;
            write_text(&out, &w.to_csv(&labels))
        }
        Command::Infer {
            data,
            classifier,
            relnet,
            scenes,
            out,
        } => {
            let method = c.method()?;
            let d = DatasetDir(data);
            let labels = d.labels()?;
            let scenes = d.scenes(&scenes, &labels)?;
            let unary = load_unary(&d, &labels, &classifier, method)?;
            let net = relnet.as_deref().map(load_relnet).transpose()?;
            let graph = match net {
                Some(_) => Some(d.graph(&labels)?),
                None => None,
            };
            let ctx = context_model(net.as_ref(), graph.as_ref());
            let res = infer_scenes(&scenes, &labels, &unary, ctx, &c.inference(method), c.setting, c.exec())?;
            write_text(&out.join("records_unary.jsonl"), &write_records(&res.unary, &labels)?)?;
            if ctx.is_some() {
                write_text(&out.join("records_context.jsonl"), &write_records(&res.context, &labels)?)?;
            }
            eprintln!("infer: {} regions", res.unary.len());
            Ok(())
        }
        Command::Detect {
            data,
            classifier,
            relnet,
            scenes,
            bg_norm,
            recall_k,
            out,
        } => {
            let method = c.method()?;
            if method == Method::Conse {
                return Err(Error::Config(
                    "detection needs a linear classifier; conse has no unseen weights".into(),
                ));
            }
            let d = DatasetDir(data);
            let labels = d.labels()?;
            let w = ClassifierMatrix::from_csv(&read_text(&classifier)?, &labels)?;
            let proposals = d.proposals()?;
            let net = relnet.as_deref().map(load_relnet).transpose()?;
            let graph = match net {
                Some(_) => Some(d.graph(&labels)?),
                None => None,
            };
            let bg = match bg_norm {
                BgArg::Squared => BgNorm::Squared,
                BgArg::Plain => BgNorm::Plain,
            };
            let cfg = DetectConfig {
                inference: c.inference(method),
                ..DetectConfig::default()
            };
            let exec = c.exec();
            let mut variants = vec![("unary", None)];
            if let Some(ctx) = context_model(net.as_ref(), graph.as_ref()) {
                variants.push(("context", Some(ctx)));
            }
            let mut results = Vec::new();
            for (name, ctx) in variants {
                let dets = detect_all(&proposals, &w, &labels, ctx, &cfg, bg, c.setting, exec)?;
                let per_image: Vec<(String, _)> = proposals
                    .iter()
                    .map(|p| p.image_id.clone())
                    .zip(dets.iter().cloned())
                    .collect();
                write_text(
                    &out.join(format!("detections_{name}.csv")),
                    &write_detections_csv(&per_image, &labels)?,
                )?;
                results.push((name, dets));
            }
            let gts = ground_truth_for(&proposals, &d.scenes(&scenes, &labels)?)?;
            let mut rows = Vec::new();
            for (name, dets) in &results {
                rows.extend(recall_report(name, dets, &gts, &labels, recall_k)?);
            }
            write_text(&out.join("recall.csv"), &recall_csv(&rows))
        }
        Command::Eval {
            data,
            base,
            context,
            classifier,
            relnet,
            scenes,
            out,
        } => {
            let d = DatasetDir(data);
            let labels = d.labels()?;
            let ks = c.sweep_ks();
            let base_recs = read_records(&read_text(&base)?, &labels)?;
            let mut rows: Vec<MetricsRow> = metrics_rows("unary", &base_recs, &labels, c.setting, &ks)?;
            if let Some(p) = &context {
                let ctx_recs = read_records(&read_text(p)?, &labels)?;
                rows.extend(metrics_rows("context", &ctx_recs, &labels, c.setting, &ks)?);
                let graph = d.graph(&labels)?;
                let report = improvement_report(&base_recs, &ctx_recs, &graph, &labels.all())?;
                write_text(&out.join("improvement.csv"), &write_improvement_csv(&report, &labels)?)?;
            }
            let table = metrics_csv(&rows);
            write_text(&out.join("metrics.csv"), &table)?;
            print!("{table}");
            match (classifier, relnet) {
                (Some(cls), Some(rn)) => {
                    let method = c.method()?;
                    let unary = load_unary(&d, &labels, &cls, method)?;
                    let net = load_relnet(&rn)?;
                    let graph = d.graph(&labels)?;
                    let scenes = d.scenes(&scenes, &labels)?;
                    let ctx = ContextModel {
                        relnet: &net,
                        graph: &graph,
                    };
                    let sweep = topk_sweep(&scenes, &labels, &unary, ctx, &c.inference(method), c.setting, &ks, c.exec())?;
                    write_text(&out.join("sweep.csv"), &metrics_csv(&sweep))
                }
                (None, None) => Ok(()),
                _ => Err(Error::Config("the top-K sweep needs both --classifier and --relnet".into())),
            }
        }
    }
}

fn ndarray_zeros(rows: usize, cols: usize) -> ndarray::Array2<f64> {
    ndarray::Array2::zeros((rows, cols))
}

fn load_unary(d: &DatasetDir, labels: &LabelSpace, classifier: &Path, method: Method) -> Result<UnaryModel> {
    let w = ClassifierMatrix::from_csv(&read_text(classifier)?, labels)?;
    let emb = d.embeddings(labels)?;
    UnaryModel::for_method(method, w, labels, &emb)
}

fn load_relnet(path: &Path) -> Result<RelNetParams> {
    RelNetParams::from_json(&read_text(path)?)
}

fn context_model<'a>(
    net: Option<&'a RelNetParams>,
    graph: Option<&'a ctxzsl::kgraph::RelationGraph>,
) -> Option<ContextModel<'a>> {
    Some(ContextModel {
        relnet: net?,
        graph: graph?,
    })
}
