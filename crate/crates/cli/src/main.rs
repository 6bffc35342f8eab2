use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use mvp_core::backend::{record_replay_capture, Backend, BuildContext, MockGold, RetryPolicy};
use mvp_core::corpus::{
    apply_weak_supervision_filters, attach_gold, build_inverted_index, extract_context_windows,
    generate_synthetic_corpus, load_corpus, load_term_list, select_top_diseases, ContextWindow, FilterConfig,
    GoldLabel, InvertedIndex, TermEntry, WindowRef,
};
use mvp_core::eval::{cohens_kappa, paired_t_test, results_to_jsonl, Task};
use mvp_core::orchestrator::{
    class_set, correctness, evaluate_run, format_run_report, prepare_inputs, run_experiment, RunConfig, RunOptions,
    RunStatus, RunStore,
};
use mvp_core::parse::{ClassSet, Extractor};
use mvp_core::prompt::{builtin_templates, render_prompt, AnswerKeys, PromptMode, PromptTemplate, TemplateFamily};

#[derive(Parser)]
#[command(name = "mvp", version, about = "Models-vote prompting for rare disease identification and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or filter an inverted index.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Cut context windows around disease mentions.
    #[command(subcommand)]
    Windows(WindowsCmd),
    /// Write a seeded synthetic corpus and its gold labels.
    Synth(SynthArgs),
    /// Render prompts.
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Extract JSON answers from generations.
    #[command(subcommand)]
    Parse(ParseCmd),
    /// Run (or resume) an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Stop after this many new generations.
        #[arg(long)]
        max_generations: Option<usize>,
    },
    /// Record one backend's generations for a config into a replay archive.
    Capture {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        backend: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Human annotation of non-compliant generations.
    #[command(subcommand)]
    Annotate(AnnotateCmd),
    /// Reports and statistics.
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Subcommand)]
enum IndexCmd {
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        terms: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Filter {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 4)]
        min_term_chars: usize,
        #[arg(long, default_value_t = 0.005)]
        max_doc_frequency: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the k most frequent diseases instead of the index (needs --terms).
        #[arg(long, requires = "terms")]
        top: Option<usize>,
        #[arg(long)]
        terms: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum WindowsCmd {
    Extract {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        terms: PathBuf,
        /// A filtered index; built with default filters when omitted.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        diseases: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [32, 64, 128, 256])]
        sizes: Vec<usize>,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    terms: PathBuf,
    /// Restrict to these disease ids (default: all in the term list).
    #[arg(long, value_delimiter = ',')]
    diseases: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    docs: usize,
    #[arg(long, default_value_t = 0.5)]
    positive_rate: f64,
    /// Writes corpus.jsonl and gold.jsonl here.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ip,
    Cot,
}

#[derive(Subcommand)]
enum PromptCmd {
    Render {
        #[arg(long, conflicts_with = "template")]
        family: Option<String>,
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cot")]
        mode: ModeArg,
        /// JSONL of context windows.
        #[arg(long)]
        windows: PathBuf,
        /// `doc#disease@size`; the first window when omitted.
        #[arg(long)]
        window: Option<String>,
    },
}

#[derive(Subcommand)]
enum ParseCmd {
    Extract {
        /// JSONL with a `raw_text` field per line; plain text from stdin when omitted.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        terms: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<String>,
    },
}

#[derive(Subcommand)]
enum AnnotateCmd {
    Serve {
        #[arg(long)]
        run: String,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Identification,
    Classification,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Identification => Task::Identification,
            TaskArg::Classification => Task::Classification,
        }
    }
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Results table, compliance and coverage; writes results.jsonl into the run directory.
    Report {
        #[arg(long)]
        run: String,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Leave-one-out ablation over complete ballots.
    Ablate {
        #[arg(long)]
        run: String,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Paired t-test on per-window correctness of two systems.
    Ttest {
        #[arg(long)]
        a: String,
        /// Member of run a; the ensemble when omitted.
        #[arg(long)]
        a_member: Option<String>,
        #[arg(long)]
        b: String,
        #[arg(long)]
        b_member: Option<String>,
        #[arg(long, value_enum, default_value = "identification")]
        task: TaskArg,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Cohen's kappa over a two-column (tab or comma separated) label file.
    Kappa {
        #[arg(long)]
        pairs: PathBuf,
    },
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn write_jsonl<T: Serialize>(rows: &[T], out: Option<&Path>) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    emit(&text, out)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => Ok(io::stdout().write_all(text.as_bytes())?),
    }
}

fn read_index(path: &Path) -> Result<InvertedIndex> {
    Ok(InvertedIndex::from_json_file(path)?)
}

fn run_dir(run: &str, runs_dir: &Path) -> Result<PathBuf> {
    let direct = PathBuf::from(run);
    let dir = if direct.join(mvp_core::orchestrator::LOG_FILE).is_file() {
        direct
    } else {
        runs_dir.join(run)
    };
    if !dir.join(mvp_core::orchestrator::LOG_FILE).is_file() {
        bail!("no run log for `{run}` (looked in {})", dir.display());
    }
    Ok(dir)
}

fn classes_from(terms: &[TermEntry], ids: &[String]) -> Result<Vec<TermEntry>> {
    ids.iter()
        .map(|id| {
            terms
                .iter()
                .find(|t| &t.disease_id == id)
                .cloned()
                .ok_or_else(|| anyhow!("class `{id}` is not in the term list"))
        })
        .collect()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Index(cmd) => index(cmd),
        Command::Windows(WindowsCmd::Extract {
            corpus,
            terms,
            index,
            diseases,
            sizes,
            gold,
            out,
        }) => {
            let docs = load_corpus(&corpus)?;
            let terms = load_term_list(&terms)?;
            let index = match index {
                Some(p) => read_index(&p)?,
                None => apply_weak_supervision_filters(&build_inverted_index(&docs, &terms), &FilterConfig::default()),
            };
            let mut windows = extract_context_windows(&docs, &index, &terms, &diseases, &sizes)?;
            if let Some(g) = gold {
                attach_gold(&mut windows, &read_jsonl::<GoldLabel>(&g)?);
            }
            log::info!("{} windows", windows.len());
            write_jsonl(&windows, out.as_deref())
        }
        Command::Synth(a) => {
            let terms = load_term_list(&a.terms)?;
            let diseases = if a.diseases.is_empty() {
                terms
            } else {
                classes_from(&terms, &a.diseases)?
            };
            if !(0.0..=1.0).contains(&a.positive_rate) {
                bail!("--positive-rate must lie in [0, 1]");
            }
            if diseases.is_empty() {
                bail!("no diseases to write about");
            }
            let synth = generate_synthetic_corpus(a.seed, a.docs, &diseases, a.positive_rate);
            fs::create_dir_all(&a.out_dir)?;
            write_jsonl(&synth.documents, Some(&a.out_dir.join("corpus.jsonl")))?;
            write_jsonl(&synth.gold, Some(&a.out_dir.join("gold.jsonl")))?;
            println!("wrote {} documents to {}", synth.documents.len(), a.out_dir.display());
            Ok(())
        }
        Command::Prompt(PromptCmd::Render {
            family,
            template,
            mode,
            windows,
            window,
        }) => {
            let mode = match mode {
                ModeArg::Ip => PromptMode::Ip,
                ModeArg::Cot => PromptMode::Cot,
            };
            let template = match (family, template) {
                (_, Some(path)) => PromptTemplate::load(&path)?,
                (Some(f), None) => {
                    let family: TemplateFamily = f.parse()?;
                    builtin_templates()
                        .remove(&family)
                        .ok_or_else(|| anyhow!("no built-in template for `{f}`"))?
                }
                (None, None) => bail!("give --family or --template"),
            }
            .with_mode(mode);
            let windows: Vec<ContextWindow> = read_jsonl(&windows)?;
            let w = match window {
                Some(id) => {
                    let wanted: WindowRef = id.parse()?;
                    windows
                        .iter()
                        .find(|w| w.window_ref() == wanted)
                        .ok_or_else(|| anyhow!("no window `{id}`"))?
                }
                None => windows.first().ok_or_else(|| anyhow!("no windows in file"))?,
            };
            let p = render_prompt(&template, w)?;
            eprintln!("template {} window {} hash {}", p.template_id, p.window_ref, p.content_hash);
            println!("{}", p.text);
            Ok(())
        }
        Command::Parse(ParseCmd::Extract { input, terms, classes }) => {
            let terms = load_term_list(&terms)?;
            let extractor = Extractor::new(AnswerKeys::default(), ClassSet::new(&classes_from(&terms, &classes)?)?);
            match input {
                Some(path) => {
                    let rows: Vec<serde_json::Value> = read_jsonl(&path)?;
                    let mut out = Vec::with_capacity(rows.len());
                    for (i, row) in rows.into_iter().enumerate() {
                        let raw = row
                            .get("raw_text")
                            .and_then(|v| v.as_str())
                            .ok_or_else(|| anyhow!("{} line {}: no `raw_text` string", path.display(), i + 1))?;
                        let mut result = serde_json::to_value(extractor.extract(raw))?;
                        if let (Some(obj), Some(extra)) = (result.as_object_mut(), row.as_object()) {
                            for key in ["id", "backend_id", "prompt_hash"] {
                                if let Some(v) = extra.get(key) {
                                    obj.insert(key.to_string(), v.clone());
                                }
                            }
                        }
                        out.push(result);
                    }
                    write_jsonl(&out, None)
                }
                None => {
                    let mut raw = String::new();
                    io::stdin().read_to_string(&mut raw)?;
                    println!("{}", serde_json::to_string(&extractor.extract(&raw))?);
                    Ok(())
                }
            }
        }
        Command::Run { config, max_generations } => {
            let cfg = RunConfig::load(&config)?;
            let opts = RunOptions {
                max_new_generations: max_generations,
                ..Default::default()
            };
            let out = run_experiment(&cfg, &opts)?;
            let report = evaluate_run(&out.store.snapshot())?;
            let status = match out.status {
                RunStatus::Completed => "completed",
                RunStatus::Interrupted => "interrupted",
            };
            println!(
                "run {} {status}: {} new generations, log at {}",
                cfg.run_id,
                out.new_generations,
                out.store.log_path().display()
            );
            print!("{}", format_run_report(&report));
            Ok(())
        }
        Command::Capture { config, backend, out } => {
            let cfg = RunConfig::load(&config)?;
            cfg.validate()?;
            let member = cfg
                .backends
                .iter()
                .find(|b| b.spec.backend_id == backend)
                .ok_or_else(|| anyhow!("no backend `{backend}` in {}", config.display()))?;
            let inputs = prepare_inputs(&cfg)?;
            class_set(&cfg, &inputs.classes)?;
            let template = cfg.template_for(member)?;
            let prompts = inputs
                .windows
                .iter()
                .map(|w| render_prompt(&template, w))
                .collect::<Result<Vec<_>, _>>()?;
            let ctx = BuildContext {
                gold: Arc::new(MockGold::from_windows(&inputs.terms, &inputs.windows)),
                retry: RetryPolicy::default(),
                base_dir: cfg.base_dir.clone(),
            };
            let backend = Backend::build(member.spec.clone(), &ctx)?;
            let archive = record_replay_capture(&backend, &prompts, &out, cfg.parallelism)?;
            println!("{} records in {}", archive.len(), out.display());
            Ok(())
        }
        Command::Annotate(AnnotateCmd::Serve { run, runs_dir, addr }) => {
            let store = Arc::new(RunStore::open(&run_dir(&run, &runs_dir)?)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(mvp_review::serve(store, addr))?;
            Ok(())
        }
        Command::Eval(cmd) => eval(cmd),
    }
}

fn index(cmd: IndexCmd) -> Result<()> {
    match cmd {
        IndexCmd::Build { corpus, terms, out } => {
            let docs = load_corpus(&corpus)?;
            let terms = load_term_list(&terms)?;
            let index = build_inverted_index(&docs, &terms);
            log::info!("{} terms matched in {} documents", index.len(), index.corpus_size);
            emit(&(serde_json::to_string_pretty(&index)? + "\n"), out.as_deref())
        }
        IndexCmd::Filter {
            index,
            min_term_chars,
            max_doc_frequency,
            out,
            top,
            terms,
        } => {
            let cfg = FilterConfig::new(min_term_chars, max_doc_frequency)?;
            let filtered = apply_weak_supervision_filters(&read_index(&index)?, &cfg);
            match (top, terms) {
                (Some(k), Some(terms)) => {
                    let terms = load_term_list(&terms)?;
                    let mut text = String::new();
                    for id in select_top_diseases(&filtered, &terms, k) {
                        let entry = terms.iter().find(|t| t.disease_id == id).expect("ranked ids come from terms");
                        text.push_str(&format!("{id}\t{}\t{}\n", entry.preferred_label, filtered.documents_for(entry).len()));
                    }
                    emit(&text, out.as_deref())
                }
                _ => emit(&(serde_json::to_string_pretty(&filtered)? + "\n"), out.as_deref()),
            }
        }
    }
}

fn eval(cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Report { run, runs_dir, json } => {
            let dir = run_dir(&run, &runs_dir)?;
            let report = evaluate_run(&RunStore::open(&dir)?.snapshot())?;
            fs::write(dir.join("results.jsonl"), results_to_jsonl(&report.table))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", format_run_report(&report));
            }
            Ok(())
        }
        EvalCmd::Ablate { run, runs_dir, json } => {
            let dir = run_dir(&run, &runs_dir)?;
            let report = evaluate_run(&RunStore::open(&dir)?.snapshot())?;
            let Some(ablation) = report.ablation else {
                bail!("no ablation: the run needs at least two members and one scored window");
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&ablation)?);
                return Ok(());
            }
            let contexts: Vec<usize> = ablation.baseline().per_context.keys().copied().collect();
            let mut header = format!("{:<28}", "ensemble");
            for c in &contexts {
                header.push_str(&format!(" {:>11}", format!("{c} id/cls")));
            }
            println!("{header} {:>13}", "overall");
            for row in &ablation.rows {
                let name = row.excluded.as_deref().map_or("(all members)".to_string(), |m| format!("without {m}"));
                let mut line = format!("{name:<28}");
                for c in &contexts {
                    let s = &row.per_context[c];
                    line.push_str(&format!(" {:>5.3}/{:<5.3}", s.identification.accuracy, s.classification.accuracy));
                }
                line.push_str(&format!(
                    " {:>6.3}/{:<6.3}",
                    row.overall.identification.accuracy, row.overall.classification.accuracy
                ));
                println!("{line}");
            }
            Ok(())
        }
        EvalCmd::Ttest {
            a,
            a_member,
            b,
            b_member,
            task,
            runs_dir,
            alpha,
        } => {
            let task: Task = task.into();
            let sa = RunStore::open(&run_dir(&a, &runs_dir)?)?.snapshot();
            let sb = RunStore::open(&run_dir(&b, &runs_dir)?)?.snapshot();
            let ca = correctness(&sa, a_member.as_deref(), task)?;
            let cb = correctness(&sb, b_member.as_deref(), task)?;
            let paired: BTreeMap<_, _> = ca.iter().filter_map(|(w, x)| cb.get(w).map(|y| (w, (*x, *y)))).collect();
            let (xs, ys): (Vec<f64>, Vec<f64>) = paired.values().copied().unzip();
            let r = paired_t_test(&xs, &ys)?;
            let name = |run: &str, m: &Option<String>| format!("{run}:{}", m.as_deref().unwrap_or("mvp"));
            println!(
                "{} vs {} on {} paired windows ({task}): mean difference {:+.4}, t = {:.4}, df = {}, p = {:.4e} ({} at {alpha})",
                name(&a, &a_member),
                name(&b, &b_member),
                xs.len(),
                r.mean_difference,
                r.t_statistic,
                r.degrees_of_freedom,
                r.p_value,
                if r.significant_at(alpha) { "significant" } else { "not significant" }
            );
            Ok(())
        }
        EvalCmd::Kappa { pairs } => {
            let text = fs::read_to_string(&pairs).with_context(|| format!("reading {}", pairs.display()))?;
            let (mut la, mut lb) = (Vec::new(), Vec::new());
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let cols: Vec<&str> = line.split(['\t', ',']).map(str::trim).collect();
                let [x, y] = cols[..] else {
                    bail!("{} line {}: expected two columns", pairs.display(), i + 1);
                };
                la.push(x.to_string());
                lb.push(y.to_string());
            }
            let k = cohens_kappa(&la, &lb)?;
            println!("n = {}, p_o = {:.4}, p_e = {:.4}, kappa = {:.4}", la.len(), k.p_o, k.p_e, k.kappa);
            Ok(())
        }
    }
}
