use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use bfm_core::adapt::{self, FreezePolicy, VocabMapping};
use bfm_core::corpus::{
    generate_synthetic, ingest_logs, make_windows, split_dataset, write_csv, write_jsonl, Corpus, LogFormat, SplitPolicy,
    SyntheticSpec, Vocabulary, WindowedSample,
};
use bfm_core::evalkit::{
    distinct_n, distribution_distances, normalize_counts, prediction_report, BehaviorOrder, ConfusionTally, WeightingVariant,
};
use bfm_core::genseq::{generate_batch, write_generated_jsonl, SamplerConfig, SamplingMode};
use bfm_core::net::{init_model, load_checkpoint, read_checkpoint_config, save_checkpoint, ModelConfig, Parameters};
use bfm_core::objective::{DroConfig, PriorSource};
use bfm_core::scalelab::{fit_scaling_law, optimal_allocation, plot_data, run_grid, GridSpec, GridTable};
use bfm_core::tensor::{Precision, Scalar};
use bfm_core::trainer::{ranked_pass, train_masked, Objective, TrainConfig, TrainMask};
use bfm_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::{
    usage, AdaptArgs, AdaptMode, EvalArgs, FreezeArg, Format, GenDataArgs, GenerateArgs, ObjectiveArg, PretrainArgs, PriorArg,
    SamplerArg, ScalingArgs, WeightingArg, ENV_OUT_ROOT, ENV_SEED,
};

fn out_dir(path: &Path) -> PathBuf {
    match std::env::var_os(ENV_OUT_ROOT) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(ENV_SEED) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| usage(format!("{ENV_SEED}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Flag beats environment beats config.
fn resolve_seed(flag: Option<u64>, config: u64) -> CliResult<u64> {
    Ok(flag.or(env_seed()?).unwrap_or(config))
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn sidecar(explicit: Option<&PathBuf>, beside: &Path) -> PathBuf {
    explicit
        .cloned()
        .unwrap_or_else(|| beside.parent().unwrap_or(Path::new(".")).join("vocab.txt"))
}

fn load_corpus(path: &Path, vocab: &Vocabulary) -> CliResult<Corpus> {
    let format = LogFormat::from_path(path)
        .ok_or_else(|| usage(format!("{}: expected a .jsonl or .csv corpus", path.display())))?;
    if !path.is_file() {
        return Err(CliError::Data(format!("corpus {} does not exist", path.display())));
    }
    Ok(ingest_logs(path, format, &vocab.sizes)?)
}

fn check_vocab(config: &ModelConfig, vocab: &Vocabulary) -> CliResult<()> {
    if config.vocab != vocab.sizes {
        return Err(CliError::Data(format!(
            "vocabulary mismatch: checkpoint expects {:?}, sidecar has {:?}",
            config.vocab, vocab.sizes
        )));
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

/// Runs `body`, marking the manifest failed if it errors.
fn guarded<F>(manifest: RunManifest, body: F) -> CliResult<()>
where
    F: FnOnce(&mut RunManifest) -> CliResult<()>,
{
    let mut manifest = manifest;
    match body(&mut manifest) {
        Ok(()) => manifest.complete().map(|_| ()),
        Err(e) => {
            manifest.fail(&e);
            Err(e)
        }
    }
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let text = read_text(&a.spec)?;
    let mut spec: SyntheticSpec = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", a.spec.display())))?;
    spec.seed = resolve_seed(a.seed, spec.seed)?;
    spec.validate()?;
    let out = out_dir(&a.out);
    let corpus_file = match a.format {
        Format::Jsonl => "corpus.jsonl",
        Format::Csv => "corpus.csv",
    };
    let manifest = RunManifest::begin(
        "gen-data",
        &out,
        Some(spec.seed),
        to_json(&spec),
        &[("spec", &a.spec)],
        &[("corpus", corpus_file), ("vocab", "vocab.txt"), ("spec", "spec.toml")],
    )?;
    guarded(manifest, |m| {
        let (corpus, vocab) = generate_synthetic(&spec)?;
        match a.format {
            Format::Jsonl => write_jsonl(&corpus, &m.path("corpus"))?,
            Format::Csv => write_csv(&corpus, &m.path("corpus"))?,
        }
        vocab.save(&m.path("vocab"))?;
        write(&m.path("spec"), &toml::to_string(&spec).expect("spec serializes"))?;
        println!("wrote {} records for {} users to {}", corpus.len(), corpus.users.len(), out.display());
        Ok(())
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataSection {
    window: usize,
    stride: Option<usize>,
    train: f64,
    val: f64,
    test: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            window: 32,
            stride: None,
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    d: usize,
    n_layers: usize,
    n_heads: usize,
    head_hidden: usize,
    ffn_mult: usize,
    dropout: f64,
    precision: Precision,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d: 16,
            n_layers: 2,
            n_heads: 4,
            head_hidden: 64,
            ffn_mult: 4,
            dropout: 0.1,
            precision: Precision::Single,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    data: DataSection,
    model: ModelSection,
    train: TrainConfig,
}

fn windows_for(corpus: &Corpus, data: &DataSection) -> CliResult<bfm_core::corpus::Splits<Vec<WindowedSample>>> {
    let (windows, report) = make_windows(corpus, data.window, data.stride.unwrap_or(data.window));
    if windows.is_empty() {
        return Err(CliError::Data(format!(
            "no user stream is long enough for window {} ({} users skipped)",
            data.window, report.skipped_users
        )));
    }
    Ok(split_dataset(
        windows,
        SplitPolicy::ByFraction {
            train: data.train,
            val: data.val,
            test: data.test,
        },
    )?)
}

pub fn pretrain(a: PretrainArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str::<RunConfig>(&read_text(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(w) = a.window {
        cfg.data.window = w;
    }
    if let Some(s) = a.steps {
        cfg.train.max_steps = Some(s);
        cfg.train.max_epochs = None;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    match (a.objective, &mut cfg.train.objective) {
        (Some(ObjectiveArg::Ce), obj) => *obj = Objective::Ce,
        (Some(ObjectiveArg::Dro), obj @ Objective::Ce) => *obj = Objective::Dro(DroConfig::default()),
        _ => {}
    }
    if let Objective::Dro(d) = &mut cfg.train.objective {
        if let Some(e) = a.epsilon {
            d.epsilon = e;
        }
        match a.prior {
            Some(PriorArg::Batch) => d.prior_source = PriorSource::Batch,
            Some(PriorArg::Corpus) => d.prior_source = PriorSource::Corpus,
            None => {}
        }
    } else if a.epsilon.is_some() || a.prior.is_some() {
        return Err(usage("--epsilon and --prior need --objective dro"));
    }
    cfg.train.seed = resolve_seed(a.seed, cfg.train.seed)?;
    cfg.train.validate()?;

    let vocab_path = sidecar(a.vocab.as_ref(), &a.corpus);
    let out = out_dir(&a.out);
    let mut outputs = vec![
        ("best", "best.ckpt"),
        ("last", "last.ckpt"),
        ("runlog", "runlog.csv"),
        ("vocab", "vocab.txt"),
        ("config", "config.toml"),
    ];
    if a.diagnostics {
        outputs.push(("diagnostics", "dro_diagnostics.csv"));
    }
    let manifest = RunManifest::begin(
        "pretrain",
        &out,
        Some(cfg.train.seed),
        to_json(&cfg),
        &[("corpus", &a.corpus), ("vocab", &vocab_path)],
        &outputs,
    )?;
    guarded(manifest, |m| {
        if a.diagnostics && !matches!(cfg.train.objective, Objective::Dro(_)) {
            return Err(usage("--diagnostics needs --objective dro"));
        }
        let vocab = Vocabulary::load(&vocab_path)?;
        let corpus = load_corpus(&a.corpus, &vocab)?;
        let splits = windows_for(&corpus, &cfg.data)?;
        let model = ModelConfig {
            d: cfg.model.d,
            n_layers: cfg.model.n_layers,
            n_heads: cfg.model.n_heads,
            max_len: cfg.data.window,
            head_hidden: cfg.model.head_hidden,
            ffn_mult: cfg.model.ffn_mult,
            vocab: vocab.sizes,
            dropout: cfg.model.dropout,
            precision: cfg.model.precision,
        };
        let mut train_cfg = cfg.train.clone();
        train_cfg.out_dir = Some(out.clone());
        if a.diagnostics {
            train_cfg.diagnostics_path = Some(m.path("diagnostics"));
        }
        write(&m.path("config"), &toml::to_string(&cfg).expect("config serializes"))?;
        vocab.save(&m.path("vocab"))?;
        let log = match model.precision {
            Precision::Single => run_train::<f32>(&model, &splits.train, &splits.val, &train_cfg, &TrainMask::all_trainable())?,
            Precision::Double => run_train::<f64>(&model, &splits.train, &splits.val, &train_cfg, &TrainMask::all_trainable())?,
        };
        print!("{log}");
        Ok(())
    })
}

fn run_train<T: Scalar>(
    model: &ModelConfig,
    train: &Vec<WindowedSample>,
    val: &Vec<WindowedSample>,
    cfg: &TrainConfig,
    mask: &TrainMask,
) -> CliResult<String> {
    let params = init_model::<T>(model, cfg.seed)?;
    let outcome = train_masked(params, train, val, cfg, mask)?;
    Ok(outcome.log.summary())
}

fn save_as(params: &Parameters<f64>, precision: Precision, path: &Path) -> CliResult<()> {
    match precision {
        Precision::Single => save_checkpoint(&params.cast::<f32>(), path)?,
        Precision::Double => save_checkpoint(params, path)?,
    }
    Ok(())
}

pub fn adapt(a: AdaptArgs) -> CliResult<()> {
    let seed = resolve_seed(a.seed, 0)?;
    let target_vocab_path = sidecar(a.vocab.as_ref(), &a.corpus);
    let source_vocab_path = sidecar(a.source_vocab.as_ref(), &a.checkpoint);
    let out = out_dir(&a.out);
    let freeze = match a.freeze {
        FreezeArg::None => FreezePolicy::None,
        FreezeArg::Transformer => FreezePolicy::TransformerFrozen,
        FreezeArg::Head => FreezePolicy::HeadOnly,
    };
    let mut outputs = vec![("adapted", "adapted.ckpt"), ("plan", "transfer_plan.txt"), ("vocab", "vocab.txt")];
    if a.steps > 0 {
        outputs.extend([("best", "best.ckpt"), ("last", "last.ckpt"), ("runlog", "runlog.csv")]);
    }
    let config = serde_json::json!({
        "mode": format!("{:?}", a.mode),
        "freeze": freeze.as_str(),
        "freeze_retained_head": a.freeze_retained_head,
        "steps": a.steps,
        "lr": a.lr,
        "batch_size": a.batch_size,
    });
    let mut inputs: Vec<(&str, &Path)> = vec![("checkpoint", &a.checkpoint), ("corpus", &a.corpus), ("vocab", &target_vocab_path)];
    if a.mode == AdaptMode::NewBehavior {
        inputs.push(("source_vocab", &source_vocab_path));
    }
    let manifest = RunManifest::begin("adapt", &out, Some(seed), config, &inputs, &outputs)?;
    guarded(manifest, |m| {
        let stored = read_checkpoint_config(&a.checkpoint)?;
        let params = load_checkpoint::<f64>(&a.checkpoint)?;
        let target = Vocabulary::load(&target_vocab_path)?;
        let (adapted, mut plan) = match a.mode {
            AdaptMode::NewBehavior => {
                let source = Vocabulary::load(&source_vocab_path)?;
                check_vocab(&params.config, &source)?;
                adapt::expand_vocabulary(&params, &source, &target, &VocabMapping::identity(&source.sizes), seed)?
            }
            AdaptMode::CrossDomain => adapt::transfer_cross_domain(&params, target.sizes, seed)?,
        };
        plan.freeze = freeze;
        save_as(&adapted, stored.precision, &m.path("adapted"))?;
        plan.save(&m.path("plan"))?;
        target.save(&m.path("vocab"))?;
        if a.steps == 0 {
            return Ok(());
        }
        let corpus = load_corpus(&a.corpus, &target)?;
        let data = DataSection {
            window: adapted.config.max_len,
            ..DataSection::default()
        };
        let splits = windows_for(&corpus, &data)?;
        let mut mask = adapt::apply_freeze_policy(&adapted, freeze);
        if a.freeze_retained_head {
            adapt::freeze_retained_head_rows(&mut mask, &adapted, &plan);
        }
        let cfg = TrainConfig {
            learning_rate: a.lr,
            batch_size: a.batch_size,
            max_steps: Some(a.steps),
            seed,
            out_dir: Some(out.clone()),
            ..TrainConfig::default()
        };
        let log = match stored.precision {
            Precision::Single => {
                let p = adapted.cast::<f32>();
                adapt::finetune(p, &splits.train, &splits.val, &cfg, &mask)?.log
            }
            Precision::Double => adapt::finetune(adapted, &splits.train, &splits.val, &cfg, &mask)?.log,
        };
        print!("{}", log.summary());
        Ok(())
    })
}

pub fn generate(a: GenerateArgs) -> CliResult<()> {
    if a.horizon == 0 {
        return Err(usage("--horizon must be at least 1"));
    }
    let mode = match a.sampler {
        SamplerArg::Greedy => SamplingMode::Greedy,
        SamplerArg::Temperature => SamplingMode::Temperature { t: a.temperature },
        SamplerArg::TopK => SamplingMode::TopK {
            k: a.top_k,
            t: a.temperature,
        },
    };
    let sampler = SamplerConfig {
        mode,
        horizon: a.horizon,
        seed: resolve_seed(a.seed, 0)?,
    };
    sampler.validate()?;
    let vocab_path = sidecar(a.vocab.as_ref(), &a.checkpoint);
    let out = out_dir(&a.out);
    let manifest = RunManifest::begin(
        "generate",
        &out,
        Some(sampler.seed),
        to_json(&sampler),
        &[("checkpoint", &a.checkpoint), ("vocab", &vocab_path), ("contexts", &a.contexts)],
        &[("generated", "generated.jsonl")],
    )?;
    guarded(manifest, |m| {
        let params = load_checkpoint::<f64>(&a.checkpoint)?;
        let vocab = Vocabulary::load(&vocab_path)?;
        check_vocab(&params.config, &vocab)?;
        let corpus = load_corpus(&a.contexts, &vocab)?;
        let mut contexts: Vec<_> = corpus.users.into_iter().map(|u| u.records).collect();
        if let Some(n) = a.max_contexts {
            contexts.truncate(n);
        }
        let runs = generate_batch(&params, &vocab, &contexts, &sampler)?;
        write_generated_jsonl(&runs, &m.path("generated"))?;
        println!("generated {} sequences of length {}", runs.len(), a.horizon);
        Ok(())
    })
}

/// Behavior sequences per context from a generated JSONL file.
fn read_generated(path: &Path, n_b: usize) -> CliResult<Vec<Vec<u32>>> {
    #[derive(Deserialize)]
    struct Line {
        context: usize,
        behavior: u32,
    }
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut by_ctx: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if l.behavior as usize >= n_b {
            return Err(CliError::Data(format!("{} line {}: behavior {} out of range", path.display(), i + 1, l.behavior)));
        }
        by_ctx.entry(l.context).or_default().push(l.behavior);
    }
    Ok(by_ctx.into_values().collect())
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let vocab_path = sidecar(a.vocab.as_ref(), &a.checkpoint);
    let out = out_dir(&a.out);
    let variant = match a.weighting {
        WeightingArg::PaperExact => WeightingVariant::PaperExact,
        WeightingArg::SupportWeighted => WeightingVariant::SupportWeighted,
    };
    let mut inputs: Vec<(&str, &Path)> = vec![("checkpoint", &a.checkpoint), ("vocab", &vocab_path), ("corpus", &a.corpus)];
    if let Some(g) = &a.generated {
        inputs.push(("generated", g));
    }
    let manifest = RunManifest::begin(
        "eval",
        &out,
        None,
        serde_json::json!({ "weighting": format!("{variant:?}") }),
        &inputs,
        &[("metrics", "metrics.csv")],
    )?;
    guarded(manifest, |m| {
        let params = load_checkpoint::<f64>(&a.checkpoint)?;
        let vocab = Vocabulary::load(&vocab_path)?;
        check_vocab(&params.config, &vocab)?;
        let corpus = load_corpus(&a.corpus, &vocab)?;
        let window = params.config.max_len;
        let (windows, _) = make_windows(&corpus, window, window);
        if windows.is_empty() {
            return Err(CliError::Data(format!("no user stream is long enough for window {window}")));
        }
        let nb = vocab.sizes.n_b;
        let (pass, ranked) = ranked_pass(&params, &windows, 64, 5.min(nb))?;
        let tally = ConfusionTally::from_pairs(&pass.predictions, &pass.targets, nb);
        let ks: Vec<usize> = [1, 3, 5].into_iter().filter(|&k| k <= nb).collect();
        let mut report = prediction_report(&tally, &ranked, variant, &ks);
        report.insert("loss", pass.losses.iter().sum::<f64>() / pass.losses.len() as f64);
        report.insert("positions", pass.targets.len() as f64);
        if let Some(g) = &a.generated {
            let seqs = read_generated(g, nb)?;
            let mut gen_counts = vec![0u64; nb];
            for &b in seqs.iter().flatten() {
                gen_counts[b as usize] += 1;
            }
            let real_counts = corpus.behavior_counts(nb);
            if gen_counts.iter().sum::<u64>() == 0 {
                return Err(CliError::Data(format!("{} holds no generated records", g.display())));
            }
            let dist = distribution_distances(&normalize_counts(&real_counts), &normalize_counts(&gen_counts), BehaviorOrder::default())?;
            report.insert("ks", dist.ks);
            report.insert("wd", dist.wd);
            report.insert("jsd", dist.jsd);
            report.insert("distinct_2", distinct_n(&seqs, 2));
        }
        write(&m.path("metrics"), &report.to_csv())?;
        print!("{}", report.to_kv());
        Ok(())
    })
}

fn load_grid(arg: &str) -> CliResult<GridSpec> {
    let path = Path::new(arg);
    if path.is_file() {
        Ok(GridSpec::from_text(&read_text(path)?)?)
    } else {
        GridSpec::preset(arg).map_err(|_| usage(format!("`{arg}` is neither a grid file nor a preset (tiny, desk, large)")))
    }
}

pub fn scaling(a: ScalingArgs) -> CliResult<()> {
    let out = out_dir(&a.out);
    let mut grid = load_grid(&a.grid)?;
    grid.seed = resolve_seed(a.seed, grid.seed)?;
    grid.validate()?;
    let mut inputs: Vec<(&str, &Path)> = Vec::new();
    if let Some(p) = &a.fit_only {
        inputs.push(("grid_csv", p));
    }
    let vocab_path = a.corpus.as_ref().map(|c| sidecar(a.vocab.as_ref(), c));
    if let (Some(c), Some(v)) = (&a.corpus, &vocab_path) {
        inputs.push(("corpus", c));
        inputs.push(("vocab", v));
    }
    if a.fit_only.is_none() && a.corpus.is_none() {
        return Err(usage("scaling needs --corpus unless --fit-only is given"));
    }
    let outputs: &[(&str, &str)] = &[("grid", "grid.csv"), ("fit", "fit.csv"), ("plot", "plot.csv")];
    let manifest = RunManifest::begin("scaling", &out, Some(grid.seed), to_json(&grid), &inputs, outputs)?;
    guarded(manifest, |m| {
        let table = match &a.fit_only {
            Some(p) => GridTable::read(p)?,
            None => {
                let corpus_path = a.corpus.as_ref().expect("checked above");
                let vocab = Vocabulary::load(vocab_path.as_ref().expect("set with corpus"))?;
                let corpus = load_corpus(corpus_path, &vocab)?;
                let (windows, _) = make_windows(&corpus, grid.window_len, grid.window_len);
                let n_val = (windows.len() / 10).max(1);
                if windows.len() <= n_val {
                    return Err(CliError::Data("corpus too small for a scaling grid".into()));
                }
                let (train, val) = windows.split_at(windows.len() - n_val);
                let needed = grid
                    .models
                    .iter()
                    .map(|shape| {
                        let n = bfm_core::net::count_params(&shape.config(vocab.sizes, grid.window_len, grid.dropout)).total();
                        grid.data_multiples.iter().map(|&k| grid.windows_for(n, k)).max().unwrap_or(0)
                    })
                    .max()
                    .unwrap_or(0);
                if needed > train.len() {
                    return Err(CliError::Data(format!(
                        "grid needs {needed} training windows of length {}, corpus gives {}",
                        grid.window_len,
                        train.len()
                    )));
                }
                let (train, val) = (train.to_vec(), val.to_vec());
                run_grid(&grid, vocab.sizes, &train, &val, |row| {
                    eprintln!("{} N={} D={} loss={:.4} steps={}", row.model, row.n_params, row.d_tokens, row.val_loss, row.steps);
                })?
            }
        };
        table.write(&m.path("grid"))?;
        let fit = match fit_scaling_law(&table) {
            Ok(f) => f,
            Err(CoreError::FitNotConverged(best)) => {
                write(&m.path("fit"), &best.to_csv())?;
                return Err(CliError::Numeric(format!("scaling fit did not converge (best rss {})", best.rss)));
            }
            Err(e) => return Err(e.into()),
        };
        let budget = table.rows.iter().map(|r| r.n_params as f64 * r.d_tokens as f64).fold(0.0, f64::max);
        let mut fit_csv = fit.to_csv();
        if let Ok(alloc) = optimal_allocation(&fit, budget) {
            fit_csv.push_str(&format!("reference_budget,{budget}\noptimal_ratio,{}\n", alloc.ratio));
        }
        write(&m.path("fit"), &fit_csv)?;
        write(&m.path("plot"), &plot_data(&table, &fit))?;
        print!("{fit_csv}");
        Ok(())
    })
}
